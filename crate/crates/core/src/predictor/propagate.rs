//! Ground-truth propagation: moving annotations between frames through a
//! correspondence field.

use crate::error::{invalid, Result};
use crate::field::{forward_backward_mask, ConsistencyMask, CorrespondenceField};
use crate::rng::{derive_seed, tag};
use crate::synth::{AnnotationSet, Click, Dataset, FlowNoise, Keypoint, Provenance, SequenceFlows};

/// Transports annotations made on `I'` onto `I`.
///
/// `g` lives on the grid of `I'` (where the annotations are) and points
/// into `I`; `mask` is the forward-backward agreement on the same grid.
/// Each click keeps its `(k, u)` label and moves to `g(p)`. Clicks on
/// pixels failing the mask, with an invalid lookup, or landing outside the
/// image are dropped. Visible keypoints move the same way; dense part
/// masks do not carry over.
pub fn propagate_gt(ann: &AnnotationSet, g: &CorrespondenceField, mask: &ConsistencyMask) -> AnnotationSet {
    let (w, h) = (g.width(), g.height());
    let lands_inside = |q: [f64; 2]| q[0] >= -0.5 && q[1] >= -0.5 && q[0] < w as f64 - 0.5 && q[1] < h as f64 - 0.5;
    let transport = |x: f64, y: f64| -> Option<[f64; 2]> {
        let (px, py) = (x.round(), y.round());
        if px < 0.0 || py < 0.0 || px as usize >= mask.width || py as usize >= mask.height {
            return None;
        }
        if !mask.get(px as usize, py as usize) {
            return None;
        }
        g.sample(x, y).filter(|&q| lands_inside(q))
    };
    let clicks = ann
        .clicks
        .iter()
        .filter_map(|c| {
            transport(c.x, c.y).map(|q| Click { x: q[0], y: q[1], provenance: Provenance::Propagated, ..c.clone() })
        })
        .collect();
    let keypoints = ann.keypoints.as_ref().map(|kps| {
        kps.iter()
            .map(|k| match k.visible.then(|| transport(k.pos[0], k.pos[1])).flatten() {
                Some(q) => Keypoint { pos: q, ..k.clone() },
                None => Keypoint { visible: false, ..k.clone() },
            })
            .collect()
    });
    AnnotationSet { width: w, height: h, clicks, keypoints, part_mask: None }
}

/// Fraction of input clicks that survive propagation.
pub fn survival_rate(before: &AnnotationSet, after: &AnnotationSet) -> f64 {
    if before.clicks.is_empty() {
        return 1.0;
    }
    after.clicks.len() as f64 / before.clicks.len() as f64
}

/// Counts from propagating a dataset's annotations through its flow.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PropagationReport {
    /// Propagated clicks per `[seq][frame]`, merged over source frames.
    pub propagated: Vec<Vec<AnnotationSet>>,
    /// (source, target) frame pairs that received at least one click.
    pub pairs: usize,
    pub source_frames: usize,
    pub attempted: usize,
    pub kept: usize,
    /// Kept clicks whose chart matches the chart rendered at their landing
    /// point in the target frame.
    pub correct_chart: usize,
    /// Clicks whose surface point is visible at the target under the
    /// clean flow, and how many of those were kept.
    pub unoccluded: usize,
    pub unoccluded_kept: usize,
}

impl PropagationReport {
    pub fn survival(&self) -> f64 {
        ratio(self.kept, self.attempted)
    }

    pub fn unoccluded_survival(&self) -> f64 {
        ratio(self.unoccluded_kept, self.unoccluded)
    }

    pub fn chart_accuracy(&self) -> f64 {
        ratio(self.correct_chart, self.kept)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Propagates `sources[seq][frame]` to every frame within `window` of it
/// through per-hop flows corrupted by `noise`, with a forward-backward
/// check at `threshold` pixels.
pub fn propagate_dataset(
    data: &Dataset,
    sources: &[Vec<AnnotationSet>],
    window: usize,
    threshold: f64,
    noise: &FlowNoise,
    seed: u64,
) -> Result<PropagationReport> {
    if window == 0 {
        return Err(invalid("window must be at least 1"));
    }
    if sources.len() != data.train.len() {
        return Err(invalid("annotation sources do not match the training sequences"));
    }
    let (w, h) = (data.width(), data.height());
    let renderer = data.renderer()?;
    let mut rep = PropagationReport {
        propagated: data.train.iter().map(|s| vec![AnnotationSet::empty(w, h); s.frames.len()]).collect(),
        ..Default::default()
    };
    for (s, seq) in data.train.iter().enumerate() {
        let n = seq.frames.len();
        if n < 2 {
            continue;
        }
        let flows = SequenceFlows::from_frames(&seq.frames, noise, derive_seed(seed, &[tag("flow"), s as u64]))?;
        let clean = SequenceFlows::from_frames(&seq.frames, &FlowNoise::none(), 0)?;
        for a in 0..n {
            let ann = &sources[s][a];
            if ann.clicks.is_empty() {
                continue;
            }
            rep.source_frames += 1;
            for b in a.saturating_sub(window)..(a + window + 1).min(n) {
                if b == a {
                    continue;
                }
                let g = flows.between(a, b)?;
                let mask = forward_backward_mask(&g, &flows.between(b, a)?, threshold)?;
                let truth = clean.between(a, b)?;
                let pose = &seq.frames[b].pose;
                // the renderer at the continuous landing point, not the
                // rasterized label of the nearest pixel
                let chart_at = |q: [f64; 2]| -> usize { renderer.hit(pose, q).map_or(0, |hit| hit.part + 1) };
                let mut any = false;
                for c in &ann.clicks {
                    let single = AnnotationSet { clicks: vec![c.clone()], ..AnnotationSet::empty(w, h) };
                    let moved = propagate_gt(&single, &g, &mask);
                    let visible = truth.sample(c.x, c.y).is_some_and(|q| chart_at(q) == c.k);
                    rep.attempted += 1;
                    rep.unoccluded += visible as usize;
                    if let Some(m) = moved.clicks.into_iter().next() {
                        rep.kept += 1;
                        rep.unoccluded_kept += visible as usize;
                        rep.correct_chart += (chart_at([m.x, m.y]) == m.k) as usize;
                        rep.propagated[s][b].clicks.push(m);
                        any = true;
                    }
                }
                rep.pairs += any as usize;
            }
        }
    }
    Ok(rep)
}

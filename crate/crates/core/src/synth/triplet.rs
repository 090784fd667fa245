//! Training pairs `(g, I, I')` from synthetic warps or from video flow.

use super::noise::{corrupt_flow, FlowNoise};
use super::render::Frame;
use crate::error::{invalid, Result};
use crate::field::{
    forward_backward_mask, realize_warp, sample_warp, warp_image, Boundary, ConsistencyMask, CorrespondenceField,
    WarpPolicy,
};
use crate::rng::{derive_seed, tag};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletSource {
    SyntheticWarp,
    RealFlow,
}

#[derive(Clone, Debug)]
pub enum TripletMode {
    /// Each frame paired with a randomly warped copy of itself.
    Synthetic { policy: WarpPolicy, threshold: f64 },
    /// Frames `(T, T + w)` for `1 <= w <= window`, linked by integrated
    /// per-hop flow corrupted with `noise`.
    Real { window: usize, threshold: f64, noise: FlowNoise },
}

/// A pair of images and the correspondences between them.
#[derive(Clone, Debug)]
pub struct TrainingTriplet {
    /// Frame index of `I` in its sequence.
    pub frame: usize,
    /// Frame index of `I'`; equal to `frame` for synthetic warps.
    pub other: usize,
    pub image: Tensor,
    pub image_prime: Tensor,
    /// On the grid of `I`, pointing into `I'`.
    pub g: CorrespondenceField,
    /// On the grid of `I'`, pointing into `I`.
    pub g_back: CorrespondenceField,
    /// Forward-backward agreement on the grid of `I`.
    pub mask: ConsistencyMask,
    /// Forward-backward agreement on the grid of `I'`.
    pub mask_back: ConsistencyMask,
    pub source: TripletSource,
}

/// Per-hop flows of a sequence, optionally corrupted. `next[t]` lives on
/// frame `t` and points into `t + 1`; `prev[t]` points into `t - 1`.
#[derive(Clone, Debug)]
pub struct SequenceFlows {
    pub next: Vec<Option<CorrespondenceField>>,
    pub prev: Vec<Option<CorrespondenceField>>,
}

impl SequenceFlows {
    pub fn from_frames(frames: &[Frame], noise: &FlowNoise, seed: u64) -> Result<Self> {
        let corrupt = |f: &Option<CorrespondenceField>, t: usize, dir: &str| -> Result<Option<CorrespondenceField>> {
            match f {
                None => Ok(None),
                Some(f) => {
                    let s = derive_seed(seed, &[tag(dir), t as u64]);
                    Ok(Some(corrupt_flow(f, s, noise)?.field))
                }
            }
        };
        let mut next = Vec::with_capacity(frames.len());
        let mut prev = Vec::with_capacity(frames.len());
        for (t, fr) in frames.iter().enumerate() {
            next.push(corrupt(&fr.flow_next, t, "next")?);
            prev.push(corrupt(&fr.flow_prev, t, "prev")?);
        }
        Ok(SequenceFlows { next, prev })
    }

    /// Field on frame `from`'s grid pointing into frame `to`, chained hop by
    /// hop through the intermediate frames.
    pub fn between(&self, from: usize, to: usize) -> Result<CorrespondenceField> {
        let n = self.next.len();
        if from >= n || to >= n {
            return Err(invalid(format!("frame pair ({from}, {to}) outside a {n}-frame sequence")));
        }
        let missing = || invalid("sequence is missing a per-hop flow");
        let chain: Vec<CorrespondenceField> = if to >= from {
            if to == from {
                let f = self.next[from].as_ref().or(self.prev[from].as_ref()).ok_or_else(missing)?;
                return CorrespondenceField::identity(f.width(), f.height());
            }
            (from..to).map(|t| self.next[t].clone().ok_or_else(missing)).collect::<Result<_>>()?
        } else {
            (to + 1..=from).rev().map(|t| self.prev[t].clone().ok_or_else(missing)).collect::<Result<_>>()?
        };
        CorrespondenceField::integrate(&chain)
    }
}

pub fn build_triplets(frames: &[Frame], mode: &TripletMode, seed: u64) -> Result<Vec<TrainingTriplet>> {
    match mode {
        TripletMode::Synthetic { policy, threshold } => frames
            .iter()
            .enumerate()
            .map(|(t, fr)| synthetic_triplet(&fr.image, t, policy, *threshold, derive_seed(seed, &[tag("warp"), t as u64])))
            .collect(),
        TripletMode::Real { window, threshold, noise } => {
            if *window == 0 {
                return Err(invalid("window must be at least 1"));
            }
            let flows = SequenceFlows::from_frames(frames, noise, seed)?;
            let mut out = Vec::new();
            for w in 1..=*window {
                for t in 0..frames.len().saturating_sub(w) {
                    out.push(real_triplet(frames, &flows, t, t + w, *threshold)?);
                }
            }
            Ok(out)
        }
    }
}

/// `I' = h I` for a sampled warp `h`, so `g = h^-1` and `g_back = h`.
pub fn synthetic_triplet(
    image: &Tensor,
    frame: usize,
    policy: &WarpPolicy,
    threshold: f64,
    seed: u64,
) -> Result<TrainingTriplet> {
    let spec = sample_warp(policy, seed)?;
    let h = realize_warp(&spec, image.width, image.height)?;
    let image_prime = warp_image(image, &h, Boundary::Clamp)?;
    let g = h.invert();
    let mask = forward_backward_mask(&g, &h, threshold)?;
    let mask_back = forward_backward_mask(&h, &g, threshold)?;
    Ok(TrainingTriplet {
        frame,
        other: frame,
        image: image.clone(),
        image_prime,
        g,
        g_back: h,
        mask,
        mask_back,
        source: TripletSource::SyntheticWarp,
    })
}

pub fn real_triplet(
    frames: &[Frame],
    flows: &SequenceFlows,
    a: usize,
    b: usize,
    threshold: f64,
) -> Result<TrainingTriplet> {
    let g = flows.between(a, b)?;
    let g_back = flows.between(b, a)?;
    let mask = forward_backward_mask(&g, &g_back, threshold)?;
    let mask_back = forward_backward_mask(&g_back, &g, threshold)?;
    Ok(TrainingTriplet {
        frame: a,
        other: b,
        image: frames[a].image.clone(),
        image_prime: frames[b].image.clone(),
        g,
        g_back,
        mask,
        mask_back,
        source: TripletSource::RealFlow,
    })
}

//! Supervised, keypoint and equivariance losses. Each returns its value
//! together with gradients on the prediction tensors; `Model::backward`
//! turns those into parameter gradients.

use serde::{Deserialize, Serialize};

use super::model::{LevelSelector, Prediction, PredictionGrad};
use crate::error::{invalid, Result};
use crate::field::{warp_tensor, warp_tensor_backward, ConsistencyMask, CorrespondenceField};
use crate::synth::{AnnotationSet, Keypoint, Provenance};
use crate::tensor::Tensor;

/// Transition point of the smooth-L1 loss, in chart units.
pub const HUBER_DELTA: f64 = 0.1;
/// Per-pixel vectors shorter than this are left out of the cosine mean.
pub const MIN_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Cross-entropy on chart indices (clicks and dense masks).
    pub ce: f64,
    /// Smooth-L1 on chart coordinates.
    pub uv: f64,
    /// Cross-entropy plus smooth-L1 at keypoints.
    pub keypoint: f64,
    /// Cosine equivariance loss.
    pub equivariance: f64,
    /// Multiplier on clicks whose provenance is `propagated`.
    pub prop_weight: f64,
    /// Feature levels receiving the equivariance loss, e.g. "3" or "4-uv".
    pub level: String,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, uv: 1.0, keypoint: 1.0, equivariance: 0.1, prop_weight: 1.0, level: "3".into() }
    }
}

impl LossWeights {
    pub fn selector(&self) -> Result<LevelSelector> {
        self.level.parse()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ce", self.ce),
            ("uv", self.uv),
            ("keypoint", self.keypoint),
            ("equivariance", self.equivariance),
            ("prop_weight", self.prop_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("loss weight '{name}' must be finite and non-negative")));
            }
        }
        let sel = self.selector()?;
        if self.equivariance > 0.0 && sel.is_empty() {
            return Err(invalid("equivariance weight is nonzero but no feature level is selected"));
        }
        Ok(())
    }
}

/// Unweighted loss terms (each summed over stages).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub uv: f64,
    pub keypoint: f64,
    pub equivariance: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.ce * self.ce + w.uv * self.uv + w.keypoint * self.keypoint + w.equivariance * self.equivariance
    }

    pub fn add(&mut self, o: &LossTerms) {
        self.ce += o.ce;
        self.uv += o.uv;
        self.keypoint += o.keypoint;
        self.equivariance += o.equivariance;
    }

    pub fn scale(&mut self, s: f64) {
        self.ce *= s;
        self.uv *= s;
        self.keypoint *= s;
        self.equivariance *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.uv.is_finite() && self.keypoint.is_finite() && self.equivariance.is_finite()
    }
}

pub fn smooth_l1(r: f64) -> (f64, f64) {
    if r.abs() < HUBER_DELTA {
        (0.5 * r * r / HUBER_DELTA, r / HUBER_DELTA)
    } else {
        (r.abs() - 0.5 * HUBER_DELTA, r.signum())
    }
}

/// Softmax cross-entropy of class `k` at pixel `i` of a `(K+1)`-score head
/// output; adds `scale * dCE/dscores` into `grad`.
fn pixel_ce(out: &Tensor, i: usize, k: usize, classes: usize, scale: f64, grad: &mut Tensor) -> f64 {
    let plane = out.plane_len();
    let mut m = f64::NEG_INFINITY;
    for c in 0..classes {
        m = m.max(out.data[c * plane + i]);
    }
    let mut z = 0.0;
    for c in 0..classes {
        z += (out.data[c * plane + i] - m).exp();
    }
    let log_z = m + z.ln();
    for c in 0..classes {
        let p = (out.data[c * plane + i] - log_z).exp();
        grad.data[c * plane + i] += scale * (p - if c == k { 1.0 } else { 0.0 });
    }
    log_z - out.data[k * plane + i]
}

/// Smooth-L1 between chart `k`'s coordinate channels at pixel `i` and `u`.
fn pixel_uv(out: &Tensor, i: usize, k: usize, parts: usize, u: [f64; 2], scale: f64, grad: &mut Tensor) -> f64 {
    let plane = out.plane_len();
    let c0 = parts + 1 + 2 * (k - 1);
    let mut acc = 0.0;
    for d in 0..2 {
        let idx = (c0 + d) * plane + i;
        let (l, dl) = smooth_l1(out.data[idx] - u[d]);
        acc += l;
        grad.data[idx] += scale * dl;
    }
    acc
}

fn click_weight(p: Provenance, w: &LossWeights) -> f64 {
    match p {
        Provenance::Manual => 1.0,
        Provenance::Propagated => w.prop_weight,
    }
}

/// Cross-entropy on clicked chart indices and on the dense part mask when
/// present, smooth-L1 on the true chart's coordinates at clicks with `u`.
/// Each term is averaged over its own support; stages are summed. The
/// returned gradient already carries the configured weights.
pub fn loss_supervised(pred: &Prediction, ann: &AnnotationSet, w: &LossWeights) -> Result<(LossTerms, PredictionGrad)> {
    let mut terms = LossTerms::default();
    let mut grad = PredictionGrad::new(pred.stages.len());
    let parts = pred.parts;
    let out0 = &pred.stages[0].out;
    let (wd, ht) = (out0.width, out0.height);
    if ann.width != wd || ann.height != ht {
        return Err(invalid(format!(
            "annotations are for {}x{} but the prediction is {}x{}",
            ann.width, ann.height, wd, ht
        )));
    }
    let clicks: Vec<(usize, &crate::synth::Click)> = ann
        .clicks
        .iter()
        .filter_map(|c| c.pixel(wd, ht).map(|(x, y)| (y * wd + x, c)))
        .filter(|(_, c)| c.k >= 1 && c.k <= parts)
        .collect();
    let n_ce = clicks.len();
    let n_uv = clicks.iter().filter(|(_, c)| c.has_uv).count();
    let mask = ann.part_mask.as_ref().filter(|m| m.len() == wd * ht);
    if n_ce == 0 && mask.is_none() {
        return Ok((terms, grad));
    }
    for s in 0..pred.stages.len() {
        let out = &pred.stages[s].out;
        let g = grad.out_mut(pred, s);
        if n_ce > 0 {
            let scale = w.ce / n_ce as f64;
            for (i, c) in &clicks {
                let cw = click_weight(c.provenance, w);
                terms.ce += cw * pixel_ce(out, *i, c.k, parts + 1, scale * cw, g) / n_ce as f64;
            }
        }
        if let Some(m) = mask {
            let n = m.len() as f64;
            for (i, &k) in m.iter().enumerate() {
                let k = (k as usize).min(parts);
                terms.ce += pixel_ce(out, i, k, parts + 1, w.ce / n, g) / n;
            }
        }
        if n_uv > 0 {
            let scale = w.uv / n_uv as f64;
            for (i, c) in clicks.iter().filter(|(_, c)| c.has_uv) {
                let cw = click_weight(c.provenance, w);
                terms.uv += cw * pixel_uv(out, *i, c.k, parts, c.u, scale * cw, g) / n_uv as f64;
            }
        }
    }
    Ok((terms, grad))
}

/// Cross-entropy plus smooth-L1 at visible keypoints, each keypoint tying
/// its fixed chart point to the pixel it falls on.
pub fn loss_keypoints(pred: &Prediction, keypoints: &[Keypoint], w: &LossWeights) -> (LossTerms, PredictionGrad) {
    let mut terms = LossTerms::default();
    let mut grad = PredictionGrad::new(pred.stages.len());
    let parts = pred.parts;
    let out0 = &pred.stages[0].out;
    let (wd, ht) = (out0.width as isize, out0.height as isize);
    let pts: Vec<(usize, &Keypoint)> = keypoints
        .iter()
        .filter(|k| k.visible && k.k >= 1 && k.k <= parts)
        .filter_map(|k| {
            let (x, y) = k.pixel();
            (x >= 0 && y >= 0 && x < wd && y < ht).then_some(((y * wd + x) as usize, k))
        })
        .collect();
    if pts.is_empty() {
        return (terms, grad);
    }
    let n = pts.len() as f64;
    for s in 0..pred.stages.len() {
        let out = &pred.stages[s].out;
        let g = grad.out_mut(pred, s);
        for (i, k) in &pts {
            terms.keypoint += pixel_ce(out, *i, k.k, parts + 1, w.keypoint / n, g) / n;
            terms.keypoint += pixel_uv(out, *i, k.k, parts, k.u, w.keypoint / n, g) / n;
        }
    }
    (terms, grad)
}

/// Both supervised terms, and the keypoint term when the set has keypoints.
pub fn loss_annotations(pred: &Prediction, ann: &AnnotationSet, w: &LossWeights) -> Result<(LossTerms, PredictionGrad)> {
    let (mut terms, mut grad) = loss_supervised(pred, ann, w)?;
    if let Some(kps) = &ann.keypoints {
        let (kt, kg) = loss_keypoints(pred, kps, w);
        terms.add(&kt);
        grad.add(&kg);
    }
    Ok((terms, grad))
}

/// Cosine equivariance loss between the selected tensors of `pred_a` (on
/// `I`) and those of `pred_b` (on `I'`) pulled back through `g`, which lives
/// on the grid of `I` and points into `I'`. The value is `1 - mean cosine`
/// averaged over every selected (stage, level) tensor with a non-empty
/// region; gradients (scaled by `weight`) flow into both predictions.
pub fn loss_equivariance(
    pred_a: &Prediction,
    pred_b: &Prediction,
    g: &CorrespondenceField,
    mask: &ConsistencyMask,
    selector: &LevelSelector,
    weight: f64,
) -> Result<(f64, PredictionGrad, PredictionGrad)> {
    let stages = pred_a.stages.len();
    let mut grad_a = PredictionGrad::new(stages);
    let mut grad_b = PredictionGrad::new(stages);
    if pred_b.stages.len() != stages || pred_a.parts != pred_b.parts {
        return Err(invalid("equivariance loss needs predictions of the same model"));
    }
    if mask.width != g.width() || mask.height != g.height() {
        return Err(invalid("consistency mask does not match the correspondence field"));
    }
    let mut pending = Vec::new();
    let mut fields: Vec<(usize, CorrespondenceField, ConsistencyMask)> = Vec::new();
    for &level in &selector.levels {
        let f = level.factor();
        if !fields.iter().any(|(ff, _, _)| *ff == f) {
            let (gl, ml) = if f == 1 { (g.clone(), mask.clone()) } else { (g.downsample(f)?, mask.downsample(f)) };
            fields.push((f, gl, ml));
        }
        let (_, gl, ml) = fields.iter().find(|(ff, _, _)| *ff == f).unwrap();
        for s in 0..stages {
            let a = pred_a.level(s, level);
            let b = pred_b.level(s, level);
            if a.width != gl.width() || a.height != gl.height() || !a.same_shape(&b) {
                return Err(invalid("feature tensor does not match the correspondence field"));
            }
            let wb = warp_tensor(&b, gl)?;
            let (mean_cos, da, dwb) = cosine_terms(&a, &wb, |i| gl.valid()[i] && ml.pass[i]);
            if let Some(mean_cos) = mean_cos {
                pending.push((s, level, 1.0 - mean_cos, da, dwb, gl.clone()));
            }
        }
    }
    if pending.is_empty() {
        return Ok((0.0, grad_a, grad_b));
    }
    let n = pending.len() as f64;
    let mut value = 0.0;
    for (s, level, v, mut da, mut dwb, gl) in pending {
        value += v / n;
        da.data.iter_mut().for_each(|x| *x *= -weight / n);
        dwb.data.iter_mut().for_each(|x| *x *= -weight / n);
        grad_a.add_level(pred_a, s, level, &da);
        let db = warp_tensor_backward(&dwb, &gl)?;
        grad_b.add_level(pred_b, s, level, &db);
    }
    Ok((value, grad_a, grad_b))
}

/// Mean per-pixel cosine similarity between `a` and `b` over pixels where
/// `keep` holds and both vectors are long enough, with its gradients.
pub fn cosine_terms(a: &Tensor, b: &Tensor, keep: impl Fn(usize) -> bool) -> (Option<f64>, Tensor, Tensor) {
    let plane = a.plane_len();
    let c = a.channels;
    let mut da = Tensor::zeros(c, a.height, a.width);
    let mut db = Tensor::zeros(c, a.height, a.width);
    let mut used = Vec::new();
    let mut sum = 0.0;
    for i in 0..plane {
        if !keep(i) {
            continue;
        }
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for ch in 0..c {
            let (x, y) = (a.data[ch * plane + i], b.data[ch * plane + i]);
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        let (na, nb) = (aa.sqrt(), bb.sqrt());
        if na < MIN_NORM || nb < MIN_NORM {
            continue;
        }
        let cos = ab / (na * nb);
        sum += cos;
        used.push((i, na, nb, cos));
    }
    if used.is_empty() {
        return (None, da, db);
    }
    let n = used.len() as f64;
    for (i, na, nb, cos) in used {
        for ch in 0..c {
            let idx = ch * plane + i;
            let (x, y) = (a.data[idx], b.data[idx]);
            da.data[idx] = (y / (na * nb) - cos * x / (na * na)) / n;
            db.data[idx] = (x / (na * nb) - cos * y / (nb * nb)) / n;
        }
    }
    (Some(sum / n), da, db)
}

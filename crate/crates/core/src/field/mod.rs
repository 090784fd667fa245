//! Dense 2D correspondence fields.
//!
//! Fields use the backward convention: for every pixel `p'` of the target
//! frame, `map[p']` is the continuous location in the source frame that the
//! pixel came from. Warping an image is then a gather
//! (`out[p'] = src(map[p'])`), and composing fields is a bilinear lookup.
//! Pixel centres sit at integer coordinates.

mod consistency;
mod sampling;
mod warp;

pub use consistency::{forward_backward_mask, ConsistencyMask, DEFAULT_FB_THRESHOLD};
pub use sampling::{warp_image, warp_tensor, warp_tensor_backward, Boundary};
pub use warp::{realize_warp, sample_warp, ThinPlateSpline, WarpKind, WarpPolicy, WarpSpec};

use crate::error::{invalid, Result};

/// A backward pixel map between two frames with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceField {
    width: usize,
    height: usize,
    map: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

/// Bilinear support of a continuous point: up to four `(index, weight)` taps.
/// Taps with zero weight are omitted, so a point on a pixel centre has a
/// single tap of weight exactly one.
pub(crate) fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> Option<Taps> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let mut taps = Taps::default();
    let mut push = |xx: usize, yy: usize, w: f64| {
        if w != 0.0 {
            taps.idx[taps.len] = yy * width + xx;
            taps.w[taps.len] = w;
            taps.len += 1;
        }
    };
    push(x0, y0, (1.0 - fx) * (1.0 - fy));
    if fx != 0.0 {
        push(x0 + 1, y0, fx * (1.0 - fy));
    }
    if fy != 0.0 {
        push(x0, y0 + 1, (1.0 - fx) * fy);
        if fx != 0.0 {
            push(x0 + 1, y0 + 1, fx * fy);
        }
    }
    Some(taps)
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub len: usize,
}

impl Taps {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |i| (self.idx[i], self.w[i]))
    }
}

impl CorrespondenceField {
    /// The identity field: every pixel maps to itself.
    pub fn identity(width: usize, height: usize) -> Result<Self> {
        Self::from_fn(width, height, |x, y| Some([x, y]))
    }

    /// Field of a rigid image-plane motion by `(dx, dy)` pixels: content at `p`
    /// in the source appears at `p + (dx, dy)` in the target, so
    /// `map[p'] = p' - (dx, dy)`.
    pub fn translation(width: usize, height: usize, dx: f64, dy: f64) -> Result<Self> {
        Self::from_fn(width, height, |x, y| Some([x - dx, y - dy]))
    }

    /// Builds a field from a per-pixel function; `None` marks the pixel invalid.
    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(f64, f64) -> Option<[f64; 2]>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("field dimensions must be positive, got {width}x{height}")));
        }
        let mut map = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x as f64, y as f64) {
                    Some(m) if m[0].is_finite() && m[1].is_finite() => {
                        map.push(m);
                        valid.push(true);
                    }
                    _ => {
                        map.push([x as f64, y as f64]);
                        valid.push(false);
                    }
                }
            }
        }
        Ok(CorrespondenceField { width, height, map, valid })
    }

    /// Assembles a field from raw planes. Invalid pixels may carry any map
    /// value; non-finite values on valid pixels are rejected.
    pub fn from_parts(width: usize, height: usize, map: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("field dimensions must be positive"));
        }
        if map.len() != width * height || valid.len() != width * height {
            return Err(invalid("field plane length does not match dimensions"));
        }
        if map.iter().zip(&valid).any(|(m, &v)| v && !(m[0].is_finite() && m[1].is_finite())) {
            return Err(invalid("field has non-finite values on valid pixels"));
        }
        Ok(CorrespondenceField { width, height, map, valid })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn map(&self) -> &[[f64; 2]] {
        &self.map
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> Option<[f64; 2]> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.map[i])
    }

    pub fn same_dims(&self, other: &CorrespondenceField) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Bilinear lookup of the map at a continuous point. `None` if the point
    /// is outside the grid or any contributing pixel is invalid.
    pub fn sample(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let taps = bilinear_taps(x, y, self.width, self.height)?;
        if taps.iter().any(|(i, _)| !self.valid[i]) {
            return None;
        }
        // Nested lerps instead of a weighted sum: exact for affine maps such
        // as the identity, which keeps composition with identity bit-exact.
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as usize, y0 as usize);
        let at = |xx: usize, yy: usize| self.map[yy * self.width + xx];
        let lerp = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        let row = |yy: usize| if fx == 0.0 { at(xi, yy) } else { lerp(at(xi, yy), at(xi + 1, yy), fx) };
        let top = row(yi);
        Some(if fy == 0.0 { top } else { lerp(top, row(yi + 1), fy) })
    }

    /// Transports target-frame points into the source frame. Each result
    /// carries `false` when the point falls outside the grid or touches an
    /// invalid pixel; the coordinate is then the input point unchanged.
    pub fn warp_points(&self, points: &[[f64; 2]]) -> Vec<([f64; 2], bool)> {
        points
            .iter()
            .map(|p| match self.sample(p[0], p[1]) {
                Some(q) => (q, true),
                None => (*p, false),
            })
            .collect()
    }

    /// `(f ∘ g).map[p] = f.map(g.map[p])`: first follow `g`, then `f`.
    pub fn compose(f: &CorrespondenceField, g: &CorrespondenceField) -> Result<CorrespondenceField> {
        if !f.same_dims(g) {
            return Err(invalid(format!(
                "compose dimension mismatch: {}x{} vs {}x{}",
                f.width, f.height, g.width, g.height
            )));
        }
        let mut map = Vec::with_capacity(g.map.len());
        let mut valid = Vec::with_capacity(g.map.len());
        for (i, m) in g.map.iter().enumerate() {
            let r = if g.valid[i] { f.sample(m[0], m[1]) } else { None };
            match r {
                Some(q) => {
                    map.push(q);
                    valid.push(true);
                }
                None => {
                    map.push(*m);
                    valid.push(false);
                }
            }
        }
        Ok(CorrespondenceField { width: g.width, height: g.height, map, valid })
    }

    /// Chains per-hop fields. `chain[0]` is sampled on the anchor frame and
    /// points into the next frame, `chain[1]` continues from there, and so on;
    /// the result maps anchor pixels through every hop.
    pub fn integrate(chain: &[CorrespondenceField]) -> Result<CorrespondenceField> {
        let (first, rest) = chain
            .split_first()
            .ok_or_else(|| invalid("integrate_flow needs a non-empty chain"))?;
        rest.iter()
            .try_fold(first.clone(), |acc, hop| CorrespondenceField::compose(hop, &acc))
    }

    /// Approximate inverse by bilinear forward splatting with a first-order
    /// offset correction (exact for translations). Pixels that receive no splat
    /// from a point within one pixel are invalid; their map values are filled
    /// from the nearest valid pixel so the map stays finite and smooth.
    pub fn invert(&self) -> CorrespondenceField {
        let (w, h) = (self.width, self.height);
        let n = w * h;
        let mut acc = vec![[0.0f64; 2]; n];
        let mut wsum = vec![0.0f64; n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !self.valid[i] {
                    continue;
                }
                let [qx, qy] = self.map[i];
                let x0 = qx.floor();
                let y0 = qy.floor();
                for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                    let tx = x0 + dx;
                    let ty = y0 + dy;
                    if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                        continue;
                    }
                    let wt = (1.0 - (qx - tx).abs()) * (1.0 - (qy - ty).abs());
                    if wt <= 0.0 {
                        continue;
                    }
                    let j = ty as usize * w + tx as usize;
                    // source position plus the residual between target pixel and splat point
                    acc[j][0] += wt * (x as f64 + tx - qx);
                    acc[j][1] += wt * (y as f64 + ty - qy);
                    wsum[j] += wt;
                }
            }
        }
        let mut map = vec![[0.0; 2]; n];
        let mut valid = vec![false; n];
        for j in 0..n {
            if wsum[j] > 1e-9 {
                map[j] = [acc[j][0] / wsum[j], acc[j][1] / wsum[j]];
                valid[j] = true;
            }
        }
        fill_holes(w, h, &mut map, &valid);
        CorrespondenceField { width: w, height: h, map, valid }
    }

    /// Field on a grid downsampled by `factor`, as seen by a feature map whose
    /// pixel `P` covers full-resolution pixels `[P*f, (P+1)*f)`. A coarse pixel
    /// is valid only if every covered fine pixel is valid.
    pub fn downsample(&self, factor: usize) -> Result<CorrespondenceField> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(invalid(format!(
                "cannot downsample {}x{} field by {factor}",
                self.width, self.height
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (cw, ch) = (self.width / factor, self.height / factor);
        let f = factor as f64;
        let mut map = Vec::with_capacity(cw * ch);
        let mut valid = Vec::with_capacity(cw * ch);
        for cy in 0..ch {
            for cx in 0..cw {
                let mut ok = true;
                let mut sum = [0.0; 2];
                for y in cy * factor..(cy + 1) * factor {
                    for x in cx * factor..(cx + 1) * factor {
                        let i = y * self.width + x;
                        ok &= self.valid[i];
                        sum[0] += self.map[i][0];
                        sum[1] += self.map[i][1];
                    }
                }
                let cnt = f * f;
                // mean fine source position -> coarse coordinates
                map.push([
                    (sum[0] / cnt + 0.5) / f - 0.5,
                    (sum[1] / cnt + 0.5) / f - 0.5,
                ]);
                valid.push(ok);
            }
        }
        Ok(CorrespondenceField { width: cw, height: ch, map, valid })
    }

    /// Per-pixel displacement `map[p] - p`.
    pub fn displacement(&self, x: usize, y: usize) -> [f64; 2] {
        let m = self.map[y * self.width + x];
        [m[0] - x as f64, m[1] - y as f64]
    }

    pub(crate) fn map_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.map
    }
}

/// Breadth-first nearest-valid filling of map values, carrying the source
/// position forward with the pixel offset.
fn fill_holes(w: usize, h: usize, map: &mut [[f64; 2]], valid: &[bool]) {
    use std::collections::VecDeque;
    let n = w * h;
    let mut owner: Vec<Option<usize>> = (0..n).map(|j| valid[j].then_some(j)).collect();
    let mut queue: VecDeque<usize> = (0..n).filter(|&j| valid[j]).collect();
    if queue.is_empty() {
        for y in 0..h {
            for x in 0..w {
                map[y * w + x] = [x as f64, y as f64];
            }
        }
        return;
    }
    while let Some(j) = queue.pop_front() {
        let (x, y) = (j % w, j / w);
        let neighbours = [
            (x > 0).then(|| j - 1),
            (x + 1 < w).then(|| j + 1),
            (y > 0).then(|| j - w),
            (y + 1 < h).then(|| j + w),
        ];
        for k in neighbours.into_iter().flatten() {
            if owner[k].is_none() {
                owner[k] = owner[j];
                queue.push_back(k);
            }
        }
    }
    for j in 0..n {
        if !valid[j] {
            let o = owner[j].expect("every pixel reached");
            let (ox, oy) = ((o % w) as f64, (o / w) as f64);
            let (x, y) = ((j % w) as f64, (j / w) as f64);
            map[j] = [map[o][0] + x - ox, map[o][1] + y - oy];
        }
    }
}

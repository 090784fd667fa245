use super::CorrespondenceField;
use crate::error::{invalid, Result};

/// Round-trip threshold in pixels used when none is configured.
pub const DEFAULT_FB_THRESHOLD: f64 = 5.0;

/// Per-pixel outcome of a forward-backward round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyMask {
    pub width: usize,
    pub height: usize,
    pub pass: Vec<bool>,
    pub threshold: f64,
}

impl ConsistencyMask {
    pub fn all_pass(width: usize, height: usize) -> Self {
        ConsistencyMask { width, height, pass: vec![true; width * height], threshold: f64::INFINITY }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pass[y * self.width + x]
    }

    pub fn pass_count(&self) -> usize {
        self.pass.iter().filter(|&&p| p).count()
    }

    /// Coarse mask: a block passes only if all of its pixels pass.
    pub fn downsample(&self, factor: usize) -> ConsistencyMask {
        let (cw, ch) = (self.width / factor, self.height / factor);
        let mut pass = Vec::with_capacity(cw * ch);
        for cy in 0..ch {
            for cx in 0..cw {
                let ok = (cy * factor..(cy + 1) * factor)
                    .all(|y| (cx * factor..(cx + 1) * factor).all(|x| self.pass[y * self.width + x]));
                pass.push(ok);
            }
        }
        ConsistencyMask { width: cw, height: ch, pass, threshold: self.threshold }
    }
}

/// `pass[p]` iff both lookups are valid and `backward(forward(p))` lands
/// within `threshold` pixels of `p`. `forward` is sampled on the anchor grid
/// and points into the other frame; `backward` is sampled on the other grid.
pub fn forward_backward_mask(
    forward: &CorrespondenceField,
    backward: &CorrespondenceField,
    threshold: f64,
) -> Result<ConsistencyMask> {
    if !forward.same_dims(backward) {
        return Err(invalid("forward_backward_mask: dimension mismatch"));
    }
    if !(threshold >= 0.0) {
        return Err(invalid(format!("forward-backward threshold must be >= 0, got {threshold}")));
    }
    let (w, h) = (forward.width(), forward.height());
    let mut pass = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(q) = forward.get(x, y) else { continue };
            let Some(r) = backward.sample(q[0], q[1]) else { continue };
            let off = (r[0] - x as f64).hypot(r[1] - y as f64);
            pass[y * w + x] = off <= threshold;
        }
    }
    Ok(ConsistencyMask { width: w, height: h, pass, threshold })
}

use super::CorrespondenceField;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// What a bilinear tap outside the source grid reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Taps outside the source contribute zero.
    #[default]
    Zero,
    /// Taps are clamped to the nearest edge pixel.
    Clamp,
}

/// Four bilinear taps with per-tap in-bounds flags. Unlike `bilinear_taps`
/// this accepts points anywhere so the zero/clamp policies can be applied.
#[inline]
fn taps_unbounded(x: f64, y: f64, w: usize, h: usize, boundary: Boundary) -> [(Option<usize>, f64); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let pick = |xx: f64, yy: f64| -> Option<usize> {
        match boundary {
            Boundary::Zero => {
                if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                    None
                } else {
                    Some(yy as usize * w + xx as usize)
                }
            }
            Boundary::Clamp => {
                let cx = xx.clamp(0.0, (w - 1) as f64) as usize;
                let cy = yy.clamp(0.0, (h - 1) as f64) as usize;
                Some(cy * w + cx)
            }
        }
    };
    [
        (pick(x0, y0), (1.0 - fx) * (1.0 - fy)),
        (pick(x0 + 1.0, y0), fx * (1.0 - fy)),
        (pick(x0, y0 + 1.0), (1.0 - fx) * fy),
        (pick(x0 + 1.0, y0 + 1.0), fx * fy),
    ]
}

/// Gathers `image` through `field`: `out[p'] = bilinear(image, map[p'])`.
/// Invalid field pixels produce zeros in every channel.
pub fn warp_image(image: &Tensor, field: &CorrespondenceField, boundary: Boundary) -> Result<Tensor> {
    if image.width != field.width() || image.height != field.height() {
        return Err(invalid(format!(
            "warp_image: image {}x{} does not match field {}x{}",
            image.width,
            image.height,
            field.width(),
            field.height()
        )));
    }
    Ok(gather(image, field, boundary))
}

fn gather(image: &Tensor, field: &CorrespondenceField, boundary: Boundary) -> Tensor {
    let (w, h) = (image.width, image.height);
    let n = w * h;
    let mut out = Tensor::zeros(image.channels, h, w);
    for p in 0..n {
        if !field.valid()[p] {
            continue;
        }
        let [mx, my] = field.map()[p];
        let taps = taps_unbounded(mx, my, w, h, boundary);
        for c in 0..image.channels {
            let src = image.plane(c);
            let mut v = 0.0;
            for &(idx, wt) in &taps {
                if wt != 0.0 {
                    if let Some(i) = idx {
                        v += wt * src[i];
                    }
                }
            }
            out.data[c * n + p] = v;
        }
    }
    out
}

/// Warps a feature tensor with zero boundary. Used by the equivariance loss.
pub fn warp_tensor(t: &Tensor, field: &CorrespondenceField) -> Result<Tensor> {
    warp_image(t, field, Boundary::Zero)
}

/// Transpose of [`warp_tensor`]: scatters output gradients back onto the
/// source grid with the same bilinear weights.
pub fn warp_tensor_backward(grad_out: &Tensor, field: &CorrespondenceField) -> Result<Tensor> {
    if grad_out.width != field.width() || grad_out.height != field.height() {
        return Err(invalid("warp_tensor_backward: gradient does not match field"));
    }
    let (w, h) = (grad_out.width, grad_out.height);
    let n = w * h;
    let mut grad_in = Tensor::zeros(grad_out.channels, h, w);
    for p in 0..n {
        if !field.valid()[p] {
            continue;
        }
        let [mx, my] = field.map()[p];
        let taps = taps_unbounded(mx, my, w, h, Boundary::Zero);
        for c in 0..grad_out.channels {
            let g = grad_out.data[c * n + p];
            if g == 0.0 {
                continue;
            }
            for &(idx, wt) in &taps {
                if let Some(i) = idx {
                    grad_in.data[c * n + i] += wt * g;
                }
            }
        }
    }
    Ok(grad_in)
}

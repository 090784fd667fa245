//! Differentiable building blocks on `C x H x W` tensors: 3x3 and 1x1
//! convolutions with zero padding, ELU, 2x2 average pooling and nearest
//! upsampling. Backward functions accumulate into the provided buffers.

use crate::tensor::Tensor;

/// 3x3 convolution, stride 1, zero padding. `w` is `[out][in][3][3]`.
pub fn conv3x3(input: &Tensor, w: &[f64], b: &[f64], out_ch: usize) -> Tensor {
    let (cin, h, wd) = (input.channels, input.height, input.width);
    debug_assert_eq!(w.len(), out_ch * cin * 9);
    let mut out = Tensor::zeros(out_ch, h, wd);
    let plane = h * wd;
    for o in 0..out_ch {
        let op = &mut out.data[o * plane..(o + 1) * plane];
        op.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let ip = &input.data[i * plane..(i + 1) * plane];
            let k = &w[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            for y in 0..h {
                let orow = &mut op[y * wd..(y + 1) * wd];
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &ip[sy as usize * wd..(sy as usize + 1) * wd];
                    row_taps(orow, srow, k[dy * 3], k[dy * 3 + 1], k[dy * 3 + 2]);
                }
            }
        }
    }
    out
}

/// `out[x] += k0 * src[x - 1] + k1 * src[x] + k2 * src[x + 1]` with zero
/// padding at both ends.
#[inline]
fn row_taps(out: &mut [f64], src: &[f64], k0: f64, k1: f64, k2: f64) {
    let w = out.len();
    if w == 1 {
        out[0] += k1 * src[0];
        return;
    }
    out[0] += k1 * src[0] + k2 * src[1];
    for (o, s) in out[1..w - 1].iter_mut().zip(src.windows(3)) {
        *o += k0 * s[0] + k1 * s[1] + k2 * s[2];
    }
    out[w - 1] += k0 * src[w - 2] + k1 * src[w - 1];
}

/// `sum_{y,x} a[y][x] * src[y + sy][x + sx]` over the in-bounds region.
#[inline]
fn shifted_dot(a: &[f64], src: &[f64], h: usize, w: usize, sy: isize, sx: isize) -> f64 {
    let y0 = (-sy).max(0) as usize;
    let y1 = (h as isize - sy.max(0)) as usize;
    let x0 = (-sx).max(0) as usize;
    let x1 = (w as isize - sx.max(0)) as usize;
    if x1 <= x0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy_row = (y as isize + sy) as usize * w;
        let av = &a[y * w + x0..y * w + x1];
        let s = &src[(sy_row as isize + x0 as isize + sx) as usize..(sy_row as isize + x1 as isize + sx) as usize];
        acc += dot(av, s);
    }
    acc
}

/// Dot product with four independent partial sums so it vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(p, q)| p * q).sum();
    for (p, q) in ac.zip(bc) {
        for l in 0..4 {
            lanes[l] += p[l] * q[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Backward of [`conv3x3`]: accumulates `dw`, `db` and (when given) the
/// input gradient.
pub fn conv3x3_backward(
    input: &Tensor,
    w: &[f64],
    grad_out: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
    grad_in: Option<&mut Tensor>,
) {
    let (cin, h, wd) = (input.channels, input.height, input.width);
    let out_ch = grad_out.channels;
    let plane = h * wd;
    for o in 0..out_ch {
        let go = &grad_out.data[o * plane..(o + 1) * plane];
        db[o] += go.iter().sum::<f64>();
        for i in 0..cin {
            let ip = &input.data[i * plane..(i + 1) * plane];
            let base = (o * cin + i) * 9;
            for dy in 0..3 {
                for dx in 0..3 {
                    dw[base + dy * 3 + dx] += shifted_dot(go, ip, h, wd, dy as isize - 1, dx as isize - 1);
                }
            }
        }
    }
    if let Some(gi) = grad_in {
        for o in 0..out_ch {
            let go = &grad_out.data[o * plane..(o + 1) * plane];
            for i in 0..cin {
                let gp = &mut gi.data[i * plane..(i + 1) * plane];
                let k = &w[(o * cin + i) * 9..(o * cin + i + 1) * 9];
                // in[y][x] feeds out[y - dy + 1][x - dx + 1]
                for y in 0..h {
                    let grow = &mut gp[y * wd..(y + 1) * wd];
                    for dy in 0..3 {
                        let sy = y as isize + 1 - dy as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let orow = &go[sy as usize * wd..(sy as usize + 1) * wd];
                        row_taps(grow, orow, k[dy * 3 + 2], k[dy * 3 + 1], k[dy * 3]);
                    }
                }
            }
        }
    }
}

/// 1x1 convolution. `w` is `[out][in]`.
pub fn conv1x1(input: &Tensor, w: &[f64], b: &[f64], out_ch: usize) -> Tensor {
    let cin = input.channels;
    let plane = input.plane_len();
    let mut out = Tensor::zeros(out_ch, input.height, input.width);
    for o in 0..out_ch {
        let op = &mut out.data[o * plane..(o + 1) * plane];
        op.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let kv = w[o * cin + i];
            if kv == 0.0 {
                continue;
            }
            let ip = &input.data[i * plane..(i + 1) * plane];
            op.iter_mut().zip(ip).for_each(|(ov, iv)| *ov += kv * iv);
        }
    }
    out
}

pub fn conv1x1_backward(
    input: &Tensor,
    w: &[f64],
    grad_out: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
    grad_in: Option<&mut Tensor>,
) {
    let cin = input.channels;
    let plane = input.plane_len();
    let out_ch = grad_out.channels;
    for o in 0..out_ch {
        let go = &grad_out.data[o * plane..(o + 1) * plane];
        db[o] += go.iter().sum::<f64>();
        for i in 0..cin {
            let ip = &input.data[i * plane..(i + 1) * plane];
            dw[o * cin + i] += dot(go, ip);
        }
    }
    if let Some(gi) = grad_in {
        for o in 0..out_ch {
            let go = &grad_out.data[o * plane..(o + 1) * plane];
            for i in 0..cin {
                let kv = w[o * cin + i];
                if kv == 0.0 {
                    continue;
                }
                let gp = &mut gi.data[i * plane..(i + 1) * plane];
                gp.iter_mut().zip(go).for_each(|(g, v)| *g += kv * v);
            }
        }
    }
}

/// ELU with unit scale, in place.
pub fn elu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = v.exp_m1();
        }
    }
}

/// Gradient through ELU given its output `y`: `dy/dx = 1` for `y > 0`,
/// `y + 1` otherwise.
pub fn elu_backward_inplace(grad: &mut Tensor, y: &Tensor) {
    for (g, &v) in grad.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *g *= v + 1.0;
        }
    }
}

/// 2x2 average pooling; dimensions must be even.
pub fn avgpool2(t: &Tensor) -> Tensor {
    let (h, w) = (t.height / 2, t.width / 2);
    let mut out = Tensor::zeros(t.channels, h, w);
    for c in 0..t.channels {
        let ip = t.plane(c);
        let op = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * t.width + 2 * x;
                op[y * w + x] = 0.25 * (ip[i] + ip[i + 1] + ip[i + t.width] + ip[i + t.width + 1]);
            }
        }
    }
    out
}

pub fn avgpool2_backward(grad_out: &Tensor, grad_in: &mut Tensor) {
    let (h, w) = (grad_out.height, grad_out.width);
    let iw = grad_in.width;
    for c in 0..grad_out.channels {
        let go = grad_out.plane(c);
        let gi = grad_in.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let g = 0.25 * go[y * w + x];
                let i = 2 * y * iw + 2 * x;
                gi[i] += g;
                gi[i + 1] += g;
                gi[i + iw] += g;
                gi[i + iw + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(t: &Tensor) -> Tensor {
    let (h, w) = (t.height * 2, t.width * 2);
    let mut out = Tensor::zeros(t.channels, h, w);
    for c in 0..t.channels {
        let ip = t.plane(c);
        let op = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                op[y * w + x] = ip[(y / 2) * t.width + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor, grad_in: &mut Tensor) {
    let w = grad_out.width;
    let iw = grad_in.width;
    for c in 0..grad_out.channels {
        let go = grad_out.plane(c);
        let gi = grad_in.plane_mut(c);
        for y in 0..grad_out.height {
            for x in 0..w {
                gi[(y / 2) * iw + x / 2] += go[y * w + x];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        Tensor::from_vec(c, h, w, data).unwrap()
    }

    fn naive_conv(input: &Tensor, w: &[f64], b: &[f64], oc: usize) -> Tensor {
        let (ci, h, wd) = (input.channels, input.height, input.width);
        let mut out = Tensor::zeros(oc, h, wd);
        for o in 0..oc {
            for y in 0..h {
                for x in 0..wd {
                    let mut acc = b[o];
                    for i in 0..ci {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (yy, xx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                    acc += w[(o * ci + i) * 9 + dy * 3 + dx] * input.get(i, yy as usize, xx as usize);
                                }
                            }
                        }
                    }
                    out.set(o, y, x, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = ramp(2, 5, 6);
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let b = [0.1, -0.2, 0.3];
        let fast = conv3x3(&x, &w, &b, 3);
        let slow = naive_conv(&x, &w, &b, 3);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x, so its input gradient is the adjoint.
        let x = ramp(2, 4, 5);
        let g = ramp(3, 4, 5);
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5 % 9) as f64 - 4.0) / 3.0).collect();
        let b = [0.0; 3];
        let mut gi = Tensor::zeros(2, 4, 5);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        conv3x3_backward(&x, &w, &g, &mut dw, &mut db, Some(&mut gi));
        let y = conv3x3(&x, &w, &b, 3);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gi.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let wdot: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - wdot).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let x = ramp(2, 4, 6);
        let y = ramp(2, 2, 3);
        let p = avgpool2(&x);
        let lhs: f64 = p.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let mut gi = Tensor::zeros(2, 4, 6);
        avgpool2_backward(&y, &mut gi);
        let rhs: f64 = x.data.iter().zip(&gi.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let u = upsample2(&y);
        let lhs: f64 = u.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let mut gy = Tensor::zeros(2, 2, 3);
        upsample2_backward(&x, &mut gy);
        let rhs: f64 = y.data.iter().zip(&gy.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

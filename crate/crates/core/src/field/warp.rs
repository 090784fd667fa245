//! Parametric warps: affinities and thin-plate splines.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::CorrespondenceField;
use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from, tag};

/// Diagonal regularisation added to the TPS kernel matrix.
const TPS_REGULARIZATION: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WarpKind {
    /// Forward affine map `p' = A[:, :2] p + A[:, 2]` in pixel coordinates.
    Affine([[f64; 3]; 2]),
    /// Thin-plate spline displacement on a control grid. Positions are in
    /// normalised `[0,1]^2` image coordinates, displacements in pixels. The
    /// spline gives, for each target pixel, the offset to its source location.
    Tps {
        rows: usize,
        cols: usize,
        positions: Vec<[f64; 2]>,
        displacements: Vec<[f64; 2]>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub kind: WarpKind,
    pub rng_seed: u64,
}

/// Sampling distribution for synthetic warps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarpPolicy {
    /// `"tps"` or `"affine"`.
    pub kind: String,
    /// TPS control grid rows / columns.
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Per-axis TPS displacement bound in pixels (uniform in `[-b, b]`).
    pub max_displacement: f64,
    /// Affine rotation bound in radians.
    pub max_rotation: f64,
    /// Affine log-scale bound.
    pub max_log_scale: f64,
    /// Affine translation bound in pixels.
    pub max_translation: f64,
    /// Centre of rotation/scaling in pixels.
    pub center: [f64; 2],
}

impl Default for WarpPolicy {
    fn default() -> Self {
        WarpPolicy {
            kind: "tps".into(),
            grid_rows: 4,
            grid_cols: 4,
            max_displacement: 5.0,
            max_rotation: 0.2,
            max_log_scale: 0.1,
            max_translation: 3.0,
            center: [31.5, 31.5],
        }
    }
}

/// Draws a warp from `policy`. The same seed always yields the same spec.
pub fn sample_warp(policy: &WarpPolicy, seed: u64) -> Result<WarpSpec> {
    let mut rng = rng_from(seed, &[tag("warp")]);
    let mut uniform = |b: f64| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
    let kind = match policy.kind.as_str() {
        "tps" => {
            let (r, c) = (policy.grid_rows, policy.grid_cols);
            if r < 2 || c < 2 {
                return Err(invalid("TPS control grid needs at least 2x2 points"));
            }
            let mut positions = Vec::with_capacity(r * c);
            let mut displacements = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    positions.push([j as f64 / (c - 1) as f64, i as f64 / (r - 1) as f64]);
                    let dx = uniform(policy.max_displacement);
                    let dy = uniform(policy.max_displacement);
                    displacements.push([dx, dy]);
                }
            }
            WarpKind::Tps { rows: r, cols: c, positions, displacements }
        }
        "affine" => {
            let theta = uniform(policy.max_rotation);
            let scale = uniform(policy.max_log_scale).exp();
            let tx = uniform(policy.max_translation);
            let ty = uniform(policy.max_translation);
            let (s, co) = theta.sin_cos();
            let l = [[scale * co, -scale * s], [scale * s, scale * co]];
            let [cx, cy] = policy.center;
            // p' = L (p - c) + c + t
            let bx = cx + tx - (l[0][0] * cx + l[0][1] * cy);
            let by = cy + ty - (l[1][0] * cx + l[1][1] * cy);
            WarpKind::Affine([[l[0][0], l[0][1], bx], [l[1][0], l[1][1], by]])
        }
        other => return Err(invalid(format!("unknown warp kind '{other}' (expected tps or affine)"))),
    };
    Ok(WarpSpec { kind, rng_seed: seed })
}

/// Realises a warp as a dense backward field on a `width x height` grid.
pub fn realize_warp(spec: &WarpSpec, width: usize, height: usize) -> Result<CorrespondenceField> {
    match &spec.kind {
        WarpKind::Affine(a) => {
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            if !det.is_finite() || det.abs() < 1e-12 {
                return Err(Error::DegenerateWarp(format!("affine linear part has determinant {det}")));
            }
            let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
            CorrespondenceField::from_fn(width, height, |x, y| {
                let (u, v) = (x - a[0][2], y - a[1][2]);
                Some([inv[0][0] * u + inv[0][1] * v, inv[1][0] * u + inv[1][1] * v])
            })
        }
        WarpKind::Tps { rows, cols, positions, displacements } => {
            if *rows < 2 || *cols < 2 || positions.len() != rows * cols || displacements.len() != positions.len() {
                return Err(invalid("TPS spec needs rows, cols >= 2 and rows*cols points"));
            }
            let sx = (width.max(2) - 1) as f64;
            let sy = (height.max(2) - 1) as f64;
            let centers: Vec<[f64; 2]> = positions.iter().map(|p| [p[0] * sx, p[1] * sy]).collect();
            let tps = ThinPlateSpline::fit(&centers, displacements)?;
            CorrespondenceField::from_fn(width, height, |x, y| {
                let d = tps.eval([x, y]);
                Some([x + d[0], y + d[1]])
            })
        }
    }
}

/// A 2D thin-plate spline interpolant with kernel `U(r) = r^2 log r^2`.
#[derive(Clone, Debug)]
pub struct ThinPlateSpline {
    centers: Vec<[f64; 2]>,
    weights: Vec<[f64; 2]>,
    /// Affine part: value = a0 + a1 x + a2 y per output coordinate.
    affine: [[f64; 3]; 2],
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

impl ThinPlateSpline {
    /// Solves the interpolation system for vector values at `centers`.
    pub fn fit(centers: &[[f64; 2]], values: &[[f64; 2]]) -> Result<Self> {
        let n = centers.len();
        if n < 3 || values.len() != n {
            return Err(invalid("thin-plate spline needs at least 3 centres with matching values"));
        }
        for i in 0..n {
            for j in 0..i {
                let d = (centers[i][0] - centers[j][0]).hypot(centers[i][1] - centers[j][1]);
                if d < 1e-9 {
                    return Err(Error::DegenerateWarp(format!("control points {j} and {i} coincide")));
                }
            }
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dx = centers[i][0] - centers[j][0];
                let dy = centers[i][1] - centers[j][1];
                a[(i, j)] = tps_kernel(dx * dx + dy * dy);
            }
            a[(i, i)] += TPS_REGULARIZATION;
            let row = [1.0, centers[i][0], centers[i][1]];
            for (k, &v) in row.iter().enumerate() {
                a[(i, n + k)] = v;
                a[(n + k, i)] = v;
            }
        }
        let lu = a.lu();
        let mut weights = vec![[0.0; 2]; n];
        let mut affine = [[0.0; 3]; 2];
        for d in 0..2 {
            let mut rhs = DVector::<f64>::zeros(m);
            for i in 0..n {
                rhs[i] = values[i][d];
            }
            let sol = lu
                .solve(&rhs)
                .ok_or_else(|| Error::DegenerateWarp("thin-plate system is singular (collinear control points?)".into()))?;
            if sol.iter().any(|v| !v.is_finite()) {
                return Err(Error::DegenerateWarp("thin-plate solve produced non-finite weights".into()));
            }
            for i in 0..n {
                weights[i][d] = sol[i];
            }
            for k in 0..3 {
                affine[d][k] = sol[n + k];
            }
        }
        Ok(ThinPlateSpline { centers: centers.to_vec(), weights, affine })
    }

    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [
            self.affine[0][0] + self.affine[0][1] * p[0] + self.affine[0][2] * p[1],
            self.affine[1][0] + self.affine[1][1] * p[0] + self.affine[1][2] * p[1],
        ];
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let u = tps_kernel(dx * dx + dy * dy);
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_spec(rows: usize, cols: usize, disp: impl Fn(usize) -> [f64; 2]) -> WarpSpec {
        let mut positions = vec![];
        for i in 0..rows {
            for j in 0..cols {
                positions.push([j as f64 / (cols - 1) as f64, i as f64 / (rows - 1) as f64]);
            }
        }
        let displacements = (0..rows * cols).map(disp).collect();
        WarpSpec { kind: WarpKind::Tps { rows, cols, positions, displacements }, rng_seed: 0 }
    }

    #[test]
    fn zero_tps_is_identity() {
        let f = realize_warp(&grid_spec(3, 3, |_| [0.0, 0.0]), 16, 12).unwrap();
        let id = CorrespondenceField::identity(16, 12).unwrap();
        assert!(f.map().iter().zip(id.map()).all(|(a, b)| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12));
    }

    #[test]
    fn identity_affine_is_identity() {
        let spec = WarpSpec { kind: WarpKind::Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), rng_seed: 0 };
        assert_eq!(realize_warp(&spec, 8, 8).unwrap(), CorrespondenceField::identity(8, 8).unwrap());
    }

    #[test]
    fn affine_backward_convention() {
        // forward: scale 2 then shift by (1, 0)
        let spec = WarpSpec { kind: WarpKind::Affine([[2.0, 0.0, 1.0], [0.0, 2.0, 0.0]]), rng_seed: 0 };
        let f = realize_warp(&spec, 8, 8).unwrap();
        assert_eq!(f.get(5, 4), Some([2.0, 2.0]));
    }

    #[test]
    fn center_control_point_reproduced_exactly() {
        // 3x3 grid, centre control point (0.5, 0.5) moved by (3, 0) px on a 65x65 grid
        let spec = grid_spec(3, 3, |i| if i == 4 { [3.0, 0.0] } else { [0.0, 0.0] });
        let f = realize_warp(&spec, 65, 65).unwrap();
        let d = f.displacement(32, 32);
        assert!((d[0] - 3.0).abs() < 1e-9 && d[1].abs() < 1e-9, "{d:?}");
        // corners stay put
        let c = f.displacement(0, 64);
        assert!(c[0].abs() < 1e-9 && c[1].abs() < 1e-9);
    }

    #[test]
    fn degenerate_warps() {
        let sing = WarpSpec { kind: WarpKind::Affine([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]), rng_seed: 0 };
        assert!(matches!(realize_warp(&sing, 4, 4), Err(Error::DegenerateWarp(_))));
        let mut spec = grid_spec(2, 2, |_| [1.0, 0.0]);
        if let WarpKind::Tps { positions, .. } = &mut spec.kind {
            positions[1] = positions[0];
        }
        assert!(matches!(realize_warp(&spec, 8, 8), Err(Error::DegenerateWarp(_))));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = WarpPolicy::default();
        assert_eq!(sample_warp(&p, 11).unwrap(), sample_warp(&p, 11).unwrap());
        assert_ne!(sample_warp(&p, 0).unwrap(), sample_warp(&p, 1).unwrap());
        let zero = WarpPolicy { max_displacement: 0.0, ..WarpPolicy::default() };
        let f = realize_warp(&sample_warp(&zero, 0).unwrap(), 20, 20).unwrap();
        assert!(f.map().iter().enumerate().all(|(i, m)| (m[0] - (i % 20) as f64).abs() < 1e-12));
        let aff = WarpPolicy {
            kind: "affine".into(),
            max_rotation: 0.0,
            max_log_scale: 0.0,
            max_translation: 0.0,
            ..WarpPolicy::default()
        };
        let f = realize_warp(&sample_warp(&aff, 0).unwrap(), 20, 20).unwrap();
        assert_eq!(f, CorrespondenceField::identity(20, 20).unwrap());
    }

    #[test]
    fn unknown_kind_rejected() {
        let p = WarpPolicy { kind: "spiral".into(), ..WarpPolicy::default() };
        assert!(sample_warp(&p, 0).is_err());
    }
}

//! Dense held-out evaluation with the geodesic ratio metric.

use super::model::Model;
use crate::error::Result;
use crate::surface::{build_puppet_surface, ratio_within, ChartPoint, GeodesicIndex, SurfaceConfig, SurfaceMesh, DEFAULT_THRESHOLDS};
use crate::synth::Frame;

/// Surface and geodesic index shared by every evaluation of a chart count.
pub struct Evaluator {
    pub mesh: SurfaceMesh,
    pub index: GeodesicIndex,
    pub thresholds: Vec<f64>,
}

impl Evaluator {
    pub fn new(parts: usize) -> Result<Self> {
        Self::with_surface(&SurfaceConfig { parts, ..Default::default() })
    }

    pub fn with_surface(cfg: &SurfaceConfig) -> Result<Self> {
        let mesh = build_puppet_surface(cfg)?;
        let index = GeodesicIndex::new(&mesh)?;
        Ok(Evaluator { mesh, index, thresholds: DEFAULT_THRESHOLDS.to_vec() })
    }

    /// Ratios over every body pixel of every frame (pixels whose rendered
    /// chart is nonzero); background predictions there count as misses.
    pub fn evaluate<'a>(&self, model: &Model, frames: impl IntoIterator<Item = &'a Frame>) -> Result<Vec<f64>> {
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for f in frames {
            let d = model.forward(&f.image)?.decode();
            for (i, &k) in f.uv.k.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                truths.push(ChartPoint::new(k as usize, f.uv.u[i]));
                preds.push(ChartPoint::new(d.k[i], d.u[i]));
            }
        }
        ratio_within(&self.mesh, &self.index, &preds, &truths, &self.thresholds)
    }
}

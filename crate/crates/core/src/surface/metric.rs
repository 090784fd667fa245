use super::{GeodesicIndex, SurfaceMesh};
use crate::error::{invalid, Result};

/// Localisation thresholds in model units (centimetres).
pub const DEFAULT_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

/// A predicted or annotated body-surface coordinate; `k == 0` is background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChartPoint {
    pub k: usize,
    pub u: [f64; 2],
}

impl ChartPoint {
    pub const BACKGROUND: ChartPoint = ChartPoint { k: 0, u: [0.0, 0.0] };

    pub fn new(k: usize, u: [f64; 2]) -> Self {
        ChartPoint { k, u }
    }

    pub fn is_background(&self) -> bool {
        self.k == 0
    }
}

/// Fraction of points whose geodesic error is within each threshold.
/// Background predictions fail at every threshold; background truths are
/// rejected.
pub fn ratio_within(
    mesh: &SurfaceMesh,
    index: &GeodesicIndex,
    predictions: &[ChartPoint],
    truths: &[ChartPoint],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if predictions.len() != truths.len() {
        return Err(invalid(format!(
            "ratio_within: {} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("ratio_within: thresholds must be sorted ascending"));
    }
    if predictions.is_empty() {
        return Ok(vec![0.0; thresholds.len()]);
    }
    let mut hits = vec![0usize; thresholds.len()];
    for (p, t) in predictions.iter().zip(truths) {
        if t.is_background() {
            return Err(invalid("ratio_within: ground-truth point is background"));
        }
        if p.is_background() {
            continue;
        }
        let d = index.geodesic(mesh, (p.k, p.u), (t.k, t.u))?;
        for (h, &thr) in hits.iter_mut().zip(thresholds) {
            if d <= thr {
                *h += 1;
            }
        }
    }
    let n = predictions.len() as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::{build_puppet_surface, SurfaceConfig};

    fn setup() -> (SurfaceMesh, GeodesicIndex) {
        let m = build_puppet_surface(&SurfaceConfig::default()).unwrap();
        let g = GeodesicIndex::new(&m).unwrap();
        (m, g)
    }

    #[test]
    fn perfect_predictions_score_one() {
        let (m, g) = setup();
        let pts: Vec<ChartPoint> = (1..=10).map(|k| ChartPoint::new(k, [0.3, 0.6])).collect();
        assert_eq!(ratio_within(&m, &g, &pts, &pts, &DEFAULT_THRESHOLDS).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn background_predictions_score_zero() {
        let (m, g) = setup();
        let truth: Vec<ChartPoint> = (1..=10).map(|k| ChartPoint::new(k, [0.3, 0.6])).collect();
        let pred = vec![ChartPoint::BACKGROUND; 10];
        assert_eq!(ratio_within(&m, &g, &pred, &truth, &DEFAULT_THRESHOLDS).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn monotone_in_threshold_and_errors() {
        let (m, g) = setup();
        let truth: Vec<ChartPoint> = (0..40).map(|i| ChartPoint::new(1 + i % 10, [0.5, 0.5])).collect();
        let pred: Vec<ChartPoint> =
            (0..40).map(|i| ChartPoint::new(1 + (i * 3) % 10, [(i as f64 / 40.0), 0.4])).collect();
        let r = ratio_within(&m, &g, &pred, &truth, &[1.0, 5.0, 10.0, 20.0, 50.0, 500.0]).unwrap();
        assert!(r.windows(2).all(|w| w[0] <= w[1]), "{r:?}");
        assert_eq!(r[5], 1.0);
        assert!(ratio_within(&m, &g, &pred[..3], &truth, &DEFAULT_THRESHOLDS).is_err());
        assert!(ratio_within(&m, &g, &pred, &truth, &[10.0, 5.0]).is_err());
    }
}

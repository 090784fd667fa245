use eqmp_core::field::{forward_backward_mask, realize_warp, sample_warp, warp_image, Boundary, ConsistencyMask, CorrespondenceField, WarpPolicy};
use eqmp_core::predictor::{
    cosine_terms, grad_check, loss_annotations, loss_equivariance, loss_keypoints, loss_supervised, smooth_l1, Level,
    LevelSelector, LossWeights, Model, ModelConfig, PredictionGrad,
};
use eqmp_core::synth::{AnnotationSet, Click, Keypoint, Provenance};
use eqmp_core::Tensor;
use proptest::prelude::*;

const SIZE: usize = 16;
const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tiny() -> ModelConfig {
    ModelConfig { stages: 2, features: 3, parts: 3 }
}

fn image(seed: u64) -> Tensor {
    Tensor::from_fn(SIZE, SIZE, |y, x| {
        let t = (x as f64 * 0.7 + y as f64 * 1.3 + seed as f64).sin();
        0.5 + 0.4 * t * (0.21 * (x * y) as f64 + seed as f64 * 0.37).cos()
    })
}

fn annotations(seed: u64, keypoints: bool, mask: bool) -> AnnotationSet {
    let mut clicks = Vec::new();
    for i in 0..10u64 {
        let h = seed.wrapping_mul(6364136223846793005).wrapping_add(i * 1442695040888963407);
        clicks.push(Click {
            x: (h % SIZE as u64) as f64 + 0.2,
            y: ((h >> 8) % SIZE as u64) as f64 - 0.1,
            k: 1 + (h >> 16) as usize % 3,
            u: [((h >> 20) % 100) as f64 / 100.0, ((h >> 28) % 100) as f64 / 100.0],
            has_uv: i % 3 != 0,
            provenance: if i % 4 == 0 { Provenance::Propagated } else { Provenance::Manual },
        });
    }
    let kps = keypoints.then(|| {
        (0..4)
            .map(|j| Keypoint {
                joint: j,
                pos: [2.0 + 3.0 * j as f64, 12.0 - 2.0 * j as f64],
                k: 1 + j % 3,
                u: [0.5, 0.1 * j as f64],
                visible: j != 3,
            })
            .collect()
    });
    let part_mask = mask.then(|| (0..SIZE * SIZE).map(|i| ((i / 5 + seed as usize) % 4) as u8).collect());
    AnnotationSet { width: SIZE, height: SIZE, clicks, keypoints: kps, part_mask }
}

fn weights() -> LossWeights {
    LossWeights { prop_weight: 0.5, ..LossWeights::default() }
}

fn only(ce: f64, uv: f64, keypoint: f64) -> LossWeights {
    LossWeights { ce, uv, keypoint, equivariance: 0.0, ..weights() }
}

fn model_grad(model: &Model, pred: &eqmp_core::predictor::Prediction, grad: &PredictionGrad) -> Vec<f64> {
    let mut d = vec![0.0; model.num_params()];
    model.backward(pred, grad, &mut d);
    d
}

/// Worst relative error over every parameter of the tiny model.
fn check(f: impl Fn(&Model) -> (f64, Vec<f64>)) -> f64 {
    let cfg = tiny();
    let base = Model::new(&cfg, 3).unwrap();
    assert!(base.num_params() <= 5000, "{} parameters", base.num_params());
    grad_check(
        &base.params,
        |p| Ok(f(&Model::from_params(&cfg, p.to_vec())?)),
        EPS,
        usize::MAX,
        FLOOR,
        0,
    )
    .unwrap()
}

fn supervised_check(w: LossWeights, ann: AnnotationSet) -> f64 {
    let img = image(1);
    check(move |m| {
        let pred = m.forward(&img).unwrap();
        let (terms, g) = loss_annotations(&pred, &ann, &w).unwrap();
        (terms.total(&w), model_grad(m, &pred, &g))
    })
}

fn tps_pair(seed: u64) -> (Tensor, Tensor, CorrespondenceField, ConsistencyMask) {
    let policy = WarpPolicy { max_displacement: 1.5, center: [7.5, 7.5], ..WarpPolicy::default() };
    let g = realize_warp(&sample_warp(&policy, seed).unwrap(), SIZE, SIZE).unwrap();
    let a = image(seed);
    // I' is built so that I'(g(p)) approximates I(p)
    let b = warp_image(&a, &g.invert(), Boundary::Clamp).unwrap();
    let mask = forward_backward_mask(&g, &g.invert(), 5.0).unwrap();
    (a, b, g, mask)
}

fn equivariance_check(selector: LevelSelector) -> f64 {
    let (a, b, g, mask) = tps_pair(5);
    let weight = 0.7;
    check(move |m| {
        let pa = m.forward(&a).unwrap();
        let pb = m.forward(&b).unwrap();
        let (v, ga, gb) = loss_equivariance(&pa, &pb, &g, &mask, &selector, weight).unwrap();
        let mut d = model_grad(m, &pa, &ga);
        for (x, y) in d.iter_mut().zip(model_grad(m, &pb, &gb)) {
            *x += y;
        }
        (weight * v, d)
    })
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let e = supervised_check(only(1.0, 0.0, 0.0), annotations(2, false, true));
    assert!(e < TOL, "relative error {e}");
}

#[test]
fn chart_coordinate_gradient_matches_finite_differences() {
    let e = supervised_check(only(0.0, 1.0, 0.0), annotations(3, false, false));
    assert!(e < TOL, "relative error {e}");
}

#[test]
fn keypoint_gradient_matches_finite_differences() {
    let e = supervised_check(only(0.0, 0.0, 1.0), annotations(4, true, false));
    assert!(e < TOL, "relative error {e}");
}

#[test]
fn combined_supervised_gradient_matches_finite_differences() {
    let e = supervised_check(weights(), annotations(5, true, true));
    assert!(e < TOL, "relative error {e}");
}

#[test]
fn equivariance_gradient_matches_at_every_level() {
    for level in Level::ALL {
        let e = equivariance_check(LevelSelector::single(level));
        assert!(e < TOL, "level {level}: relative error {e}");
    }
    let e = equivariance_check("0+1+2+3+4-all".parse().unwrap());
    assert!(e < TOL, "all levels: relative error {e}");
}

#[test]
fn equivariance_loss_vanishes_on_identical_branches() {
    let m = Model::new(&tiny(), 9).unwrap();
    let img = image(4);
    let p = m.forward(&img).unwrap();
    let id = CorrespondenceField::identity(SIZE, SIZE).unwrap();
    let mask = ConsistencyMask::all_pass(SIZE, SIZE);
    let all: LevelSelector = "0+1+2+3+4-all".parse().unwrap();
    let (v, _, _) = loss_equivariance(&p, &p, &id, &mask, &all, 1.0).unwrap();
    assert!(v.abs() < 1e-6, "loss {v}");
}

#[test]
fn equivariance_gradient_reaches_both_branches() {
    let m = Model::new(&tiny(), 2).unwrap();
    let (a, b, g, mask) = tps_pair(8);
    let pa = m.forward(&a).unwrap();
    let pb = m.forward(&b).unwrap();
    let (v, ga, gb) = loss_equivariance(&pa, &pb, &g, &mask, &LevelSelector::single(Level::PreOutput), 1.0).unwrap();
    assert!(v > 0.0);
    let na: f64 = model_grad(&m, &pa, &ga).iter().map(|x| x * x).sum();
    let nb: f64 = model_grad(&m, &pb, &gb).iter().map(|x| x * x).sum();
    assert!(na > 0.0 && nb > 0.0, "{na} {nb}");
}

#[test]
fn empty_annotations_give_zero_loss_and_gradient() {
    let m = Model::new(&tiny(), 1).unwrap();
    let p = m.forward(&image(0)).unwrap();
    let (t, g) = loss_supervised(&p, &AnnotationSet::empty(SIZE, SIZE), &weights()).unwrap();
    assert_eq!(t.total(&weights()), 0.0);
    assert!(g.is_zero());
    let (t, g) = loss_keypoints(&p, &[], &weights());
    assert_eq!(t.keypoint, 0.0);
    assert!(g.is_zero());
    assert!(loss_supervised(&p, &AnnotationSet::empty(SIZE, SIZE + 8), &weights()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn smooth_l1_is_even_continuous_and_nonnegative(r in -10.0f64..10.0) {
        let (l, d) = smooth_l1(r);
        let (lm, dm) = smooth_l1(-r);
        prop_assert!(l >= 0.0);
        prop_assert!((l - lm).abs() < 1e-12 && (d + dm).abs() < 1e-12);
        let h = 1e-6;
        let numeric = (smooth_l1(r + h).0 - smooth_l1(r - h).0) / (2.0 * h);
        prop_assert!((numeric - d).abs() < 1e-4);
    }

    #[test]
    fn supervised_losses_are_nonnegative(seed in 0u64..1000, kp in any::<bool>(), mask in any::<bool>()) {
        let m = Model::new(&tiny(), seed).unwrap();
        let p = m.forward(&image(seed)).unwrap();
        let (t, _) = loss_annotations(&p, &annotations(seed, kp, mask), &weights()).unwrap();
        prop_assert!(t.ce >= 0.0 && t.uv >= 0.0 && t.keypoint >= 0.0);
        prop_assert!(t.is_finite());
    }

    #[test]
    fn exact_pullbacks_have_unit_cosine(
        seed in any::<u32>(),
        dx in -3i32..=3,
        dy in -3i32..=3,
    ) {
        let b = Tensor::from_vec(4, SIZE, SIZE, (0..4 * SIZE * SIZE).map(|i| {
            ((i as u64 * 2654435761 + seed as u64) % 1000) as f64 / 500.0 - 1.0
        }).collect()).unwrap();
        let g = CorrespondenceField::translation(SIZE, SIZE, dx as f64, dy as f64).unwrap();
        // features of I at p equal features of I' at g(p) = p - (dx, dy)
        let mut a = Tensor::zeros(4, SIZE, SIZE);
        let mut inside = vec![false; SIZE * SIZE];
        for y in 0..SIZE as i32 {
            for x in 0..SIZE as i32 {
                let (sx, sy) = (x - dx, y - dy);
                if (0..SIZE as i32).contains(&sx) && (0..SIZE as i32).contains(&sy) {
                    inside[(y * SIZE as i32 + x) as usize] = true;
                    for c in 0..4 {
                        a.set(c, y as usize, x as usize, b.get(c, sy as usize, sx as usize));
                    }
                }
            }
        }
        let wb = eqmp_core::field::warp_tensor(&b, &g).unwrap();
        let (cos, _, _) = cosine_terms(&a, &wb, |i| inside[i]);
        if let Some(c) = cos {
            prop_assert!((1.0 - c).abs() < 1e-6);
        }
    }

    #[test]
    fn equivariance_loss_lies_in_zero_two(seed in 0u64..500) {
        let m = Model::new(&tiny(), seed).unwrap();
        let (a, b, g, mask) = tps_pair(seed);
        let pa = m.forward(&a).unwrap();
        let pb = m.forward(&b).unwrap();
        let all: LevelSelector = "0+1+2+3+4-all".parse().unwrap();
        let (v, _, _) = loss_equivariance(&pa, &pb, &g, &mask, &all, 1.0).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&v));
    }
}

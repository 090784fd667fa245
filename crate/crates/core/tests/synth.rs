use eqmp_core::field::{forward_backward_mask, ConsistencyMask, CorrespondenceField};
use eqmp_core::predictor::{propagate_dataset, propagate_gt};
use eqmp_core::synth::{
    build_triplets, corrupt_flow, manual_clicks, render_sequence, subsample_annotations, AnnotationSet, Dataset,
    DatasetConfig, FlowNoise, LabelSource, Provenance, RenderConfig, Renderer, Scheme, SequenceFlows, TripletMode,
};
use proptest::prelude::*;

fn small_render() -> RenderConfig {
    RenderConfig { width: 32, height: 32, frames: 6, supersample: 1, ..RenderConfig::default() }
}

fn small_dataset() -> DatasetConfig {
    DatasetConfig { train_sequences: 2, eval_sequences: 1, clicks_per_frame: 25, render: small_render(), ..DatasetConfig::default() }
}

#[test]
fn labels_match_the_renderer_at_pixel_centres() {
    let cfg = small_render();
    let r = Renderer::new(&cfg).unwrap();
    let frames = render_sequence(3, &cfg).unwrap();
    for f in &frames {
        assert_eq!(f.part_mask(), &f.uv.k[..]);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (k, u) = f.uv.get(x, y);
                match r.hit(&f.pose, [x as f64, y as f64]) {
                    Some(h) => {
                        assert_eq!(k, h.part + 1);
                        assert_eq!(u, h.u);
                    }
                    None => assert_eq!(k, 0),
                }
            }
        }
        assert!(f.uv.k.iter().any(|&k| k != 0), "empty frame");
    }
    assert_eq!(render_sequence(3, &cfg).unwrap(), frames);
}

#[test]
fn valid_flow_lands_on_the_same_part() {
    let cfg = small_render();
    let frames = render_sequence(5, &cfg).unwrap();
    let w = cfg.width;
    for pair in frames.windows(2) {
        let flow = pair[0].flow_next.as_ref().unwrap();
        assert_eq!(pair[0].covisible_next.as_deref(), Some(flow.valid()));
        for y in 0..cfg.height {
            for x in 0..w {
                let Some(q) = flow.get(x, y) else { continue };
                let k = pair[0].uv.k[y * w + x];
                // the destination is in front in the next frame
                let hit = Renderer::new(&cfg).unwrap().hit(&pair[1].pose, q).map_or(0, |h| h.part + 1);
                assert_eq!(hit, k as usize, "pixel ({x}, {y})");
            }
        }
    }
    assert!(frames[0].flow_prev.is_none() && frames.last().unwrap().flow_next.is_none());
}

#[test]
fn manual_clicks_are_distinct_body_pixels() {
    let frames = render_sequence(1, &small_render()).unwrap();
    let f = &frames[0];
    let ann = manual_clicks(f, 40, 9);
    ann.validate().unwrap();
    let mut seen = std::collections::HashSet::new();
    for c in &ann.clicks {
        let (x, y) = c.pixel(f.width(), f.height()).unwrap();
        assert!(seen.insert((x, y)));
        assert_eq!(f.uv.get(x, y), (c.k, c.u));
        assert!(c.k != 0 && c.has_uv && c.provenance == Provenance::Manual);
    }
    assert_eq!(ann.clicks.len(), 40.min(f.uv.k.iter().filter(|&&k| k != 0).count()));
    assert_eq!(manual_clicks(f, 40, 9), ann);
}

#[test]
fn datasets_round_trip_and_ignore_the_worker_count() {
    let cfg = small_dataset();
    let a = Dataset::generate(&cfg, 7).unwrap();
    let b = Dataset::generate_with_workers(&cfg, 7, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let da = a.save(&dir.path().join("a")).unwrap();
    let db = b.save(&dir.path().join("b")).unwrap();
    assert_eq!(da, db);
    let loaded = Dataset::load(&dir.path().join("a")).unwrap();
    assert_eq!(loaded.save(&dir.path().join("c")).unwrap(), da);
    assert_eq!(loaded.annotations, a.annotations);
    let other = Dataset::generate(&cfg, 8).unwrap().save(&dir.path().join("d")).unwrap();
    assert_ne!(other, da);
    assert!(Dataset::load(&dir.path().join("missing")).is_err());
}

#[test]
fn clean_noise_leaves_flow_untouched() {
    let frames = render_sequence(2, &small_render()).unwrap();
    let flow = frames[0].flow_next.as_ref().unwrap();
    let c = corrupt_flow(flow, 4, &FlowNoise::none()).unwrap();
    assert_eq!(&c.field, flow);
    assert!(c.outliers.iter().all(|&o| !o));
    let noisy = corrupt_flow(flow, 4, &FlowNoise::default()).unwrap();
    assert_eq!(noisy.field.valid(), flow.valid());
    assert!(noisy.outliers.iter().any(|&o| o));
    assert_eq!(corrupt_flow(flow, 4, &FlowNoise::default()).unwrap().field, noisy.field);
    assert!(corrupt_flow(flow, 4, &FlowNoise { sigma: -1.0, ..FlowNoise::none() }).is_err());
}

#[test]
fn identity_propagation_keeps_every_click() {
    let frames = render_sequence(4, &small_render()).unwrap();
    let ann = manual_clicks(&frames[0], 30, 1);
    let id = CorrespondenceField::identity(32, 32).unwrap();
    let out = propagate_gt(&ann, &id, &ConsistencyMask::all_pass(32, 32));
    assert_eq!(out.clicks.len(), ann.clicks.len());
    for (a, b) in ann.clicks.iter().zip(&out.clicks) {
        assert_eq!((a.x, a.y, a.k, a.u), (b.x, b.y, b.k, b.u));
        assert_eq!(b.provenance, Provenance::Propagated);
    }
    let none = ConsistencyMask { pass: vec![false; 32 * 32], ..ConsistencyMask::all_pass(32, 32) };
    assert!(propagate_gt(&ann, &id, &none).clicks.is_empty());
}

#[test]
fn clean_propagation_keeps_charts() {
    let data = Dataset::generate(&small_dataset(), 2).unwrap();
    let rep = propagate_dataset(&data, &data.annotations, 2, 5.0, &FlowNoise::none(), 0).unwrap();
    assert!(rep.kept > 0);
    assert!(rep.chart_accuracy() >= 0.99, "{}", rep.chart_accuracy());
    assert!(rep.unoccluded_kept <= rep.unoccluded && rep.kept <= rep.attempted);
    assert!(propagate_dataset(&data, &data.annotations, 0, 5.0, &FlowNoise::none(), 0).is_err());
    assert!(propagate_dataset(&data, &data.annotations[..1], 1, 5.0, &FlowNoise::none(), 0).is_err());
}

#[test]
fn sequence_flows_chain_hops_and_agree_with_the_reverse() {
    let frames = render_sequence(6, &small_render()).unwrap();
    let flows = SequenceFlows::from_frames(&frames, &FlowNoise::none(), 0).unwrap();
    let one = flows.between(1, 2).unwrap();
    assert_eq!(&one, frames[1].flow_next.as_ref().unwrap());
    assert_eq!(flows.between(2, 2).unwrap(), CorrespondenceField::identity(32, 32).unwrap());
    let there = flows.between(1, 4).unwrap();
    let back = flows.between(4, 1).unwrap();
    let mask = forward_backward_mask(&there, &back, 0.5).unwrap();
    // clean chained flow round-trips wherever both directions are covisible
    assert!(mask.pass_count() > 0);
    assert!(mask.pass_count() * 10 >= there.valid_count() * 9, "{} of {}", mask.pass_count(), there.valid_count());
    assert!(flows.between(0, 6).is_err());
}

#[test]
fn real_triplets_cover_every_window() {
    let frames = render_sequence(8, &small_render()).unwrap();
    let mode = TripletMode::Real { window: 3, threshold: 5.0, noise: FlowNoise::default() };
    let ts = build_triplets(&frames, &mode, 1).unwrap();
    assert_eq!(ts.len(), 5 + 4 + 3);
    for t in &ts {
        assert!(t.other > t.frame && t.other - t.frame <= 3);
        assert_eq!(t.image, frames[t.frame].image);
        assert_eq!(t.image_prime, frames[t.other].image);
    }
    assert!(build_triplets(&frames, &TripletMode::Real { window: 0, threshold: 5.0, noise: FlowNoise::none() }, 1).is_err());
}

fn scheme_strategy() -> impl Strategy<Value = Scheme> {
    let p = 0.01f64..=1.0;
    prop_oneof![
        Just(Scheme::Full),
        p.clone().prop_map(Scheme::ImageFrac),
        p.clone().prop_map(Scheme::ImageFracKOnly),
        p.clone().prop_map(Scheme::PointFrac),
        p.prop_map(Scheme::PointFracPlusKeypoints),
        Just(Scheme::SegOnly),
        Just(Scheme::KeypointsOnly),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn schemes_print_and_parse_back(scheme in scheme_strategy()) {
        let parsed: Scheme = scheme.to_string().parse().unwrap();
        prop_assert_eq!(parsed, scheme);
    }

    #[test]
    fn schemes_keep_a_subset_of_the_clicks(scheme in scheme_strategy(), seed in any::<u64>()) {
        let frames = render_sequence(11, &RenderConfig { frames: 10, ..small_render() }).unwrap();
        let full: Vec<AnnotationSet> = frames.iter().enumerate().map(|(t, f)| manual_clicks(f, 12, t as u64)).collect();
        let sources: Vec<LabelSource> = frames.iter().map(LabelSource::from).collect();
        let out = subsample_annotations(&full, &sources, scheme, seed).unwrap();
        prop_assert_eq!(out.len(), full.len());
        for (o, f) in out.iter().zip(&full) {
            prop_assert!(o.clicks.iter().all(|c| f.clicks.contains(c)));
        }
        if let Scheme::ImageFrac(p) = scheme {
            let images = out.iter().filter(|a| !a.clicks.is_empty()).count();
            prop_assert_eq!(images, ((p * 10.0).round() as usize).clamp(1, 10));
        }
        prop_assert_eq!(subsample_annotations(&full, &sources, scheme, seed).unwrap(), out);
    }
}

#[test]
fn bad_schemes_are_rejected() {
    for s in ["point:0", "image:1.5", "image", "point:x", "everything"] {
        assert!(s.parse::<Scheme>().is_err(), "{s}");
    }
}

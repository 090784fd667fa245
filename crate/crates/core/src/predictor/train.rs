//! Mini-batch SGD over annotated frames, with optional ground-truth
//! propagation and equivariance pairs.

use std::fmt::Write as _;

use rand::Rng;

use super::eval::Evaluator;
use super::loss::{loss_annotations, loss_equivariance, LossTerms, LossWeights};
use super::model::{LevelSelector, Model};
use super::propagate::propagate_gt;
use crate::config::{FlowSource, OptimConfig, RunConfig, Strategy};
use crate::error::{invalid, Error, Result};
use crate::field::{forward_backward_mask, ConsistencyMask, CorrespondenceField};
use crate::rng::{derive_seed, rng_from, tag};
use crate::synth::{subsample_annotations, synthetic_triplet, AnnotationSet, Dataset, Frame, LabelSource, Provenance, Scheme, SequenceFlows};
use crate::tensor::Tensor;

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub stage: usize,
    pub epoch: usize,
    pub split: String,
    /// Ratios within 5, 10 and 20 cm; NaN when evaluation was skipped.
    pub ratios: [f64; 3],
    pub loss: f64,
    pub terms: LossTerms,
    /// Mean number of propagated clicks per training sample.
    pub prop_clicks: f64,
}

pub const METRICS_HEADER: &str = "stage,epoch,split,r5,r10,r20,loss,ce,uv,keypoint,equivariance,prop_clicks";

/// CSV text of a metrics log. Floats use the shortest representation that
/// round-trips, so equal logs give equal bytes.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.stage,
            r.epoch,
            r.split,
            r.ratios[0],
            r.ratios[1],
            r.ratios[2],
            r.loss,
            r.terms.ce,
            r.terms.uv,
            r.terms.keypoint,
            r.terms.equivariance,
            r.prop_clicks
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics CSV has an unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Format(format!("metrics CSV line {} has {} fields", i + 2, f.len())));
        }
        let num = |j: usize| -> Result<f64> {
            f[j].parse().map_err(|_| Error::Format(format!("metrics CSV line {}: bad number '{}'", i + 2, f[j])))
        };
        let int = |j: usize| -> Result<usize> {
            f[j].parse().map_err(|_| Error::Format(format!("metrics CSV line {}: bad integer '{}'", i + 2, f[j])))
        };
        rows.push(MetricsRow {
            stage: int(0)?,
            epoch: int(1)?,
            split: f[2].to_string(),
            ratios: [num(3)?, num(4)?, num(5)?],
            loss: num(6)?,
            terms: LossTerms { ce: num(7)?, uv: num(8)?, keypoint: num(9)?, equivariance: num(10)? },
            prop_clicks: num(11)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<MetricsRow>,
    /// Propagated clicks kept and attempted, when propagation ran.
    pub propagation: Option<(usize, usize)>,
}

struct Sample {
    seq: usize,
    frame: usize,
    image: Tensor,
    ann: AnnotationSet,
    /// A warped copy rather than a rendered frame; real pairs do not apply.
    warped: bool,
}

/// Correspondences to the frames within the window of one frame.
struct Neighbour {
    other: usize,
    g: CorrespondenceField,
    mask: ConsistencyMask,
}

struct Pool<'a> {
    data: &'a Dataset,
    samples: Vec<Sample>,
    /// `[seq][frame]` neighbours, filled when real flow is used.
    neighbours: Vec<Vec<Vec<Neighbour>>>,
}

struct Plan<'a> {
    weights: &'a LossWeights,
    selector: LevelSelector,
    /// Flow source for equivariance pairs, if the loss is on.
    equivariance: Option<FlowSource>,
    config: &'a RunConfig,
}

fn neighbours(data: &Dataset, cfg: &RunConfig, seed: u64) -> Result<Vec<Vec<Vec<Neighbour>>>> {
    let window = cfg.data.window;
    let thr = cfg.data.fb_threshold;
    data.train
        .iter()
        .enumerate()
        .map(|(s, seq)| {
            let n = seq.frames.len();
            if n < 2 {
                return Ok((0..n).map(|_| Vec::new()).collect());
            }
            let flows = SequenceFlows::from_frames(&seq.frames, &data.config.noise, derive_seed(seed, &[tag("flow"), s as u64]))?;
            let mut fields: Vec<Vec<(usize, CorrespondenceField)>> = (0..n).map(|_| Vec::new()).collect();
            for (a, row) in fields.iter_mut().enumerate() {
                for b in a.saturating_sub(window)..(a + window + 1).min(n) {
                    if b != a {
                        row.push((b, flows.between(a, b)?));
                    }
                }
            }
            let mut out: Vec<Vec<Neighbour>> = (0..n).map(|_| Vec::new()).collect();
            for a in 0..n {
                for (b, g) in &fields[a] {
                    let back = &fields[*b].iter().find(|(x, _)| *x == a).expect("window is symmetric").1;
                    let mask = forward_backward_mask(g, back, thr)?;
                    out[a].push(Neighbour { other: *b, g: g.clone(), mask });
                }
            }
            Ok(out)
        })
        .collect()
}

/// Builds the training pool of a dataset: scheme-subsampled annotated
/// frames plus, when `gt_prop` is set, their propagated copies.
fn build_pool<'a>(
    data: &'a Dataset,
    cfg: &RunConfig,
    scheme: Scheme,
    gt_prop: Option<FlowSource>,
    need_neighbours: bool,
    seed: u64,
    stats: &mut (usize, usize),
) -> Result<Pool<'a>> {
    let mut index = Vec::new();
    let mut full = Vec::new();
    let mut sources = Vec::new();
    for (s, seq) in data.train.iter().enumerate() {
        for (t, fr) in seq.frames.iter().enumerate() {
            index.push((s, t));
            full.push(data.annotations[s][t].clone());
            sources.push(LabelSource::from(fr));
        }
    }
    let anns = subsample_annotations(&full, &sources, scheme, derive_seed(seed, &[tag("scheme")]))?;
    let neighbours = if need_neighbours { neighbours(data, cfg, seed)? } else { Vec::new() };
    let mut samples = Vec::new();
    for (&(s, t), ann) in index.iter().zip(anns) {
        if ann.is_empty() {
            continue;
        }
        let frame = &data.train[s].frames[t];
        let mut extra = Vec::new();
        match gt_prop {
            None => {}
            Some(FlowSource::Real) => {
                for nb in &neighbours[s][t] {
                    let moved = propagate_gt(&ann, &nb.g, &nb.mask);
                    stats.0 += moved.clicks.len();
                    stats.1 += ann.clicks.len();
                    if !moved.is_empty() {
                        let image = data.train[s].frames[nb.other].image.clone();
                        extra.push(Sample { seq: s, frame: nb.other, image, ann: moved, warped: false });
                    }
                }
            }
            Some(FlowSource::Synthetic) => {
                for c in 0..cfg.data.synthetic_copies {
                    let ws = derive_seed(seed, &[tag("propwarp"), s as u64, t as u64, c as u64]);
                    let tr = synthetic_triplet(&frame.image, t, &cfg.data.warp, cfg.data.fb_threshold, ws)?;
                    let moved = propagate_gt(&ann, &tr.g, &tr.mask);
                    stats.0 += moved.clicks.len();
                    stats.1 += ann.clicks.len();
                    if !moved.is_empty() {
                        extra.push(Sample { seq: s, frame: t, image: tr.image_prime, ann: moved, warped: true });
                    }
                }
            }
        }
        samples.push(Sample { seq: s, frame: t, image: frame.image.clone(), ann, warped: false });
        samples.extend(extra);
    }
    Ok(Pool { data, samples, neighbours })
}

/// Loss and parameter gradient of one sample, with its equivariance pair
/// drawn from `rng_seed`.
fn sample_step(model: &Model, pool: &Pool<'_>, sample: &Sample, plan: &Plan<'_>, rng_seed: u64) -> Result<(LossTerms, Vec<f64>)> {
    let mut dparams = vec![0.0; model.num_params()];
    let pred = model.forward(&sample.image)?;
    let (mut terms, mut grad) = loss_annotations(&pred, &sample.ann, plan.weights)?;
    if let Some(source) = plan.equivariance {
        let mut rng = rng_from(rng_seed, &[tag("pair")]);
        let pair: Option<(Tensor, CorrespondenceField, ConsistencyMask)> = match source {
            FlowSource::Synthetic => {
                let tr = synthetic_triplet(
                    &sample.image,
                    sample.frame,
                    &plan.config.data.warp,
                    plan.config.data.fb_threshold,
                    rng.gen(),
                )?;
                Some((tr.image_prime, tr.g, tr.mask))
            }
            FlowSource::Real if sample.warped => None,
            FlowSource::Real => {
                let nbs = &pool.neighbours[sample.seq][sample.frame];
                if nbs.is_empty() {
                    None
                } else {
                    let nb = &nbs[rng.gen_range(0..nbs.len())];
                    let image = pool.data.train[sample.seq].frames[nb.other].image.clone();
                    Some((image, nb.g.clone(), nb.mask.clone()))
                }
            }
        };
        if let Some((image_b, g, mask)) = pair {
            let pred_b = model.forward(&image_b)?;
            let (v, ga, gb) = loss_equivariance(&pred, &pred_b, &g, &mask, &plan.selector, plan.weights.equivariance)?;
            terms.equivariance = v;
            grad.add(&ga);
            if !gb.is_zero() {
                model.backward(&pred_b, &gb, &mut dparams);
            }
        }
    }
    model.backward(&pred, &grad, &mut dparams);
    Ok((terms, dparams))
}

/// Summed gradient and mean terms of a batch. Items are spread over
/// `workers` threads but always reduced in batch order.
fn batch_step(
    model: &Model,
    pools: &[Pool<'_>],
    picks: &[(usize, usize, u64)],
    plan: &Plan<'_>,
    workers: usize,
) -> Result<(LossTerms, f64, Vec<f64>)> {
    let run = |&(p, i, seed): &(usize, usize, u64)| sample_step(model, &pools[p], &pools[p].samples[i], plan, seed);
    let results: Vec<Result<(LossTerms, Vec<f64>)>> = if workers <= 1 || picks.len() <= 1 {
        picks.iter().map(run).collect()
    } else {
        let chunk = picks.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> =
                picks.chunks(chunk).map(|c| scope.spawn(move || c.iter().map(run).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("training worker panicked")).collect()
        })
    };
    let n = picks.len() as f64;
    let mut terms = LossTerms::default();
    let mut grad = vec![0.0; model.num_params()];
    let mut prop = 0.0;
    for (r, &(p, i, _)) in results.into_iter().zip(picks) {
        let (t, g) = r?;
        terms.add(&t);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        prop += pools[p].samples[i].ann.clicks.iter().filter(|c| c.provenance == Provenance::Propagated).count() as f64;
    }
    terms.scale(1.0 / n);
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((terms, prop / n, grad))
}

fn pick_batch(pools: &[Pool<'_>], batch: usize, seed: u64) -> Vec<(usize, usize, u64)> {
    let live: Vec<usize> = (0..pools.len()).filter(|&p| !pools[p].samples.is_empty()).collect();
    (0..batch)
        .map(|b| {
            let mut rng = rng_from(seed, &[b as u64]);
            let p = live[rng.gen_range(0..live.len())];
            let i = rng.gen_range(0..pools[p].samples.len());
            (p, i, rng.gen())
        })
        .collect()
}

fn clip(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

fn eval_row(
    model: &Model,
    evaluation: Option<(&Evaluator, &[&Frame])>,
    stage: usize,
    epoch: usize,
    terms: LossTerms,
    weights: &LossWeights,
    prop_clicks: f64,
) -> Result<MetricsRow> {
    let ratios = match evaluation {
        Some((ev, frames)) if !frames.is_empty() => {
            let r = ev.evaluate(model, frames.iter().copied())?;
            [r[0], r[1], r[2]]
        }
        _ => [f64::NAN; 3],
    };
    Ok(MetricsRow { stage, epoch, split: "eval".into(), ratios, loss: terms.total(weights), terms, prop_clicks })
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut Model,
    pools: &[Pool<'_>],
    optim: &OptimConfig,
    plan: &Plan<'_>,
    stage: usize,
    seed: u64,
    evaluation: Option<(&Evaluator, &[&Frame])>,
    log: &mut Vec<MetricsRow>,
) -> Result<()> {
    if pools.iter().all(|p| p.samples.is_empty()) {
        return Err(invalid(format!("stage {stage} has no annotated training samples")));
    }
    let workers = plan.config.workers;
    let probe = pick_batch(pools, optim.batch, derive_seed(seed, &[tag("probe"), stage as u64]));
    let (t0, p0, _) = batch_step(model, pools, &probe, plan, workers)?;
    log.push(eval_row(model, evaluation, stage, 0, t0, plan.weights, p0)?);
    let mut velocity = vec![0.0; model.num_params()];
    for epoch in 1..=optim.epochs {
        let lr = optim.lr_at(epoch - 1);
        let mut epoch_terms = LossTerms::default();
        let mut epoch_prop = 0.0;
        for it in 0..optim.iters_per_epoch {
            let picks = pick_batch(pools, optim.batch, derive_seed(seed, &[stage as u64, epoch as u64, it as u64]));
            let (terms, prop, mut grad) = batch_step(model, pools, &picks, plan, workers)?;
            let total = terms.total(plan.weights);
            if !terms.is_finite() || !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss at stage {stage} epoch {epoch} iteration {it}: ce={} uv={} keypoint={} equivariance={}",
                    terms.ce, terms.uv, terms.keypoint, terms.equivariance
                )));
            }
            clip(&mut grad, optim.grad_clip);
            for ((p, v), g) in model.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = optim.momentum * *v + g;
                *p -= lr * *v;
            }
            epoch_terms.add(&terms);
            epoch_prop += prop;
        }
        let n = optim.iters_per_epoch.max(1) as f64;
        epoch_terms.scale(1.0 / n);
        log.push(eval_row(model, evaluation, stage, epoch, epoch_terms, plan.weights, epoch_prop / n)?);
    }
    Ok(())
}

/// Trains a model on `main` (Stage II), optionally after a baseline Stage I
/// on `stage1`. Held-out frames of `main` are evaluated after every epoch
/// when an evaluator is given.
pub fn train(config: &RunConfig, main: &Dataset, stage1: Option<&Dataset>, evaluator: Option<&Evaluator>) -> Result<TrainOutcome> {
    config.validate()?;
    let strategy: Strategy = config.strategy.strategy()?;
    let flow = config.strategy.flow()?;
    let mix_all = config.strategy.mix_all()?;
    if mix_all && stage1.is_none() {
        return Err(invalid("mix = \"all\" needs a Stage I dataset"));
    }
    if let Some(s1) = stage1 {
        if (s1.width(), s1.height(), s1.parts()) != (main.width(), main.height(), main.parts()) {
            return Err(invalid("Stage I and Stage II datasets differ in resolution or chart count"));
        }
    }
    let mut mcfg = config.model.clone();
    mcfg.parts = main.parts();
    let mut model = Model::new(&mcfg, derive_seed(config.seed, &[tag("model")]))?;
    let eval_frames: Vec<&Frame> = main
        .eval
        .iter()
        .flat_map(|s| s.frames.iter())
        .step_by(config.data.eval_stride)
        .collect();
    let evaluation = evaluator.map(|e| (e, eval_frames.as_slice()));
    let mut log = Vec::new();
    let mut stats = (0, 0);

    if let Some(s1) = stage1.filter(|_| config.stage1.epochs > 0) {
        let pool = build_pool(s1, config, Scheme::Full, None, false, derive_seed(config.seed, &[tag("pool1")]), &mut stats)?;
        let plan = Plan { weights: &config.loss, selector: LevelSelector::none(), equivariance: None, config };
        run_stage(&mut model, &[pool], &config.stage1, &plan, 1, derive_seed(config.seed, &[tag("stage"), 1]), evaluation, &mut log)?;
    }

    let scheme = config.data.scheme()?;
    let equiv = strategy.equivariance() && config.loss.equivariance > 0.0;
    let gt_prop = strategy.gt_prop().then_some(flow);
    let need_nb = flow == FlowSource::Real && (equiv || gt_prop.is_some());
    let mut pools = vec![build_pool(
        main,
        config,
        scheme,
        gt_prop,
        need_nb,
        derive_seed(config.seed, &[tag("pool2")]),
        &mut stats,
    )?];
    if let Some(s1) = stage1.filter(|_| mix_all) {
        pools.push(build_pool(s1, config, Scheme::Full, None, need_nb, derive_seed(config.seed, &[tag("pool1")]), &mut stats)?);
    }
    let plan = Plan {
        weights: &config.loss,
        selector: if equiv { config.loss.selector()? } else { LevelSelector::none() },
        equivariance: equiv.then_some(flow),
        config,
    };
    run_stage(&mut model, &pools, &config.optim, &plan, 2, derive_seed(config.seed, &[tag("stage"), 2]), evaluation, &mut log)?;
    Ok(TrainOutcome { model, log, propagation: gt_prop.map(|_| stats) })
}

/// Largest relative difference between the analytic gradient of `f` and
/// five-point central differences, over `count` parameters chosen with
/// `seed`. The fourth-order stencil keeps truncation error below the
/// rounding floor of a step large enough to avoid cancellation.
/// Differences are relative to `max(|analytic|, |numeric|, floor)`.
pub fn grad_check(
    params: &[f64],
    f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    eps: f64,
    count: usize,
    floor: f64,
    seed: u64,
) -> Result<f64> {
    let (_, analytic) = f(params)?;
    if analytic.len() != params.len() {
        return Err(invalid("gradient length differs from the parameter count"));
    }
    let mut rng = rng_from(seed, &[tag("gradcheck")]);
    let picks: Vec<usize> = if count >= params.len() {
        (0..params.len()).collect()
    } else {
        rand::seq::index::sample(&mut rng, params.len(), count).into_vec()
    };
    let mut worst = 0.0f64;
    let mut p = params.to_vec();
    for i in picks {
        let orig = p[i];
        let mut at = |h: f64| -> Result<f64> {
            p[i] = orig + h;
            let v = f(&p)?.0;
            p[i] = orig;
            Ok(v)
        };
        let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

//! Multi-stage encoder-decoder UV predictor with a flat parameter vector.
//!
//! Each stage runs three 3x3 conv + ELU blocks down to `H/8`, mirrors them
//! back up with nearest upsampling and additive skips, and ends in a 1x1
//! head producing `K + 1` class scores followed by `2K` chart coordinates
//! (`u` for chart `k` in channels `K + 1 + 2(k - 1)` and the next one).
//! Stage `s > 0` sees the image concatenated with the previous stage's
//! feature tensor.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ops::*;
use crate::error::{invalid, Error, Result};
use crate::rng::{normal, rng_from, tag};
use crate::tensor::Tensor;

/// Total downsampling of the encoder.
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of stacked stages `S`.
    pub stages: usize,
    /// Feature channels `F`.
    pub features: usize,
    /// Chart count `K`; filled in from the dataset when training.
    pub parts: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { stages: 2, features: 8, parts: crate::surface::DEFAULT_PARTS }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.stages) {
            return Err(invalid(format!("stages must be in 1..=8, got {}", self.stages)));
        }
        if self.features == 0 || self.features > 256 {
            return Err(invalid(format!("features must be in 1..=256, got {}", self.features)));
        }
        if self.parts == 0 || self.parts > 200 {
            return Err(invalid(format!("parts must be in 1..=200, got {}", self.parts)));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        3 * self.parts + 1
    }

    fn stage_input(&self, s: usize) -> usize {
        if s == 0 {
            1
        } else {
            1 + self.features
        }
    }
}

/// One named parameter block in the flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

const CONVS: [&str; 7] = ["c0", "c1", "c2", "c3", "d2", "d1", "d0"];

/// Deterministic layout for a configuration.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamBlock> {
    let f = cfg.features;
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        blocks.push(ParamBlock { name, shape, offset });
        offset += n;
    };
    for s in 0..cfg.stages {
        for c in CONVS {
            let cin = if c == "c0" { cfg.stage_input(s) } else { f };
            push(format!("s{s}.{c}.w"), vec![f, cin, 3, 3]);
            push(format!("s{s}.{c}.b"), vec![f]);
        }
        push(format!("s{s}.head.w"), vec![cfg.out_channels(), f]);
        push(format!("s{s}.head.b"), vec![cfg.out_channels()]);
    }
    blocks
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    layout: Vec<ParamBlock>,
}

/// Feature levels that can receive the equivariance loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    /// First convolution block (full resolution).
    First,
    /// Second encoder block (half resolution).
    Encoder,
    /// Bottleneck (`1/8` resolution).
    Bottleneck,
    /// Features preceding the output head.
    PreOutput,
    /// All head outputs.
    OutputAll,
    /// Class scores only.
    OutputSegm,
    /// Chart coordinates only.
    OutputUv,
}

impl Level {
    pub const ALL: [Level; 7] = [
        Level::First,
        Level::Encoder,
        Level::Bottleneck,
        Level::PreOutput,
        Level::OutputAll,
        Level::OutputSegm,
        Level::OutputUv,
    ];

    /// Spatial downsampling factor of the level's tensor.
    pub fn factor(&self) -> usize {
        match self {
            Level::Encoder => 2,
            Level::Bottleneck => DOWNSAMPLE,
            _ => 1,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::First => "0",
            Level::Encoder => "1",
            Level::Bottleneck => "2",
            Level::PreOutput => "3",
            Level::OutputAll => "4-all",
            Level::OutputSegm => "4-segm",
            Level::OutputUv => "4-uv",
        };
        f.write_str(s)
    }
}

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "0" => Level::First,
            "1" => Level::Encoder,
            "2" => Level::Bottleneck,
            "3" => Level::PreOutput,
            "4" | "4-all" => Level::OutputAll,
            "4-segm" => Level::OutputSegm,
            "4-uv" => Level::OutputUv,
            other => return Err(invalid(format!("unknown feature level '{other}' (0, 1, 2, 3, 4-all, 4-segm, 4-uv)"))),
        })
    }
}

/// Set of levels (applied at every stage) for the equivariance loss.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LevelSelector {
    pub levels: Vec<Level>,
}

impl LevelSelector {
    pub fn none() -> Self {
        LevelSelector { levels: Vec::new() }
    }

    pub fn single(level: Level) -> Self {
        LevelSelector { levels: vec![level] }
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

impl fmt::Display for LevelSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.levels.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.levels.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for LevelSelector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "none" {
            return Ok(LevelSelector::none());
        }
        let mut levels = s.split('+').map(Level::from_str).collect::<Result<Vec<_>>>()?;
        levels.sort();
        levels.dedup();
        Ok(LevelSelector { levels })
    }
}

/// Activations of one stage kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StageCache {
    input: Tensor,
    a0: Tensor,
    p1: Tensor,
    a1: Tensor,
    p2: Tensor,
    a2: Tensor,
    p3: Tensor,
    a3: Tensor,
    s2: Tensor,
    b2: Tensor,
    s1: Tensor,
    b1: Tensor,
    s0: Tensor,
    psi: Tensor,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    /// Head output: `K + 1` scores then `2K` chart coordinates.
    pub out: Tensor,
    cache: StageCache,
}

impl StageOutput {
    pub fn features(&self) -> &Tensor {
        &self.cache.psi
    }
}

/// Decoded per-pixel surface labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub width: usize,
    pub height: usize,
    pub k: Vec<usize>,
    pub u: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub parts: usize,
    pub stages: Vec<StageOutput>,
}

impl Prediction {
    pub fn last(&self) -> &StageOutput {
        self.stages.last().expect("at least one stage")
    }

    pub fn scores(&self, stage: usize) -> Tensor {
        self.stages[stage].out.channel_slice(0, self.parts + 1)
    }

    pub fn uv(&self, stage: usize) -> Tensor {
        self.stages[stage].out.channel_slice(self.parts + 1, 2 * self.parts)
    }

    /// Tensor of `level` at `stage`.
    pub fn level(&self, stage: usize, level: Level) -> Tensor {
        let st = &self.stages[stage];
        match level {
            Level::First => st.cache.a0.clone(),
            Level::Encoder => st.cache.a1.clone(),
            Level::Bottleneck => st.cache.a3.clone(),
            Level::PreOutput => st.cache.psi.clone(),
            Level::OutputAll => st.out.clone(),
            Level::OutputSegm => self.scores(stage),
            Level::OutputUv => self.uv(stage),
        }
    }

    /// Argmax chart per pixel (lowest index wins ties, so a flat score
    /// vector decodes to background) with that chart's clamped coordinates.
    pub fn decode(&self) -> Decoded {
        let out = &self.last().out;
        let k_all = self.parts;
        let plane = out.plane_len();
        let mut ks = Vec::with_capacity(plane);
        let mut us = Vec::with_capacity(plane);
        for i in 0..plane {
            let mut best = 0;
            let mut best_v = out.data[i];
            for c in 1..=k_all {
                let v = out.data[c * plane + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            ks.push(best);
            us.push(if best == 0 {
                [0.0, 0.0]
            } else {
                let c = k_all + 1 + 2 * (best - 1);
                [out.data[c * plane + i].clamp(0.0, 1.0), out.data[(c + 1) * plane + i].clamp(0.0, 1.0)]
            });
        }
        Decoded { width: out.width, height: out.height, k: ks, u: us }
    }
}

/// Gradients with respect to a prediction's tensors.
#[derive(Clone, Debug)]
pub struct PredictionGrad {
    pub stages: Vec<StageGrad>,
}

#[derive(Clone, Debug, Default)]
pub struct StageGrad {
    /// Gradient of the head output.
    pub out: Option<Tensor>,
    /// Extra gradients on levels 0 to 3 (first, encoder, bottleneck, pre-output).
    pub levels: [Option<Tensor>; 4],
}

impl PredictionGrad {
    pub fn new(stages: usize) -> Self {
        PredictionGrad { stages: vec![StageGrad::default(); stages] }
    }

    pub fn is_zero(&self) -> bool {
        self.stages.iter().all(|s| s.out.is_none() && s.levels.iter().all(|l| l.is_none()))
    }

    fn slot<'a>(slot: &'a mut Option<Tensor>, like: &Tensor) -> &'a mut Tensor {
        slot.get_or_insert_with(|| Tensor::zeros(like.channels, like.height, like.width))
    }

    /// Mutable head-output gradient, allocated on first use.
    pub fn out_mut(&mut self, pred: &Prediction, stage: usize) -> &mut Tensor {
        Self::slot(&mut self.stages[stage].out, &pred.stages[stage].out)
    }

    /// Adds `grad` (shaped like `pred.level(stage, level)`) into this gradient.
    pub fn add_level(&mut self, pred: &Prediction, stage: usize, level: Level, grad: &Tensor) {
        let k = pred.parts;
        let (target, offset) = match level {
            Level::First => (Self::slot(&mut self.stages[stage].levels[0], &pred.stages[stage].cache.a0), 0),
            Level::Encoder => (Self::slot(&mut self.stages[stage].levels[1], &pred.stages[stage].cache.a1), 0),
            Level::Bottleneck => (Self::slot(&mut self.stages[stage].levels[2], &pred.stages[stage].cache.a3), 0),
            Level::PreOutput => (Self::slot(&mut self.stages[stage].levels[3], &pred.stages[stage].cache.psi), 0),
            Level::OutputAll => (self.out_mut(pred, stage), 0),
            Level::OutputSegm => (self.out_mut(pred, stage), 0),
            Level::OutputUv => (self.out_mut(pred, stage), k + 1),
        };
        let plane = grad.plane_len();
        let dst = &mut target.data[offset * plane..offset * plane + grad.data.len()];
        dst.iter_mut().zip(&grad.data).for_each(|(d, g)| *d += g);
    }

    pub fn add(&mut self, other: &PredictionGrad) {
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            let pairs = std::iter::once((&mut a.out, &b.out)).chain(a.levels.iter_mut().zip(b.levels.iter()));
            for (x, y) in pairs {
                if let Some(y) = y {
                    match x {
                        Some(x) => x.add_assign(y),
                        None => *x = Some(y.clone()),
                    }
                }
            }
        }
    }
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

impl Model {
    /// He-initialised convolutions; the head starts small with chart
    /// coordinates biased to the chart centre.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        let total = layout.last().map_or(0, |b| b.offset + b.len());
        let mut params = vec![0.0; total];
        let mut rng = rng_from(seed, &[tag("init")]);
        for b in &layout {
            if b.name.ends_with(".w") {
                let fan_in: usize = b.shape[1..].iter().product();
                let std = if b.name.contains("head") {
                    0.1 / (fan_in as f64).sqrt()
                } else {
                    (2.0 / fan_in as f64).sqrt()
                };
                for p in &mut params[b.range()] {
                    *p = std * normal(&mut rng);
                }
            } else if b.name.contains("head") {
                for p in &mut params[b.offset + config.parts + 1..b.offset + b.len()] {
                    *p = 0.5;
                }
            }
        }
        // keep the stream position independent of the layout size
        let _: u64 = rng.gen();
        Ok(Model { config: config.clone(), params, layout })
    }

    /// Model with the given flat parameters (length checked against the
    /// layout of `config`).
    pub fn from_params(config: &ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        let total = layout.last().map_or(0, |b| b.offset + b.len());
        if params.len() != total {
            return Err(Error::Format(format!(
                "parameter vector has {} values but stages={} features={} parts={} needs {total}",
                params.len(),
                config.stages,
                config.features,
                config.parts
            )));
        }
        Ok(Model { config: config.clone(), params, layout })
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn block(&self, name: &str) -> &ParamBlock {
        self.layout.iter().find(|b| b.name == name).expect("layout block")
    }

    fn wb(&self, s: usize, layer: &str) -> (&[f64], &[f64]) {
        let w = self.block(&format!("s{s}.{layer}.w"));
        let b = self.block(&format!("s{s}.{layer}.b"));
        (&self.params[w.range()], &self.params[b.range()])
    }

    fn wb_ranges(&self, s: usize, layer: &str) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (self.block(&format!("s{s}.{layer}.w")).range(), self.block(&format!("s{s}.{layer}.b")).range())
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.channels != 1 {
            return Err(invalid(format!("model expects 1 input channel, got {}", image.channels)));
        }
        if image.height == 0 || image.width == 0 || image.height % DOWNSAMPLE != 0 || image.width % DOWNSAMPLE != 0 {
            return Err(invalid(format!(
                "image {}x{} must have positive dimensions divisible by {DOWNSAMPLE}",
                image.width, image.height
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor) -> Result<Prediction> {
        self.check_input(image)?;
        let f = self.config.features;
        let mut stages: Vec<StageOutput> = Vec::with_capacity(self.config.stages);
        for s in 0..self.config.stages {
            let input = match stages.last() {
                None => image.clone(),
                Some(prev) => Tensor::concat(&[image, &prev.cache.psi]),
            };
            let conv = |x: &Tensor, layer: &str| {
                let (w, b) = self.wb(s, layer);
                let mut y = conv3x3(x, w, b, f);
                elu_inplace(&mut y);
                y
            };
            let a0 = conv(&input, "c0");
            let p1 = avgpool2(&a0);
            let a1 = conv(&p1, "c1");
            let p2 = avgpool2(&a1);
            let a2 = conv(&p2, "c2");
            let p3 = avgpool2(&a2);
            let a3 = conv(&p3, "c3");
            let s2 = add(&upsample2(&a3), &a2);
            let b2 = conv(&s2, "d2");
            let s1 = add(&upsample2(&b2), &a1);
            let b1 = conv(&s1, "d1");
            let s0 = add(&upsample2(&b1), &a0);
            let psi = conv(&s0, "d0");
            let (hw, hb) = self.wb(s, "head");
            let out = conv1x1(&psi, hw, hb, self.config.out_channels());
            stages.push(StageOutput {
                out,
                cache: StageCache { input, a0, p1, a1, p2, a2, p3, a3, s2, b2, s1, b1, s0, psi },
            });
        }
        Ok(Prediction { parts: self.config.parts, stages })
    }

    /// Accumulates parameter gradients for `grad` into `dparams`.
    pub fn backward(&self, pred: &Prediction, grad: &PredictionGrad, dparams: &mut [f64]) {
        assert_eq!(dparams.len(), self.params.len());
        let mut from_next: Option<Tensor> = None;
        for s in (0..self.config.stages).rev() {
            let st = &pred.stages[s];
            let c = &st.cache;
            let g = &grad.stages[s];
            let mut d_psi = match &g.levels[3] {
                Some(t) => t.clone(),
                None => Tensor::zeros(c.psi.channels, c.psi.height, c.psi.width),
            };
            if let Some(go) = &g.out {
                let (wr, br) = self.wb_ranges(s, "head");
                let (dw, db) = split_two(dparams, wr.clone(), br);
                conv1x1_backward(&c.psi, &self.params[wr], go, dw, db, Some(&mut d_psi));
            }
            if let Some(n) = from_next.take() {
                d_psi.add_assign(&n);
            }
            let level = |i: usize, like: &Tensor| match &g.levels[i] {
                Some(t) => t.clone(),
                None => Tensor::zeros(like.channels, like.height, like.width),
            };
            let mut d_a0 = level(0, &c.a0);
            let mut d_a1 = level(1, &c.a1);
            let mut d_a2 = Tensor::zeros(c.a2.channels, c.a2.height, c.a2.width);
            let mut d_a3 = level(2, &c.a3);

            // decoder
            let d_s0 = self.conv_back(s, "d0", &c.s0, &c.psi, d_psi, dparams, true).unwrap();
            d_a0.add_assign(&d_s0);
            let mut d_b1 = Tensor::zeros(c.b1.channels, c.b1.height, c.b1.width);
            upsample2_backward(&d_s0, &mut d_b1);
            let d_s1 = self.conv_back(s, "d1", &c.s1, &c.b1, d_b1, dparams, true).unwrap();
            d_a1.add_assign(&d_s1);
            let mut d_b2 = Tensor::zeros(c.b2.channels, c.b2.height, c.b2.width);
            upsample2_backward(&d_s1, &mut d_b2);
            let d_s2 = self.conv_back(s, "d2", &c.s2, &c.b2, d_b2, dparams, true).unwrap();
            d_a2.add_assign(&d_s2);
            upsample2_backward(&d_s2, &mut d_a3);

            // encoder
            let d_p3 = self.conv_back(s, "c3", &c.p3, &c.a3, d_a3, dparams, true).unwrap();
            avgpool2_backward(&d_p3, &mut d_a2);
            let d_p2 = self.conv_back(s, "c2", &c.p2, &c.a2, d_a2, dparams, true).unwrap();
            avgpool2_backward(&d_p2, &mut d_a1);
            let d_p1 = self.conv_back(s, "c1", &c.p1, &c.a1, d_a1, dparams, true).unwrap();
            avgpool2_backward(&d_p1, &mut d_a0);
            let d_in = self.conv_back(s, "c0", &c.input, &c.a0, d_a0, dparams, s > 0);
            if let Some(d_in) = d_in {
                from_next = Some(d_in.channel_slice(1, self.config.features));
            }
        }
    }

    /// Backward through `elu(conv3x3(x))` given the block output `y`.
    #[allow(clippy::too_many_arguments)]
    fn conv_back(
        &self,
        s: usize,
        layer: &str,
        x: &Tensor,
        y: &Tensor,
        mut d_y: Tensor,
        dparams: &mut [f64],
        want_input: bool,
    ) -> Option<Tensor> {
        elu_backward_inplace(&mut d_y, y);
        let (wr, br) = self.wb_ranges(s, layer);
        let mut d_x = want_input.then(|| Tensor::zeros(x.channels, x.height, x.width));
        let (dw, db) = split_two(dparams, wr.clone(), br);
        conv3x3_backward(x, &self.params[wr], &d_y, dw, db, d_x.as_mut());
        d_x
    }
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn split_two(v: &mut [f64], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start);
    let (left, right) = v.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

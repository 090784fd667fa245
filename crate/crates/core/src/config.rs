//! Run configuration: a sectioned key = value (TOML) file in which every key
//! has a default and unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::WarpPolicy;
use crate::predictor::{LossWeights, ModelConfig};
use crate::synth::Scheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning-rate multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    /// 0 disables the decay.
    pub decay_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            epochs: 8,
            iters_per_epoch: 25,
            batch: 4,
            lr: 0.02,
            momentum: 0.9,
            lr_decay: 0.5,
            decay_every: 4,
            grad_clip: 5.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(invalid("batch must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must be in [0, 1)"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid("lr_decay must be in (0, 1]"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(invalid("grad_clip must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_every {
            0 => self.lr,
            d => self.lr * self.lr_decay.powi((epoch / d) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Annotation scheme applied to the training split, e.g. "full",
    /// "point:0.05", "image:0.05", "image_k:0.05", "seg_only",
    /// "keypoints_only", "point_kp:0.01".
    pub scheme: String,
    /// Propagation / pairing window in frames on each side.
    pub window: usize,
    /// Forward-backward threshold in pixels.
    pub fb_threshold: f64,
    /// Warped copies per annotated frame when propagating through synthetic
    /// warps.
    pub synthetic_copies: usize,
    /// Use every n-th held-out frame for evaluation.
    pub eval_stride: usize,
    pub warp: WarpPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scheme: "full".into(),
            window: 3,
            fb_threshold: crate::field::DEFAULT_FB_THRESHOLD,
            synthetic_copies: 6,
            eval_stride: 1,
            warp: WarpPolicy::default(),
        }
    }
}

impl DataConfig {
    pub fn scheme(&self) -> Result<Scheme> {
        self.scheme.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme()?;
        if self.window == 0 {
            return Err(invalid("window must be at least 1"));
        }
        if !(self.fb_threshold >= 0.0) {
            return Err(invalid("fb_threshold must be non-negative"));
        }
        if self.eval_stride == 0 {
            return Err(invalid("eval_stride must be at least 1"));
        }
        Ok(())
    }
}

/// Training strategy names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Baseline,
    GtProp,
    Equivariance,
    GtPropEquivariance,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::Baseline, Strategy::GtProp, Strategy::Equivariance, Strategy::GtPropEquivariance];

    pub fn gt_prop(&self) -> bool {
        matches!(self, Strategy::GtProp | Strategy::GtPropEquivariance)
    }

    pub fn equivariance(&self) -> bool {
        matches!(self, Strategy::Equivariance | Strategy::GtPropEquivariance)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::GtProp => "gtprop",
            Strategy::Equivariance => "equiv",
            Strategy::GtPropEquivariance => "gtprop+equiv",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown strategy '{s}' (valid: baseline, gtprop, equiv, gtprop+equiv)")))
    }
}

/// Where correspondences come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlowSource {
    /// Random warps of single images.
    Synthetic,
    /// Corrupted video flow between nearby frames.
    Real,
}

impl FlowSource {
    pub fn name(&self) -> &'static str {
        match self {
            FlowSource::Synthetic => "synthetic",
            FlowSource::Real => "real",
        }
    }
}

impl FromStr for FlowSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" | "tps" => Ok(FlowSource::Synthetic),
            "real" => Ok(FlowSource::Real),
            _ => Err(invalid(format!("unknown flow source '{s}' (valid: synthetic, real)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    /// baseline, gtprop, equiv or gtprop+equiv.
    pub name: String,
    /// synthetic or real.
    pub flow: String,
    /// Stage II data: "stage2" uses the Stage II dataset only, "all" mixes
    /// both datasets uniformly per batch element.
    pub mix: String,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig { name: "baseline".into(), flow: "real".into(), mix: "stage2".into() }
    }
}

impl StrategyConfig {
    pub fn strategy(&self) -> Result<Strategy> {
        self.name.parse()
    }

    pub fn flow(&self) -> Result<FlowSource> {
        self.flow.parse()
    }

    pub fn mix_all(&self) -> Result<bool> {
        match self.mix.as_str() {
            "stage2" => Ok(false),
            "all" => Ok(true),
            other => Err(invalid(format!("unknown mix '{other}' (valid: stage2, all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed for initialisation, sampling and warps.
    pub seed: u64,
    /// Threads used per batch; results do not depend on it.
    pub workers: usize,
    pub model: ModelConfig,
    /// Optimisation of the optional Stage I (clean data, baseline losses).
    pub stage1: OptimConfig,
    /// Optimisation of the main stage.
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub strategy: StrategyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            model: ModelConfig::default(),
            stage1: OptimConfig { epochs: 4, ..OptimConfig::default() },
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
            strategy: StrategyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("config '{}'", path.display())),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(invalid("workers must be at least 1"));
        }
        self.model.validate()?;
        self.stage1.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        self.strategy.strategy()?;
        self.strategy.flow()?;
        self.strategy.mix_all()?;
        Ok(())
    }
}

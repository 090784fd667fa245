//! Experiment grid runner: per-seed training runs with on-disk resumption,
//! grid expansion for supervision budgets, strategies and feature levels,
//! and summary tables.

mod report;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;

use crate::config::{RunConfig, Strategy};
use crate::error::{invalid, Error, Result};
use crate::predictor::{metrics_csv, parse_metrics_csv, save_checkpoint, train, Evaluator, Level};
use crate::synth::Dataset;

pub use report::{emit_report, mean_std, svg_plot, Aggregate, ReportFormat, ResultRow, ResultTable};

pub const MARKER: &str = "complete";
pub const EXTENSION: &str = "extension";

/// One grid cell: a training configuration run over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub grid: String,
    pub name: String,
    /// Row of the reference comparison this cell reproduces, or "extension".
    pub label: String,
    pub run: RunConfig,
    /// Main (Stage II) dataset directory; evaluation uses its held-out split.
    pub data: PathBuf,
    /// Stage I dataset directory for curriculum training.
    pub stage1_data: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn new(name: impl Into<String>, run: RunConfig, data: impl Into<PathBuf>, seeds: Vec<u64>) -> Self {
        ExperimentSpec {
            grid: "single".into(),
            name: name.into(),
            label: EXTENSION.into(),
            run,
            data: data.into(),
            stage1_data: None,
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid(format!("experiment '{}' has no seeds", self.name)));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(invalid(format!("experiment name '{}' is not a valid directory name", self.name)));
        }
        self.run.validate()?;
        for dir in std::iter::once(&self.data).chain(self.stage1_data.iter()) {
            if !dir.join("manifest.txt").is_file() {
                return Err(Error::NotFound(format!("dataset '{}'", dir.display())));
            }
        }
        if self.run.strategy.mix_all()? && self.stage1_data.is_none() {
            return Err(invalid(format!("experiment '{}' mixes all data but has no Stage I dataset", self.name)));
        }
        Ok(())
    }
}

/// Caches datasets and evaluators across experiments.
#[derive(Default)]
pub struct Runner {
    datasets: HashMap<PathBuf, Rc<Dataset>>,
    evaluators: HashMap<usize, Rc<Evaluator>>,
    /// Print one line per finished seed.
    pub verbose: bool,
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dataset(&mut self, dir: &Path) -> Result<Rc<Dataset>> {
        if let Some(d) = self.datasets.get(dir) {
            return Ok(d.clone());
        }
        let d = Rc::new(Dataset::load(dir)?);
        self.datasets.insert(dir.to_path_buf(), d.clone());
        Ok(d)
    }

    pub fn evaluator(&mut self, parts: usize) -> Result<Rc<Evaluator>> {
        if let Some(e) = self.evaluators.get(&parts) {
            return Ok(e.clone());
        }
        let e = Rc::new(Evaluator::new(parts)?);
        self.evaluators.insert(parts, e.clone());
        Ok(e)
    }

    /// Trains and evaluates every seed of `spec` under `cell_dir/<seed>/`.
    /// Seeds whose marker file exists are read back instead of retrained.
    pub fn run_experiment(&mut self, spec: &ExperimentSpec, cell_dir: &Path) -> Result<ResultTable> {
        spec.validate()?;
        let mut table = ResultTable::default();
        for &seed in &spec.seeds {
            let dir = cell_dir.join(seed.to_string());
            let metrics_path = dir.join("metrics.csv");
            if !dir.join(MARKER).is_file() {
                let data = self.dataset(&spec.data)?;
                let stage1 = spec.stage1_data.as_deref().map(|p| self.dataset(p)).transpose()?;
                let evaluator = self.evaluator(data.parts())?;
                let mut run = spec.run.clone();
                run.seed = seed;
                run.model.parts = data.parts();
                let outcome = train(&run, &data, stage1.as_deref(), Some(&evaluator))?;
                std::fs::create_dir_all(&dir)?;
                std::fs::write(&metrics_path, metrics_csv(&outcome.log))?;
                save_checkpoint(&outcome.model, &dir.join("checkpoint.eqmp"))?;
                std::fs::write(dir.join("config.toml"), run.emit())?;
                std::fs::write(dir.join(MARKER), "")?;
            }
            let log = parse_metrics_csv(&std::fs::read_to_string(&metrics_path)?)?;
            let last = log.last().ok_or_else(|| Error::Format(format!("'{}' is empty", metrics_path.display())))?;
            let row = ResultRow {
                grid: spec.grid.clone(),
                cell: spec.name.clone(),
                label: spec.label.clone(),
                seed,
                ratios: last.ratios,
            };
            if self.verbose {
                eprintln!(
                    "{}/{}/{}: r5={:.4} r10={:.4} r20={:.4}",
                    row.grid, row.cell, seed, row.ratios[0], row.ratios[1], row.ratios[2]
                );
            }
            table.rows.push(row);
        }
        Ok(table)
    }

    /// Runs every cell of a grid under `root/<grid>/`, writes the grid's
    /// `summary.csv` and refreshes `root/summary.csv`.
    pub fn run_grid(&mut self, kind: GridKind, base: &ExperimentSpec, root: &Path) -> Result<ResultTable> {
        let cells = ablation_grid(kind, base)?;
        let grid_dir = root.join(kind.name());
        let mut table = ResultTable::default();
        for cell in &cells {
            let t = self.run_experiment(cell, &grid_dir.join(&cell.name))?;
            table.rows.extend(t.rows);
        }
        std::fs::create_dir_all(&grid_dir)?;
        std::fs::write(grid_dir.join("summary.csv"), table.to_csv()?)?;
        refresh_summary(root)?;
        Ok(table)
    }
}

/// Rewrites `root/summary.csv` from the per-grid summaries, in grid order.
pub fn refresh_summary(root: &Path) -> Result<ResultTable> {
    let mut all = ResultTable::default();
    for kind in GridKind::ALL {
        let p = root.join(kind.name()).join("summary.csv");
        if p.is_file() {
            all.rows.extend(ResultTable::from_csv(&std::fs::read_to_string(&p)?)?.rows);
        }
    }
    if !all.rows.is_empty() {
        std::fs::write(root.join("summary.csv"), all.to_csv()?)?;
    }
    Ok(all)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GridKind {
    Budget,
    Strategy,
    Level,
}

impl GridKind {
    pub const ALL: [GridKind; 3] = [GridKind::Budget, GridKind::Strategy, GridKind::Level];

    pub fn name(&self) -> &'static str {
        match self {
            GridKind::Budget => "budget",
            GridKind::Strategy => "strategy",
            GridKind::Level => "level",
        }
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GridKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GridKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown grid kind '{s}' (valid: budget, strategy, level)")))
    }
}

pub const BUDGETS: [u32; 4] = [100, 50, 5, 1];

fn budget_label(scheme: &str, pct: u32) -> String {
    match (scheme, pct) {
        ("point", 100) => "reduced supervision: full dataset".into(),
        ("image", p) if p < 100 => format!("reduced supervision: image subsampling {p}% (k+u)"),
        ("image_k", p) if p < 100 => format!("reduced supervision: 100% k + {p}% u"),
        ("point", p) => format!("reduced supervision: point subsampling {p}% (k+u)"),
        ("point_kp", 1) => "keypoints: 1% u + keypoints".into(),
        _ => EXTENSION.into(),
    }
}

fn strategy_label(s: Strategy, flow: &str, curriculum: bool) -> String {
    let row = match s {
        Strategy::Baseline => "baseline",
        Strategy::GtProp => "GT propagation",
        Strategy::Equivariance => "equivariance",
        Strategy::GtPropEquivariance => "GT prop. + equivariance",
    };
    let stage = if curriculum { "Stage I then Stage II" } else { "Stage II only" };
    let column = if flow == "real" { "real flow" } else { "synthetic warps" };
    format!("flow strategies: {row}, {stage}, {column}")
}

/// Expands a grid around `base`. Every cell inherits the base run
/// configuration, datasets and seeds.
pub fn ablation_grid(kind: GridKind, base: &ExperimentSpec) -> Result<Vec<ExperimentSpec>> {
    let cell = |name: String, label: String, run: RunConfig, stage1: Option<PathBuf>| ExperimentSpec {
        grid: kind.name().into(),
        name,
        label,
        run,
        data: base.data.clone(),
        stage1_data: stage1,
        seeds: base.seeds.clone(),
    };
    let mut out = Vec::new();
    match kind {
        GridKind::Budget => {
            let mut baseline = base.run.clone();
            baseline.strategy.name = Strategy::Baseline.name().into();
            baseline.strategy.mix = "stage2".into();
            baseline.loss.equivariance = 0.0;
            for scheme in ["image", "image_k", "point", "point_kp"] {
                for pct in BUDGETS {
                    let mut run = baseline.clone();
                    run.data.scheme = format!("{scheme}:{}", pct as f64 / 100.0);
                    out.push(cell(format!("{scheme}-{pct}"), budget_label(scheme, pct), run, base.stage1_data.clone()));
                }
            }
            for (name, label) in [
                ("keypoints_only", "keypoints: keypoints"),
                ("seg_only", "reduced supervision: segmentation only"),
            ] {
                let mut run = baseline.clone();
                run.data.scheme = name.into();
                out.push(cell(name.into(), label.into(), run, base.stage1_data.clone()));
            }
        }
        GridKind::Strategy => {
            let stage1 = base
                .stage1_data
                .clone()
                .ok_or_else(|| invalid("the strategy grid needs a Stage I dataset for its curriculum cells"))?;
            for curriculum in [false, true] {
                for flow in ["synthetic", "real"] {
                    for s in Strategy::ALL {
                        let mut run = base.run.clone();
                        run.strategy.name = s.name().into();
                        run.strategy.flow = flow.into();
                        run.strategy.mix = "stage2".into();
                        let stage = if curriculum { "curriculum" } else { "scratch" };
                        out.push(cell(
                            format!("{}-{flow}-{stage}", s.name()),
                            strategy_label(s, flow, curriculum),
                            run,
                            curriculum.then(|| stage1.clone()),
                        ));
                    }
                }
            }
            for (s, label) in [
                (Strategy::Baseline, "flow strategies: baseline, Stage I then all data"),
                (Strategy::GtPropEquivariance, "flow strategies: GT prop. + equivariance, Stage I then all data, real flow"),
            ] {
                let mut run = base.run.clone();
                run.strategy.name = s.name().into();
                run.strategy.flow = "real".into();
                run.strategy.mix = "all".into();
                let name = if s == Strategy::Baseline { "baseline-all".into() } else { format!("{}-real-all", s.name()) };
                out.push(cell(name, label.into(), run, Some(stage1.clone())));
            }
        }
        GridKind::Level => {
            let flow = base.run.strategy.flow.clone();
            let column = if flow == "real" { "real flow" } else { "synthetic warps" };
            let levels: Vec<Option<Level>> = Level::ALL.iter().copied().map(Some).chain([None]).collect();
            for level in levels {
                let mut run = base.run.clone();
                run.strategy.name = Strategy::Equivariance.name().into();
                run.strategy.mix = "stage2".into();
                let tag = match level {
                    Some(l) => {
                        run.loss.level = l.to_string();
                        if run.loss.equivariance == 0.0 {
                            run.loss.equivariance = crate::predictor::LossWeights::default().equivariance;
                        }
                        l.to_string()
                    }
                    None => {
                        run.loss.level = "none".into();
                        run.loss.equivariance = 0.0;
                        "none".into()
                    }
                };
                out.push(cell(
                    format!("level-{tag}"),
                    format!("equivariance levels: {tag}, {column}"),
                    run,
                    base.stage1_data.clone(),
                ));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentSpec {
        let mut s = ExperimentSpec::new("base", RunConfig::default(), "/nonexistent", vec![0]);
        s.stage1_data = Some("/nonexistent1".into());
        s
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(ablation_grid(GridKind::Budget, &base()).unwrap().len(), 18);
        assert_eq!(ablation_grid(GridKind::Strategy, &base()).unwrap().len(), 18);
        assert_eq!(ablation_grid(GridKind::Level, &base()).unwrap().len(), 8);
    }

    #[test]
    fn cell_names_are_unique() {
        for kind in GridKind::ALL {
            let cells = ablation_grid(kind, &base()).unwrap();
            let mut names: Vec<_> = cells.iter().map(|c| c.name.clone()).collect();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), cells.len());
        }
    }

    #[test]
    fn full_point_budget_is_the_identity_scheme() {
        let cells = ablation_grid(GridKind::Budget, &base()).unwrap();
        let c = cells.iter().find(|c| c.name == "point-100").unwrap();
        assert_eq!(c.run.data.scheme().unwrap(), crate::synth::Scheme::PointFrac(1.0));
    }

    #[test]
    fn missing_dataset_is_not_found() {
        let e = base().validate().unwrap_err();
        assert!(matches!(e, Error::NotFound(_)), "{e}");
        assert!(e.to_string().contains("/nonexistent"));
    }
}

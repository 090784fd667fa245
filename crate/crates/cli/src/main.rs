use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eqmp_core::config::RunConfig;
use eqmp_core::error::{Error, Result};
use eqmp_core::harness::{emit_report, refresh_summary, ExperimentSpec, GridKind, ReportFormat, ResultTable, Runner};
use eqmp_core::predictor::{
    load_checkpoint, load_checkpoint_for, metrics_csv, propagate_dataset, save_checkpoint, train, Evaluator,
};
use eqmp_core::synth::{subsample_annotations, Dataset, DatasetConfig, FlowNoise, LabelSource, Scheme};

#[derive(Parser)]
#[command(name = "eqmp", version, about = "Dense body-surface correspondence experiments on a synthetic puppet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset of puppet sequences with annotations.
    GenData(GenData),
    /// Train a predictor on one dataset, or on two in a curriculum.
    Train(Train),
    /// Evaluate a checkpoint on a dataset's held-out split.
    Eval(Eval),
    /// Propagate annotations to neighbouring frames through optical flow.
    Propagate(Propagate),
    /// Run an experiment grid.
    Ablate(Ablate),
    /// Render plots and a text table from a summary CSV.
    Plot(Plot),
}

#[derive(Args)]
struct Common {
    /// Seed (defaults to $EQMP_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results are identical for any count.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var("EQMP_SEED") {
            Ok(v) => v.trim().parse().map_err(|_| Error::InvalidArgument(format!("EQMP_SEED='{v}' is not an integer"))),
            Err(_) => Ok(0),
        }
    }
}

#[derive(Args)]
struct GenData {
    /// Dataset configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Train {
    /// Run configuration (TOML); flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset; the Stage I dataset when --stage2-data is given.
    #[arg(long)]
    data: PathBuf,
    /// Stage II dataset; enables curriculum training.
    #[arg(long)]
    stage2_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// baseline, gtprop, equiv or gtprop+equiv.
    #[arg(long)]
    strategy: Option<String>,
    /// synthetic or real.
    #[arg(long)]
    flow: Option<String>,
    /// Annotation scheme, e.g. point:0.05.
    #[arg(long)]
    scheme: Option<String>,
    /// stage2 or all.
    #[arg(long)]
    mix: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Skip the per-epoch held-out evaluation.
    #[arg(long)]
    no_eval: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Run configuration whose model shape the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
    /// eval or train.
    #[arg(long, default_value = "eval")]
    split: String,
    /// Output CSV (defaults to eval.csv next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Propagate {
    #[arg(long)]
    data: PathBuf,
    /// Output dataset with the propagated clicks added.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Forward-backward threshold in pixels.
    #[arg(long, default_value_t = 5.0)]
    threshold: f64,
    /// clean or corrupted.
    #[arg(long, default_value = "corrupted")]
    flow: String,
    /// Scheme choosing the source annotations.
    #[arg(long, default_value = "full")]
    scheme: String,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Ablate {
    /// budget, strategy or level.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Main (Stage II) dataset.
    #[arg(long)]
    data: PathBuf,
    /// Stage I dataset for curriculum cells.
    #[arg(long)]
    stage1_data: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    results: PathBuf,
    /// Number of seeds per cell, starting from --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Plot {
    #[arg(long, default_value = "results/summary.csv")]
    summary: PathBuf,
    /// Output directory (defaults to the summary's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Propagate(a) => cmd_propagate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

/// Config files named on the command line must exist: a missing one is a
/// usage error rather than a missing-data error.
fn read_config_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read config '{}': {e}", path.display())))
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&read_config_text(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::InvalidArgument(format!(
                "output directory '{}' is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        if non_empty {
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.txt").is_file() {
        return Err(Error::NotFound(format!("dataset '{}'", dir.display())));
    }
    Dataset::load(dir)
}

fn gen_data(a: GenData) -> Result<()> {
    let config: DatasetConfig = match &a.config {
        Some(p) => DatasetConfig::parse(&read_config_text(p)?)?,
        None => DatasetConfig::default(),
    };
    config.validate()?;
    prepare_out_dir(&a.out, a.force)?;
    let seed = a.common.seed()?;
    let data = Dataset::generate_with_workers(&config, seed, a.common.workers.unwrap_or(1).max(1))?;
    let digest = data.save(&a.out)?;
    println!(
        "wrote {} training and {} held-out sequences to {}",
        data.train.len(),
        data.eval.len(),
        a.out.display()
    );
    println!("digest {digest}");
    Ok(())
}

fn cmd_train(a: Train) -> Result<()> {
    let mut cfg = run_config(a.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    } else if a.config.is_none() {
        cfg.seed = a.common.seed()?;
    }
    if let Some(w) = a.common.workers {
        cfg.workers = w;
    }
    if let Some(s) = a.strategy {
        cfg.strategy.name = s;
    }
    if let Some(f) = a.flow {
        cfg.strategy.flow = f;
    }
    if let Some(s) = a.scheme {
        cfg.data.scheme = s;
    }
    if let Some(m) = a.mix {
        cfg.strategy.mix = m;
    }
    if let Some(e) = a.epochs {
        cfg.optim.epochs = e;
    }
    cfg.validate()?;
    let (main_dir, stage1_dir) = match &a.stage2_data {
        Some(s2) => (s2.as_path(), Some(a.data.as_path())),
        None => (a.data.as_path(), None),
    };
    let main = load_dataset(main_dir)?;
    let stage1 = stage1_dir.map(load_dataset).transpose()?;
    cfg.model.parts = main.parts();
    let evaluator = if a.no_eval { None } else { Some(Evaluator::new(main.parts())?) };
    let outcome = train(&cfg, &main, stage1.as_ref(), evaluator.as_ref())?;
    std::fs::create_dir_all(&a.out)?;
    save_checkpoint(&outcome.model, &a.out.join("checkpoint.eqmp"))?;
    std::fs::write(a.out.join("metrics.csv"), metrics_csv(&outcome.log))?;
    std::fs::write(a.out.join("config.toml"), cfg.emit())?;
    if let Some(last) = outcome.log.last() {
        println!(
            "stage {} epoch {}: loss {:.4} (ce {:.4} uv {:.4} keypoint {:.4} equivariance {:.4}) r5 {:.4} r10 {:.4} r20 {:.4}",
            last.stage,
            last.epoch,
            last.loss,
            last.terms.ce,
            last.terms.uv,
            last.terms.keypoint,
            last.terms.equivariance,
            last.ratios[0],
            last.ratios[1],
            last.ratios[2]
        );
    }
    if let Some((kept, tried)) = outcome.propagation {
        println!("propagated {kept} of {tried} clicks");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: Eval) -> Result<()> {
    let data = load_dataset(&a.data)?;
    if !a.checkpoint.is_file() {
        return Err(Error::NotFound(format!("checkpoint '{}'", a.checkpoint.display())));
    }
    let model = match &a.config {
        Some(p) => {
            let mut cfg = run_config(Some(p))?;
            cfg.model.parts = data.parts();
            load_checkpoint_for(&a.checkpoint, &cfg.model)?
        }
        None => load_checkpoint(&a.checkpoint)?,
    };
    if model.config.parts != data.parts() {
        return Err(Error::Format(format!(
            "checkpoint predicts {} charts but the dataset has {}",
            model.config.parts,
            data.parts()
        )));
    }
    let seqs = match a.split.as_str() {
        "eval" => &data.eval,
        "train" => &data.train,
        other => return Err(Error::InvalidArgument(format!("unknown split '{other}' (valid: eval, train)"))),
    };
    let frames: Vec<_> = seqs.iter().flat_map(|s| s.frames.iter()).collect();
    let r = Evaluator::new(data.parts())?.evaluate(&model, frames.iter().copied())?;
    let out = a.out.unwrap_or_else(|| a.checkpoint.with_file_name("eval.csv"));
    let csv = format!("split,frames,r5,r10,r20\n{},{},{},{},{}\n", a.split, frames.len(), r[0], r[1], r[2]);
    std::fs::write(&out, csv)?;
    println!("r5 {:.4} r10 {:.4} r20 {:.4} ({} {} frames)", r[0], r[1], r[2], frames.len(), a.split);
    Ok(())
}

fn cmd_propagate(a: Propagate) -> Result<()> {
    if a.window < 1 {
        return Err(Error::InvalidArgument("--window must be at least 1".into()));
    }
    if !(a.threshold >= 0.0) {
        return Err(Error::InvalidArgument("--threshold must be non-negative".into()));
    }
    let mut data = load_dataset(&a.data)?;
    let noise = match a.flow.as_str() {
        "clean" => FlowNoise::none(),
        "corrupted" => data.config.noise.clone(),
        other => return Err(Error::InvalidArgument(format!("unknown flow '{other}' (valid: clean, corrupted)"))),
    };
    let scheme: Scheme = a.scheme.parse()?;
    let seed = a.common.seed()?;
    let mut full = Vec::new();
    let mut sources = Vec::new();
    for (s, seq) in data.train.iter().enumerate() {
        for (t, f) in seq.frames.iter().enumerate() {
            full.push(data.annotations[s][t].clone());
            sources.push(LabelSource::from(f));
        }
    }
    let chosen = subsample_annotations(&full, &sources, scheme, seed)?;
    let mut it = chosen.into_iter();
    let chosen: Vec<Vec<_>> = data.train.iter().map(|s| it.by_ref().take(s.frames.len()).collect()).collect();
    let rep = propagate_dataset(&data, &chosen, a.window, a.threshold, &noise, seed)?;
    prepare_out_dir(&a.out, a.force)?;
    for (s, frames) in rep.propagated.iter().enumerate() {
        for (t, moved) in frames.iter().enumerate() {
            let mut merged = chosen[s][t].clone();
            merged.clicks.extend(moved.clicks.iter().cloned());
            data.annotations[s][t] = merged;
        }
    }
    let digest = data.save(&a.out)?;
    println!(
        "source frames {}, propagated frame pairs {} ({:.2} per source frame)",
        rep.source_frames,
        rep.pairs,
        rep.pairs as f64 / rep.source_frames.max(1) as f64
    );
    println!(
        "survival {:.4} ({} of {} clicks), unoccluded survival {:.4}, chart accuracy {:.4}",
        rep.survival(),
        rep.kept,
        rep.attempted,
        rep.unoccluded_survival(),
        rep.chart_accuracy()
    );
    println!("digest {digest}");
    Ok(())
}

fn cmd_ablate(a: Ablate) -> Result<()> {
    let kind: GridKind = a.kind.parse()?;
    let mut cfg = run_config(a.config.as_deref())?;
    if let Some(w) = a.common.workers {
        cfg.workers = w;
    }
    if a.seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let first = a.common.seed()?;
    let mut base = ExperimentSpec::new("base", cfg, &a.data, (first..first + a.seeds).collect());
    base.stage1_data = a.stage1_data.clone();
    let mut runner = Runner::new();
    runner.verbose = true;
    let table = runner.run_grid(kind, &base, &a.results)?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_plot(a: Plot) -> Result<()> {
    if !a.summary.is_file() {
        // a results directory with per-grid summaries but no top-level file
        let dir = a.summary.parent().unwrap_or(Path::new("."));
        if refresh_summary(dir)?.rows.is_empty() {
            return Err(Error::NotFound(format!("summary '{}'", a.summary.display())));
        }
    }
    let table = ResultTable::from_csv(&std::fs::read_to_string(&a.summary)?)?;
    let out = a.out.unwrap_or_else(|| a.summary.parent().unwrap_or(Path::new(".")).to_path_buf());
    let mut written = emit_report(&table, ReportFormat::Svg, &out)?;
    written.extend(emit_report(&table, ReportFormat::Text, &out)?);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

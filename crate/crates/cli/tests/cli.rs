use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eqmp_core::config::RunConfig;
use eqmp_core::predictor::{load_checkpoint, parse_metrics_csv, Model};
use eqmp_core::rng::{derive_seed, tag};
use eqmp_core::synth::Dataset;

const DATA_CONFIG: &str = r#"
train_sequences = 2
eval_sequences = 1
clicks_per_frame = 30

[render]
width = 32
height = 32
frames = 5
supersample = 1
"#;

const RUN_CONFIG: &str = r#"
seed = 4

[model]
stages = 1
features = 4

[optim]
epochs = 2
iters_per_epoch = 3
batch = 2

[data]
scheme = "full"
synthetic_copies = 2
eval_stride = 2
"#;

fn eqmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqmp"))
        .args(args)
        .env_remove("EQMP_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = eqmp(args);
    assert!(
        out.status.success(),
        "eqmp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data.toml"), DATA_CONFIG).unwrap();
        std::fs::write(dir.path().join("run.toml"), RUN_CONFIG).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self, name: &str, seed: u64) -> PathBuf {
        let out = self.path(name);
        if !out.exists() {
            ok(&["gen-data", "--config", s(&self.path("data.toml")), "--out", s(&out), "--seed", &seed.to_string()]);
        }
        out
    }
}

fn digest(stdout: &str) -> String {
    stdout.lines().find_map(|l| l.strip_prefix("digest ")).expect("digest line").to_string()
}

#[test]
fn gen_data_digest_depends_only_on_the_seed() {
    let f = Fixture::new();
    let cfg = f.path("data.toml");
    let run = |name: &str, seed: &str, workers: &str| {
        digest(&ok(&["gen-data", "--config", s(&cfg), "--out", s(&f.path(name)), "--seed", seed, "--workers", workers]))
    };
    let a = run("a", "7", "1");
    assert_eq!(a, run("b", "7", "2"));
    assert_ne!(a, run("c", "8", "1"));
    let d = Dataset::load(&f.path("a")).unwrap();
    assert_eq!((d.train.len(), d.eval.len(), d.width()), (2, 1, 32));
}

#[test]
fn gen_data_refuses_a_non_empty_directory_without_force() {
    let f = Fixture::new();
    let out = f.data("d", 1);
    let again = eqmp(&["gen-data", "--config", s(&f.path("data.toml")), "--out", s(&out)]);
    assert_ne!(code(&again), 0);
    ok(&["gen-data", "--config", s(&f.path("data.toml")), "--out", s(&out), "--force", "--seed", "1"]);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let f = Fixture::new();
    let cfg = f.path("data.toml");
    let with_env = Command::new(env!("CARGO_BIN_EXE_eqmp"))
        .args(["gen-data", "--config", s(&cfg), "--out", s(&f.path("env"))])
        .env("EQMP_SEED", "7")
        .output()
        .unwrap();
    assert!(with_env.status.success());
    let flag = ok(&["gen-data", "--config", s(&cfg), "--out", s(&f.path("flag")), "--seed", "7"]);
    assert_eq!(digest(&String::from_utf8(with_env.stdout).unwrap()), digest(&flag));
}

#[test]
fn usage_errors_exit_with_code_two_on_one_line() {
    let f = Fixture::new();
    let data = f.data("d", 1);
    let missing_cfg = eqmp(&["train", "--config", s(&f.path("nope.toml")), "--data", s(&data), "--out", s(&f.path("o"))]);
    assert_eq!(code(&missing_cfg), 2);
    let err = String::from_utf8(missing_cfg.stderr).unwrap();
    assert!(err.starts_with("error[") && err.trim_end().lines().count() == 1, "{err}");

    let bad_strategy = eqmp(&["train", "--data", s(&data), "--out", s(&f.path("o")), "--strategy", "magic"]);
    assert_eq!(code(&bad_strategy), 2);
    let err = String::from_utf8(bad_strategy.stderr).unwrap();
    for name in ["baseline", "gtprop", "equiv", "gtprop+equiv"] {
        assert!(err.contains(name), "{err}");
    }

    assert_eq!(code(&eqmp(&["train", "--bogus"])), 2);
    assert_eq!(code(&eqmp(&["propagate", "--data", s(&data), "--out", s(&f.path("p")), "--window", "0"])), 2);
    assert_eq!(code(&eqmp(&["ablate", "--kind", "sideways", "--data", s(&data)])), 2);
    std::fs::write(f.path("typo.toml"), "[optim]\nepoch = 3\n").unwrap();
    assert_eq!(code(&eqmp(&["train", "--config", s(&f.path("typo.toml")), "--data", s(&data), "--out", s(&f.path("o"))])), 2);
}

#[test]
fn missing_inputs_exit_with_code_three() {
    let f = Fixture::new();
    let data = f.data("d", 1);
    let out = eqmp(&["eval", "--checkpoint", s(&f.path("none.eqmp")), "--data", s(&data)]);
    assert_eq!(code(&out), 3);
    let out = eqmp(&["train", "--data", s(&f.path("no-data")), "--out", s(&f.path("o"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn zero_epochs_leave_the_initialisation_untouched() {
    let f = Fixture::new();
    let data = f.data("d", 1);
    let out = f.path("run");
    ok(&["train", "--config", s(&f.path("run.toml")), "--data", s(&data), "--out", s(&out), "--epochs", "0"]);
    let cfg = RunConfig::load(&out.join("config.toml")).unwrap();
    let init = Model::new(&cfg.model, derive_seed(cfg.seed, &[tag("model")])).unwrap();
    assert_eq!(load_checkpoint(&out.join("checkpoint.eqmp")).unwrap().params, init.params);
    let log = parse_metrics_csv(&std::fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].epoch, 0);
}

#[test]
fn rerunning_the_resolved_config_is_byte_identical() {
    let f = Fixture::new();
    let data = f.data("d", 1);
    let first = f.path("first");
    ok(&[
        "train", "--config", s(&f.path("run.toml")), "--data", s(&data), "--out", s(&first),
        "--strategy", "gtprop+equiv", "--flow", "real", "--workers", "1",
    ]);
    let second = f.path("second");
    ok(&["train", "--config", s(&first.join("config.toml")), "--data", s(&data), "--out", s(&second), "--workers", "2"]);
    for file in ["metrics.csv", "checkpoint.eqmp"] {
        assert_eq!(std::fs::read(first.join(file)).unwrap(), std::fs::read(second.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn combined_strategy_logs_propagation_and_equivariance() {
    let f = Fixture::new();
    let data = f.data("d", 1);
    for flow in ["real", "synthetic"] {
        let out = f.path(flow);
        let stdout = ok(&[
            "train", "--config", s(&f.path("run.toml")), "--data", s(&data), "--out", s(&out),
            "--strategy", "gtprop+equiv", "--flow", flow, "--scheme", "image:0.5",
        ]);
        assert!(stdout.contains("propagated"), "{stdout}");
        let log = parse_metrics_csv(&std::fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
        let last = log.last().unwrap();
        assert!(last.prop_clicks > 0.0, "{flow}: {last:?}");
        assert!(last.terms.equivariance > 0.0, "{flow}: {last:?}");
        assert!(last.ratios.iter().all(|r| (0.0..=1.0).contains(r)));
    }
    let base = f.path("baseline");
    ok(&["train", "--config", s(&f.path("run.toml")), "--data", s(&data), "--out", s(&base)]);
    let log = parse_metrics_csv(&std::fs::read_to_string(base.join("metrics.csv")).unwrap()).unwrap();
    assert!(log.iter().all(|r| r.prop_clicks == 0.0 && r.terms.equivariance == 0.0));
}

#[test]
fn curriculum_runs_both_stages() {
    let f = Fixture::new();
    let stills = f.data("s1", 2);
    let video = f.data("s2", 3);
    let out = f.path("cur");
    std::fs::write(f.path("cur.toml"), format!("{RUN_CONFIG}\n[stage1]\nepochs = 1\niters_per_epoch = 2\nbatch = 2\n")).unwrap();
    ok(&[
        "train", "--config", s(&f.path("cur.toml")), "--data", s(&stills), "--stage2-data", s(&video),
        "--out", s(&out), "--strategy", "gtprop", "--mix", "all", "--no-eval",
    ]);
    let log = parse_metrics_csv(&std::fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    assert!(log.iter().any(|r| r.stage == 1) && log.iter().any(|r| r.stage == 2));
}

#[test]
fn eval_reports_the_checkpoint_score() {
    let f = Fixture::new();
    let data = f.data("d", 1);
    let out = f.path("run");
    ok(&["train", "--config", s(&f.path("run.toml")), "--data", s(&data), "--out", s(&out)]);
    ok(&["eval", "--checkpoint", s(&out.join("checkpoint.eqmp")), "--data", s(&data), "--config", s(&f.path("run.toml"))]);
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("split,frames,r5,r10,r20"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "eval");
    assert_eq!(row[1], "5");
    // a checkpoint of another shape is rejected
    std::fs::write(f.path("wide.toml"), "[model]\nfeatures = 6\n").unwrap();
    let wrong = eqmp(&["eval", "--checkpoint", s(&out.join("checkpoint.eqmp")), "--data", s(&data), "--config", s(&f.path("wide.toml"))]);
    assert_eq!(code(&wrong), 4);
}

#[test]
fn propagate_on_clean_flow_keeps_charts() {
    let f = Fixture::new();
    let data = f.data("d", 1);
    let out = f.path("prop");
    let stdout = ok(&["propagate", "--data", s(&data), "--out", s(&out), "--flow", "clean", "--window", "2", "--scheme", "image:0.5"]);
    let acc: f64 = stdout
        .split("chart accuracy ")
        .nth(1)
        .and_then(|r| r.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc >= 0.99, "{stdout}");
    let before = Dataset::load(&data).unwrap();
    let after = Dataset::load(&out).unwrap();
    assert_eq!(before.train, after.train);
    let propagated: usize = after
        .annotations
        .iter()
        .flatten()
        .flat_map(|a| &a.clicks)
        .filter(|c| c.provenance == eqmp_core::synth::Provenance::Propagated)
        .count();
    assert!(propagated > 0);
    // a zero threshold on corrupted flow rejects almost everything
    let strict = ok(&["propagate", "--data", s(&data), "--out", s(&f.path("strict")), "--threshold", "0"]);
    assert!(strict.contains("survival 0.0"), "{strict}");
}

#[test]
fn ablate_resumes_and_plot_draws_each_grid() {
    let f = Fixture::new();
    let data = f.data("d", 1);
    let results = f.path("results");
    std::fs::write(f.path("tiny.toml"), format!("{RUN_CONFIG}\n").replace("epochs = 2", "epochs = 1").replace("iters_per_epoch = 3", "iters_per_epoch = 1")).unwrap();
    let tiny = f.path("tiny.toml");
    let args = ["ablate", "--kind", "level", "--config", s(&tiny), "--data", s(&data), "--results", s(&results), "--seeds", "1"];
    ok(&args);
    let summary = std::fs::read_to_string(results.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);
    let marker = results.join("level").join("level-3").join("0").join("complete");
    let stamp = std::fs::metadata(&marker).unwrap().modified().unwrap();
    ok(&args);
    assert_eq!(std::fs::metadata(&marker).unwrap().modified().unwrap(), stamp);
    assert_eq!(std::fs::read_to_string(results.join("summary.csv")).unwrap(), summary);

    let stdout = ok(&["plot", "--summary", s(&results.join("summary.csv"))]);
    assert!(results.join("plots").join("level.svg").is_file(), "{stdout}");
    assert!(results.join("summary.txt").is_file());
    assert!(std::fs::read_to_string(results.join("plots").join("level.svg")).unwrap().starts_with("<svg"));
    assert_eq!(code(&eqmp(&["plot", "--summary", s(&f.path("nothing/summary.csv"))])), 3);
}

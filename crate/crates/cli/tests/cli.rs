use std::fs;
use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use socnn::config::RunConfig;
use socnn::data::{encode_cifar_records, ImageSet, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use socnn::train::{LAST_CHECKPOINT, METRICS_FILE, METRICS_HEADER};
use socnn_cli::{run, Cli, CONFIG_FILE};

fn try_cli(args: &[&str]) -> anyhow::Result<(i32, String)> {
    let cli = Cli::try_parse_from(std::iter::once("socnn").chain(args.iter().copied()))?;
    let mut out = Vec::new();
    let code = run(&cli, &mut out)?;
    Ok((code, String::from_utf8(out)?))
}

fn cli(args: &[&str]) -> String {
    let (code, out) = try_cli(args).unwrap_or_else(|e| panic!("socnn {args:?}: {e:#}"));
    assert_eq!(code, 0, "{out}");
    out
}

fn small_synth(out: &Path) -> Vec<String> {
    [
        "--set", "model=cdu-head", "--set", "synth.train=100", "--set", "synth.val=40", "--set", "synth.test=40",
        "--set", "metrics.wall_clock=false", "--out", out.to_str().unwrap(),
    ]
    .map(String::from)
    .to_vec()
}

fn with<'a>(base: &'a [String], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().map(String::as_str).chain(extra.iter().copied()).collect()
}

fn accuracy(report: &str) -> f64 {
    let line = report.lines().find(|l| l.starts_with("top-1 accuracy:")).expect("accuracy line");
    line.split_whitespace().nth(2).unwrap().trim_end_matches('%').parse::<f64>().unwrap() / 100.0
}

#[test]
fn one_epoch_run_writes_header_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_synth(dir.path());
    cli(&with(&base, &["--set", "optim.epochs=1", "train"]));
    let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "epoch,train_loss,val_loss,val_acc,lr,wall_seconds");
    assert_eq!(lines[0], METRICS_HEADER);
    assert!(lines[1].starts_with("0,"));
    assert!(lines[1].ends_with(",0.000"));

    let resolved = fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
    let cfg = RunConfig::from_text(&resolved).unwrap();
    assert_eq!(cfg.synth_train, 100);
    assert_eq!(cfg.model, "cdu-head");
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            cli(&with(&small_synth(&out), &["--set", "optim.epochs=3", "--seed", "11", "train"]));
            fs::read_to_string(out.join(METRICS_FILE)).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);

    let other = dir.path().join("c");
    cli(&with(&small_synth(&other), &["--set", "optim.epochs=3", "--seed", "12", "train"]));
    assert_ne!(fs::read_to_string(other.join(METRICS_FILE)).unwrap(), runs[0]);
}

#[test]
fn resumed_run_continues_epoch_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let straight = dir.path().join("straight");
    cli(&with(&small_synth(&straight), &["--set", "optim.epochs=4", "--set", "optim.momentum=0.9", "train"]));

    let split = dir.path().join("split");
    let base = small_synth(&split);
    cli(&with(&base, &["--set", "optim.epochs=2", "--set", "optim.momentum=0.9", "train"]));
    cli(&with(&base, &["--set", "optim.epochs=4", "--set", "optim.momentum=0.9", "train", "--resume"]));

    let csv = fs::read_to_string(split.join(METRICS_FILE)).unwrap();
    let epochs: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["0", "1", "2", "3"]);
    assert_eq!(csv, fs::read_to_string(straight.join(METRICS_FILE)).unwrap());
    assert_eq!(fs::read(split.join(LAST_CHECKPOINT)).unwrap(), fs::read(straight.join(LAST_CHECKPOINT)).unwrap());
}

#[test]
fn memorized_training_fold_evaluates_to_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join(LAST_CHECKPOINT);
    let base: Vec<String> = [
        "--set", "model=mean-pool-head", "--set", "head.hidden=32", "--set", "synth.classes=2", "--set", "synth.dim=4",
        "--set", "synth.sites=16", "--set", "synth.gain=3", "--set", "synth.antithetic=false", "--set", "synth.train=10",
        "--set", "synth.val=10", "--set", "synth.test=10", "--set", "optim.epochs=500", "--set", "optim.batch_size=10",
        "--set", "optim.initial_lr=0.5", "--set", "optim.plateau_patience=1000", "--out", dir.path().to_str().unwrap(),
    ]
    .map(String::from)
    .to_vec();
    cli(&with(&base, &["train"]));
    let report = cli(&with(&base, &["eval", "--split", "train", "--checkpoint", ck.to_str().unwrap()]));
    assert_eq!(accuracy(&report), 1.0, "{report}");
    assert!(report.contains("class  0: 100.00% (5/5)"), "{report}");
    assert!(report.contains("class  1: 100.00% (5/5)"), "{report}");
}

#[test]
fn shuffled_labels_evaluate_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let base: Vec<String> = [
        "--set", "model=cdu-head", "--set", "synth.train=400", "--set", "synth.val=100", "--set", "synth.test=800",
        "--set", "optim.epochs=25", "--out", dir.path().to_str().unwrap(),
    ]
    .map(String::from)
    .to_vec();
    cli(&with(&base, &["train"]));
    let clean = accuracy(&cli(&with(&base, &["eval"])));
    let shuffled = accuracy(&cli(&with(&base, &["eval", "--shuffle-labels"])));
    assert!(clean > 0.8, "clean accuracy {clean}");
    assert!((shuffled - 0.25).abs() < 0.06, "shuffled accuracy {shuffled}");
}

#[test]
fn shape_mismatched_checkpoint_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_synth(dir.path());
    cli(&with(&base, &["--set", "optim.epochs=1", "train"]));
    let err = try_cli(&with(&base, &["--set", "head.o2t_dims=8", "--set", "head.pv_dim=8", "eval"])).unwrap_err();
    assert!(format!("{err:#}").contains("shape"), "{err:#}");
}

#[test]
fn gradcheck_passes_and_catches_an_injected_o2t_bug() {
    let (code, out) = try_cli(&["gradcheck", "--layers-only", "--seeds", "3"]).unwrap();
    assert_eq!(code, 0, "{out}");
    assert!(!out.contains("FAIL"));

    let (code, out) = try_cli(&["gradcheck", "--layers-only", "--seeds", "3", "--inject-fault", "o2t"]).unwrap();
    assert_eq!(code, 1);
    let failing: Vec<&str> = out.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failing.len(), 1, "{out}");
    assert!(failing[0].contains("o2t"));
}

#[test]
fn binary_exits_nonzero_on_gradient_failure_and_bad_config() {
    let bin = env!("CARGO_BIN_EXE_socnn");
    let out = Process::new(bin).args(["gradcheck", "--layers-only", "--seeds", "2", "--inject-fault", "o2t"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL o2t"));

    let out = Process::new(bin).args(["count-params", "--set", "optim.inital_lr=0.1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn count_params_prints_a_per_layer_table() {
    let out = cli(&["count-params", "fitnet"]);
    assert!(out.contains("fc1"));
    assert!(out.lines().any(|l| l == "total 608102"), "{out}");
    let out = cli(&["count-params", "so-cnn-4-x2"]);
    assert!(out.lines().any(|l| l.starts_with("cdu0.pv")));
    assert!(out.lines().any(|l| l == "total 362852"), "{out}");
    assert!(try_cli(&["count-params", "so-cnn-9-same"]).is_err());
}

#[test]
fn config_file_and_overrides_are_applied_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "# tiny\nmodel = cdu-head\nseed = 4\nthreads = 2\n").unwrap();
    let cli = Cli::try_parse_from(["socnn", "--config", path.to_str().unwrap(), "--seed", "5", "--set", "threads=3", "train"]).unwrap();
    let cfg = socnn_cli::resolve_config(&cli).unwrap();
    assert_eq!((cfg.model.as_str(), cfg.seed, cfg.threads), ("cdu-head", 5, 3));

    fs::write(&path, "optim.inital_lr = 0.1\n").unwrap();
    assert!(try_cli(&["--config", path.to_str().unwrap(), "train"]).is_err());
}

#[test]
fn resolved_config_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    cli(&with(&small_synth(&first), &["--set", "optim.epochs=2", "--set", "head.o2t_dims=12", "train"]));
    let second = dir.path().join("second");
    let resolved = first.join(CONFIG_FILE);
    cli(&["--config", resolved.to_str().unwrap(), "--out", second.to_str().unwrap(), "train"]);
    assert_eq!(fs::read(first.join(METRICS_FILE)).unwrap(), fs::read(second.join(METRICS_FILE)).unwrap());
    assert_eq!(fs::read(first.join(LAST_CHECKPOINT)).unwrap(), fs::read(second.join(LAST_CHECKPOINT)).unwrap());
}

#[test]
fn gen_synth_then_train_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let out = cli(&with(&small_synth(&gen), &["gen-synth"]));
    assert!(out.contains("100 train, 40 val, 40 test"), "{out}");
    let file = gen.join(socnn_cli::DATASET_FILE);

    let from_file = dir.path().join("file");
    let kind = ["--set", "data.kind=synth-file", "--set", &format!("data.path={}", file.display())].map(String::from);
    let mut base = small_synth(&from_file);
    base.extend(kind);
    cli(&with(&base, &["--set", "optim.epochs=2", "train"]));

    let in_memory = dir.path().join("memory");
    cli(&with(&small_synth(&in_memory), &["--set", "optim.epochs=2", "train"]));
    assert_eq!(fs::read(from_file.join(METRICS_FILE)).unwrap(), fs::read(in_memory.join(METRICS_FILE)).unwrap());
}

fn fake_cifar(dir: &Path, per_file: usize) {
    let mut state = 7u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as u8
    };
    let mut batch = |name: &str| {
        let set = ImageSet {
            height: 32,
            width: 32,
            channels: 3,
            pixels: (0..per_file * 32 * 32 * 3).map(|_| next()).collect(),
            labels: (0..per_file).map(|i| i % 10).collect(),
        };
        fs::write(dir.join(name), encode_cifar_records(&set).unwrap()).unwrap();
    };
    for f in CIFAR_TRAIN_FILES {
        batch(f);
    }
    batch(CIFAR_TEST_FILE);
}

#[test]
fn cifar_format_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar");
    fs::create_dir(&data).unwrap();
    fake_cifar(&data, 6);
    let out = dir.path().join("run");
    let base: Vec<String> = [
        "--set", "data.kind=cifar", "--set", &format!("data.path={}", data.display()), "--set", "data.val_size=6",
        "--set", "data.test_limit=5", "--set", "model=so-cnn-1-same", "--set", "precision=f32", "--set", "optim.epochs=1",
        "--set", "optim.batch_size=4", "--threads", "2", "--out", out.to_str().unwrap(),
    ]
    .map(String::from)
    .to_vec();
    let log = cli(&with(&base, &["train"]));
    assert!(log.contains("24 training samples"), "{log}");
    assert_eq!(fs::read_to_string(out.join(METRICS_FILE)).unwrap().lines().count(), 2);
    let report = cli(&with(&base, &["eval"]));
    assert!(report.contains("(5 samples"), "{report}");
    assert_eq!(report.lines().filter(|l| l.trim_start().starts_with("class")).count(), 10);

    fs::remove_file(data.join(CIFAR_TEST_FILE)).unwrap();
    assert!(try_cli(&with(&base, &["train"])).is_err());
}

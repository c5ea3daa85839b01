use std::fs;
use std::path::Path;
use std::process::Command;

use shadowmask::dataset::{Sample, Split};
use shadowmask::harness::{
    ablate_on, report, run_experiment_on, OutputLock, RunConfig, RunOptions, CHECKPOINT_FILE, METRICS_FILE,
    SUMMARY_FILE,
};
use shadowmask::nn::{checkpoint, ModelConfig};
use shadowmask::synth::{generate_synthetic, synthetic_split, SynthParams};
use shadowmask::{EmbeddingVariant, Error, MapeConfig};

fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        out: out.to_path_buf(),
        save_predictions: false,
        model: ModelConfig {
            num_blocks: 1,
            num_heads: 2,
            embed_dim: 8,
            ..ModelConfig::default()
        },
        mape: MapeConfig {
            embed_dim: 8,
            ..MapeConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.train.epochs = 3;
    cfg.train.val_images = 1;
    cfg.degrade.targets = vec![1.0, 2.0];
    cfg
}

fn tiny_data() -> (Vec<Sample>, Vec<Sample>) {
    let p = SynthParams::default();
    (
        synthetic_split(3, 16, 0, Split::Train, &p).unwrap(),
        synthetic_split(2, 16, 0, Split::Test, &p).unwrap(),
    )
}

fn row_label(line: &str) -> &str {
    line.split('|').next().unwrap_or("").trim()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn reruns_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = tiny_data();
    let a = run_experiment_on(&tiny_config(&dir.path().join("a")), RunOptions::default(), &train, &test).unwrap();
    let b = run_experiment_on(&tiny_config(&dir.path().join("b")), RunOptions::default(), &train, &test).unwrap();
    assert_eq!(a, b);
    assert_eq!(read(dir.path().join("a").join(METRICS_FILE)), read(dir.path().join("b").join(METRICS_FILE)));
    assert_eq!(
        read(dir.path().join("a").join(CHECKPOINT_FILE)),
        read(dir.path().join("b").join(CHECKPOINT_FILE))
    );
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = tiny_data();
    let full = run_experiment_on(&tiny_config(&dir.path().join("full")), RunOptions::default(), &train, &test)
        .unwrap()
        .unwrap();

    let cfg = tiny_config(&dir.path().join("split"));
    let stop = RunOptions {
        resume: false,
        stop_after_epoch: Some(1),
    };
    assert!(run_experiment_on(&cfg, stop, &train, &test).unwrap().is_none());
    assert!(!cfg.out.join(SUMMARY_FILE).exists());
    assert_eq!(checkpoint::load(cfg.out.join(CHECKPOINT_FILE)).unwrap().epoch, 1);
    let resume = RunOptions {
        resume: true,
        stop_after_epoch: None,
    };
    let resumed = run_experiment_on(&cfg, resume, &train, &test).unwrap().unwrap();
    assert_eq!(resumed, full);
    assert_eq!(read(cfg.out.join(METRICS_FILE)), read(dir.path().join("full").join(METRICS_FILE)));
    assert_eq!(
        read(cfg.out.join("train_log.jsonl")),
        read(dir.path().join("full").join("train_log.jsonl"))
    );
}

#[test]
fn resume_rejects_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = tiny_data();
    let mut cfg = tiny_config(dir.path());
    let stop = RunOptions {
        resume: false,
        stop_after_epoch: Some(1),
    };
    run_experiment_on(&cfg, stop, &train, &test).unwrap();
    cfg.train.lr *= 2.0;
    let resume = RunOptions {
        resume: true,
        stop_after_epoch: None,
    };
    assert!(matches!(run_experiment_on(&cfg, resume, &train, &test), Err(Error::Config(_))));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = tiny_data();
    let cfg = tiny_config(dir.path());
    let lock = OutputLock::acquire(dir.path()).unwrap();
    let err = run_experiment_on(&cfg, RunOptions::default(), &train, &test).unwrap_err();
    assert!(matches!(err, Error::Locked(_)));
    assert!(!err.is_validation());
    drop(lock);
    assert!(run_experiment_on(&cfg, RunOptions::default(), &train, &test).is_ok());
}

#[test]
fn reports_single_runs_and_ablations() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = tiny_data();
    let cfg = tiny_config(dir.path());
    let ab = ablate_on(&cfg, RunOptions::default(), &train, &test).unwrap();
    assert_eq!(ab.runs.len(), 3);
    assert_eq!(ab.ber.len(), 2);

    let text = report(dir.path()).unwrap();
    assert_eq!(report(dir.path()).unwrap(), text);
    let lines: Vec<&str> = text.lines().collect();
    let pos = |label: &str| {
        lines
            .iter()
            .position(|l| row_label(l) == label)
            .unwrap_or_else(|| panic!("{label} row in\n{text}"))
    };
    let labels: Vec<&str> = EmbeddingVariant::ALL.iter().map(|v| v.table_label()).collect();
    assert!(pos(labels[0]) < pos(labels[1]) && pos(labels[1]) < pos(labels[2]));
    assert!(text.contains("BER target"));
    assert!(!text.contains("missing"));
    assert_eq!(fs::read_to_string(dir.path().join("report.txt")).unwrap(), text);

    let single = report(dir.path().join("mape")).unwrap();
    let mape = EmbeddingVariant::Mape.table_label();
    assert_eq!(single.lines().filter(|l| row_label(l) == mape).count(), 1);

    fs::remove_file(dir.path().join("plain_pe").join(SUMMARY_FILE)).unwrap();
    let text = report(dir.path()).unwrap();
    assert!(text.contains("missing: plain_pe/summary.json"), "{text}");
    assert!(text.lines().any(|l| row_label(l) == labels[0] && l.contains('-')));
}

#[test]
fn synthetic_generation_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = SynthParams::default();
    for name in ["a", "b"] {
        generate_synthetic(dir.path().join(name), 1, 1, 16, 7, &p).unwrap();
    }
    for sub in ["train_A", "train_B", "train_C", "test_A", "test_B", "test_C"] {
        let f = Path::new(sub).join("00000.png");
        assert_eq!(read(dir.path().join("a").join(&f)), read(dir.path().join("b").join(&f)), "{sub}");
    }
}

fn cli(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_shadowmask"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

#[test]
fn cli_workflow_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = tiny_config(&root.join("run"));
    cfg.dataset = root.join("data");
    cfg.synth.train = 3;
    cfg.synth.test = 2;
    cfg.synth.size = 16;
    fs::write(root.join("run.toml"), cfg.to_toml()).unwrap();

    assert_eq!(cli(&["--help"], root).0, 0);
    assert_eq!(cli(&["no-such-command"], root).0, 1);
    assert_eq!(cli(&["train", "--variant", "bogus"], root).0, 1);
    fs::write(root.join("bad.toml"), "unknown_key = 1\n").unwrap();
    assert_eq!(cli(&["train", "--config", "bad.toml"], root).0, 1);
    assert_eq!(cli(&["ingest-check", "missing"], root).0, 1);
    assert_eq!(cli(&["eval", "--config", "run.toml"], root).0, 2, "no checkpoint yet");

    let (code, text) = cli(&["synth", "--config", "run.toml"], root);
    assert_eq!(code, 0, "{text}");
    let (code, text) = cli(&["ingest-check", "--config", "run.toml"], root);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("train: 3 triplets") && text.contains("test: 2 triplets"), "{text}");
    assert_eq!(cli(&["degrade", "--config", "run.toml"], root).0, 1, "needs --target-ber");

    let (code, text) = cli(&["train", "--config", "run.toml"], root);
    assert_eq!(code, 0, "{text}");
    let ckpt = root.join("run").join(CHECKPOINT_FILE);
    let before = read(&ckpt);
    let (code, text) = cli(&["eval", "--config", "run.toml"], root);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains(&checkpoint::file_hash(&ckpt).unwrap()));
    let (code, text) = cli(&["eval", "--config", "run.toml", "--target-ber", "2"], root);
    assert_eq!(code, 0, "{text}");
    assert_eq!(read(&ckpt), before);
    assert_eq!(
        read(root.join("run").join("eval").join(METRICS_FILE)),
        read(root.join("run").join(METRICS_FILE))
    );

    let (code, text) = cli(&["degrade", "--config", "run.toml", "--target-ber", "1"], root);
    assert_eq!(code, 0, "{text}");
    assert!(root.join("run/degraded_ber_1/test_B/00001.png").is_file());
    assert_eq!(cli(&["degrade", "--config", "run.toml", "--target-ber", "150"], root).0, 1);

    let (code, text) = cli(&["report", "--config", "run.toml"], root);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains(EmbeddingVariant::Mape.table_label()));
}

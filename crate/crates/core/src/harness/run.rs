use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DegradeConfig, RunConfig};
use crate::dataset::{load_split, Sample, Split};
use crate::degrade::{degrade_set, DegradeSpec, ManifestEntry};
use crate::error::{Error, Result};
use crate::imaging::{save_image, save_mask, RawMask};
use crate::mape::EmbeddingVariant;
use crate::metrics::{format_csv, format_table, records_for, MetricsAccumulator, RegionMetrics};
use crate::nn::{checkpoint, EpochRecord, Model, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BER_SWEEP_FILE: &str = "ber_sweep.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
const LOCK_FILE: &str = ".lock";

/// Exclusive ownership of an output directory for the lifetime of a run.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = String::new();
    for row in rows {
        buf.push_str(&serde_json::to_string(&row).expect("rows serialize"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Final result of one training run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: EmbeddingVariant,
    pub label: String,
    pub epochs: usize,
    pub test_images: usize,
    pub checkpoint_sha256: String,
    pub metrics: RegionMetrics,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from `checkpoint.bin` when present.
    pub resume: bool,
    /// Return after this many completed epochs, leaving a resumable
    /// checkpoint behind.
    pub stop_after_epoch: Option<usize>,
}

/// Loads the train and test splits at the configured resolutions.
pub fn load_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let res = |r: Option<[usize; 2]>| r.map(|[h, w]| (h, w));
    let train = load_split(&cfg.dataset, Split::Train, res(cfg.train_resolution))?;
    let test = load_split(&cfg.dataset, Split::Test, res(cfg.eval_resolution))?;
    Ok((train, test))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let text = format!("# shadowmask {}\n{}", env!("CARGO_PKG_VERSION"), cfg.to_toml());
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn start_or_resume(cfg: &RunConfig, opts: RunOptions, train_len: usize) -> Result<Trainer> {
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    if opts.resume && ckpt.exists() {
        let t = checkpoint::load(&ckpt)?;
        if t.model.variant != cfg.variant || t.model.config != cfg.model || t.model.mape != cfg.mape || t.config != cfg.train {
            return Err(Error::Config(format!(
                "checkpoint {} was written with a different configuration",
                ckpt.display()
            )));
        }
        log::info!("resuming {} at epoch {}", cfg.out.display(), t.epoch);
        return Ok(t);
    }
    let model = Model::init(cfg.model, cfg.mape, cfg.variant, cfg.train.seed)?;
    Trainer::new(model, cfg.train, train_len)
}

/// Trains per `cfg` on the given splits, then evaluates on `test`. Returns
/// `None` when stopped early by [`RunOptions::stop_after_epoch`].
pub fn run_experiment_on(cfg: &RunConfig, opts: RunOptions, train: &[Sample], test: &[Sample]) -> Result<Option<RunSummary>> {
    cfg.validate()?;
    let _lock = OutputLock::acquire(&cfg.out)?;
    write_config(cfg, &cfg.out)?;
    let mut trainer = start_or_resume(cfg, opts, train.len())?;

    let log_path = cfg.out.join(TRAIN_LOG_FILE);
    let mut log: Vec<EpochRecord> = if trainer.epoch > 0 && log_path.exists() {
        read_jsonl(&log_path)?
    } else {
        Vec::new()
    };
    log.truncate(trainer.epoch);
    write_jsonl(&log_path, &log)?;

    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    let result = trainer.fit(train, test, |t, rec| {
        log.push(rec.clone());
        write_jsonl(&log_path, log.iter())?;
        checkpoint::save(t, &ckpt)?;
        let stop = opts.stop_after_epoch.is_some_and(|s| t.epoch >= s);
        Ok(if stop { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
    });
    if let Err(e) = result {
        if matches!(e, Error::NonFinite { .. }) {
            let dump = cfg.out.join("abort_state.bin");
            checkpoint::save(&trainer, &dump)?;
            log::error!("{e}; state written to {}", dump.display());
        }
        return Err(e);
    }
    if !trainer.is_done() {
        return Ok(None);
    }
    if trainer.epoch == 0 || !ckpt.exists() {
        checkpoint::save(&trainer, &ckpt)?;
    }
    let hash = checkpoint::file_hash(&ckpt)?;
    let metrics = evaluate_into(&trainer.model, test, None, &cfg.out, cfg.save_predictions)?;
    let summary = RunSummary {
        variant: cfg.variant,
        label: cfg.variant.table_label().to_string(),
        epochs: trainer.epoch,
        test_images: test.len(),
        checkpoint_sha256: hash,
        metrics,
    };
    write_json(&cfg.out.join(SUMMARY_FILE), &summary)?;
    let rows = [(summary.label.clone(), Some(summary.metrics))];
    write_text(&cfg.out.join("table.txt"), &format_table(&rows))?;
    write_text(&cfg.out.join("table.csv"), &format_csv(&rows))?;
    Ok(Some(summary))
}

/// Loads the dataset named in `cfg` and runs [`run_experiment_on`].
pub fn run_experiment(cfg: &RunConfig, opts: RunOptions) -> Result<Option<RunSummary>> {
    let (train, test) = load_splits(cfg)?;
    run_experiment_on(cfg, opts, &train, &test)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scores `model` on `test`, feeding `input_masks` (or the ground-truth
/// masks) to the model. Regions are always taken from the ground-truth
/// masks. Writes `metrics.jsonl` and optionally predictions into `dir`.
pub fn evaluate_into(
    model: &Model,
    test: &[Sample],
    input_masks: Option<&[RawMask]>,
    dir: &Path,
    save_predictions: bool,
) -> Result<RegionMetrics> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut acc = MetricsAccumulator::default();
    let mut records = Vec::new();
    for (i, s) in test.iter().enumerate() {
        let mask = input_masks.map_or(&s.mask, |m| &m[i]);
        let pred = model.forward(&s.shadow, mask)?;
        let m = acc.add(&pred, &s.free, &s.mask)?;
        records.extend(records_for(&s.id, &s.resolution(), &m));
        if save_predictions {
            save_image(&pred, dir.join("predictions").join(format!("{}.png", s.id)))?;
        }
    }
    write_jsonl(&dir.join(METRICS_FILE), &records)?;
    Ok(acc.summary())
}

/// Evaluates the checkpoint of a finished run without training. The
/// checkpoint hash is logged and checked to be unchanged afterwards.
pub fn eval_checkpoint(cfg: &RunConfig, target_ber: Option<f64>) -> Result<RunSummary> {
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    let before = checkpoint::file_hash(&ckpt)?;
    log::info!("evaluating {} (sha256 {before})", ckpt.display());
    let trainer = checkpoint::load(&ckpt)?;
    let (_, test) = load_splits(cfg)?;
    let (dir, masks) = match target_ber {
        Some(t) => {
            let spec = DegradeSpec {
                target_ber: t,
                seed: cfg.degrade.seed,
                band_width: cfg.degrade.band_width,
            };
            let masks: Vec<RawMask> = degrade_test_masks(&test, &spec)?.into_iter().map(|(m, _)| m).collect();
            (cfg.out.join(format!("eval_ber_{t}")), Some(masks))
        }
        None => (cfg.out.join("eval"), None),
    };
    let _lock = OutputLock::acquire(&dir)?;
    let metrics = evaluate_into(&trainer.model, &test, masks.as_deref(), &dir, cfg.save_predictions)?;
    let after = checkpoint::file_hash(&ckpt)?;
    if after != before {
        return Err(Error::Checkpoint(format!("{} changed during evaluation", ckpt.display())));
    }
    let summary = RunSummary {
        variant: trainer.model.variant,
        label: trainer.model.variant.table_label().to_string(),
        epochs: trainer.epoch,
        test_images: test.len(),
        checkpoint_sha256: before,
        metrics,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn degrade_test_masks(test: &[Sample], spec: &DegradeSpec) -> Result<Vec<(RawMask, ManifestEntry)>> {
    degrade_set(test.iter().map(|s| (s.id.as_str(), &s.mask)), spec)
}

/// Writes degraded test masks to `dir/test_B` with a manifest of achieved
/// BER per image.
pub fn degrade_split(test: &[Sample], spec: &DegradeSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let degraded = degrade_test_masks(test, spec)?;
    let mask_dir = dir.join(Split::Test.dirs()[1].as_str());
    for (m, e) in &degraded {
        save_mask(m, mask_dir.join(format!("{}.png", e.image_id)))?;
    }
    let manifest: Vec<ManifestEntry> = degraded.into_iter().map(|(_, e)| e).collect();
    write_jsonl(&dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}

/// One row of the mask-quality study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerRow {
    pub target_ber: f64,
    pub mean_achieved_ber: f64,
    pub max_deviation: f64,
    pub metrics: RegionMetrics,
}

/// Evaluates one trained model on test masks degraded to each target BER.
/// BER is enforced per image; rows report the dataset mean.
pub fn ber_sweep(model: &Model, test: &[Sample], cfg: &DegradeConfig) -> Result<Vec<BerRow>> {
    if test.is_empty() {
        return Err(Error::Dataset("test split is empty".into()));
    }
    cfg.targets
        .iter()
        .map(|&t| {
            let spec = DegradeSpec {
                target_ber: t,
                seed: cfg.seed,
                band_width: cfg.band_width,
            };
            let degraded = degrade_test_masks(test, &spec)?;
            let mut acc = MetricsAccumulator::default();
            for (s, (m, _)) in test.iter().zip(&degraded) {
                let pred = model.forward(&s.shadow, m)?;
                acc.add(&pred, &s.free, &s.mask)?;
            }
            let achieved: Vec<f64> = degraded.iter().map(|(_, e)| e.achieved_ber).collect();
            Ok(BerRow {
                target_ber: t,
                mean_achieved_ber: achieved.iter().sum::<f64>() / achieved.len() as f64,
                max_deviation: achieved.iter().fold(0.0f64, |m, a| m.max((a - t).abs())),
                metrics: acc.summary(),
            })
        })
        .collect()
}

/// Result of [`ablate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub runs: Vec<RunSummary>,
    pub ber: Vec<BerRow>,
}

/// Trains every embedding variant under `out/<variant>`, runs the BER sweep
/// on the mask-augmented model and writes the combined report.
pub fn ablate_on(cfg: &RunConfig, opts: RunOptions, train: &[Sample], test: &[Sample]) -> Result<Ablation> {
    let mut runs = Vec::new();
    for v in EmbeddingVariant::ALL {
        let vcfg = cfg.for_variant(v);
        match run_experiment_on(&vcfg, opts, train, test)? {
            Some(s) => runs.push(s),
            None => return Err(Error::Config("ablation runs cannot stop early".into())),
        }
    }
    let mape_dir = cfg.for_variant(EmbeddingVariant::Mape).out;
    let model = checkpoint::load(mape_dir.join(CHECKPOINT_FILE))?.model;
    let ber = ber_sweep(&model, test, &cfg.degrade)?;
    write_jsonl(&cfg.out.join(BER_SWEEP_FILE), &ber)?;
    super::report::report(&cfg.out)?;
    Ok(Ablation { runs, ber })
}

pub fn ablate(cfg: &RunConfig, opts: RunOptions) -> Result<Ablation> {
    let (train, test) = load_splits(cfg)?;
    ablate_on(cfg, opts, &train, &test)
}

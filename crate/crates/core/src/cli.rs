//! Command-line front end. Exit codes: 0 success, 1 validation error,
//! 2 runtime abort.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::dataset::{ingest_dataset, Split};
use crate::degrade::DegradeSpec;
use crate::error::{Error, Result};
use crate::harness::{
    ablate, degrade_split, eval_checkpoint, load_splits, report, run_experiment, RunConfig, RunOptions,
};
use crate::mape::EmbeddingVariant;
use crate::metrics::format_table;
use crate::synth::generate_synthetic;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "shadowmask", version, about = "Mask-augmented shadow removal experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults to the desk-scale profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed (and the synthetic seed for `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (dataset root for `synth`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Continue training from the last checkpoint in the output directory.
    #[arg(long, global = true)]
    pub resume: bool,
    #[arg(long, global = true)]
    pub variant: Option<EmbeddingVariant>,
    /// Target BER in percent for `degrade` and `eval`.
    #[arg(long, global = true)]
    pub target_ber: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset in the triplet layout.
    Synth,
    /// Validate a dataset directory.
    IngestCheck {
        /// Dataset root; defaults to the configured one.
        dataset: Option<PathBuf>,
    },
    /// Train and evaluate one model.
    Train,
    /// Evaluate the checkpoint of a finished run.
    Eval,
    /// Write degraded test masks with a BER manifest.
    Degrade,
    /// Train every embedding variant and run the BER sweep.
    Ablate,
    /// Print tables for a results directory.
    Report,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.synth.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    let opts = RunOptions {
        resume: cli.resume,
        stop_after_epoch: None,
    };
    match &cli.command {
        Command::Synth => {
            let root = cli.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            let s = &cfg.synth;
            generate_synthetic(&root, s.train, s.test, s.size, s.seed, &s.params)?;
            println!("wrote {} train and {} test triplets to {}", s.train, s.test, root.display());
        }
        Command::IngestCheck { dataset } => {
            let root = dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
            let triplets = ingest_dataset(&root)?;
            for t in &triplets {
                t.load()?;
            }
            for split in [Split::Train, Split::Test] {
                let n = triplets.iter().filter(|t| t.split == split).count();
                println!("{split}: {n} triplets");
            }
        }
        Command::Train => match run_experiment(&cfg, opts)? {
            Some(s) => print!("{}", format_table(&[(s.label, Some(s.metrics))])),
            None => println!("stopped early; resume with --resume"),
        },
        Command::Eval => {
            let s = eval_checkpoint(&cfg, cli.target_ber)?;
            println!("checkpoint sha256 {}", s.checkpoint_sha256);
            print!("{}", format_table(&[(s.label, Some(s.metrics))]));
        }
        Command::Degrade => {
            let target = cli
                .target_ber
                .ok_or_else(|| Error::Config("degrade needs --target-ber".into()))?;
            let spec = DegradeSpec {
                target_ber: target,
                seed: cfg.degrade.seed,
                band_width: cfg.degrade.band_width,
            };
            spec.validate()?;
            let (_, test) = load_splits(&cfg)?;
            let dir = cfg.out.join(format!("degraded_ber_{target}"));
            let manifest = degrade_split(&test, &spec, &dir)?;
            let mean = manifest.iter().map(|e| e.achieved_ber).sum::<f64>() / manifest.len().max(1) as f64;
            println!("{} masks written to {}, mean BER {mean:.4}", manifest.len(), dir.display());
        }
        Command::Ablate => {
            ablate(&cfg, opts)?;
            print!("{}", report(&cfg.out)?);
        }
        Command::Report => print!("{}", report(&cfg.out)?),
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

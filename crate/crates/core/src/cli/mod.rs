//! Command-line front end: `train | score | search | eval | fixture`.

mod commands;
mod config;
mod heatmap;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::exec;
use crate::pyramid_data::FixtureSpec;

pub use commands::{
    cmd_eval, cmd_fixture, cmd_score, cmd_search, cmd_train, mask_to_reference, ManifestEntry, Run, ScoreManifest,
    CONFIG_ECHO, HEATMAPS_DIR, MANIFEST, REPORT_CSV, REPORT_TXT, SCORES_DIR, SEARCH_REPORT, TRAIN_LOG, WEIGHTS_FILE,
};
pub use config::{parse_list, DatasetConfig, HeatmapConfig, RunConfig, ValidationConfig};
pub use heatmap::{colorize, overlay};

#[derive(Debug, Parser)]
#[command(name = "featimit", version, about = "Multi-scale teacher-student anomaly localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one student bank per pyramid scale.
    Train(Common),
    /// Write score maps and heatmaps for images (default: the test split).
    Score {
        #[command(flatten)]
        common: Common,
        /// Image files or directories of PNGs.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        /// Weight file to fuse with (default: weights.txt in the output dir, if any).
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Fit fusion weights on the validation split and prune to k blocks.
    Search(Common),
    /// Pixel AUROC and AUPRO on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `score`; otherwise maps are computed from checkpoints.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Generate the synthetic MVTec-style dataset.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n_normal: usize,
        #[arg(long, default_value_t = 8)]
        n_anomalous: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
}

/// Flags shared by the pipeline commands. Each overrides its config key.
#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Comma-separated, e.g. 128,256,384.
    #[arg(long)]
    pub scales: Option<String>,
    /// Comma-separated, e.g. 2,3,4.
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub category: Option<String>,
    /// Accept artifacts whose fingerprint differs from the config.
    #[arg(long)]
    pub force: bool,
}

impl Common {
    pub fn resolve(&self) -> Result<Run> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(s) = &self.scales {
            cfg.scales = parse_list(s)?;
        }
        if let Some(l) = &self.levels {
            cfg.levels = parse_list(l)?;
        }
        if let Some(k) = self.k {
            cfg.search.k = Some(k);
        }
        if let Some(r) = &self.data_root {
            cfg.dataset.root = r.clone();
        }
        if let Some(c) = &self.category {
            cfg.dataset.category = c.clone();
        }
        cfg.sync_seed();
        Run::new(cfg, self.force)
    }
}

pub fn run_cli(cli: Cli) -> Result<()> {
    let (common, action): (&Common, Box<dyn Fn(&Run) -> Result<()> + Send + Sync>) = match &cli.command {
        Command::Fixture {
            out,
            n_normal,
            n_anomalous,
            size,
            seed,
        } => {
            return cmd_fixture(
                out,
                &FixtureSpec {
                    n_normal: *n_normal,
                    n_anomalous: *n_anomalous,
                    size: *size,
                    seed: *seed,
                },
            )
        }
        Command::Train(c) => (c, Box::new(cmd_train)),
        Command::Search(c) => (c, Box::new(cmd_search)),
        Command::Score { common, inputs, weights } => {
            let inputs = inputs.clone();
            let weights = weights.clone();
            (common, Box::new(move |r: &Run| cmd_score(r, &inputs, weights.as_deref())))
        }
        Command::Eval { common, scores } => {
            let scores = scores.clone();
            (common, Box::new(move |r: &Run| cmd_eval(r, scores.as_deref())))
        }
    };
    let run = common.resolve()?;
    exec::with_threads(run.cfg.threads, || action(&run))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run_cli(cli)
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run_cli(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

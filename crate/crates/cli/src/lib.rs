//! The `rebirth` command line: profile, plan, slim, finetune, verify and
//! report on models stored as a JSON manifest plus a weight blob.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input error, 3 pass
//! error, 4 training error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

mod commands;
pub mod inputs;

pub use commands::{fit_file_name, FitRecord};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Verify(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Pass(String),
    #[error("{0}")]
    Train(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Input(_) => 2,
            CliError::Pass(_) => 3,
            CliError::Train(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rebirth", version, about = "Slim CNN graphs by merging non-tensor layers into convolutions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Weight blob matching the manifest.
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct PassArgs {
    /// Only rewrites that keep outputs exact (BN/scale folding, parallel-conv merging).
    #[arg(long)]
    pub exact_only: bool,
    #[arg(long)]
    pub no_fold_bn: bool,
    #[arg(long)]
    pub no_prune_lrn: bool,
    #[arg(long)]
    pub no_absorb_pool: bool,
    #[arg(long)]
    pub no_merge: bool,
    #[arg(long)]
    pub no_nontensor_branch: bool,
    #[arg(long)]
    pub no_tensor_branch: bool,
    /// Shrink 1x1 bottleneck reducers to this fraction of their channels.
    #[arg(long, default_value_t = 1.0)]
    pub bottleneck_ratio: f64,
    /// Slim tensor branches even in modules with only two of them.
    #[arg(long)]
    pub force_two_branch: bool,
    /// Grow a tensor-branch host to this many channels: `HOST=N`, repeatable.
    #[arg(long = "channels", value_name = "HOST=N")]
    pub channels: Vec<String>,
    /// Retrain consecutive branch records of a module together.
    #[arg(long)]
    pub group: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scaling {
    Curvature,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Source {
    /// Smooth synthetic images through the original network.
    Smooth,
    /// Uniform noise at each slim layer's input.
    Noise,
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// Learning-rate multiplier for regenerated layers.
    #[arg(long)]
    pub lr_mult: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub step_size: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    pub lr_scaling: Option<Scaling>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Regression pairs per regenerated layer.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = Source::Smooth)]
    pub source: Source,
    /// Draw training traffic from this input batch instead of `--source`.
    #[arg(long, value_name = "FILE")]
    pub inputs: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time every layer and report the non-tensor share.
    Profile {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for latency.txt and latency.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the slim plan without applying it.
    Plan {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        passes: PassArgs,
        /// Also write the plan to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan and apply the rewrites; writes slim.json, slim.bin and plan.txt.
    Slim {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        passes: PassArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate the slim layers a plan marked for retraining.
    Finetune {
        /// The original model.
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        slim_manifest: PathBuf,
        #[arg(long)]
        slim_weights: PathBuf,
        /// Plan written by `slim`.
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two models' outputs.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        other_manifest: PathBuf,
        #[arg(long)]
        other_weights: PathBuf,
        /// Random inputs to compare on (ignored with `--inputs`).
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, value_name = "FILE")]
        inputs: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest allowed absolute output difference.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Also pass when top-1 agreement reaches this fraction.
        #[arg(long)]
        agreement: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render fit reports and before/after latency tables.
    Report {
        /// fits.json written by `finetune`.
        #[arg(long)]
        fits: Option<PathBuf>,
        /// Model before slimming.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Model after slimming.
        #[arg(long)]
        other_manifest: Option<PathBuf>,
        #[arg(long)]
        other_weights: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a built-in reference network.
    Fixture {
        #[arg(value_enum)]
        name: FixtureName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many labelled task inputs (googlenet-mini only).
        #[arg(long)]
        task_inputs: Option<usize>,
        #[arg(long, default_value_t = 1)]
        task_seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureName {
    AlexnetMini,
    GooglenetMini,
    Pool,
    ConvBnScale,
}

impl PassArgs {
    pub fn options(&self) -> Result<rebirth_core::slim::SlimOptions, CliError> {
        let mut o = if self.exact_only {
            rebirth_core::slim::SlimOptions::exact_only()
        } else {
            rebirth_core::slim::SlimOptions::default()
        };
        o.fold_bn &= !self.no_fold_bn;
        o.prune_lrn &= !self.no_prune_lrn;
        o.absorb_pool &= !self.no_absorb_pool;
        o.merge_parallel &= !self.no_merge;
        o.slim_nontensor_branch &= !self.no_nontensor_branch;
        o.slim_tensor_branch &= !self.no_tensor_branch;
        if !(self.bottleneck_ratio > 0.0 && self.bottleneck_ratio <= 1.0) {
            return Err(CliError::Input(format!(
                "--bottleneck-ratio must be in (0, 1], got {}",
                self.bottleneck_ratio
            )));
        }
        o.bottleneck_ratio = self.bottleneck_ratio;
        o.force_two_branch = self.force_two_branch;
        o.group_branch_records = self.group;
        let mut overrides = BTreeMap::new();
        for c in &self.channels {
            let parsed = c
                .split_once('=')
                .and_then(|(host, n)| Some((host.to_string(), n.parse::<usize>().ok()?)));
            match parsed {
                Some((host, n)) if n > 0 => {
                    overrides.insert(host, n);
                }
                _ => return Err(CliError::Input(format!("--channels expects HOST=N with N > 0, got '{c}'"))),
            }
        }
        o.channel_overrides = overrides;
        Ok(o)
    }
}

impl TrainArgs {
    pub fn config(&self, seed: u64) -> rebirth_core::train::TrainConfig {
        let mut c = rebirth_core::train::TrainConfig {
            seed,
            ..Default::default()
        };
        macro_rules! set {
            ($($field:ident <- $arg:ident),*) => {$(
                if let Some(v) = self.$arg {
                    c.$field = v;
                }
            )*};
        }
        set!(base_lr <- base_lr, lr_multiplier_new_layer <- lr_mult, momentum <- momentum,
             batch_size <- batch_size, gamma <- gamma, step_size <- step_size, max_iters <- max_iters,
             weight_decay <- weight_decay, eval_every <- eval_every);
        if let Some(s) = self.lr_scaling {
            c.lr_scaling = match s {
                Scaling::Curvature => rebirth_core::train::LrScaling::Curvature,
                Scaling::Raw => rebirth_core::train::LrScaling::Raw,
            };
        }
        c
    }
}

/// Parses `args` (program name first) and runs the command, writing
/// progress to `out` and diagnostics to `err`. Returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// [`run_with`] on the process's stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

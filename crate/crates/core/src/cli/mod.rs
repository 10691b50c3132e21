//! Command-line front end: argument parsing, config resolution and
//! dispatch. Settings come from clap defaults, then the `--config` TOML
//! file, then flags given explicitly on the command line.

mod commands;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::advnet::train::{Mode, TrainConfig};
use crate::compositor::SdaConfig;
use crate::dataset::ToyDataConfig;
use crate::error::{Error, Result};
use crate::partpool::BuildConfig;

/// Paths a config file may provide instead of flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.2 }
    }
}

/// Everything a command may read, as loaded from `--config`. The top-level
/// `seed` drives every random choice, including `train.seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub toydata: ToyDataConfig,
    pub pool: BuildConfig,
    pub augment: SdaConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Parser, Debug)]
#[command(name = "semaug", version, about = "Semantic part-paste augmentation for keypoint heatmap regression")]
pub struct Cli {
    /// TOML config file; explicit flags take precedence over it [default: none].
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (each command has its own default).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Log progress at debug level.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Segment a parsing dataset into a pool of body-part patches [out: pool].
    BuildPool(BuildPoolArgs),
    /// Paste random pool parts onto a dataset split [out: augmented].
    Augment(AugmentArgs),
    /// Train the heatmap network in baseline, sda or asda mode [out: run].
    Train(TrainArgs),
    /// Report PCK of predictions or of a trained run.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic stick-figure dataset [out: toydata].
    GenToydata(GenToydataArgs),
}

#[derive(Args, Debug)]
pub struct BuildPoolArgs {
    /// Split directory with images/, labels/ and meta/.
    #[arg(long, default_value = "toydata/parsing")]
    pub dataset: PathBuf,
    /// Minimum segment area in pixels.
    #[arg(long, default_value_t = BuildConfig::default().min_area)]
    pub min_area: usize,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Split directory to augment.
    #[arg(long, default_value = "toydata/train")]
    pub dataset: PathBuf,
    /// Pool directory written by build-pool.
    #[arg(long, default_value = "pool")]
    pub pool: PathBuf,
    /// Parts pasted per image.
    #[arg(long, default_value_t = SdaConfig::default().n_parts)]
    pub n_parts: usize,
    /// Re-render the image recorded in this sidecar [default: none].
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root holding train/ and test/ splits.
    #[arg(long, default_value = "toydata")]
    pub dataset: PathBuf,
    /// Pool directory (unused in baseline mode).
    #[arg(long, default_value = "pool")]
    pub pool: PathBuf,
    #[arg(long, default_value = "baseline", value_parser = ["baseline", "sda", "asda"])]
    pub mode: String,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    /// Discriminator learning rate.
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    /// Parts per image in sda and asda modes.
    #[arg(long, default_value_t = SdaConfig::default().n_parts)]
    pub n_parts: usize,
    /// Continue from this checkpoint [default: none].
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint after every epoch, not only at milestones and the end.
    #[arg(long)]
    pub every_epoch: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Split directory with the ground truth.
    #[arg(long, default_value = "toydata/test")]
    pub dataset: PathBuf,
    /// JSON object mapping image stem to `[[x, y], ...]` [default: none].
    #[arg(long, conflicts_with = "run")]
    pub predictions: Option<PathBuf>,
    /// Training output directory whose latest checkpoint predicts, when no
    /// predictions file is given.
    #[arg(long, default_value = "run")]
    pub run: PathBuf,
    /// JSON object mapping image stem to one flag per joint [default: none].
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Also report PCK over occluded joints only.
    #[arg(long)]
    pub invisible_only: bool,
    #[arg(long, default_value_t = EvalConfig::default().threshold)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// warp, ops, end-to-end or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
}

#[derive(Args, Debug)]
pub struct GenToydataArgs {
    #[arg(long, default_value_t = ToyDataConfig::default().train)]
    pub train: usize,
    /// Size of the occluded held-out split.
    #[arg(long, default_value_t = ToyDataConfig::default().test)]
    pub test: usize,
    /// Size of the high-resolution split with parsing labels.
    #[arg(long, default_value_t = ToyDataConfig::default().parsing)]
    pub parsing: usize,
    #[arg(long, default_value_t = ToyDataConfig::default().parsing_scale)]
    pub parsing_scale: usize,
}

/// Whether `id` was typed on the command line (as opposed to a default).
fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.try_get_raw(id).is_ok() && m.value_source(id) == Some(ValueSource::CommandLine)
}

/// An explicit flag wins over the config's `[paths]` entry, which wins over
/// the flag's default.
fn pick_path(m: &ArgMatches, id: &str, flag: &Path, from_config: &Option<PathBuf>) -> PathBuf {
    match from_config {
        Some(p) if !explicit(m, id) => p.clone(),
        _ => flag.to_path_buf(),
    }
}

/// Settings after merging defaults, config file and flags.
pub struct Resolved {
    pub cfg: RunConfig,
    pub out: Option<PathBuf>,
    pub force: bool,
}

fn resolve(cli: &Cli, top: &ArgMatches) -> Result<Resolved> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let (_, sub) = top.subcommand().expect("subcommand is required");
    if explicit(top, "seed") || explicit(sub, "seed") {
        cfg.seed = cli.seed;
    }
    cfg.train.seed = cfg.seed;
    let set = |id: &str| explicit(sub, id);
    match &cli.command {
        Command::BuildPool(a) => {
            if set("min_area") {
                cfg.pool.min_area = a.min_area;
            }
        }
        Command::Augment(a) => {
            if set("n_parts") {
                cfg.augment.n_parts = a.n_parts;
            }
        }
        Command::Train(a) => {
            if set("mode") {
                cfg.train.mode = a.mode.parse::<Mode>()?;
            }
            if set("epochs") {
                cfg.train.epochs = a.epochs;
            }
            if set("batch_size") {
                cfg.train.batch_size = a.batch_size;
            }
            if set("lr") {
                cfg.train.lr = a.lr;
            }
            if set("n_parts") {
                cfg.train.sda.n_parts = a.n_parts;
            }
        }
        Command::Eval(a) => {
            if set("threshold") {
                cfg.eval.threshold = a.threshold;
            }
        }
        Command::GenToydata(a) => {
            if set("train") {
                cfg.toydata.train = a.train;
            }
            if set("test") {
                cfg.toydata.test = a.test;
            }
            if set("parsing") {
                cfg.toydata.parsing = a.parsing;
            }
            if set("parsing_scale") {
                cfg.toydata.parsing_scale = a.parsing_scale;
            }
        }
        Command::Gradcheck(_) => {}
    }
    let out = cli.out.clone().or_else(|| cfg.paths.out.clone());
    Ok(Resolved {
        cfg,
        out,
        force: cli.force,
    })
}

fn run(cli: &Cli, top: &ArgMatches) -> Result<()> {
    let r = resolve(cli, top)?;
    let paths = r.cfg.paths.clone();
    let (_, sub) = top.subcommand().expect("subcommand is required");
    let out = |default: &str| r.out.clone().unwrap_or_else(|| default.into());
    match &cli.command {
        Command::GenToydata(_) => commands::gen_toydata(&r, out("toydata")),
        Command::BuildPool(a) => {
            let dataset = pick_path(sub, "dataset", &a.dataset, &paths.dataset);
            commands::build_pool(&r, &dataset, out("pool"))
        }
        Command::Augment(a) => {
            let dataset = pick_path(sub, "dataset", &a.dataset, &paths.dataset);
            let pool = pick_path(sub, "pool", &a.pool, &paths.pool);
            match &a.replay {
                Some(sidecar) => commands::replay(&r, &dataset, &pool, sidecar, out("augmented")),
                None => commands::augment(&r, &dataset, &pool, out("augmented")),
            }
        }
        Command::Train(a) => {
            let dataset = pick_path(sub, "dataset", &a.dataset, &paths.dataset);
            let pool = pick_path(sub, "pool", &a.pool, &paths.pool);
            commands::train(&r, &dataset, &pool, out("run"), a.resume.as_deref(), a.every_epoch)
        }
        Command::Eval(a) => {
            let dataset = pick_path(sub, "dataset", &a.dataset, &paths.dataset);
            let source = match a.predictions.clone().or(paths.predictions.clone()) {
                Some(p) if !explicit(sub, "run") => commands::PredSource::File(p),
                _ => commands::PredSource::Run(pick_path(sub, "run", &a.run, &paths.run)),
            };
            let mask = a.mask.clone().or(paths.mask.clone());
            commands::eval(&r, &dataset, &source, mask.as_deref(), a.invisible_only)
        }
        Command::Gradcheck(a) => commands::gradcheck(&r, &a.suite),
    }
}

/// Parses `args`, runs the command and returns the process exit status:
/// 0 success, 1 validation error, 2 I/O error, 3 verification failure,
/// 4 internal invariant breach.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let top = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&top) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(&cli, &top) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand, ValueEnum};

use linpath::analysis::{deviation_from_line, BarrierDefinition};
use linpath::checkpoint;
use linpath::data::{load_cifar_dir, load_mnist_dir, Dataset, Split};
use linpath::experiment::{
    export, load_dir_config, run_experiment, Experiment, ExperimentConfig, ExportFormat, Results,
    CONFIG_FILE,
};
use linpath::fmt::sig9;
use linpath::interp::{evaluate_path, BnMode, DEFAULT_POINTS};
use linpath::nn::Precision;
use linpath::{Error, Result};

#[derive(Parser)]
#[command(
    name = "linpath",
    version,
    about = "Linear interpolation between network checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train seeds and write their scheduled checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Only these seeds (default: all seeds of the config).
        #[arg(long = "seed")]
        only: Vec<u64>,
    },
    /// Evaluate interpolation paths, either for trained seeds of an
    /// experiment or between two checkpoint files.
    Interpolate {
        #[command(flatten)]
        cfg: OptionalConfigArgs,
        /// Only these seeds (default: all seeds of the config).
        #[arg(long = "seed")]
        only: Vec<u64>,
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Print per-seed barrier heights of a finished experiment.
    Barriers {
        /// Finished experiment directory.
        dir: PathBuf,
        /// Barrier definition (default: the one in the experiment config).
        #[arg(long, value_enum)]
        definition: Option<DefinitionArg>,
    },
    /// Print distances of checkpoints from the line through two others.
    Deviation {
        /// Finished experiment directory.
        #[arg(required_unless_present = "start")]
        dir: Option<PathBuf>,
        /// Start of the line.
        #[arg(long, requires = "end")]
        start: Option<PathBuf>,
        /// End of the line.
        #[arg(long)]
        end: Option<PathBuf>,
        /// Checkpoints to measure (with --start/--end).
        #[arg(long = "state")]
        states: Vec<PathBuf>,
    },
    /// Full protocol: train, interpolate, export.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run seeds in parallel child processes.
        #[arg(long)]
        parallel: bool,
    },
    /// Write the tables of a finished experiment.
    Export {
        /// Finished experiment directory.
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct OptionalConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with_all = ["from", "to"])]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PairArgs {
    /// Checkpoint at the start of the path.
    #[arg(long, requires_all = ["to", "dataset"])]
    from: Option<PathBuf>,
    /// Checkpoint at the end of the path.
    #[arg(long)]
    to: Option<PathBuf>,
    /// Dataset whose test split is evaluated.
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Points on the path, endpoints included.
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    points: usize,
    /// BN statistics handling along the path.
    #[arg(long, value_enum, default_value = "interpolate")]
    bn: BnArg,
}

/// Command-line overrides of config fields.
#[derive(Args, Default)]
struct Overrides {
    /// Experiment name (subdirectory of the output directory)
    #[arg(long)]
    name: Option<String>,
    /// Root directory for experiment outputs
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Replicate seeds, comma separated
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Points per interpolation path, endpoints included
    #[arg(long)]
    n_points: Option<usize>,
    /// How BN running statistics are handled along a path
    #[arg(long, value_enum)]
    bn_mode: Option<BnArg>,
    /// Barrier definition used in the tables
    #[arg(long, value_enum)]
    barrier_definition: Option<DefinitionArg>,
    /// Batch size used for evaluation
    #[arg(long)]
    eval_batch_size: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum
    #[arg(long)]
    momentum: Option<f64>,
    /// Training batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training iterations (t_max)
    #[arg(long)]
    iterations: Option<u64>,
    /// Weight decay on weights and biases
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Dataset directory
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Compute precision
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Suppress progress messages
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BnArg {
    Interpolate,
    Recalibrate,
}

impl From<BnArg> for BnMode {
    fn from(b: BnArg) -> Self {
        match b {
            BnArg::Interpolate => BnMode::Interpolate,
            BnArg::Recalibrate => BnMode::Recalibrate,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DefinitionArg {
    MaxEndpoint,
    LinearBaseline,
}

impl From<DefinitionArg> for BarrierDefinition {
    fn from(d: DefinitionArg) -> Self {
        match d {
            DefinitionArg::MaxEndpoint => BarrierDefinition::MaxEndpoint,
            DefinitionArg::LinearBaseline => BarrierDefinition::LinearBaseline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Cifar10,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl Overrides {
    fn apply(&self, c: &mut ExperimentConfig) -> Result<()> {
        if let Some(v) = &self.name {
            c.name = v.clone();
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = &self.seeds {
            c.seeds = v.clone();
        }
        if let Some(v) = self.n_points {
            c.n_points = v;
        }
        if let Some(v) = self.bn_mode {
            c.bn_mode = v.into();
        }
        if let Some(v) = self.barrier_definition {
            c.barrier_definition = v.into();
        }
        if let Some(v) = self.eval_batch_size {
            c.eval_batch_size = v;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.momentum {
            c.train.momentum = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.iterations {
            c.train.iterations = v;
        }
        if let Some(v) = self.weight_decay {
            c.train.weight_decay = v;
        }
        if let Some(v) = &self.data_dir {
            c.data.dir = Some(v.clone());
        }
        if let Some(v) = self.precision {
            c.model.precision = match v {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        c.validate()
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(path)?;
    overrides.apply(&mut c)?;
    Ok(c)
}

fn open(path: &Path, overrides: &Overrides) -> Result<Experiment> {
    let mut exp = Experiment::open(load_config(path, overrides)?)?;
    exp.quiet = overrides.quiet;
    Ok(exp)
}

fn select(all: &[u64], only: &[u64]) -> Result<Vec<u64>> {
    if let Some(s) = only.iter().find(|s| !all.contains(s)) {
        return Err(Error::InvalidArgument(format!(
            "seed {s} is not part of the experiment"
        )));
    }
    Ok(if only.is_empty() {
        all.to_vec()
    } else {
        only.to_vec()
    })
}

fn load_split(kind: DatasetArg, dir: Option<&Path>, split: Split) -> Result<Dataset> {
    match kind {
        DatasetArg::Mnist => load_mnist_dir(dir.unwrap_or(Path::new("data/mnist")), split),
        DatasetArg::Cifar10 => {
            load_cifar_dir(dir.unwrap_or(Path::new("data/cifar-10-batches-bin")), split)
        }
    }
}

/// Runs one subcommand for every seed in a child process and waits for all.
fn fan_out(exp: &Experiment, subcommand: &str) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let config = exp.dir.join(CONFIG_FILE);
    let mut children = Vec::new();
    for &seed in &exp.config.seeds {
        let mut cmd = Command::new(&exe);
        cmd.arg(subcommand)
            .arg("--config")
            .arg(&config)
            .arg("--output-dir")
            .arg(&exp.config.output_dir)
            .arg("--seed")
            .arg(seed.to_string());
        if exp.quiet {
            cmd.arg("--quiet");
        }
        let child = cmd.spawn().map_err(|e| Error::io(&exe, e))?;
        children.push((seed, child));
    }
    let mut failed = Vec::new();
    for (seed, mut child) in children {
        let status = child.wait().map_err(|e| Error::io(&exe, e))?;
        if !status.success() {
            failed.push(seed.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Experiment(format!(
            "{subcommand} failed for seeds {}",
            failed.join(", ")
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train { cfg, only } => {
            let exp = open(&cfg.config, &cfg.overrides)?;
            for seed in select(&exp.config.seeds, &only)? {
                exp.train_seed(seed)?;
            }
        }
        Cmd::Interpolate { cfg, only, pair } => match (cfg.config, pair.from) {
            (Some(config), _) => {
                let exp = open(&config, &cfg.overrides)?;
                for seed in select(&exp.config.seeds, &only)? {
                    exp.paths_seed(seed)?;
                }
            }
            (None, Some(from)) => {
                let to = pair.to.expect("clap requires --to");
                let kind = pair.dataset.expect("clap requires --dataset");
                let a = checkpoint::load(&from)?;
                let b = checkpoint::load(&to)?;
                let test = load_split(kind, cfg.overrides.data_dir.as_deref(), Split::Test)?;
                let mode: BnMode = pair.bn.into();
                let calib = match mode {
                    BnMode::Recalibrate => Some(load_split(
                        kind,
                        cfg.overrides.data_dir.as_deref(),
                        Split::Train,
                    )?),
                    BnMode::Interpolate => None,
                };
                let curve = evaluate_path(&a, &b, pair.points, &test, mode, calib.as_ref())?;
                println!("t_from,t_to,seed,bn_mode,alpha,loss_nats,error");
                for (alpha, p) in curve.alphas.iter().zip(&curve.points) {
                    println!(
                        "{},{},{},{},{},{},{}",
                        curve.t_from,
                        curve.t_to,
                        curve.seed,
                        curve.bn_mode,
                        sig9(*alpha),
                        sig9(p.loss),
                        sig9(p.error)
                    );
                }
            }
            (None, None) => {
                return Err(Error::InvalidArgument(
                    "give --config or --from/--to/--dataset".into(),
                ));
            }
        },
        Cmd::Barriers { dir, definition } => {
            let r = Results::load(&dir)?;
            let def = definition
                .map(Into::into)
                .unwrap_or(r.config.barrier_definition);
            print!("{}", r.seed_barriers_csv(&r.barrier_report(def)?));
        }
        Cmd::Deviation {
            dir,
            start,
            end,
            states,
        } => match (dir, start) {
            (Some(dir), None) => print!("{}", Results::load(&dir)?.deviation_csv()),
            (_, Some(start)) => {
                let s = checkpoint::load(&start)?;
                let e = checkpoint::load(end.as_deref().expect("clap requires --end"))?;
                println!("t,distance,coordinate");
                for p in &states {
                    let c = checkpoint::load(p)?;
                    let (d, coord) = deviation_from_line(&c.params, &s.params, &e.params)?;
                    println!("{},{},{}", c.iteration, sig9(d), sig9(coord));
                }
            }
            (None, None) => unreachable!("clap requires a directory or --start"),
        },
        Cmd::Run { cfg, parallel } => {
            if parallel {
                let exp = open(&cfg.config, &cfg.overrides)?;
                fan_out(&exp, "train")?;
                fan_out(&exp, "interpolate")?;
                export(&exp.dir, ExportFormat::Csv)?;
                println!("{}", exp.dir.display());
            } else {
                let dir = run_experiment(
                    load_config(&cfg.config, &cfg.overrides)?,
                    cfg.overrides.quiet,
                )?;
                println!("{}", dir.display());
            }
        }
        Cmd::Export { dir, format } => {
            load_dir_config(&dir)?;
            let format = match format {
                FormatArg::Csv => ExportFormat::Csv,
                FormatArg::Json => ExportFormat::Json,
            };
            for p in export(&dir, format)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn error_line(kind: &str, message: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "error": { "kind": kind, "message": message } })
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            error_line("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}

//! Per-seed stages: training (checkpoints) and path evaluation.
//!
//! Layout under `<output_dir>/<name>/`:
//!
//! ```text
//! config.toml                 effective configuration
//! <seed>/run_manifest.json    spec, hyperparameters, schedule, dataset digest
//! <seed>/ckpt_<t>.lpck        checkpoints
//! <seed>/paths.tsv            curve from every t to the final state
//! <seed>/deviation.tsv        distance of every checkpoint from the 0 -> final line
//! ```
//!
//! Stages that are already complete are skipped. A directory produced by a
//! different configuration is an error, never overwritten.

use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{path_deviation, Deviation};
use crate::checkpoint::{self, checkpoint_path, encode, replicate_dir, RunManifest};
use crate::error::{Error, Result};
use crate::interp::{alpha_grid, lerp_grid, BnMode, DatasetObjective, PathCurve, PathObjective};
use crate::nn::{EvalResult, ModelSpec};
use crate::trainer::{checkpoint_schedule, train, Checkpoint, CHECKPOINT_SCHEMA_VERSION};

use super::config::{Datasets, ExperimentConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const PATHS_FILE: &str = "paths.tsv";
pub const DEVIATION_FILE: &str = "deviation.tsv";
const DIGEST_PREFIX: &str = "# config_digest: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Completed,
    Skipped,
}

/// An experiment bound to its directory with data loaded.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub digest: String,
    pub spec: ModelSpec,
    pub data: Datasets,
    pub quiet: bool,
}

impl Experiment {
    /// Validates the config, loads the data (failing before any work if it
    /// is missing) and claims the experiment directory.
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = config.load_data()?;
        let spec = config.model_spec(data.train.shape(), data.train.classes())?;
        if data.test.shape() != data.train.shape() || data.test.classes() != data.train.classes() {
            return Err(Error::Config(
                "train and test splits have different shapes".into(),
            ));
        }
        let dir = config.experiment_dir();
        let digest = config.digest();
        claim_dir(&dir, &config, &digest)?;
        Ok(Experiment {
            config,
            dir,
            digest,
            spec,
            data,
            quiet: false,
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.config.name, msg.as_ref());
        }
    }

    pub fn schedule(&self) -> Result<Vec<u64>> {
        checkpoint_schedule(self.config.train.iterations)
    }

    fn expected_manifest(&self, seed: u64) -> Result<RunManifest> {
        Ok(RunManifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            experiment: self.config.name.clone(),
            seed,
            spec: self.spec.canonical(),
            spec_hash: format!("{:016x}", self.spec.hash()),
            hyperparams: self.config.train.clone(),
            schedule: self.schedule()?,
            dataset_digest: format!("{:08x}", self.data.train.digest()),
            completed: Vec::new(),
        })
    }

    /// Trains one replicate and writes its checkpoints, resuming a partial
    /// run by recomputing and verifying files already on disk.
    pub fn train_seed(&self, seed: u64) -> Result<Stage> {
        let root = &self.config.output_dir;
        let name = &self.config.name;
        let mpath = RunManifest::path(root, name, seed);
        let mut manifest = self.expected_manifest(seed)?;
        if mpath.exists() {
            let existing = RunManifest::load(&mpath)?;
            let mut cmp = existing.clone();
            cmp.completed.clear();
            if cmp != manifest {
                return Err(Error::Experiment(format!(
                    "{} was written for a different configuration",
                    mpath.display()
                )));
            }
            let all_present = existing
                .schedule
                .iter()
                .all(|&t| checkpoint_path(root, name, seed, t).exists());
            if existing.is_complete() && all_present {
                self.log(format!(
                    "seed {seed}: checkpoints complete, skipping training"
                ));
                return Ok(Stage::Skipped);
            }
            manifest.completed = existing.completed;
        } else if has_checkpoints(&replicate_dir(root, name, seed))? {
            return Err(Error::Experiment(format!(
                "{} holds checkpoints but no run manifest; refusing to overwrite",
                replicate_dir(root, name, seed).display()
            )));
        }
        manifest.save(&mpath)?;
        self.log(format!(
            "seed {seed}: training {} iterations",
            self.config.train.iterations
        ));
        let done = manifest.completed.clone();
        train(
            &self.spec,
            &self.config.train,
            &self.data.train,
            seed,
            |ckpt| {
                let path = checkpoint_path(root, name, seed, ckpt.iteration);
                let bytes = encode(&ckpt);
                if done.contains(&ckpt.iteration) && path.exists() {
                    let on_disk = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    if on_disk != bytes {
                        return Err(Error::Experiment(format!(
                            "{} differs from its recomputation",
                            path.display()
                        )));
                    }
                } else {
                    checkpoint::write_atomic(&path, &bytes)?;
                }
                if !manifest.completed.contains(&ckpt.iteration) {
                    manifest.completed.push(ckpt.iteration);
                    manifest.completed.sort_unstable();
                }
                manifest.save(&mpath)
            },
        )?;
        Ok(Stage::Completed)
    }

    /// Loads every scheduled checkpoint of a trained replicate.
    pub fn checkpoints(&self, seed: u64) -> Result<Vec<Checkpoint>> {
        let root = &self.config.output_dir;
        let name = &self.config.name;
        let mpath = RunManifest::path(root, name, seed);
        if !mpath.exists() {
            return Err(Error::Experiment(format!(
                "seed {seed} has not been trained"
            )));
        }
        let m = RunManifest::load(&mpath)?;
        if !m.is_complete() {
            return Err(Error::Experiment(format!(
                "seed {seed} training is incomplete"
            )));
        }
        m.schedule
            .iter()
            .map(|&t| {
                let c = checkpoint::load(checkpoint_path(root, name, seed, t))?;
                if c.iteration != t || c.seed != seed || c.spec != self.spec {
                    return Err(Error::Integrity(format!(
                        "checkpoint for t={t} seed={seed} has wrong identity"
                    )));
                }
                Ok(c)
            })
            .collect()
    }

    /// Evaluates the path from every scheduled checkpoint to the final one,
    /// plus the trajectory deviation, and writes the per-seed tables.
    pub fn paths_seed(&self, seed: u64) -> Result<Stage> {
        let sdir = replicate_dir(&self.config.output_dir, &self.config.name, seed);
        let ppath = sdir.join(PATHS_FILE);
        let dpath = sdir.join(DEVIATION_FILE);
        if ppath.exists() && dpath.exists() {
            check_digest(&ppath, &self.digest)?;
            check_digest(&dpath, &self.digest)?;
            self.log(format!("seed {seed}: paths complete, skipping"));
            return Ok(Stage::Skipped);
        }
        let ckpts = self.checkpoints(seed)?;
        let last = ckpts.last().expect("schedule is non-empty");
        let mut objective = DatasetObjective::new(&self.spec, &self.data.test);
        objective.batch_size = self.config.eval_batch_size;
        if self.config.bn_mode == BnMode::Recalibrate {
            objective = objective.recalibrating(&self.data.train);
        }
        let n = self.config.n_points;
        let final_eval = objective.evaluate(&last.params)?;
        let mut curves = Vec::with_capacity(ckpts.len());
        for c in &ckpts {
            self.log(format!(
                "seed {seed}: path from t={} ({n} points)",
                c.iteration
            ));
            curves.push(path_to_final(&objective, c, last, final_eval, n)?);
        }
        let deviation = path_deviation(&ckpts, &ckpts[0], last)?;
        checkpoint::write_atomic(&dpath, write_deviation(&self.digest, &deviation).as_bytes())?;
        checkpoint::write_atomic(&ppath, write_paths(&self.digest, &curves).as_bytes())?;
        Ok(Stage::Completed)
    }
}

/// Same values as `evaluate_path(c, last, n, ..)`, reusing the already
/// computed final evaluation for the `alpha = 1` point and for the
/// constant self-path.
pub fn path_to_final(
    objective: &dyn PathObjective,
    c: &Checkpoint,
    last: &Checkpoint,
    final_eval: EvalResult,
    n: usize,
) -> Result<PathCurve> {
    if c.iteration == last.iteration && c.params.bit_eq(&last.params) {
        return PathCurve::constant(final_eval, n, c.iteration, c.seed, objective.bn_mode()).map(
            |mut p| {
                p.t_to = last.iteration;
                p
            },
        );
    }
    let mut points = Vec::with_capacity(n);
    for i in 0..n - 1 {
        points.push(objective.evaluate(&lerp_grid(&c.params, &last.params, i, n)?)?);
    }
    points.push(final_eval);
    Ok(PathCurve {
        alphas: alpha_grid(n)?,
        points,
        t_from: c.iteration,
        t_to: last.iteration,
        seed: c.seed,
        bn_mode: objective.bn_mode(),
    })
}

fn has_checkpoints(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.path()
            .extension()
            .is_some_and(|x| x == checkpoint::EXTENSION)
        {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Writes `config.toml` into a fresh directory or checks that an existing
/// one describes the same experiment.
fn claim_dir(dir: &Path, config: &ExperimentConfig, digest: &str) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    if path.exists() {
        let existing = ExperimentConfig::load(&path)?;
        if existing.digest() != digest {
            return Err(Error::Experiment(format!(
                "{} holds a different configuration (digest {}); choose another name or output_dir",
                dir.display(),
                existing.digest()
            )));
        }
        return Ok(());
    }
    if dir.exists()
        && fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some()
    {
        return Err(Error::Experiment(format!(
            "{} is not empty and has no {CONFIG_FILE}; refusing to overwrite",
            dir.display()
        )));
    }
    checkpoint::write_atomic(&path, config.to_toml().as_bytes())
}

/// Loads the configuration stored in an experiment directory.
pub fn load_dir_config(dir: &Path) -> Result<ExperimentConfig> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::Experiment(format!(
            "{} is not an experiment directory",
            dir.display()
        )));
    }
    ExperimentConfig::load(&path)
}

fn check_digest(path: &Path, digest: &str) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let found = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix(DIGEST_PREFIX));
    if found != Some(digest) {
        return Err(Error::Experiment(format!(
            "{} belongs to a different configuration",
            path.display()
        )));
    }
    Ok(())
}

// Per-seed tables use Rust's shortest round-trip float formatting so they
// can be read back exactly.

fn write_paths(digest: &str, curves: &[PathCurve]) -> String {
    let mut s =
        format!("{DIGEST_PREFIX}{digest}\nt_from\tt_to\tbn_mode\talpha\tloss\terror\texamples\n");
    for c in curves {
        for (a, p) in c.alphas.iter().zip(&c.points) {
            s.push_str(&format!(
                "{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{}\n",
                c.t_from, c.t_to, c.bn_mode, a, p.loss, p.error, p.examples
            ));
        }
    }
    s
}

fn write_deviation(digest: &str, dev: &[Deviation]) -> String {
    let mut s = format!("{DIGEST_PREFIX}{digest}\nt\tdistance\tcoordinate\n");
    for d in dev {
        s.push_str(&format!("{}\t{:?}\t{:?}\n", d.t, d.distance, d.coordinate));
    }
    s
}

fn table_rows<'a>(
    path: &Path,
    text: &'a str,
    digest: &str,
    cols: usize,
) -> Result<Vec<Vec<&'a str>>> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next().and_then(|l| l.strip_prefix(DIGEST_PREFIX)) != Some(digest) {
        return Err(Error::Experiment(format!(
            "{} belongs to a different configuration",
            path.display()
        )));
    }
    lines.next().ok_or_else(|| bad("missing header".into()))?;
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != cols {
                return Err(bad(format!("expected {cols} columns, got {}", f.len())));
            }
            Ok(f)
        })
        .collect()
}

fn num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: format!("bad number {s:?}"),
    })
}

/// Reads the curves of one seed back, in schedule order.
pub fn read_paths(path: &Path, digest: &str, seed: u64) -> Result<Vec<PathCurve>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut curves: Vec<PathCurve> = Vec::new();
    for f in table_rows(path, &text, digest, 7)? {
        let t_from: u64 = num(path, f[0])?;
        let t_to: u64 = num(path, f[1])?;
        let bn_mode = BnMode::parse(f[2]).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad bn mode {:?}", f[2]),
        })?;
        let point = EvalResult {
            loss: num(path, f[4])?,
            error: num(path, f[5])?,
            examples: num(path, f[6])?,
        };
        let alpha: f64 = num(path, f[3])?;
        match curves.last_mut() {
            Some(c) if c.t_from == t_from => {
                c.alphas.push(alpha);
                c.points.push(point);
            }
            _ => curves.push(PathCurve {
                alphas: vec![alpha],
                points: vec![point],
                t_from,
                t_to,
                seed,
                bn_mode,
            }),
        }
    }
    Ok(curves)
}

pub fn read_deviation(path: &Path, digest: &str) -> Result<Vec<Deviation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    table_rows(path, &text, digest, 3)?
        .into_iter()
        .map(|f| {
            Ok(Deviation {
                t: num(path, f[0])?,
                distance: num(path, f[1])?,
                coordinate: num(path, f[2])?,
            })
        })
        .collect()
}

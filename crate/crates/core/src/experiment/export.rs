//! Top-level tables and metadata built from the per-seed results.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::analysis::{
    aggregate_replicates, AggregateCurve, BarrierDefinition, BarrierReport, Deviation,
};
use crate::checkpoint::{self, RunManifest};
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::interp::PathCurve;
use crate::nn::{ModelSpec, BN_EPS, BN_MOMENTUM};

use super::config::ExperimentConfig;
use super::runner::{load_dir_config, read_deviation, read_paths, DEVIATION_FILE, PATHS_FILE};

pub const CURVES_CSV: &str = "curves.csv";
pub const BARRIERS_CSV: &str = "barriers.csv";
pub const SEED_BARRIERS_CSV: &str = "seed_barriers.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const DEVIATION_CSV: &str = "deviation.csv";
pub const METADATA_JSON: &str = "metadata.json";
pub const RESULTS_JSON: &str = "results.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(ExportFormat::Csv),
            "json" => Some(ExportFormat::Json),
            _ => None,
        }
    }
}

/// Everything stored for a finished experiment.
#[derive(Debug, Clone)]
pub struct Results {
    pub config: ExperimentConfig,
    pub digest: String,
    pub spec: ModelSpec,
    pub model: String,
    pub dataset: String,
    pub schedule: Vec<u64>,
    pub dataset_digest: String,
    /// Seed order of the config; curves in schedule order.
    pub curves: Vec<(u64, Vec<PathCurve>)>,
    pub deviation: Vec<(u64, Vec<Deviation>)>,
}

impl Results {
    /// Reads a finished experiment directory. An incomplete one is an error
    /// listing the missing stages.
    pub fn load(dir: &Path) -> Result<Self> {
        let config = load_dir_config(dir)?;
        let digest = config.digest();
        let mut missing = Vec::new();
        let mut manifests = Vec::new();
        for &seed in &config.seeds {
            let sdir = dir.join(seed.to_string());
            let mpath = sdir.join(checkpoint::RUN_MANIFEST_FILE);
            let m = if mpath.exists() {
                Some(RunManifest::load(&mpath)?)
            } else {
                None
            };
            if !m.as_ref().is_some_and(RunManifest::is_complete) {
                missing.push(format!("seed {seed}: train"));
            }
            if !sdir.join(PATHS_FILE).exists() || !sdir.join(DEVIATION_FILE).exists() {
                missing.push(format!("seed {seed}: interpolate"));
            }
            manifests.push(m);
        }
        if !missing.is_empty() {
            return Err(Error::Experiment(format!(
                "incomplete experiment, missing stages: {}",
                missing.join(", ")
            )));
        }
        let first = manifests[0].clone().expect("checked above");
        let spec = ModelSpec::parse_canonical(&first.spec)?;
        let mut curves = Vec::new();
        let mut deviation = Vec::new();
        for &seed in &config.seeds {
            let sdir = dir.join(seed.to_string());
            let c = read_paths(&sdir.join(PATHS_FILE), &digest, seed)?;
            let got: Vec<u64> = c.iter().map(|c| c.t_from).collect();
            if got != first.schedule || c.iter().any(|c| c.len() != config.n_points) {
                return Err(Error::Experiment(format!(
                    "seed {seed}: path table does not cover the schedule"
                )));
            }
            curves.push((seed, c));
            deviation.push((seed, read_deviation(&sdir.join(DEVIATION_FILE), &digest)?));
        }
        Ok(Results {
            model: ExperimentConfig::model_label(&spec),
            dataset: config.data.kind.name().to_string(),
            schedule: first.schedule.clone(),
            dataset_digest: first.dataset_digest.clone(),
            config,
            digest,
            spec,
            curves,
            deviation,
        })
    }

    pub fn all_curves(&self) -> Vec<PathCurve> {
        self.curves
            .iter()
            .flat_map(|(_, c)| c.iter().cloned())
            .collect()
    }

    pub fn barrier_report(&self, definition: BarrierDefinition) -> Result<BarrierReport> {
        BarrierReport::from_curves(&self.all_curves(), definition)
    }

    /// Replicate mean and spread of the curve from each scheduled t.
    pub fn aggregates(&self) -> Result<Vec<AggregateCurve>> {
        (0..self.schedule.len())
            .map(|k| {
                let at_t: Vec<PathCurve> = self.curves.iter().map(|(_, c)| c[k].clone()).collect();
                aggregate_replicates(&at_t)
            })
            .collect()
    }

    fn header(&self) -> String {
        format!("# config_digest: {}\n", self.digest)
    }

    pub fn curves_csv(&self) -> String {
        let mut s = self.header();
        s.push_str("model,dataset,seed,t_from,alpha,loss_nats,error\n");
        for (seed, curves) in &self.curves {
            for c in curves {
                for (a, p) in c.alphas.iter().zip(&c.points) {
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        self.model,
                        self.dataset,
                        seed,
                        c.t_from,
                        sig9(*a),
                        sig9(p.loss),
                        sig9(p.error)
                    ));
                }
            }
        }
        s
    }

    pub fn barriers_csv(&self, report: &BarrierReport) -> String {
        let mut s = self.header();
        s.push_str(
            "model,dataset,t_from,loss_barrier_mean,loss_barrier_std,error_barrier_mean,error_barrier_std,definition_tag\n",
        );
        for r in &report.summary {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.model,
                self.dataset,
                r.t,
                sig9(r.loss_mean),
                sig9(r.loss_std),
                sig9(r.error_mean),
                sig9(r.error_std),
                report.definition
            ));
        }
        s
    }

    pub fn seed_barriers_csv(&self, report: &BarrierReport) -> String {
        let mut s = self.header();
        s.push_str("model,dataset,seed,t_from,loss_barrier,error_barrier,monotonicity_violation,definition_tag\n");
        for r in &report.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.model,
                self.dataset,
                r.seed,
                r.t,
                sig9(r.loss),
                sig9(r.error),
                sig9(r.monotonicity),
                report.definition
            ));
        }
        s
    }

    pub fn aggregate_csv(&self, aggregates: &[AggregateCurve]) -> String {
        let mut s = self.header();
        s.push_str(
            "model,dataset,t_from,alpha,replicates,loss_mean,loss_std,error_mean,error_std\n",
        );
        for a in aggregates {
            for i in 0..a.alphas.len() {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    self.model,
                    self.dataset,
                    a.t_from,
                    sig9(a.alphas[i]),
                    a.replicates,
                    sig9(a.loss_mean[i]),
                    sig9(a.loss_std[i]),
                    sig9(a.error_mean[i]),
                    sig9(a.error_std[i])
                ));
            }
        }
        s
    }

    pub fn deviation_csv(&self) -> String {
        let mut s = self.header();
        s.push_str("model,dataset,seed,t,distance,coordinate\n");
        for (seed, devs) in &self.deviation {
            for d in devs {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    self.model,
                    self.dataset,
                    seed,
                    d.t,
                    sig9(d.distance),
                    sig9(d.coordinate)
                ));
            }
        }
        s
    }

    /// Every convention that affects how the numbers should be read.
    pub fn metadata(&self) -> serde_json::Value {
        let c = &self.config;
        json!({
            "config_digest": self.digest,
            "experiment": c.name,
            "model": self.model,
            "model_spec": self.spec.canonical(),
            "spec_hash": format!("{:016x}", self.spec.hash()),
            "dataset": self.dataset,
            "train_dataset_digest": self.dataset_digest,
            "evaluation_split": "test",
            "seeds": c.seeds,
            "replicates": c.seeds.len(),
            "schedule": self.schedule,
            "n_points": c.n_points,
            "alpha_grid": "uniform i/(n_points-1), both endpoints included",
            "bn_mode": c.bn_mode,
            "bn_eps": BN_EPS,
            "bn_momentum": BN_MOMENTUM,
            "barrier_definition": c.barrier_definition,
            "std": "population",
            "loss_unit": "nats",
            "error_unit": "fraction",
            "argmax_ties": "lowest index",
            "interpolated_state": "weights, biases, BN gains/shifts and running statistics; optimizer velocity excluded",
            "lr_convention": "lr(t) is the rate applied by the update from iteration t to t+1",
            "batching": "per-epoch seeded permutation, trailing partial batch dropped",
            "initialization": "He normal, std sqrt(2/fan_in); zero biases",
            "precision": self.spec.precision,
            "hyperparams": c.train,
            "tool_version": env!("CARGO_PKG_VERSION"),
        })
    }

    pub fn results_json(&self, report: &BarrierReport, aggregates: &[AggregateCurve]) -> String {
        #[derive(Serialize)]
        struct CurveOut<'a> {
            seed: u64,
            t_from: u64,
            t_to: u64,
            bn_mode: crate::interp::BnMode,
            alphas: &'a [f64],
            loss: Vec<f64>,
            error: Vec<f64>,
        }
        let curves: Vec<CurveOut> = self
            .curves
            .iter()
            .flat_map(|(_, cs)| cs.iter())
            .map(|c| CurveOut {
                seed: c.seed,
                t_from: c.t_from,
                t_to: c.t_to,
                bn_mode: c.bn_mode,
                alphas: &c.alphas,
                loss: c.losses(),
                error: c.errors(),
            })
            .collect();
        let aggregate: Vec<_> = aggregates
            .iter()
            .map(|a| {
                json!({
                    "t_from": a.t_from,
                    "t_to": a.t_to,
                    "replicates": a.replicates,
                    "alphas": a.alphas,
                    "loss_mean": a.loss_mean,
                    "loss_std": a.loss_std,
                    "error_mean": a.error_mean,
                    "error_std": a.error_std,
                })
            })
            .collect();
        let deviation: Vec<_> = self
            .deviation
            .iter()
            .map(|(seed, d)| json!({"seed": seed, "points": d}))
            .collect();
        let v = json!({
            "metadata": self.metadata(),
            "replicates": self.config.seeds.len(),
            "curves": curves,
            "barriers": report,
            "aggregate": aggregate,
            "deviation": deviation,
        });
        let mut s = serde_json::to_string_pretty(&v).expect("json serializes");
        s.push('\n');
        s
    }
}

/// Writes the top-level tables of an experiment directory and returns the
/// paths written.
pub fn export(dir: &Path, format: ExportFormat) -> Result<Vec<PathBuf>> {
    let r = Results::load(dir)?;
    let report = r.barrier_report(r.config.barrier_definition)?;
    let aggregates = r.aggregates()?;
    let files: Vec<(&str, String)> = match format {
        ExportFormat::Csv => {
            let mut meta = serde_json::to_string_pretty(&r.metadata()).expect("json serializes");
            meta.push('\n');
            vec![
                (CURVES_CSV, r.curves_csv()),
                (BARRIERS_CSV, r.barriers_csv(&report)),
                (SEED_BARRIERS_CSV, r.seed_barriers_csv(&report)),
                (AGGREGATE_CSV, r.aggregate_csv(&aggregates)),
                (DEVIATION_CSV, r.deviation_csv()),
                (METADATA_JSON, meta),
            ]
        }
        ExportFormat::Json => vec![(RESULTS_JSON, r.results_json(&report, &aggregates))],
    };
    let mut written = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        checkpoint::write_atomic(&p, text.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

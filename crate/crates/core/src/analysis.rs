//! Scalar summaries of path curves.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{BnMode, PathCurve};
use crate::nn::ParamVector;
use crate::trainer::Checkpoint;

/// Which baseline a barrier is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum BarrierDefinition {
    /// Peak minus the larger endpoint value, clamped at 0.
    #[default]
    #[serde(rename = "max-endpoint")]
    MaxEndpoint,
    /// Largest excess over the straight line joining the endpoint values.
    #[serde(rename = "linear-baseline")]
    LinearBaseline,
}

impl BarrierDefinition {
    pub fn tag(self) -> &'static str {
        match self {
            BarrierDefinition::MaxEndpoint => "max-endpoint",
            BarrierDefinition::LinearBaseline => "linear-baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "max-endpoint" => Some(BarrierDefinition::MaxEndpoint),
            "linear-baseline" => Some(BarrierDefinition::LinearBaseline),
            _ => None,
        }
    }
}

impl fmt::Display for BarrierDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Barrier of one sampled curve `values` at positions `alphas`.
pub fn barrier(values: &[f64], alphas: &[f64], definition: BarrierDefinition) -> f64 {
    let (Some(&first), Some(&last)) = (values.first(), values.last()) else {
        return 0.0;
    };
    let excess = match definition {
        BarrierDefinition::MaxEndpoint => {
            let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            peak - first.max(last)
        }
        BarrierDefinition::LinearBaseline => values
            .iter()
            .zip(alphas)
            .map(|(&v, &a)| v - (first + a * (last - first)))
            .fold(f64::NEG_INFINITY, f64::max),
    };
    excess.max(0.0)
}

/// Largest rise between consecutive samples, or 0 for a non-increasing curve.
pub fn monotonicity(values: &[f64]) -> f64 {
    values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Barrier {
    pub loss: f64,
    pub error: f64,
}

pub fn barrier_height(curve: &PathCurve, definition: BarrierDefinition) -> Barrier {
    Barrier {
        loss: barrier(&curve.losses(), &curve.alphas, definition),
        error: barrier(&curve.errors(), &curve.alphas, definition),
    }
}

/// Largest single-step loss rise along the curve (nats).
pub fn monotonicity_violation(curve: &PathCurve) -> f64 {
    monotonicity(&curve.losses())
}

/// Streaming mean and population variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation (divides by n).
    pub fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2.max(0.0) / self.n as f64).sqrt()
        }
    }
}

/// Per-alpha mean and population standard deviation over replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub alphas: Vec<f64>,
    pub t_from: u64,
    pub t_to: u64,
    pub bn_mode: BnMode,
    pub replicates: usize,
    pub loss_mean: Vec<f64>,
    pub loss_std: Vec<f64>,
    pub error_mean: Vec<f64>,
    pub error_std: Vec<f64>,
}

pub fn aggregate_replicates(curves: &[PathCurve]) -> Result<AggregateCurve> {
    let first = curves
        .first()
        .ok_or_else(|| Error::CurveMismatch("no curves to aggregate".into()))?;
    for c in &curves[1..] {
        if c.alphas != first.alphas {
            return Err(Error::CurveMismatch("alpha grids differ".into()));
        }
        if (c.t_from, c.t_to) != (first.t_from, first.t_to) {
            return Err(Error::CurveMismatch(format!(
                "endpoints ({}, {}) differ from ({}, {})",
                c.t_from, c.t_to, first.t_from, first.t_to
            )));
        }
        if c.bn_mode != first.bn_mode {
            return Err(Error::CurveMismatch("BN modes differ".into()));
        }
    }
    if curves.iter().any(|c| c.points.len() != c.alphas.len()) {
        return Err(Error::CurveMismatch(
            "point count does not match grid".into(),
        ));
    }
    let n = first.alphas.len();
    let mut loss = vec![Welford::default(); n];
    let mut error = vec![Welford::default(); n];
    for c in curves {
        for (i, p) in c.points.iter().enumerate() {
            loss[i].push(p.loss);
            error[i].push(p.error);
        }
    }
    Ok(AggregateCurve {
        alphas: first.alphas.clone(),
        t_from: first.t_from,
        t_to: first.t_to,
        bn_mode: first.bn_mode,
        replicates: curves.len(),
        loss_mean: loss.iter().map(Welford::mean).collect(),
        loss_std: loss.iter().map(Welford::std).collect(),
        error_mean: error.iter().map(Welford::mean).collect(),
        error_std: error.iter().map(Welford::std).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierRow {
    pub t: u64,
    pub seed: u64,
    pub loss: f64,
    pub error: f64,
    pub monotonicity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierSummary {
    pub t: u64,
    pub replicates: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub error_mean: f64,
    pub error_std: f64,
}

/// Barriers per (t, seed) and their spread over seeds per t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierReport {
    pub definition: BarrierDefinition,
    /// Sorted by t, then seed.
    pub rows: Vec<BarrierRow>,
    /// Sorted by t.
    pub summary: Vec<BarrierSummary>,
}

impl BarrierReport {
    pub fn from_curves(curves: &[PathCurve], definition: BarrierDefinition) -> Result<Self> {
        let mut rows: Vec<BarrierRow> = curves
            .iter()
            .map(|c| {
                let b = barrier_height(c, definition);
                BarrierRow {
                    t: c.t_from,
                    seed: c.seed,
                    loss: b.loss,
                    error: b.error,
                    monotonicity: monotonicity_violation(c),
                }
            })
            .collect();
        rows.sort_by_key(|r| (r.t, r.seed));
        if let Some(w) = rows
            .windows(2)
            .find(|w| (w[0].t, w[0].seed) == (w[1].t, w[1].seed))
        {
            return Err(Error::CurveMismatch(format!(
                "duplicate curve for t={} seed={}",
                w[0].t, w[0].seed
            )));
        }
        let mut by_t: BTreeMap<u64, (Welford, Welford)> = BTreeMap::new();
        for r in &rows {
            let e = by_t.entry(r.t).or_default();
            e.0.push(r.loss);
            e.1.push(r.error);
        }
        let summary = by_t
            .into_iter()
            .map(|(t, (l, e))| BarrierSummary {
                t,
                replicates: l.count() as usize,
                loss_mean: l.mean(),
                loss_std: l.std(),
                error_mean: e.mean(),
                error_std: e.std(),
            })
            .collect();
        Ok(BarrierReport {
            definition,
            rows,
            summary,
        })
    }
}

/// Distance of a state from the line through `start` and `end`, and its
/// coordinate along that line (0 at `start`, 1 at `end`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub t: u64,
    pub distance: f64,
    pub coordinate: f64,
}

/// [`path_deviation`] on bare parameter vectors.
pub fn deviation_from_line(
    state: &ParamVector,
    start: &ParamVector,
    end: &ParamVector,
) -> Result<(f64, f64)> {
    if !state.same_layout(start) || !start.same_layout(end) {
        return Err(Error::Shape("states have different manifests".into()));
    }
    let s = start.values().to_f64_vec();
    let e = end.values().to_f64_vec();
    let x = state.values().to_f64_vec();
    let d: Vec<f64> = e.iter().zip(&s).map(|(a, b)| a - b).collect();
    let dd: f64 = d.iter().map(|v| v * v).sum();
    if dd == 0.0 {
        return Err(Error::DegenerateDirection);
    }
    let u: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a - b).collect();
    let ud: f64 = u.iter().zip(&d).map(|(a, b)| a * b).sum();
    let c = ud / dd;
    let r2: f64 = u.iter().zip(&d).map(|(a, b)| (a - c * b).powi(2)).sum();
    Ok((r2.sqrt(), c))
}

/// How far each trajectory state strays from the segment's line.
pub fn path_deviation(
    trajectory: &[Checkpoint],
    start: &Checkpoint,
    end: &Checkpoint,
) -> Result<Vec<Deviation>> {
    for c in trajectory.iter().chain([end]) {
        if c.spec != start.spec {
            return Err(Error::InvalidSpec(format!(
                "checkpoint at t={} has a different spec",
                c.iteration
            )));
        }
        if c.seed != start.seed {
            return Err(Error::InvalidArgument(format!(
                "checkpoint at t={} has seed {}, expected {}",
                c.iteration, c.seed, start.seed
            )));
        }
    }
    trajectory
        .iter()
        .map(|c| {
            let (distance, coordinate) =
                deviation_from_line(&c.params, &start.params, &end.params)?;
            Ok(Deviation {
                t: c.iteration,
                distance,
                coordinate,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::alpha_grid;
    use crate::nn::EvalResult;

    fn curve(losses: &[f64], t: u64, seed: u64) -> PathCurve {
        PathCurve {
            alphas: alpha_grid(losses.len()).unwrap(),
            points: losses
                .iter()
                .map(|&l| EvalResult {
                    loss: l,
                    error: 0.0,
                    examples: 1,
                })
                .collect(),
            t_from: t,
            t_to: 100,
            seed,
            bn_mode: BnMode::Interpolate,
        }
    }

    #[test]
    fn barrier_examples() {
        let d = BarrierDefinition::MaxEndpoint;
        assert_eq!(
            barrier_height(&curve(&[2.3, 2.3, 1.0, 0.5], 0, 0), d).loss,
            0.0
        );
        assert!((barrier_height(&curve(&[0.5, 1.2, 0.4], 0, 0), d).loss - 0.7).abs() < 1e-15);
        assert_eq!(barrier_height(&curve(&[1.7; 5], 0, 0), d).loss, 0.0);
        assert_eq!(
            barrier_height(&curve(&[1.7; 5], 0, 0), BarrierDefinition::LinearBaseline).loss,
            0.0
        );
    }

    #[test]
    fn linear_baseline_counts_sag_below_chord() {
        // Endpoints 2 and 0; midpoint 1.5 sits 0.5 above the chord but
        // below the larger endpoint.
        let c = curve(&[2.0, 1.5, 0.0], 0, 0);
        assert_eq!(barrier_height(&c, BarrierDefinition::MaxEndpoint).loss, 0.0);
        assert_eq!(
            barrier_height(&c, BarrierDefinition::LinearBaseline).loss,
            0.5
        );
    }

    #[test]
    fn monotonicity_examples() {
        assert!((monotonicity(&[2.3, 2.0, 2.1, 0.5]) - 0.1).abs() < 1e-12);
        assert_eq!(monotonicity(&[3.0, 2.0, 1.0]), 0.0);
        assert_eq!(monotonicity(&[1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate_replicates(&[curve(&[1.0, 5.0], 0, 0)]).unwrap();
        assert_eq!(a.loss_mean, vec![1.0, 5.0]);
        assert_eq!(a.loss_std, vec![0.0, 0.0]);
        let c = |v: f64, s| curve(&[v, v], 0, s);
        let a = aggregate_replicates(&[c(1.0, 0), c(2.0, 1), c(3.0, 2)]).unwrap();
        assert_eq!(a.loss_mean[0], 2.0);
        assert!((a.loss_std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let same = aggregate_replicates(&[c(0.3, 0), c(0.3, 1), c(0.3, 2)]).unwrap();
        assert!(same.loss_std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn aggregate_rejects_mismatch() {
        assert!(aggregate_replicates(&[]).is_err());
        let a = curve(&[1.0, 2.0], 0, 0);
        let b = curve(&[1.0, 2.0, 3.0], 0, 1);
        assert!(aggregate_replicates(&[a.clone(), b]).is_err());
        let c = curve(&[1.0, 2.0], 4, 1);
        assert!(aggregate_replicates(&[a.clone(), c]).is_err());
        let mut d = curve(&[1.0, 2.0], 0, 1);
        d.bn_mode = BnMode::Recalibrate;
        assert!(aggregate_replicates(&[a, d]).is_err());
    }

    #[test]
    fn report_groups_by_t() {
        let curves = vec![
            curve(&[0.5, 1.2, 0.4], 2, 1),
            curve(&[0.5, 0.9, 0.4], 2, 0),
            curve(&[2.0, 1.0, 0.4], 0, 0),
        ];
        let r = BarrierReport::from_curves(&curves, BarrierDefinition::MaxEndpoint).unwrap();
        assert_eq!(
            r.rows.iter().map(|r| (r.t, r.seed)).collect::<Vec<_>>(),
            [(0, 0), (2, 0), (2, 1)]
        );
        assert_eq!(r.summary.len(), 2);
        assert_eq!(r.summary[1].replicates, 2);
        assert!((r.summary[1].loss_mean - 0.55).abs() < 1e-12);
        assert!((r.summary[1].loss_std - 0.15).abs() < 1e-12);
        let dup = vec![curves[0].clone(), curves[0].clone()];
        assert!(BarrierReport::from_curves(&dup, BarrierDefinition::MaxEndpoint).is_err());
    }

    #[test]
    fn definition_tags_round_trip() {
        for d in [
            BarrierDefinition::MaxEndpoint,
            BarrierDefinition::LinearBaseline,
        ] {
            assert_eq!(BarrierDefinition::parse(d.tag()), Some(d));
        }
    }
}

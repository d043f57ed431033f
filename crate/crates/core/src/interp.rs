//! Linear interpolation between network states and evaluation along the
//! segment.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    evaluate_batches, EvalResult, ModelSpec, Network, ParamVector, Real, Role, Values,
    DEFAULT_EVAL_BATCH,
};
use crate::trainer::Checkpoint;

pub const DEFAULT_POINTS: usize = 100;

/// How batch-norm running statistics are treated along the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Running statistics are interpolated with the rest of the state.
    #[default]
    Interpolate,
    /// Every path point gets exact statistics from a calibration pass.
    Recalibrate,
}

impl BnMode {
    pub fn tag(self) -> &'static str {
        match self {
            BnMode::Interpolate => "interpolate",
            BnMode::Recalibrate => "recalibrate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "interpolate" => Some(BnMode::Interpolate),
            "recalibrate" => Some(BnMode::Recalibrate),
            _ => None,
        }
    }
}

impl fmt::Display for BnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

fn check_pair(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if !a.same_layout(b) {
        return Err(Error::Shape(
            "interpolation endpoints have different manifests".into(),
        ));
    }
    if a.precision() != b.precision() {
        return Err(Error::Precision {
            expected: a.precision().name(),
            actual: b.precision().name(),
        });
    }
    Ok(())
}

/// `wa * a + wb * b` per element, computed in f64. Equal elements are
/// copied through so identical endpoints give an identical result.
fn combine(a: &ParamVector, b: &ParamVector, wa: f64, wb: f64) -> ParamVector {
    fn mix<T: Real>(a: &[T], b: &[T], wa: f64, wb: f64) -> Vec<T> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                if x == y {
                    x
                } else {
                    T::from_f64(wa * x.as_f64() + wb * y.as_f64())
                }
            })
            .collect()
    }
    let values = match (a.values(), b.values()) {
        (Values::F32(x), Values::F32(y)) => Values::F32(mix(x, y, wa, wb)),
        (Values::F64(x), Values::F64(y)) => Values::F64(mix(x, y, wa, wb)),
        _ => unreachable!("precision checked by caller"),
    };
    ParamVector::new(Arc::clone(a.manifest_arc()), values).expect("same length as endpoint")
}

/// `(1 - alpha) * a + alpha * b` over the full state, BN running statistics
/// included. `alpha = 0` and `alpha = 1` return clones of the endpoints.
pub fn lerp(a: &ParamVector, b: &ParamVector, alpha: f64) -> Result<ParamVector> {
    check_pair(a, b)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    Ok(combine(a, b, 1.0 - alpha, alpha))
}

/// Grid position `i / (n - 1)`.
pub fn grid_alpha(i: usize, n: usize) -> f64 {
    i as f64 / (n - 1) as f64
}

pub fn alpha_grid(n_points: usize) -> Result<Vec<f64>> {
    if n_points < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_points must be >= 2, got {n_points}"
        )));
    }
    Ok((0..n_points).map(|i| grid_alpha(i, n_points)).collect())
}

/// State at grid point `i` of `n`. Both weights come from the integer grid
/// (`(n-1-i)/(n-1)` and `i/(n-1)`), so point `i` of the path from `a` to `b`
/// is bit-identical to point `n-1-i` of the path from `b` to `a`.
pub fn lerp_grid(a: &ParamVector, b: &ParamVector, i: usize, n: usize) -> Result<ParamVector> {
    check_pair(a, b)?;
    if n < 2 || i >= n {
        return Err(Error::InvalidArgument(format!(
            "grid index {i} out of range for {n} points"
        )));
    }
    if i == 0 {
        return Ok(a.clone());
    }
    if i == n - 1 {
        return Ok(b.clone());
    }
    Ok(combine(a, b, grid_alpha(n - 1 - i, n), grid_alpha(i, n)))
}

/// Anything that scores a parameter vector along a path.
pub trait PathObjective: Sync {
    fn evaluate(&self, theta: &ParamVector) -> Result<EvalResult>;

    fn bn_mode(&self) -> BnMode {
        BnMode::Interpolate
    }
}

/// Test-set loss and error of a network, optionally recalibrating BN
/// statistics first.
pub struct DatasetObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub batch_size: usize,
    pub bn_mode: BnMode,
    /// Data for recalibration; required when `bn_mode` is `Recalibrate`.
    pub calibration: Option<&'a Dataset>,
}

impl<'a> DatasetObjective<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset) -> Self {
        DatasetObjective {
            spec,
            data,
            batch_size: DEFAULT_EVAL_BATCH,
            bn_mode: BnMode::Interpolate,
            calibration: None,
        }
    }

    pub fn recalibrating(mut self, calibration: &'a Dataset) -> Self {
        self.bn_mode = BnMode::Recalibrate;
        self.calibration = Some(calibration);
        self
    }
}

impl PathObjective for DatasetObjective<'_> {
    fn evaluate(&self, theta: &ParamVector) -> Result<EvalResult> {
        if self.data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        match self.bn_mode {
            BnMode::Interpolate => {
                evaluate_batches(theta, self.spec, self.data.batches(self.batch_size))
            }
            BnMode::Recalibrate => {
                let calib = self.calibration.ok_or_else(|| {
                    Error::InvalidArgument("recalibrate mode needs calibration data".into())
                })?;
                let r = bn_recalibrate(theta, self.spec, calib, self.batch_size)?;
                evaluate_batches(&r.params, self.spec, self.data.batches(self.batch_size))
            }
        }
    }

    fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }
}

/// Loss and error sampled along a path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCurve {
    pub alphas: Vec<f64>,
    pub points: Vec<EvalResult>,
    pub t_from: u64,
    pub t_to: u64,
    pub seed: u64,
    pub bn_mode: BnMode,
}

impl PathCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.loss).collect()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.error).collect()
    }

    /// A constant curve, as produced by a path from a state to itself.
    pub fn constant(
        point: EvalResult,
        n_points: usize,
        t: u64,
        seed: u64,
        bn_mode: BnMode,
    ) -> Result<Self> {
        Ok(PathCurve {
            alphas: alpha_grid(n_points)?,
            points: vec![point; n_points],
            t_from: t,
            t_to: t,
            seed,
            bn_mode,
        })
    }
}

/// Endpoint identities recorded on a curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoints {
    pub t_from: u64,
    pub t_to: u64,
    pub seed: u64,
}

/// Scores `objective` at `n_points` evenly spaced states from `from` to
/// `to`, endpoints included. With `threads > 1` grid points are split
/// across threads; the result is the same as the sequential one.
pub fn evaluate_path_with(
    objective: &dyn PathObjective,
    from: &ParamVector,
    to: &ParamVector,
    n_points: usize,
    ends: Endpoints,
    threads: usize,
) -> Result<PathCurve> {
    check_pair(from, to)?;
    let alphas = alpha_grid(n_points)?;
    let eval_at =
        |i: usize| -> Result<EvalResult> { objective.evaluate(&lerp_grid(from, to, i, n_points)?) };
    let threads = threads.clamp(1, n_points);
    let points = if threads == 1 {
        (0..n_points).map(eval_at).collect::<Result<Vec<_>>>()?
    } else {
        let mut slots: Vec<Option<Result<EvalResult>>> = (0..n_points).map(|_| None).collect();
        std::thread::scope(|s| {
            for (k, chunk) in slots.chunks_mut(n_points.div_ceil(threads)).enumerate() {
                let start = k * n_points.div_ceil(threads);
                let eval_at = &eval_at;
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(eval_at(start + j));
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every slot filled"))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(PathCurve {
        alphas,
        points,
        t_from: ends.t_from,
        t_to: ends.t_to,
        seed: ends.seed,
        bn_mode: objective.bn_mode(),
    })
}

/// Loss and error of the test set along the segment between two checkpoints.
pub fn evaluate_path(
    from: &Checkpoint,
    to: &Checkpoint,
    n_points: usize,
    data: &Dataset,
    bn_mode: BnMode,
    calibration: Option<&Dataset>,
) -> Result<PathCurve> {
    if from.spec != to.spec {
        return Err(Error::InvalidSpec(
            "checkpoints were produced by different model specs".into(),
        ));
    }
    let mut objective = DatasetObjective::new(&from.spec, data);
    objective.bn_mode = bn_mode;
    objective.calibration = calibration;
    evaluate_path_with(
        &objective,
        &from.params,
        &to.params,
        n_points,
        Endpoints {
            t_from: from.iteration,
            t_to: to.iteration,
            seed: from.seed,
        },
        1,
    )
}

/// Result of [`bn_recalibrate`].
#[derive(Debug, Clone)]
pub struct Recalibrated {
    pub params: ParamVector,
    /// Set when the model has no batch-norm layers and nothing changed.
    pub warning: Option<String>,
}

/// Replaces every BN running mean and variance with the exact population
/// statistics of that layer's input over `calibration`. Layers are done in
/// manifest order, each one seeing the already recalibrated earlier layers.
pub fn bn_recalibrate(
    theta: &ParamVector,
    spec: &ModelSpec,
    calibration: &Dataset,
    batch_size: usize,
) -> Result<Recalibrated> {
    let (net, manifest) = Network::new(spec)?;
    crate::nn::check_conforms(theta, spec, &manifest)?;
    let Some(resnet) = net.resnet().filter(|_| spec.has_batch_norm()) else {
        return Ok(Recalibrated {
            params: theta.clone(),
            warning: Some(format!(
                "model {} has no batch-norm layers; parameters unchanged",
                spec.arch.kind()
            )),
        });
    };
    if calibration.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if calibration.shape().len() != spec.input.len() {
        return Err(Error::Shape(
            "calibration data does not match the spec input".into(),
        ));
    }
    let batch_size = batch_size.max(1);
    let mut out = theta.clone();
    for (index, bn) in resnet.bn_layers().iter().enumerate() {
        // Chan et al. pairwise merge of per-batch (count, mean, M2), in f64.
        let mut count = vec![0f64; bn.ch];
        let mut mean = vec![0f64; bn.ch];
        let mut m2 = vec![0f64; bn.ch];
        for batch in calibration.batches(batch_size) {
            let n = batch.len();
            let stats = match out.values() {
                Values::F32(p) => batch_moments::<f32>(resnet, p, batch.inputs(), n, index),
                Values::F64(p) => batch_moments::<f64>(resnet, p, batch.inputs(), n, index),
            };
            for (c, (nb, mb, m2b)) in stats.into_iter().enumerate() {
                let total = count[c] + nb;
                let delta = mb - mean[c];
                mean[c] += delta * nb / total;
                m2[c] += m2b + delta * delta * count[c] * nb / total;
                count[c] = total;
            }
        }
        fn write<T: Real>(p: &mut [T], off_mean: usize, off_var: usize, mean: &[f64], var: &[f64]) {
            for c in 0..mean.len() {
                p[off_mean + c] = T::from_f64(mean[c]);
                p[off_var + c] = T::from_f64(var[c]);
            }
        }
        let var: Vec<f64> = m2.iter().zip(&count).map(|(m, n)| m / n).collect();
        match out.values_mut() {
            Values::F32(p) => write(p, bn.mean, bn.var, &mean, &var),
            Values::F64(p) => write(p, bn.mean, bn.var, &mean, &var),
        }
    }
    Ok(Recalibrated {
        params: out,
        warning: None,
    })
}

/// Per-channel (count, mean, sum of squared deviations) of the input to BN
/// layer `index` for one batch.
fn batch_moments<T: Real>(
    resnet: &crate::nn::ResnetLayout,
    params: &[T],
    x: &[f32],
    n: usize,
    index: usize,
) -> Vec<(f64, f64, f64)> {
    let x: Vec<T> = x.iter().map(|&v| T::from_f32(v)).collect();
    let act = resnet.bn_input(params, &x, n, index);
    let plane = act.plane();
    act.data
        .chunks_exact(plane)
        .map(|ch| {
            let m = ch.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
            let s = ch.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
            (plane as f64, m, s)
        })
        .collect()
}

/// Convex quadratic objective on a 2-parameter least-squares line fit,
/// `mean((w0 + w1 * x - y)^2)`. Used to validate the path instrument on a
/// function whose restriction to any segment is an exact parabola.
#[derive(Debug, Clone)]
pub struct QuadraticSurrogate {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl QuadraticSurrogate {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if xs.len() != ys.len() {
            return Err(Error::Length {
                expected: xs.len(),
                actual: ys.len(),
            });
        }
        Ok(QuadraticSurrogate { xs, ys })
    }

    /// Least-squares minimizer `(w0, w1)`.
    pub fn fit(&self) -> Result<[f64; 2]> {
        let n = self.xs.len() as f64;
        let mx = self.xs.iter().sum::<f64>() / n;
        let my = self.ys.iter().sum::<f64>() / n;
        let sxx: f64 = self.xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        if sxx == 0.0 {
            return Err(Error::InvalidArgument("all x values are equal".into()));
        }
        let sxy: f64 = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum();
        let w1 = sxy / sxx;
        Ok([my - w1 * mx, w1])
    }

    /// Two-parameter state `[w0, w1]` in f64.
    pub fn params(w: [f64; 2]) -> ParamVector {
        crate::nn::flatten(&[crate::nn::NamedTensor {
            name: "line.weight".into(),
            role: Role::Weight,
            shape: vec![2],
            data: Values::F64(w.to_vec()),
        }])
        .expect("valid tensor")
    }
}

impl PathObjective for QuadraticSurrogate {
    fn evaluate(&self, theta: &ParamVector) -> Result<EvalResult> {
        let w = theta.as_slice::<f64>()?;
        if w.len() != 2 {
            return Err(Error::Length {
                expected: 2,
                actual: w.len(),
            });
        }
        let loss = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| (w[0] + w[1] * x - y).powi(2))
            .sum::<f64>()
            / self.xs.len() as f64;
        Ok(EvalResult {
            loss,
            error: 0.0,
            examples: self.xs.len(),
        })
    }
}

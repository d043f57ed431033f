//! Model construction, evaluation and gradients over a [`ParamVector`].

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

use super::mlp::MlpLayout;
use super::params::{Manifest, ParamVector, Role, Values};
use super::resnet::{ResnetLayout, BN_MOMENTUM};
use super::scalar::Real;
use super::spec::{Architecture, InputShape, ModelSpec, Precision};

/// Default number of examples per forward pass in [`evaluate`].
pub const DEFAULT_EVAL_BATCH: usize = 500;

/// A borrowed mini-batch. Inputs are row-major, one example per row, images
/// channel-major.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    inputs: &'a [f32],
    labels: &'a [u32],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [f32], labels: &'a [u32], example_len: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if inputs.len() != labels.len() * example_len {
            return Err(Error::Shape(format!(
                "batch of {} labels needs {} input values, got {}",
                labels.len(),
                labels.len() * example_len,
                inputs.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &'a [f32] {
        self.inputs
    }

    pub fn labels(&self) -> &'a [u32] {
        self.labels
    }
}

/// Mean cross-entropy (nats) and error fraction over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub error: f64,
    pub examples: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Network {
    Mlp(MlpLayout),
    Resnet(ResnetLayout),
}

impl Network {
    pub fn new(spec: &ModelSpec) -> Result<(Self, Manifest)> {
        spec.validate()?;
        let mut manifest = Manifest::new();
        let net = match &spec.arch {
            Architecture::Mlp { hidden } => Network::Mlp(MlpLayout::new(
                spec.input.len(),
                hidden,
                spec.classes,
                &mut manifest,
            )),
            Architecture::ResnetMini {
                widths,
                blocks_per_stage,
                batch_norm,
            } => {
                let InputShape::Image {
                    height,
                    width,
                    channels,
                } = spec.input
                else {
                    unreachable!("validated above")
                };
                Network::Resnet(ResnetLayout::new(
                    height,
                    width,
                    channels,
                    widths,
                    *blocks_per_stage,
                    *batch_norm,
                    spec.classes,
                    &mut manifest,
                ))
            }
        };
        Ok((net, manifest))
    }

    fn classes(&self) -> usize {
        match self {
            Network::Mlp(m) => m.classes(),
            Network::Resnet(r) => r.classes(),
        }
    }

    pub fn logits<T: Real>(&self, params: &[T], x: &[T], n: usize) -> Vec<T> {
        match self {
            Network::Mlp(m) => m.forward(params, x, n),
            Network::Resnet(r) => r.forward_infer(params, x, n),
        }
    }

    pub fn resnet(&self) -> Option<&ResnetLayout> {
        match self {
            Network::Resnet(r) => Some(r),
            Network::Mlp(_) => None,
        }
    }
}

/// Builds the layout for `spec` without initializing values.
pub fn manifest_for(spec: &ModelSpec) -> Result<Manifest> {
    Network::new(spec).map(|(_, m)| m)
}

/// Initial network state: He-scaled Gaussian weights (std `sqrt(2 / fan_in)`),
/// zero biases, unit BN gains, zero BN shifts, running mean 0 and variance 1.
/// The same seed gives the same draws in both precisions.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    let manifest = manifest_for(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(manifest.len());
    for t in manifest.tensors() {
        match t.role {
            Role::Weight => {
                let fan_in: usize = t.shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                for _ in 0..t.numel() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    values.push(z * std);
                }
            }
            Role::Bias | Role::BnShift | Role::BnRunningMean => {
                values.extend(std::iter::repeat_n(0.0, t.numel()))
            }
            Role::BnGain | Role::BnRunningVar => values.extend(std::iter::repeat_n(1.0, t.numel())),
        }
    }
    let values = match spec.precision {
        Precision::F32 => Values::F32(values.into_iter().map(|v| v as f32).collect()),
        Precision::F64 => Values::F64(values),
    };
    ParamVector::new(Arc::new(manifest), values)
}

pub(crate) fn check_conforms(
    theta: &ParamVector,
    spec: &ModelSpec,
    manifest: &Manifest,
) -> Result<()> {
    if theta.manifest() != manifest {
        return Err(Error::Shape(format!(
            "parameter manifest does not match spec {}",
            spec.canonical()
        )));
    }
    if theta.precision() != spec.precision {
        return Err(Error::Precision {
            expected: spec.precision.name(),
            actual: theta.precision().name(),
        });
    }
    Ok(())
}

fn check_labels(labels: &[u32], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l as usize >= classes) {
        Some(&label) => Err(Error::Label { label, classes }),
        None => Ok(()),
    }
}

/// Per-example cross-entropy (computed in f64) and argmax prediction, lowest
/// index winning ties.
fn example_loss<T: Real>(logits: &[T], label: usize) -> (f64, usize) {
    let mut best = 0;
    let mut max = logits[0].as_f64();
    for (i, &z) in logits.iter().enumerate().skip(1) {
        let z = z.as_f64();
        if z > max {
            max = z;
            best = i;
        }
    }
    let sum: f64 = logits.iter().map(|&z| (z.as_f64() - max).exp()).sum();
    let lse = max + sum.ln();
    (lse - logits[label].as_f64(), best)
}

fn to_real<T: Real>(x: &[f32]) -> Vec<T> {
    x.iter().map(|&v| T::from_f32(v)).collect()
}

/// Incremental evaluator: feed batches in dataset order, then [`finish`].
/// Sums run in example order, so the result does not depend on how the
/// examples were split into batches.
///
/// [`finish`]: Evaluator::finish
pub struct Evaluator<'a> {
    theta: &'a ParamVector,
    net: Network,
    example_len: usize,
    classes: usize,
    loss_sum: f64,
    wrong: usize,
    count: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(theta: &'a ParamVector, spec: &ModelSpec) -> Result<Self> {
        let (net, manifest) = Network::new(spec)?;
        check_conforms(theta, spec, &manifest)?;
        Ok(Evaluator {
            theta,
            classes: net.classes(),
            net,
            example_len: spec.input.len(),
            loss_sum: 0.0,
            wrong: 0,
            count: 0,
        })
    }

    pub fn feed(&mut self, batch: Batch<'_>) -> Result<()> {
        if batch.inputs.len() != batch.len() * self.example_len {
            return Err(Error::Shape(
                "batch example size does not match spec input".into(),
            ));
        }
        check_labels(batch.labels, self.classes)?;
        match self.theta.values() {
            Values::F32(p) => self.feed_typed::<f32>(p, batch),
            Values::F64(p) => self.feed_typed::<f64>(p, batch),
        }
        Ok(())
    }

    fn feed_typed<T: Real>(&mut self, params: &[T], batch: Batch<'_>) {
        let n = batch.len();
        let x = to_real::<T>(batch.inputs);
        let logits = self.net.logits(params, &x, n);
        for (row, &label) in logits.chunks_exact(self.classes).zip(batch.labels) {
            let (loss, pred) = example_loss(row, label as usize);
            self.loss_sum += loss;
            self.wrong += usize::from(pred != label as usize);
            self.count += 1;
        }
    }

    pub fn finish(self) -> Result<EvalResult> {
        if self.count == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(EvalResult {
            loss: self.loss_sum / self.count as f64,
            error: self.wrong as f64 / self.count as f64,
            examples: self.count,
        })
    }
}

/// Exact dataset-mean loss and error, BN layers in inference mode.
pub fn evaluate_batches<'b>(
    theta: &ParamVector,
    spec: &ModelSpec,
    batches: impl IntoIterator<Item = Batch<'b>>,
) -> Result<EvalResult> {
    let mut ev = Evaluator::new(theta, spec)?;
    for b in batches {
        ev.feed(b)?;
    }
    ev.finish()
}

/// Class probabilities for every example of `batch` (`[N, classes]`, f64).
pub fn predict_proba(theta: &ParamVector, spec: &ModelSpec, batch: Batch<'_>) -> Result<Vec<f64>> {
    let (net, manifest) = Network::new(spec)?;
    check_conforms(theta, spec, &manifest)?;
    fn run<T: Real>(net: &Network, params: &[T], batch: Batch<'_>, classes: usize) -> Vec<f64> {
        let x = to_real::<T>(batch.inputs);
        let logits = net.logits(params, &x, batch.len());
        let mut out = Vec::with_capacity(logits.len());
        for row in logits.chunks_exact(classes) {
            let max = row
                .iter()
                .map(|z| z.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&z| (z.as_f64() - max).exp()).collect();
            let s: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / s));
        }
        out
    }
    let classes = net.classes();
    Ok(match theta.values() {
        Values::F32(p) => run::<f32>(&net, p, batch, classes),
        Values::F64(p) => run::<f64>(&net, p, batch, classes),
    })
}

/// New running statistics for one BN layer after a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStatUpdate {
    pub mean_offset: usize,
    pub var_offset: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GradientOutput {
    /// Mean cross-entropy over the batch (training-mode forward).
    pub loss: f64,
    /// Gradient of the mean loss; zero at running-statistic entries.
    pub grad: ParamVector,
    /// Running statistics after the exponential-moving-average update
    /// (`0.9 * old + 0.1 * batch`, unbiased batch variance).
    pub running_stats: Vec<RunningStatUpdate>,
}

impl GradientOutput {
    /// Overwrites the running-statistic entries of `theta` with the updated values.
    pub fn write_running_stats(&self, theta: &mut ParamVector) -> Result<()> {
        fn write<T: Real>(p: &mut [T], ups: &[RunningStatUpdate]) {
            for u in ups {
                for (i, (&m, &v)) in u.mean.iter().zip(&u.var).enumerate() {
                    p[u.mean_offset + i] = T::from_f64(m);
                    p[u.var_offset + i] = T::from_f64(v);
                }
            }
        }
        match theta.values_mut() {
            Values::F32(p) => write(p, &self.running_stats),
            Values::F64(p) => write(p, &self.running_stats),
        }
        Ok(())
    }
}

/// Gradient of the batch-mean cross-entropy, BN layers in training mode.
pub fn gradient(theta: &ParamVector, spec: &ModelSpec, batch: Batch<'_>) -> Result<GradientOutput> {
    let (net, manifest) = Network::new(spec)?;
    check_conforms(theta, spec, &manifest)?;
    if batch.inputs.len() != batch.len() * spec.input.len() {
        return Err(Error::Shape(
            "batch example size does not match spec input".into(),
        ));
    }
    check_labels(batch.labels, spec.classes)?;
    if spec.has_batch_norm() && batch.len() < 2 {
        return Err(Error::DegenerateVariance(batch.len()));
    }
    let (loss, grad_values, running_stats) = match theta.values() {
        Values::F32(p) => gradient_typed::<f32>(&net, p, batch),
        Values::F64(p) => gradient_typed::<f64>(&net, p, batch),
    };
    Ok(GradientOutput {
        loss,
        grad: ParamVector::new(theta.manifest_arc().clone(), grad_values)?,
        running_stats,
    })
}

fn gradient_typed<T: Real>(
    net: &Network,
    params: &[T],
    batch: Batch<'_>,
) -> (f64, Values, Vec<RunningStatUpdate>) {
    let n = batch.len();
    let classes = net.classes();
    let x = to_real::<T>(batch.inputs);
    let mut grad = vec![T::zero(); params.len()];
    let mut loss_sum = 0.0;
    let dlogits_fn = |logits: &[T]| -> Vec<T> {
        let mut d = vec![T::zero(); logits.len()];
        let inv_n = 1.0 / n as f64;
        for ((row, drow), &label) in logits
            .chunks_exact(classes)
            .zip(d.chunks_exact_mut(classes))
            .zip(batch.labels)
        {
            let (loss, _) = example_loss(row, label as usize);
            loss_sum += loss;
            let max = row
                .iter()
                .map(|z| z.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&z| (z.as_f64() - max).exp()).collect();
            let s: f64 = exps.iter().sum();
            for (k, (dv, e)) in drow.iter_mut().zip(&exps).enumerate() {
                let onehot = if k == label as usize { 1.0 } else { 0.0 };
                *dv = T::from_f64((e / s - onehot) * inv_n);
            }
        }
        d
    };
    let mut updates = Vec::new();
    match net {
        Network::Mlp(m) => m.backward(params, &x, n, &mut grad, dlogits_fn),
        Network::Resnet(r) => {
            let stats = r.backward(params, &x, n, &mut grad, dlogits_fn);
            for (bn, (mean, var)) in r.bn_layers().iter().zip(stats) {
                updates.push((bn.mean, bn.var, mean, var));
            }
        }
    }
    let running_stats = updates
        .into_iter()
        .map(|(mo, vo, mean, var)| RunningStatUpdate {
            mean_offset: mo,
            var_offset: vo,
            mean: mean
                .iter()
                .enumerate()
                .map(|(i, &m)| (1.0 - BN_MOMENTUM) * params[mo + i].as_f64() + BN_MOMENTUM * m)
                .collect(),
            var: var
                .iter()
                .enumerate()
                .map(|(i, &v)| (1.0 - BN_MOMENTUM) * params[vo + i].as_f64() + BN_MOMENTUM * v)
                .collect(),
        })
        .collect();
    (loss_sum / n as f64, T::wrap(grad), running_stats)
}

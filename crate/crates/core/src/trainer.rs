//! Deterministic SGD with momentum that emits checkpoints on a fixed
//! log-spaced schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    build_model, gradient, Batch, ModelSpec, ParamVector, Precision, Real, Role, Values,
};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Sorted iterations at which checkpoints are taken: `0`, powers of two up
/// to `2^10`, multiples of 1000 from 2000 on, all capped at `t_max`, plus
/// `t_max` itself.
pub fn checkpoint_schedule(t_max: u64) -> Result<Vec<u64>> {
    if t_max < 1 {
        return Err(Error::InvalidArgument("t_max must be >= 1".into()));
    }
    let mut s = vec![0u64];
    s.extend((0..=10).map(|k| 1u64 << k).take_while(|&t| t <= t_max));
    s.extend((2..).map(|k| 1000 * k).take_while(|&t| t <= t_max));
    s.push(t_max);
    s.sort_unstable();
    s.dedup();
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` at each milestone iteration.
    StepDecay {
        milestones: Vec<u64>,
        factor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: u64,
    #[serde(default = "default_schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

impl Hyperparams {
    pub fn new(lr: f64, momentum: f64, batch_size: usize, iterations: u64) -> Self {
        Hyperparams {
            lr,
            momentum,
            batch_size,
            iterations,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1".into());
        }
        if self.iterations < 1 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if let LrSchedule::StepDecay { milestones, factor } = &self.lr_schedule {
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return bad("milestones must be strictly increasing".into());
            }
            if milestones.last().is_some_and(|&m| m >= self.iterations) {
                return bad("milestones must be below the iteration count".into());
            }
            if !(*factor > 0.0 && factor.is_finite()) {
                return bad(format!("decay factor must be > 0, got {factor}"));
            }
        }
        Ok(())
    }

    /// Rate used by the update that moves the state from iteration `t` to `t + 1`.
    pub fn lr_at(&self, t: u64) -> f64 {
        match &self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::StepDecay { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| m <= t).count();
                self.lr * factor.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub seed: u64,
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub schema_version: u32,
}

impl Checkpoint {
    pub fn new(iteration: u64, seed: u64, spec: ModelSpec, params: ParamVector) -> Self {
        Checkpoint {
            iteration,
            seed,
            spec,
            params,
            schema_version: CHECKPOINT_SCHEMA_VERSION,
        }
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec.hash()
    }

    pub fn precision(&self) -> Precision {
        self.params.precision()
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.iteration == other.iteration
            && self.seed == other.seed
            && self.spec == other.spec
            && self.schema_version == other.schema_version
            && self.params.bit_eq(&other.params)
    }
}

/// One SGD-with-momentum update in place:
/// `v <- momentum * v + grad + weight_decay * theta` (decay on weight and
/// bias entries only), then `theta <- theta - lr_at(t) * v`. Running
/// statistics are left untouched; the caller overwrites them from the
/// forward pass.
pub fn sgd_step(
    theta: &mut ParamVector,
    velocity: &mut ParamVector,
    grad: &ParamVector,
    hp: &Hyperparams,
    t: u64,
) -> Result<()> {
    if !theta.same_layout(velocity) || !theta.same_layout(grad) {
        return Err(Error::Shape(
            "theta, velocity and gradient layouts differ".into(),
        ));
    }
    let lr = hp.lr_at(t);
    let mut decay_mask = vec![false; theta.len()];
    let mut frozen = vec![false; theta.len()];
    for info in theta.manifest().tensors() {
        match info.role {
            Role::Weight | Role::Bias => decay_mask[info.range()].fill(true),
            Role::BnRunningMean | Role::BnRunningVar => frozen[info.range()].fill(true),
            Role::BnGain | Role::BnShift => {}
        }
    }
    #[allow(clippy::too_many_arguments)]
    fn step<T: Real>(
        theta: &mut [T],
        v: &mut [T],
        g: &[T],
        decay: &[bool],
        frozen: &[bool],
        momentum: f64,
        wd: f64,
        lr: f64,
    ) {
        let (momentum, wd, lr) = (T::from_f64(momentum), T::from_f64(wd), T::from_f64(lr));
        for i in 0..theta.len() {
            if frozen[i] {
                continue;
            }
            let mut d = g[i];
            if decay[i] && wd != T::zero() {
                d += wd * theta[i];
            }
            v[i] = momentum * v[i] + d;
            theta[i] -= lr * v[i];
        }
    }
    let (m, wd) = (hp.momentum, hp.weight_decay);
    match (theta.values_mut(), velocity.values_mut(), grad.values()) {
        (Values::F32(p), Values::F32(v), Values::F32(g)) => {
            step(p, v, g, &decay_mask, &frozen, m, wd, lr)
        }
        (Values::F64(p), Values::F64(v), Values::F64(g)) => {
            step(p, v, g, &decay_mask, &frozen, m, wd, lr)
        }
        _ => unreachable!("layouts checked above"),
    }
    Ok(())
}

/// Per-epoch example order. Seeded from `seed ^ epoch` on a stream
/// separate from initialization.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch);
    rng.set_stream(1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub schedule: Vec<u64>,
    /// Mean training loss of the last update's batch.
    pub last_batch_loss: f64,
}

/// Trains for `hp.iterations` updates and hands every scheduled checkpoint
/// to `sink` in order. Each epoch visits a seeded permutation of the data
/// in consecutive batches of `batch_size`; a trailing partial batch is
/// dropped (datasets smaller than one batch form a single batch).
pub fn train(
    spec: &ModelSpec,
    hp: &Hyperparams,
    data: &Dataset,
    seed: u64,
    mut sink: impl FnMut(Checkpoint) -> Result<()>,
) -> Result<TrainSummary> {
    hp.validate()?;
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.shape().len() != spec.input.len() || data.classes() != spec.classes {
        return Err(Error::Shape(format!(
            "dataset ({} inputs, {} classes) does not fit spec {}",
            data.shape().len(),
            data.classes(),
            spec
        )));
    }
    let schedule = checkpoint_schedule(hp.iterations)?;
    let mut theta = build_model(spec, seed)?;
    let mut velocity = theta.zeros_like();
    let mut next = schedule.iter().peekable();
    if next.peek() == Some(&&0) {
        sink(Checkpoint::new(0, seed, spec.clone(), theta.clone()))?;
        next.next();
    }
    let bs = hp.batch_size.min(data.len());
    let per_epoch = (data.len() / bs) as u64;
    let d = spec.input.len();
    let mut perm = Vec::new();
    let mut last_loss = f64::NAN;
    for t in 0..hp.iterations {
        let epoch = t / per_epoch;
        let pos = (t % per_epoch) as usize;
        if pos == 0 {
            perm = epoch_permutation(data.len(), seed, epoch);
        }
        let (x, y) = data.gather(&perm[pos * bs..(pos + 1) * bs]);
        let out = gradient(&theta, spec, Batch::new(&x, &y, d)?)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite { iteration: t });
        }
        last_loss = out.loss;
        sgd_step(&mut theta, &mut velocity, &out.grad, hp, t)?;
        out.write_running_stats(&mut theta)?;
        if next.peek() == Some(&&(t + 1)) {
            next.next();
            sink(Checkpoint::new(t + 1, seed, spec.clone(), theta.clone()))?;
        }
    }
    Ok(TrainSummary {
        iterations: hp.iterations,
        schedule,
        last_batch_loss: last_loss,
    })
}

/// [`train`] collecting the checkpoints into a vector.
pub fn train_collect(
    spec: &ModelSpec,
    hp: &Hyperparams,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<Checkpoint>> {
    let mut out = Vec::new();
    train(spec, hp, data, seed, |c| {
        out.push(c);
        Ok(())
    })?;
    Ok(out)
}

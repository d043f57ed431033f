//! Test-only oracles that share no code with the library's compute path.
#![allow(dead_code)]

mod dd;

pub use dd::Dd;
use linpath::nn::{Architecture, InputShape, ModelSpec, ParamVector, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mnist_dir() -> std::path::PathBuf {
    std::env::var_os("LINPATH_MNIST_DIR")
        .map(Into::into)
        .unwrap_or_else(|| {
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
        })
}

pub fn cifar_dir() -> std::path::PathBuf {
    std::env::var_os("LINPATH_CIFAR_DIR")
        .map(Into::into)
        .unwrap_or_else(|| {
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-10-batches-bin")
        })
}

/// Number type of the reference forward pass.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::AddAssign
{
    fn of(x: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn relu(self) -> Self {
        if self > Self::of(0.0) {
            self
        } else {
            Self::of(0.0)
        }
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

impl Scalar for Dd {
    fn of(x: f64) -> Self {
        Dd::new(x)
    }
    fn exp(self) -> Self {
        Dd::exp(self)
    }
    fn ln(self) -> Self {
        Dd::ln(self)
    }
    fn sqrt(self) -> Self {
        Dd::sqrt(self)
    }
}

/// Naive image tensor `[N][C][H][W]`.
type Img<S> = Vec<Vec<Vec<Vec<S>>>>;

fn get<S: Scalar>(theta: &ParamVector, name: &str) -> Vec<S> {
    theta
        .tensor_f64(name)
        .unwrap_or_else(|| panic!("missing tensor {name}"))
        .into_iter()
        .map(S::of)
        .collect()
}

fn sum<S: Scalar>(xs: impl IntoIterator<Item = S>) -> S {
    let mut s = S::of(0.0);
    for x in xs {
        s += x;
    }
    s
}

fn log_softmax_ce<S: Scalar>(logits: &[S], label: usize) -> S {
    let m = logits
        .iter()
        .copied()
        .fold(logits[0], |a, b| if b > a { b } else { a });
    let s = sum(logits.iter().map(|&z| (z - m).exp()));
    m + s.ln() - logits[label]
}

/// Mean cross-entropy of the batch, BN (if any) normalizing with batch
/// statistics. Straight loops over the definitions.
pub fn reference_train_loss(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &[f32],
    labels: &[u32],
) -> f64 {
    reference_train_loss_in::<f64>(spec, theta, x, labels)
}

/// [`reference_train_loss`] computed in the number type `S`.
pub fn reference_train_loss_in<S: Scalar>(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &[f32],
    labels: &[u32],
) -> S {
    let logits = logits::<S>(spec, theta, x, labels.len(), true);
    let n = labels.len();
    sum(logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| log_softmax_ce(l, y as usize)))
        / S::of(n as f64)
}

/// Per-example logits with BN in inference mode (running statistics).
pub fn reference_infer_logits(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &[f32],
    n: usize,
) -> Vec<Vec<f64>> {
    logits::<f64>(spec, theta, x, n, false)
}

fn logits<S: Scalar>(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &[f32],
    n: usize,
    train: bool,
) -> Vec<Vec<S>> {
    match &spec.arch {
        Architecture::Mlp { hidden } => mlp_logits(spec, hidden, theta, x, n),
        Architecture::ResnetMini {
            widths,
            blocks_per_stage,
            batch_norm,
        } => resnet_logits(
            spec,
            widths,
            *blocks_per_stage,
            *batch_norm,
            theta,
            x,
            n,
            train,
        ),
    }
}

fn mlp_logits<S: Scalar>(
    spec: &ModelSpec,
    hidden: &[usize],
    theta: &ParamVector,
    x: &[f32],
    n: usize,
) -> Vec<Vec<S>> {
    let d = spec.input.len();
    let layers = hidden.len() + 1;
    let params: Vec<(Vec<S>, Vec<S>)> = (0..layers)
        .map(|l| {
            (
                get(theta, &format!("fc{l}.weight")),
                get(theta, &format!("fc{l}.bias")),
            )
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut a: Vec<S> = x[i * d..(i + 1) * d]
                .iter()
                .map(|&v| S::of(v as f64))
                .collect();
            for (l, (w, b)) in params.iter().enumerate() {
                let out = b.len();
                let mut z = Vec::with_capacity(out);
                for o in 0..out {
                    let mut s = b[o];
                    for (j, &aj) in a.iter().enumerate() {
                        s += w[o * a.len() + j] * aj;
                    }
                    z.push(if l + 1 < layers { s.relu() } else { s });
                }
                a = z;
            }
            a
        })
        .collect()
}

fn conv<S: Scalar>(
    x: &Img<S>,
    w: &[S],
    bias: Option<&[S]>,
    cout: usize,
    k: usize,
    stride: usize,
) -> Img<S> {
    let cin = x[0].len();
    let (h, wd) = (x[0][0].len(), x[0][0][0].len());
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    x.iter()
        .map(|ex| {
            (0..cout)
                .map(|co| {
                    (0..ho)
                        .map(|oy| {
                            (0..wo)
                                .map(|ox| {
                                    let mut s = bias.map_or(S::of(0.0), |b| b[co]);
                                    for ci in 0..cin {
                                        for ky in 0..k {
                                            for kx in 0..k {
                                                let iy = (oy * stride + ky) as isize - pad as isize;
                                                let ix = (ox * stride + kx) as isize - pad as isize;
                                                if iy >= 0
                                                    && ix >= 0
                                                    && (iy as usize) < h
                                                    && (ix as usize) < wd
                                                {
                                                    s += w[((co * cin + ci) * k + ky) * k + kx]
                                                        * ex[ci][iy as usize][ix as usize];
                                                }
                                            }
                                        }
                                    }
                                    s
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn batch_norm<S: Scalar>(x: &mut Img<S>, theta: &ParamVector, prefix: &str, train: bool) {
    let gain: Vec<S> = get(theta, &format!("{prefix}.bn.gain"));
    let shift: Vec<S> = get(theta, &format!("{prefix}.bn.shift"));
    let rm: Vec<S> = get(theta, &format!("{prefix}.bn.running_mean"));
    let rv: Vec<S> = get(theta, &format!("{prefix}.bn.running_var"));
    let eps = S::of(1e-5);
    for c in 0..gain.len() {
        let (mean, var) = if train {
            let vals: Vec<S> = x
                .iter()
                .flat_map(|ex| ex[c].iter().flatten().copied())
                .collect();
            let cnt = S::of(vals.len() as f64);
            let m = sum(vals.iter().copied()) / cnt;
            let v = sum(vals.iter().map(|&v| (v - m) * (v - m))) / cnt;
            (m, v)
        } else {
            (rm[c], if rv[c] > eps { rv[c] } else { eps })
        };
        let inv = S::of(1.0) / (var + eps).sqrt();
        for ex in x.iter_mut() {
            for row in ex[c].iter_mut() {
                for v in row.iter_mut() {
                    *v = gain[c] * (*v - mean) * inv + shift[c];
                }
            }
        }
    }
}

fn relu<S: Scalar>(x: &mut Img<S>) {
    for v in x.iter_mut().flatten().flatten().flatten() {
        *v = v.relu();
    }
}

#[allow(clippy::too_many_arguments)]
fn unit<S: Scalar>(
    x: &Img<S>,
    theta: &ParamVector,
    prefix: &str,
    cout: usize,
    k: usize,
    stride: usize,
    bn: bool,
    train: bool,
) -> Img<S> {
    let w: Vec<S> = get(theta, &format!("{prefix}.conv.weight"));
    let b: Option<Vec<S>> = (!bn).then(|| get(theta, &format!("{prefix}.conv.bias")));
    let mut z = conv(x, &w, b.as_deref(), cout, k, stride);
    if bn {
        batch_norm(&mut z, theta, prefix, train);
    }
    z
}

#[allow(clippy::too_many_arguments)]
fn resnet_logits<S: Scalar>(
    spec: &ModelSpec,
    widths: &[usize],
    blocks: usize,
    bn: bool,
    theta: &ParamVector,
    x: &[f32],
    n: usize,
    train: bool,
) -> Vec<Vec<S>> {
    let InputShape::Image {
        height,
        width,
        channels,
    } = spec.input
    else {
        panic!("image input")
    };
    let d = height * width * channels;
    let input: Img<S> = (0..n)
        .map(|i| {
            (0..channels)
                .map(|c| {
                    (0..height)
                        .map(|y| {
                            (0..width)
                                .map(|xx| S::of(x[i * d + (c * height + y) * width + xx] as f64))
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut a = unit(&input, theta, "stem", widths[0], 3, 1, bn, train);
    relu(&mut a);
    let mut cin = widths[0];
    for (s, &w) in widths.iter().enumerate() {
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let p = format!("stage{s}.block{b}");
            let mut h = unit(&a, theta, &format!("{p}.conv1"), w, 3, stride, bn, train);
            relu(&mut h);
            let mut h2 = unit(&h, theta, &format!("{p}.conv2"), w, 3, 1, bn, train);
            let sc = if stride != 1 || cin != w {
                unit(&a, theta, &format!("{p}.shortcut"), w, 1, stride, bn, train)
            } else {
                a.clone()
            };
            for (v, &s) in h2
                .iter_mut()
                .flatten()
                .flatten()
                .flatten()
                .zip(sc.iter().flatten().flatten().flatten())
            {
                *v += s;
            }
            relu(&mut h2);
            a = h2;
            cin = w;
        }
    }
    let hw_w: Vec<S> = get(theta, "head.weight");
    let hw_b: Vec<S> = get(theta, "head.bias");
    let classes = spec.classes;
    a.iter()
        .map(|ex| {
            let pooled: Vec<S> = ex
                .iter()
                .map(|ch| {
                    let cnt = S::of((ch.len() * ch[0].len()) as f64);
                    sum(ch.iter().flatten().copied()) / cnt
                })
                .collect();
            (0..classes)
                .map(|k| {
                    hw_b[k]
                        + sum(pooled
                            .iter()
                            .enumerate()
                            .map(|(c, &p)| hw_w[k * cin + c] * p))
                })
                .collect()
        })
        .collect()
}

/// Random inputs and labels.
pub fn random_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    classes: usize,
) -> (Vec<f32>, Vec<u32>) {
    let x = (0..n * d).map(|_| rng.random_range(-1.5f32..1.5)).collect();
    let y = (0..n)
        .map(|_| rng.random_range(0..classes as u32))
        .collect();
    (x, y)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with the denominator floored at 1e-8.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Randomizes biases and BN parameters so no coordinate sits at its
/// initialization value.
pub fn jitter(theta: &mut ParamVector, seed: u64) {
    let mut r = rng(seed);
    let roles: Vec<(Role, std::ops::Range<usize>)> = theta
        .manifest()
        .tensors()
        .iter()
        .map(|t| (t.role, t.range()))
        .collect();
    let v = theta.as_mut_slice::<f64>().unwrap();
    for (role, range) in roles {
        for i in range {
            match role {
                Role::Weight => {}
                Role::Bias | Role::BnShift | Role::BnRunningMean => {
                    v[i] = r.random_range(-0.3..0.3)
                }
                Role::BnGain | Role::BnRunningVar => v[i] = r.random_range(0.6..1.6),
            }
        }
    }
}

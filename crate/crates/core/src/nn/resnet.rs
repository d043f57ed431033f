//! Small residual CNN: conv stem, residual stages, global average pool,
//! linear head.
//!
//! Activations are stored channel-major across the batch (`[C, N, H, W]`) so
//! each convolution is a single GEMM over an im2col buffer and batch-norm
//! statistics are contiguous per channel.

use super::mlp::relu_inplace;
use super::params::{Manifest, Role};
use super::scalar::{gemm, Mat, Real};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub(crate) struct Act<T> {
    pub data: Vec<T>,
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Real> Act<T> {
    fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Act {
            data: vec![T::zero(); c * n * h * w],
            c,
            n,
            h,
            w,
        }
    }

    /// Per-channel element count (`N * H * W`).
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Bn {
    pub gain: usize,
    pub shift: usize,
    pub mean: usize,
    pub var: usize,
    pub ch: usize,
}

#[derive(Debug, Clone)]
struct Unit {
    conv: Conv,
    bn: Option<Bn>,
}

#[derive(Debug, Clone)]
struct Block {
    c1: Unit,
    c2: Unit,
    shortcut: Option<Unit>,
}

#[derive(Debug, Clone)]
pub(crate) struct ResnetLayout {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    stem: Unit,
    blocks: Vec<Block>,
    head_weight: usize,
    head_bias: usize,
    feat: usize,
    classes: usize,
    bns: Vec<Bn>,
}

#[allow(clippy::too_many_arguments)]
fn push_unit(
    manifest: &mut Manifest,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    batch_norm: bool,
    bns: &mut Vec<Bn>,
) -> Unit {
    let weight = manifest.push(
        format!("{prefix}.conv.weight"),
        Role::Weight,
        &[cout, cin, k, k],
    );
    let bias =
        (!batch_norm).then(|| manifest.push(format!("{prefix}.conv.bias"), Role::Bias, &[cout]));
    let bn = batch_norm.then(|| {
        let bn = Bn {
            gain: manifest.push(format!("{prefix}.bn.gain"), Role::BnGain, &[cout]),
            shift: manifest.push(format!("{prefix}.bn.shift"), Role::BnShift, &[cout]),
            mean: manifest.push(
                format!("{prefix}.bn.running_mean"),
                Role::BnRunningMean,
                &[cout],
            ),
            var: manifest.push(
                format!("{prefix}.bn.running_var"),
                Role::BnRunningVar,
                &[cout],
            ),
            ch: cout,
        };
        bns.push(bn.clone());
        bn
    });
    Unit {
        conv: Conv {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        },
        bn,
    }
}

impl ResnetLayout {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        widths: &[usize],
        blocks_per_stage: usize,
        batch_norm: bool,
        classes: usize,
        manifest: &mut Manifest,
    ) -> Self {
        let mut bns = Vec::new();
        let stem = push_unit(
            manifest, "stem", channels, widths[0], 3, 1, batch_norm, &mut bns,
        );
        let mut blocks = Vec::new();
        let mut cin = widths[0];
        for (s, &w) in widths.iter().enumerate() {
            for b in 0..blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let p = format!("stage{s}.block{b}");
                let c1 = push_unit(
                    manifest,
                    &format!("{p}.conv1"),
                    cin,
                    w,
                    3,
                    stride,
                    batch_norm,
                    &mut bns,
                );
                let c2 = push_unit(
                    manifest,
                    &format!("{p}.conv2"),
                    w,
                    w,
                    3,
                    1,
                    batch_norm,
                    &mut bns,
                );
                let shortcut = (stride != 1 || cin != w).then(|| {
                    push_unit(
                        manifest,
                        &format!("{p}.shortcut"),
                        cin,
                        w,
                        1,
                        stride,
                        batch_norm,
                        &mut bns,
                    )
                });
                blocks.push(Block { c1, c2, shortcut });
                cin = w;
            }
        }
        let feat = cin;
        let head_weight = manifest.push("head.weight", Role::Weight, &[classes, feat]);
        let head_bias = manifest.push("head.bias", Role::Bias, &[classes]);
        ResnetLayout {
            in_c: channels,
            in_h: height,
            in_w: width,
            stem,
            blocks,
            head_weight,
            head_bias,
            feat,
            classes,
            bns,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Batch-norm layers in manifest order.
    pub fn bn_layers(&self) -> &[Bn] {
        &self.bns
    }

    /// Converts `n` examples stored `[N, C, H, W]` into the `[C, N, H, W]` layout.
    fn input_act<T: Real>(&self, x: &[T], n: usize) -> Act<T> {
        let hw = self.in_h * self.in_w;
        let mut a = Act::zeros(self.in_c, n, self.in_h, self.in_w);
        for i in 0..n {
            for c in 0..self.in_c {
                let src = &x[(i * self.in_c + c) * hw..][..hw];
                a.data[(c * n + i) * hw..][..hw].copy_from_slice(src);
            }
        }
        a
    }

    /// Inference-mode logits (`[N, classes]`), BN using stored running statistics.
    pub fn forward_infer<T: Real>(&self, params: &[T], x: &[T], n: usize) -> Vec<T> {
        match self.infer_until(params, x, n, None) {
            InferOut::Logits(l) => l,
            InferOut::BnInput(_) => unreachable!(),
        }
    }

    /// Inference-mode pass that stops at the input of BN layer `index`
    /// (manifest order) and returns that activation.
    pub fn bn_input<T: Real>(&self, params: &[T], x: &[T], n: usize, index: usize) -> Act<T> {
        match self.infer_until(params, x, n, Some(index)) {
            InferOut::BnInput(a) => a,
            InferOut::Logits(_) => panic!("BN index {index} out of range"),
        }
    }

    fn infer_until<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        n: usize,
        stop: Option<usize>,
    ) -> InferOut<T> {
        let mut counter = 0usize;
        // Runs one unit; returns Err(activation) when the stop BN is reached.
        let mut unit = |u: &Unit, input: &Act<T>| -> Result<Act<T>, Act<T>> {
            let mut z = conv_forward(&u.conv, params, input);
            if let Some(bn) = &u.bn {
                if stop == Some(counter) {
                    return Err(z);
                }
                counter += 1;
                bn_infer(bn, params, &mut z);
            }
            Ok(z)
        };
        let input = self.input_act(x, n);
        let mut act = match unit(&self.stem, &input) {
            Ok(a) => a,
            Err(a) => return InferOut::BnInput(a),
        };
        relu_inplace(&mut act.data);
        for b in &self.blocks {
            let mut h = match unit(&b.c1, &act) {
                Ok(a) => a,
                Err(a) => return InferOut::BnInput(a),
            };
            relu_inplace(&mut h.data);
            let mut h2 = match unit(&b.c2, &h) {
                Ok(a) => a,
                Err(a) => return InferOut::BnInput(a),
            };
            match &b.shortcut {
                Some(s) => {
                    let sc = match unit(s, &act) {
                        Ok(a) => a,
                        Err(a) => return InferOut::BnInput(a),
                    };
                    add_inplace(&mut h2.data, &sc.data);
                }
                None => add_inplace(&mut h2.data, &act.data),
            }
            relu_inplace(&mut h2.data);
            act = h2;
        }
        InferOut::Logits(self.head_forward(params, &global_pool(&act)))
    }

    fn head_forward<T: Real>(&self, params: &[T], pooled: &Pooled<T>) -> Vec<T> {
        let n = pooled.n;
        let w = &params[self.head_weight..self.head_weight + self.classes * self.feat];
        let b = &params[self.head_bias..self.head_bias + self.classes];
        let mut logits = vec![T::zero(); n * self.classes];
        // [N, C] = pooled^T [N, feat] * W^T [feat, C]
        gemm(
            Mat::new(&pooled.data, self.feat, n).t(),
            Mat::new(w, self.classes, self.feat).t(),
            T::zero(),
            &mut logits,
        );
        for row in logits.chunks_exact_mut(self.classes) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        logits
    }

    /// Training-mode forward and backward pass. BN layers normalize with
    /// batch statistics. Returns the batch statistics of every BN layer
    /// (mean, unbiased variance) in manifest order.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        n: usize,
        grad: &mut [T],
        dlogits_fn: impl FnOnce(&[T]) -> Vec<T>,
    ) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut stats = Vec::new();
        let input = self.input_act(x, n);

        // Forward with caches.
        let (mut act, stem_cache) = unit_train(&self.stem, params, &input, &mut stats);
        relu_inplace(&mut act.data);
        let stem_relu = act.data.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let block_in = act;
            let (mut h, c1) = unit_train(&b.c1, params, &block_in, &mut stats);
            relu_inplace(&mut h.data);
            let (mut h2, c2) = unit_train(&b.c2, params, &h, &mut stats);
            let sc_cache = match &b.shortcut {
                Some(s) => {
                    let (sc, cache) = unit_train(s, params, &block_in, &mut stats);
                    add_inplace(&mut h2.data, &sc.data);
                    Some(cache)
                }
                None => {
                    add_inplace(&mut h2.data, &block_in.data);
                    None
                }
            };
            relu_inplace(&mut h2.data);
            caches.push(BlockCache {
                c1,
                relu1: h,
                c2,
                shortcut: sc_cache,
                out: h2.clone(),
            });
            act = h2;
        }
        let pooled = global_pool(&act);
        let logits = self.head_forward(params, &pooled);
        let dlogits = dlogits_fn(&logits);

        // Head backward.
        gemm(
            Mat::new(&dlogits, n, self.classes).t(),
            Mat::new(&pooled.data, self.feat, n).t(),
            T::zero(),
            &mut grad[self.head_weight..self.head_weight + self.classes * self.feat],
        );
        let gb = &mut grad[self.head_bias..self.head_bias + self.classes];
        gb.fill(T::zero());
        for row in dlogits.chunks_exact(self.classes) {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        let w = &params[self.head_weight..self.head_weight + self.classes * self.feat];
        let mut dpooled = vec![T::zero(); self.feat * n];
        gemm(
            Mat::new(w, self.classes, self.feat).t(),
            Mat::new(&dlogits, n, self.classes).t(),
            T::zero(),
            &mut dpooled,
        );
        let hw = act.h * act.w;
        let scale = T::one() / T::from_f64(hw as f64);
        let mut dact = Act::zeros(act.c, n, act.h, act.w);
        for (plane, &d) in dact.data.chunks_exact_mut(hw).zip(&dpooled) {
            plane.fill(d * scale);
        }

        for (b, cache) in self.blocks.iter().zip(caches).rev() {
            // Through the output ReLU.
            for (d, &o) in dact.data.iter_mut().zip(&cache.out.data) {
                if o <= T::zero() {
                    *d = T::zero();
                }
            }
            let mut dh = unit_backward(&b.c2, params, grad, &cache.c2, &dact);
            for (d, &o) in dh.data.iter_mut().zip(&cache.relu1.data) {
                if o <= T::zero() {
                    *d = T::zero();
                }
            }
            let mut dx = unit_backward(&b.c1, params, grad, &cache.c1, &dh);
            match (&b.shortcut, &cache.shortcut) {
                (Some(s), Some(sc)) => {
                    let ds = unit_backward(s, params, grad, sc, &dact);
                    add_inplace(&mut dx.data, &ds.data);
                }
                _ => add_inplace(&mut dx.data, &dact.data),
            }
            dact = dx;
        }
        for (d, &o) in dact.data.iter_mut().zip(&stem_relu) {
            if o <= T::zero() {
                *d = T::zero();
            }
        }
        unit_backward(&self.stem, params, grad, &stem_cache, &dact);
        stats
    }
}

enum InferOut<T> {
    Logits(Vec<T>),
    BnInput(Act<T>),
}

struct UnitCache<T> {
    input: Act<T>,
    /// Normalized pre-affine values and inverse std, present when BN is on.
    bn: Option<(Vec<T>, Vec<T>)>,
}

struct BlockCache<T> {
    c1: UnitCache<T>,
    relu1: Act<T>,
    c2: UnitCache<T>,
    shortcut: Option<UnitCache<T>>,
    out: Act<T>,
}

fn unit_train<T: Real>(
    u: &Unit,
    params: &[T],
    input: &Act<T>,
    stats: &mut Vec<(Vec<f64>, Vec<f64>)>,
) -> (Act<T>, UnitCache<T>) {
    let mut z = conv_forward(&u.conv, params, input);
    let bn = u.bn.as_ref().map(|bn| {
        let (xhat, inv_std, mean, var) = bn_train(bn, params, &mut z);
        stats.push((mean, var));
        (xhat, inv_std)
    });
    let cache = UnitCache {
        input: input.clone(),
        bn,
    };
    (z, cache)
}

/// Backward through conv (+BN). `dout` is the gradient w.r.t. the unit output.
/// Writes the unit's parameter gradients into `grad` and returns the input
/// gradient.
fn unit_backward<T: Real>(
    u: &Unit,
    params: &[T],
    grad: &mut [T],
    cache: &UnitCache<T>,
    dout: &Act<T>,
) -> Act<T> {
    let mut dz = dout.data.clone();
    if let (Some(bn), Some((xhat, inv_std))) = (&u.bn, &cache.bn) {
        bn_backward(bn, params, grad, xhat, inv_std, &mut dz, dout.plane());
    }
    conv_backward(&u.conv, params, grad, &cache.input, &dz, dout.h, dout.w)
}

fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Column buffer `[cin * k * k, N * Ho * Wo]`.
fn im2col<T: Real>(conv: &Conv, x: &Act<T>, ho: usize, wo: usize) -> Vec<T> {
    let k = conv.k;
    let cols_n = x.n * ho * wo;
    let mut cols = vec![T::zero(); conv.cin * k * k * cols_n];
    let hw = x.h * x.w;
    for c in 0..conv.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for i in 0..x.n {
                    let src = &x.data[(c * x.n + i) * hw..][..hw];
                    for oy in 0..ho {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        let drow = &mut dst[(i * ho + oy) * wo..][..wo];
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * x.w..][..x.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    conv: &Conv,
    cols: &[T],
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Act<T> {
    let k = conv.k;
    let cols_n = n * ho * wo;
    let mut dx = Act::zeros(conv.cin, n, h, w);
    let hw = h * w;
    for c in 0..conv.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for i in 0..n {
                    let dst = &mut dx.data[(c * n + i) * hw..][..hw];
                    for oy in 0..ho {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(i * ho + oy) * wo..][..wo];
                        let drow = &mut dst[iy as usize * w..][..w];
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward<T: Real>(conv: &Conv, params: &[T], x: &Act<T>) -> Act<T> {
    let ho = out_dim(x.h, conv.k, conv.stride, conv.pad);
    let wo = out_dim(x.w, conv.k, conv.stride, conv.pad);
    let kk = conv.cin * conv.k * conv.k;
    let cols = im2col(conv, x, ho, wo);
    let mut out = Act::zeros(conv.cout, x.n, ho, wo);
    let w = &params[conv.weight..conv.weight + conv.cout * kk];
    gemm(
        Mat::new(w, conv.cout, kk),
        Mat::new(&cols, kk, x.n * ho * wo),
        T::zero(),
        &mut out.data,
    );
    if let Some(b) = conv.bias {
        let plane = out.plane();
        for (c, chan) in out.data.chunks_exact_mut(plane).enumerate() {
            let bb = params[b + c];
            for v in chan {
                *v += bb;
            }
        }
    }
    out
}

fn conv_backward<T: Real>(
    conv: &Conv,
    params: &[T],
    grad: &mut [T],
    input: &Act<T>,
    dz: &[T],
    ho: usize,
    wo: usize,
) -> Act<T> {
    let kk = conv.cin * conv.k * conv.k;
    let cols_n = input.n * ho * wo;
    let cols = im2col(conv, input, ho, wo);
    // dW [cout, kk] = dz [cout, cols_n] * cols^T [cols_n, kk]
    gemm(
        Mat::new(dz, conv.cout, cols_n),
        Mat::new(&cols, kk, cols_n).t(),
        T::zero(),
        &mut grad[conv.weight..conv.weight + conv.cout * kk],
    );
    if let Some(b) = conv.bias {
        for (c, chan) in dz.chunks_exact(cols_n).enumerate() {
            grad[b + c] = chan.iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    let w = &params[conv.weight..conv.weight + conv.cout * kk];
    let mut dcols = vec![T::zero(); kk * cols_n];
    gemm(
        Mat::new(w, conv.cout, kk).t(),
        Mat::new(dz, conv.cout, cols_n),
        T::zero(),
        &mut dcols,
    );
    col2im(conv, &dcols, input.n, input.h, input.w, ho, wo)
}

/// Inference BN with running statistics; the variance is clamped to at
/// least the epsilon before use.
fn bn_infer<T: Real>(bn: &Bn, params: &[T], z: &mut Act<T>) {
    let plane = z.plane();
    let eps = BN_EPS;
    for (c, chan) in z.data.chunks_exact_mut(plane).enumerate() {
        let var = params[bn.var + c].as_f64().max(eps);
        let inv = T::from_f64(1.0 / (var + eps).sqrt());
        let mean = params[bn.mean + c];
        let gain = params[bn.gain + c];
        let shift = params[bn.shift + c];
        let scale = gain * inv;
        for v in chan {
            *v = (*v - mean) * scale + shift;
        }
    }
}

/// Training BN. Returns (xhat, inv_std per channel, batch mean, unbiased batch var).
fn bn_train<T: Real>(
    bn: &Bn,
    params: &[T],
    z: &mut Act<T>,
) -> (Vec<T>, Vec<T>, Vec<f64>, Vec<f64>) {
    let plane = z.plane();
    let m = T::from_f64(plane as f64);
    let eps = T::from_f64(BN_EPS);
    let mut xhat = vec![T::zero(); z.data.len()];
    let mut inv_stds = Vec::with_capacity(bn.ch);
    let mut means = Vec::with_capacity(bn.ch);
    let mut vars = Vec::with_capacity(bn.ch);
    for (c, (chan, xh)) in z
        .data
        .chunks_exact_mut(plane)
        .zip(xhat.chunks_exact_mut(plane))
        .enumerate()
    {
        let mean = chan.iter().fold(T::zero(), |a, &v| a + v) / m;
        let var = chan
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / m;
        let inv = T::one() / (var + eps).sqrt();
        let gain = params[bn.gain + c];
        let shift = params[bn.shift + c];
        for (v, x) in chan.iter_mut().zip(xh.iter_mut()) {
            *x = (*v - mean) * inv;
            *v = gain * *x + shift;
        }
        inv_stds.push(inv);
        means.push(mean.as_f64());
        vars.push(var.as_f64() * plane as f64 / (plane as f64 - 1.0).max(1.0));
    }
    (xhat, inv_stds, means, vars)
}

fn bn_backward<T: Real>(
    bn: &Bn,
    params: &[T],
    grad: &mut [T],
    xhat: &[T],
    inv_std: &[T],
    dz: &mut [T],
    plane: usize,
) {
    let m = T::from_f64(plane as f64);
    for (c, (dchan, xh)) in dz
        .chunks_exact_mut(plane)
        .zip(xhat.chunks_exact(plane))
        .enumerate()
    {
        let gain = params[bn.gain + c];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&d, &x) in dchan.iter().zip(xh) {
            sum_dy += d;
            sum_dy_xhat += d * x;
        }
        grad[bn.gain + c] = sum_dy_xhat;
        grad[bn.shift + c] = sum_dy;
        grad[bn.mean + c] = T::zero();
        grad[bn.var + c] = T::zero();
        let k = gain * inv_std[c] / m;
        for (d, &x) in dchan.iter_mut().zip(xh) {
            *d = k * (m * *d - sum_dy - x * sum_dy_xhat);
        }
    }
}

struct Pooled<T> {
    /// `[C, N]`
    data: Vec<T>,
    n: usize,
}

fn global_pool<T: Real>(a: &Act<T>) -> Pooled<T> {
    let hw = a.h * a.w;
    let inv = T::one() / T::from_f64(hw as f64);
    let data = a
        .data
        .chunks_exact(hw)
        .map(|p| p.iter().fold(T::zero(), |s, &v| s + v) * inv)
        .collect();
    Pooled { data, n: a.n }
}

fn add_inplace<T: Real>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

//! Fully-connected ReLU network.

use super::params::{Manifest, Role};
use super::scalar::{gemm, Mat, Real};

#[derive(Debug, Clone)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpLayout {
    layers: Vec<Dense>,
    classes: usize,
}

impl MlpLayout {
    pub fn new(input: usize, hidden: &[usize], classes: usize, manifest: &mut Manifest) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight =
                    manifest.push(format!("fc{i}.weight"), Role::Weight, &[fan_out, fan_in]);
                let bias = manifest.push(format!("fc{i}.bias"), Role::Bias, &[fan_out]);
                Dense {
                    fan_in,
                    fan_out,
                    weight,
                    bias,
                }
            })
            .collect();
        MlpLayout { layers, classes }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Logits for `n` row-major examples.
    pub fn forward<T: Real>(&self, params: &[T], x: &[T], n: usize) -> Vec<T> {
        let mut act = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.apply(params, &act, n);
            act = z;
            if i != last {
                relu_inplace(&mut act);
            }
        }
        act
    }

    /// Gradient of `sum_i weight * dlogits`-style objective. `dlogits_fn`
    /// receives the logits and returns d(loss)/d(logits).
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        n: usize,
        grad: &mut [T],
        dlogits_fn: impl FnOnce(&[T]) -> Vec<T>,
    ) {
        // Forward pass keeping every layer's activation (post-ReLU).
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.apply(params, acts.last().unwrap(), n);
            if i != last {
                relu_inplace(&mut z);
            }
            acts.push(z);
        }
        let mut delta = dlogits_fn(acts.last().unwrap());
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            // dW[out, in] = delta^T [out, n] * input [n, in]
            let gw = &mut grad[l.weight..l.weight + l.fan_out * l.fan_in];
            gemm(
                Mat::new(&delta, n, l.fan_out).t(),
                Mat::new(input, n, l.fan_in),
                T::zero(),
                gw,
            );
            let gb = &mut grad[l.bias..l.bias + l.fan_out];
            gb.fill(T::zero());
            for row in delta.chunks_exact(l.fan_out) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if i == 0 {
                break;
            }
            // d(input)[n, in] = delta [n, out] * W [out, in], masked by ReLU.
            let w = &params[l.weight..l.weight + l.fan_out * l.fan_in];
            let mut dinput = vec![T::zero(); n * l.fan_in];
            gemm(
                Mat::new(&delta, n, l.fan_out),
                Mat::new(w, l.fan_out, l.fan_in),
                T::zero(),
                &mut dinput,
            );
            for (d, &a) in dinput.iter_mut().zip(input) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            delta = dinput;
        }
    }
}

impl Dense {
    fn apply<T: Real>(&self, params: &[T], x: &[T], n: usize) -> Vec<T> {
        let w = &params[self.weight..self.weight + self.fan_out * self.fan_in];
        let b = &params[self.bias..self.bias + self.fan_out];
        let mut out = vec![T::zero(); n * self.fan_out];
        gemm(
            Mat::new(x, n, self.fan_in),
            Mat::new(w, self.fan_out, self.fan_in).t(),
            T::zero(),
            &mut out,
        );
        for row in out.chunks_exact_mut(self.fan_out) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        out
    }
}

pub(crate) fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

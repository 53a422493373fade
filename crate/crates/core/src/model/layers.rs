use crate::kernels::dense::{gemm, layer_norm_rows, layer_norm_rows_backward, LayerNormCache};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Affine map `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn random(fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Tensor::from_fn(&[fan_in, fan_out], |_| std * rng.normal()),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies the map to `rows` row vectors stored contiguously in `x`.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let n = self.fan_out();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.as_slice());
        }
        gemm(rows, self.fan_in(), n, x, false, self.weight.as_slice(), false, 1.0, &mut out);
        out
    }

    /// Returns the input gradient; accumulates parameter gradients into `grads`.
    pub fn backward(&self, x: &[f64], dy: &[f64], rows: usize, grads: Option<&mut Linear>) -> Vec<f64> {
        let (k, n) = (self.fan_in(), self.fan_out());
        let mut dx = vec![0.0; rows * k];
        gemm(rows, n, k, dy, false, self.weight.as_slice(), true, 0.0, &mut dx);
        if let Some(g) = grads {
            gemm(k, rows, n, x, true, dy, false, 1.0, g.weight.as_mut_slice());
            let db = g.bias.as_mut_slice();
            for row in dy.chunks_exact(n) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::full(&[dim], 1.0),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gain: Tensor::zeros(&[dim]),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let mut out = vec![0.0; x.len()];
        let cache = layer_norm_rows(x, self.gain.as_slice(), self.bias.as_slice(), &mut out, self.dim());
        (out, cache)
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &[f64], grads: Option<&mut LayerNorm>) -> Vec<f64> {
        let mut dx = vec![0.0; dy.len()];
        let (dg, db) = match grads {
            Some(g) => (Some(g.gain.as_mut_slice()), Some(g.bias.as_mut_slice())),
            None => (None, None),
        };
        layer_norm_rows_backward(cache, self.gain.as_slice(), dy, &mut dx, dg, db, self.dim());
        dx
    }
}

/// Numerically stable cross-entropy; returns `(loss, d loss / d logits)`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> (f64, Tensor) {
    let z = logits.as_slice();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let grad = Tensor::from_fn(logits.shape(), |i| {
        let p = (z[i] - lse).exp();
        if i == label {
            p - 1.0
        } else {
            p
        }
    });
    (lse - z[label], grad)
}

/// Class probabilities from logits.
pub fn probabilities(logits: &Tensor) -> Tensor {
    crate::kernels::softmax(logits)
}

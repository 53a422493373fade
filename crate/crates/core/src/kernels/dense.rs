//! Differentiable dense kernels: matrix products, softmax, layer norm, GELU.
//!
//! Each kernel comes as a slice-level routine (used by the model code on
//! raw buffers) and a `Tensor` wrapper with shape checks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// With `a_t` set, `a` is stored as `k × m`; with `b_t`, `b` is stored `n × k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extent the strides
    // describe, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place softmax over each row of length `cols`.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Softmax vector-Jacobian product: `dx_j = y_j (dy_j - Σ_k y_k dy_k)`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], dx: &mut [f64], cols: usize) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let inner: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - inner);
        }
    }
}

/// Per-row statistics saved by the layer norm forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    /// Normalized input `(x - mean) / std`, same layout as the input.
    pub xhat: Vec<f64>,
    /// Reciprocal standard deviation per row.
    pub rstd: Vec<f64>,
}

pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    cols: usize,
) -> LayerNormCache {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..cols {
            let h = (xr[j] - mean) * rs;
            xhat[r * cols + j] = h;
            out[r * cols + j] = h * gain[j] + bias[j];
        }
    }
    LayerNormCache { xhat, rstd }
}

/// Layer norm backward. Accumulates into `dgain`/`dbias` when given.
pub fn layer_norm_rows_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
    cols: usize,
) {
    let n = cols as f64;
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let xh = &cache.xhat[r * cols..(r + 1) * cols];
        let g = &dy[r * cols..(r + 1) * cols];
        let mut sum_dh = 0.0;
        let mut sum_dh_xh = 0.0;
        for j in 0..cols {
            let dh = g[j] * gain[j];
            sum_dh += dh;
            sum_dh_xh += dh * xh[j];
        }
        for j in 0..cols {
            let dh = g[j] * gain[j];
            dx[r * cols + j] = rs * (dh - sum_dh / n - xh[j] * sum_dh_xh / n);
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..cols {
                dg[j] += g[j] * xh[j];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..cols {
                db[j] += g[j];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n)),
        _ => Err(Error::invalid(format!(
            "matmul of {:?} and {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

fn out_shape(batch: usize, rank: usize, m: usize, n: usize) -> Vec<usize> {
    if rank == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    }
}

/// `[m,k]·[k,n]`, or batched `[B,m,k]·[B,k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.as_slice()[i * m * k..(i + 1) * m * k],
            false,
            &b.as_slice()[i * k * n..(i + 1) * k * n],
            false,
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Tensor::new(&out_shape(batch, a.rank(), m, n), out)
}

/// Gradients of `matmul(a, b)` with respect to `a` and `b`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (batch, m, k, n) = matmul_dims(a, b)?;
    grad_out.expect_shape(&out_shape(batch, a.rank(), m, n))?;
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for i in 0..batch {
        let av = &a.as_slice()[i * m * k..(i + 1) * m * k];
        let bv = &b.as_slice()[i * k * n..(i + 1) * k * n];
        let gv = &grad_out.as_slice()[i * m * n..(i + 1) * m * n];
        gemm(m, n, k, gv, false, bv, true, 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
        gemm(k, m, n, av, true, gv, false, 0.0, &mut gb[i * k * n..(i + 1) * k * n]);
    }
    Ok((
        Tensor::new(a.shape(), ga)?,
        Tensor::new(b.shape(), gb)?,
    ))
}

fn last_dim(x: &Tensor) -> usize {
    *x.shape().last().expect("tensor rank >= 1")
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    softmax_rows(out.as_mut_slice(), last_dim(x));
    out
}

/// Gradient of softmax given its output `y` and upstream gradient.
pub fn softmax_backward(y: &Tensor, grad_y: &Tensor) -> Result<Tensor> {
    y.same_shape(grad_y)?;
    let mut dx = Tensor::zeros(y.shape());
    softmax_rows_backward(y.as_slice(), grad_y.as_slice(), dx.as_mut_slice(), last_dim(y));
    Ok(dx)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let d = last_dim(x);
    gain.expect_shape(&[d])?;
    bias.expect_shape(&[d])?;
    let mut out = Tensor::zeros(x.shape());
    let cache = layer_norm_rows(x.as_slice(), gain.as_slice(), bias.as_slice(), out.as_mut_slice(), d);
    Ok((out, cache))
}

/// Returns `(grad_x, grad_gain, grad_bias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    grad_y: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = gain.len();
    if grad_y.len() != cache.xhat.len() || last_dim(grad_y) != d {
        return Err(Error::invalid("layer norm gradient does not match cache"));
    }
    let mut dx = Tensor::zeros(grad_y.shape());
    let mut dg = Tensor::zeros(&[d]);
    let mut db = Tensor::zeros(&[d]);
    layer_norm_rows_backward(
        cache,
        gain.as_slice(),
        grad_y.as_slice(),
        dx.as_mut_slice(),
        Some(dg.as_mut_slice()),
        Some(db.as_mut_slice()),
        d,
    );
    Ok((dx, dg, db))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, grad_y: &Tensor) -> Result<Tensor> {
    x.zip_map(grad_y, |v, g| g * gelu_grad_scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    /// Central-difference gradient of `sum(w ⊙ f(x))` with respect to `x`.
    fn numeric_grad(x: &Tensor, w: &Tensor, f: impl Fn(&Tensor) -> Tensor, h: f64) -> Tensor {
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let fp = f(&xp).dot(w).unwrap();
            let fm = f(&xm).dot(w).unwrap();
            g.as_mut_slice()[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs() / (y.abs().max(x.abs()) + 1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_small_exact() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = Rng::new(11, 0);
        for _ in 0..10 {
            let a = random(&[5, 7], &mut rng);
            let b = random(&[7, 3], &mut rng);
            let w = random(&[5, 3], &mut rng);
            let (ga, gb) = matmul_backward(&a, &b, &w).unwrap();
            let na = numeric_grad(&a, &w, |x| matmul(x, &b).unwrap(), 1e-5);
            let nb = numeric_grad(&b, &w, |x| matmul(&a, x).unwrap(), 1e-5);
            assert!(max_rel_err(&ga, &na) < 1e-6);
            assert!(max_rel_err(&gb, &nb) < 1e-6);
        }
    }

    #[test]
    fn batched_matmul_backward() {
        let mut rng = Rng::new(12, 0);
        let a = random(&[3, 4, 5], &mut rng);
        let b = random(&[3, 5, 2], &mut rng);
        let w = random(&[3, 4, 2], &mut rng);
        let (ga, gb) = matmul_backward(&a, &b, &w).unwrap();
        let na = numeric_grad(&a, &w, |x| matmul(x, &b).unwrap(), 1e-5);
        let nb = numeric_grad(&b, &w, |x| matmul(&a, x).unwrap(), 1e-5);
        assert!(max_rel_err(&ga, &na) < 1e-6);
        assert!(max_rel_err(&gb, &nb) < 1e-6);
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let y = softmax(&Tensor::zeros(&[3]));
        for &v in y.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let dx = softmax_backward(&y, &Tensor::full(&[3], 2.5)).unwrap();
        assert!(dx.max_abs() < 1e-15);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = Rng::new(13, 0);
        for _ in 0..10 {
            let x = random(&[4, 6], &mut rng);
            let w = random(&[4, 6], &mut rng);
            let y = softmax(&x);
            let g = softmax_backward(&y, &w).unwrap();
            let n = numeric_grad(&x, &w, softmax, 1e-5);
            assert!(max_rel_err(&g, &n) < 1e-5, "{}", max_rel_err(&g, &n));
        }
    }

    #[test]
    fn layer_norm_of_standardized_row_is_identity() {
        let x = Tensor::new(&[1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        for (a, b) in y.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = Rng::new(14, 0);
        for _ in 0..10 {
            let x = random(&[3, 8], &mut rng);
            let gain = random(&[8], &mut rng);
            let bias = random(&[8], &mut rng);
            let w = random(&[3, 8], &mut rng);
            let (_, cache) = layer_norm(&x, &gain, &bias).unwrap();
            let (gx, gg, gbias) = layer_norm_backward(&cache, &gain, &w).unwrap();
            let nx = numeric_grad(&x, &w, |t| layer_norm(t, &gain, &bias).unwrap().0, 1e-5);
            let ng = numeric_grad(&gain, &w, |t| layer_norm(&x, t, &bias).unwrap().0, 1e-5);
            let nb = numeric_grad(&bias, &w, |t| layer_norm(&x, &gain, t).unwrap().0, 1e-5);
            assert!(max_rel_err(&gx, &nx) < 1e-5, "{}", max_rel_err(&gx, &nx));
            assert!(max_rel_err(&gg, &ng) < 1e-5);
            assert!(max_rel_err(&gbias, &nb) < 1e-5);
        }
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let mut rng = Rng::new(15, 0);
        for _ in 0..10 {
            let x = random(&[20], &mut rng).scale(2.0);
            let w = random(&[20], &mut rng);
            let g = gelu_backward(&x, &w).unwrap();
            let n = numeric_grad(&x, &w, gelu, 1e-5);
            assert!(max_rel_err(&g, &n) < 1e-5);
        }
    }
}

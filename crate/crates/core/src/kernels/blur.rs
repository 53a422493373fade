//! Separable Gaussian blur with reflect padding, and its exact adjoint.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One-dimensional Gaussian taps, applied separably along rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn radius(&self) -> usize {
        self.weights.len() / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Normalized taps `w_j ∝ exp(-j² / 2σ²)` for `j ∈ [-(size-1)/2, (size-1)/2]`.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<GaussianKernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::invalid(format!("blur kernel size must be odd, got {size}")));
    }
    let r = (size / 2) as i64;
    let mut weights: Vec<f64> = (-r..=r)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    // Enforce exact symmetry after normalization.
    for j in 0..size / 2 {
        let v = weights[j];
        weights[size - 1 - j] = v;
    }
    Ok(GaussianKernel { sigma, weights })
}

/// Mirror an out-of-range index back into `[0, n)` without repeating the edge.
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn check_image(image: &Tensor, kernel: &GaussianKernel) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::invalid(format!("blur2d expects [C,H,W], got {s:?}"))),
    };
    if h < kernel.size() || w < kernel.size() {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than blur kernel {}",
            kernel.size()
        )));
    }
    Ok((c, h, w))
}

/// Horizontal then vertical Gaussian filtering of every channel.
pub fn blur2d(image: &Tensor, kernel: &GaussianKernel) -> Result<Tensor> {
    let (c, h, w) = check_image(image, kernel)?;
    let r = kernel.radius() as i64;
    let wts = kernel.weights();
    let mut out = Tensor::zeros(image.shape());
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let src = image.channel(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &wt) in wts.iter().enumerate() {
                    let xx = reflect(x as i64 + t as i64 - r, w);
                    acc += wt * src[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &wt) in wts.iter().enumerate() {
                    let yy = reflect(y as i64 + t as i64 - r, h);
                    acc += wt * tmp[yy * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`blur2d`]: maps a gradient on the blurred image back to the input.
pub fn blur2d_backward(grad_out: &Tensor, kernel: &GaussianKernel) -> Result<Tensor> {
    let (c, h, w) = check_image(grad_out, kernel)?;
    let r = kernel.radius() as i64;
    let wts = kernel.weights();
    let mut out = Tensor::zeros(grad_out.shape());
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let g = grad_out.channel(ch);
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..h {
            for x in 0..w {
                let gv = g[y * w + x];
                for (t, &wt) in wts.iter().enumerate() {
                    let yy = reflect(y as i64 + t as i64 - r, h);
                    tmp[yy * w + x] += wt * gv;
                }
            }
        }
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let gv = tmp[y * w + x];
                for (t, &wt) in wts.iter().enumerate() {
                    let xx = reflect(x as i64 + t as i64 - r, w);
                    dst[y * w + xx] += wt * gv;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn kernel_half_sigma_taps() {
        let k = gaussian_kernel(0.5, 3).unwrap();
        let w = k.weights();
        assert!((w[0] - 0.106_506_98).abs() < 1e-6);
        assert!((w[1] - 0.786_986_04).abs() < 1e-6);
        assert_eq!(w[0], w[2]);
        assert!((w[1] * w[1] - 0.6193).abs() < 1e-4);
    }

    #[test]
    fn kernel_limits_and_normalization() {
        let k = gaussian_kernel(1e-6, 3).unwrap();
        assert!((k.weights()[1] - 1.0).abs() < 1e-9);
        assert!(k.weights()[0].abs() < 1e-9);
        for sigma in [0.5, 0.7, 1.0, 3.0] {
            for size in [1, 3, 5, 7] {
                let k = gaussian_kernel(sigma, size).unwrap();
                assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let w = k.weights();
                for j in 0..size {
                    assert_eq!(w[j], w[size - 1 - j]);
                }
            }
        }
    }

    #[test]
    fn kernel_rejects_bad_arguments() {
        assert!(gaussian_kernel(0.0, 3).is_err());
        assert!(gaussian_kernel(-1.0, 3).is_err());
        assert!(gaussian_kernel(0.5, 4).is_err());
        assert!(gaussian_kernel(0.5, 0).is_err());
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let k = gaussian_kernel(0.9, 5).unwrap();
        let img = Tensor::full(&[3, 8, 8], 0.37);
        let out = blur2d(&img, &k).unwrap();
        for &v in out.as_slice() {
            assert!((v - 0.37).abs() < 1e-14);
        }
    }

    #[test]
    fn tiny_sigma_is_identity() {
        let mut rng = Rng::new(2, 0);
        let img = Tensor::from_fn(&[2, 9, 7], |_| rng.uniform());
        let out = blur2d(&img, &gaussian_kernel(1e-6, 3).unwrap()).unwrap();
        assert!(out.sub(&img).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn rejects_small_image() {
        let k = gaussian_kernel(1.0, 5).unwrap();
        assert!(blur2d(&Tensor::zeros(&[1, 4, 8]), &k).is_err());
    }

    /// Direct 2-D convolution with the outer-product kernel.
    fn dense_blur(img: &Tensor, k: &GaussianKernel) -> Tensor {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let r = k.radius() as i64;
        let wt = k.weights();
        Tensor::from_fn(img.shape(), |idx| {
            let ch = idx / (h * w);
            let y = (idx / w) % h;
            let x = idx % w;
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = reflect(y as i64 + dy, h);
                    let xx = reflect(x as i64 + dx, w);
                    acc += wt[(dy + r) as usize] * wt[(dx + r) as usize]
                        * img.as_slice()[ch * h * w + yy * w + xx];
                }
            }
            let _ = c;
            acc
        })
    }

    fn variance(t: &Tensor) -> f64 {
        let m = t.mean();
        t.as_slice().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t.len() as f64
    }

    #[test]
    fn checkerboard_variance_drops() {
        let img = Tensor::from_fn(&[1, 32, 32], |i| {
            if ((i / 32) + (i % 32)) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let k = gaussian_kernel(0.5, 3).unwrap();
        let out = blur2d(&img, &k).unwrap();
        let oracle = dense_blur(&img, &k);
        assert!(out.sub(&oracle).unwrap().max_abs() < 1e-12);
        assert!(variance(&out) < variance(&img));
    }

    #[test]
    fn separable_matches_dense_on_random() {
        let mut rng = Rng::new(3, 0);
        let img = Tensor::from_fn(&[3, 10, 12], |_| rng.normal());
        let k = gaussian_kernel(1.3, 5).unwrap();
        let out = blur2d(&img, &k).unwrap();
        assert!(out.sub(&dense_blur(&img, &k)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn backward_is_adjoint() {
        let mut rng = Rng::new(4, 0);
        let k = gaussian_kernel(0.7, 3).unwrap();
        for _ in 0..10 {
            let x = Tensor::from_fn(&[3, 8, 8], |_| rng.normal());
            let y = Tensor::from_fn(&[3, 8, 8], |_| rng.normal());
            let lhs = blur2d(&x, &k).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&blur2d_backward(&y, &k).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn blur_is_linear() {
        let mut rng = Rng::new(5, 0);
        let k = gaussian_kernel(1.0, 3).unwrap();
        let x = Tensor::from_fn(&[3, 16, 16], |_| rng.normal());
        let y = Tensor::from_fn(&[3, 16, 16], |_| rng.normal());
        let (a, b) = (0.3, -1.7);
        let combo = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = blur2d(&combo, &k).unwrap();
        let rhs = blur2d(&x, &k)
            .unwrap()
            .scale(a)
            .add(&blur2d(&y, &k).unwrap().scale(b))
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
    }
}

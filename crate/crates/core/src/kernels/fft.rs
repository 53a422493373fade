//! Radix-2 FFT and centered 2-D power spectra.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// In-place iterative Cooley-Tukey transform; `re.len()` must be a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (s, c) = (ang * k as f64).sin_cos();
                let a = start + k;
                let b = a + half;
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

/// Full 2-D DFT of a real `h × w` image, returned as `(re, im)` row-major.
pub fn fft2(image: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = image.to_vec();
    let mut im = vec![0.0; h * w];
    for y in 0..h {
        fft_in_place(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w]);
    }
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            cr[y] = re[y * w + x];
            ci[y] = im[y * w + x];
        }
        fft_in_place(&mut cr, &mut ci);
        for y in 0..h {
            re[y * w + x] = cr[y];
            im[y * w + x] = ci[y];
        }
    }
    (re, im)
}

/// Centered power spectrum `|F|²` with the DC bin at `(H/2, W/2)`.
pub fn fft2_power(image: &Tensor) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::invalid(format!("fft2_power expects [H,W], got {s:?}"))),
    };
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::invalid(format!("fft size {h}x{w} is not a power of two")));
    }
    let (re, im) = fft2(image.as_slice(), h, w);
    let mut out = vec![0.0; h * w];
    for v in 0..h {
        for u in 0..w {
            let p = re[v * w + u].powi(2) + im[v * w + u].powi(2);
            out[((v + h / 2) % h) * w + (u + w / 2) % w] = p;
        }
    }
    Tensor::new(&[h, w], out)
}

//! Perturbation and gradient metrics: high-frequency energy ratio, PSNR,
//! SSIM, prediction stabilization, cosine alignment, and a Monte-Carlo
//! check that importance-driven scaling improves gradient alignment.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::fft2_power;
use crate::model::ModuleTag;
use crate::modulation::{scale_factors, ModulationConfig, PerModule, TokenImportance};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumScale {
    /// Squared magnitude, `|F|²`.
    Power,
    /// `ln(1 + |F|)`.
    LogMagnitude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub hfer: f64,
    pub radius: f64,
    pub per_channel: Vec<f64>,
    /// Set when the input carried no energy at all.
    pub degenerate: bool,
}

/// Fraction of spectral energy outside a disc of `radius` bins around DC,
/// averaged over channels. `radius` defaults to `H / 4`.
pub fn hfer(delta: &Tensor, radius: Option<f64>) -> Result<SpectralReport> {
    hfer_with(delta, radius, SpectrumScale::Power)
}

pub fn hfer_with(delta: &Tensor, radius: Option<f64>, scale: SpectrumScale) -> Result<SpectralReport> {
    if delta.rank() != 3 {
        return Err(Error::invalid(format!("expected [C, H, W], got {:?}", delta.shape())));
    }
    let (c, h, w) = (delta.shape()[0], delta.shape()[1], delta.shape()[2]);
    let r = radius.unwrap_or(h as f64 / 4.0);
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let mut per_channel = Vec::with_capacity(c);
    let mut degenerate = false;
    for ch in 0..c {
        let img = Tensor::new(&[h, w], delta.channel(ch).to_vec())?;
        let power = fft2_power(&img)?;
        let (mut total, mut low) = (0.0, 0.0);
        for (i, &p) in power.as_slice().iter().enumerate() {
            let e = match scale {
                SpectrumScale::Power => p,
                SpectrumScale::LogMagnitude => p.sqrt().ln_1p(),
            };
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            total += e;
            if (y - cy).hypot(x - cx) <= r {
                low += e;
            }
        }
        if total > 0.0 {
            per_channel.push(((total - low) / total).clamp(0.0, 1.0));
        } else {
            degenerate = true;
            per_channel.push(0.0);
        }
    }
    let hfer = per_channel.iter().sum::<f64>() / c as f64;
    Ok(SpectralReport {
        hfer,
        radius: r,
        per_channel,
        degenerate,
    })
}

/// Peak signal-to-noise ratio for images in `[0, 1]`; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (1.0 / mse.sqrt()).log10())
}

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over 8×8 windows at stride 4, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(Error::invalid(format!("expected [H, W] or [C, H, W], got {:?}", a.shape()))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (pa, pb) = (a.as_slice(), b.as_slice());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let off = ch * h * w;
        for y0 in (0..=h - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            for x0 in (0..=w - SSIM_WINDOW).step_by(SSIM_STRIDE) {
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        sa += pa[off + y * w + x];
                        sb += pb[off + y * w + x];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let da = pa[off + y * w + x] - ma;
                        let db = pb[off + y * w + x] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// First 1-based iteration from which the prediction is a fixed label other
/// than `y` through the end of the trace.
pub fn stabilization_iteration(labels: &[usize], y: usize) -> Option<usize> {
    let &last = labels.last()?;
    if last == y {
        return None;
    }
    let run = labels.iter().rev().take_while(|&&l| l == last).count();
    Some(labels.len() - run + 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub cosine: f64,
    /// At least one input was the zero vector.
    pub degenerate: bool,
}

pub fn cosine_alignment(g: &Tensor, g_prime: &Tensor) -> Result<Alignment> {
    let dot = g.dot(g_prime)?;
    let (na, nb) = (g.l2_norm(), g_prime.l2_norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(Alignment {
            cosine: 0.0,
            degenerate: true,
        });
    }
    Ok(Alignment {
        cosine: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTrialConfig {
    pub tokens: usize,
    pub dim: usize,
    pub semantic_fraction: f64,
    pub rho_sem: f64,
    pub rho_bg: f64,
    pub trials: usize,
    pub seed: u64,
    pub gamma_base: f64,
    pub lambda: f64,
    /// Give semantic tokens larger activation norms than background tokens.
    pub norm_coupling: bool,
}

impl Default for AlignmentTrialConfig {
    fn default() -> Self {
        Self {
            tokens: 65,
            dim: 64,
            semantic_fraction: 0.3,
            rho_sem: 0.8,
            rho_bg: 0.0,
            trials: 1000,
            seed: 0,
            gamma_base: 0.5,
            lambda: 0.5,
            norm_coupling: true,
        }
    }
}

impl AlignmentTrialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.rho_bg && self.rho_bg <= self.rho_sem && self.rho_sem <= 1.0) {
            return Err(Error::invalid("alignments must satisfy 0 <= rho_bg <= rho_sem <= 1"));
        }
        if self.trials == 0 || self.tokens == 0 || self.dim < 2 {
            return Err(Error::invalid("need at least one trial, one token and two dimensions"));
        }
        if !(0.0..=1.0).contains(&self.semantic_fraction) {
            return Err(Error::invalid("semantic fraction must be in [0, 1]"));
        }
        if !(self.gamma_base > 0.0 && self.gamma_base <= 1.0) || !(self.lambda >= 0.0) {
            return Err(Error::invalid("need gamma_base in (0, 1] and lambda >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSummary {
    pub improvement_fraction: f64,
    pub mean_delta: f64,
    pub deltas: Vec<f64>,
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Unit vector whose cosine with unit `u` is exactly `rho` (up to rounding).
fn correlated_unit(u: &[f64], rho: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut n: Vec<f64> = (0..u.len()).map(|_| rng.normal()).collect();
        let proj: f64 = n.iter().zip(u).map(|(a, b)| a * b).sum();
        n.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        let norm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            let s = (1.0 - rho * rho).max(0.0).sqrt() / norm;
            return u.iter().zip(&n).map(|(a, b)| rho * a + s * b).collect();
        }
    }
}

fn alignment_trial(cfg: &AlignmentTrialConfig, rng: &mut Rng) -> f64 {
    let (t, d) = (cfg.tokens, cfg.dim);
    let mut target: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    unit(&mut target);
    let semantic = ((cfg.semantic_fraction * t as f64).round() as usize).min(t);
    let mut roles: Vec<bool> = (0..t).map(|i| i < semantic).collect();
    rng.shuffle(&mut roles);

    let mut grads = Vec::with_capacity(t);
    let mut norms = Vec::with_capacity(t);
    for &sem in &roles {
        let rho = if sem { cfg.rho_sem } else { cfg.rho_bg };
        grads.push(correlated_unit(&target, rho, rng));
        norms.push(match (cfg.norm_coupling, sem) {
            (false, _) => 1.0,
            (true, true) => rng.uniform_range(2.0, 3.0),
            (true, false) => rng.uniform_range(0.5, 1.5),
        });
    }
    let z = Tensor::from_fn(&[t, 1], |i| norms[i]);
    let mcfg = ModulationConfig {
        gamma_base: cfg.gamma_base,
        lambda: PerModule::splat(cfg.lambda),
        early: Default::default(),
        ..ModulationConfig::reference(1)
    };
    let imp = crate::modulation::token_importance(&z, mcfg.eps_norm).unwrap_or(TokenImportance {
        raw: norms.clone(),
        normalized: vec![0.0; t],
    });
    let s = scale_factors(&imp, 0, ModuleTag::Mlp, &mcfg).factors;
    // Cosine ignores overall scale; dividing by the largest factor makes
    // uniform factors exactly one.
    let smax = s.iter().copied().fold(0.0, f64::max);
    let mut plain = vec![0.0; d];
    let mut scaled = vec![0.0; d];
    for (g, &si) in grads.iter().zip(&s) {
        let w = si / smax;
        for k in 0..d {
            plain[k] += g[k];
            scaled[k] += w * g[k];
        }
    }
    cosine(&scaled, &target) - cosine(&plain, &target)
}

/// Runs `cfg.trials` independent synthetic trials of late-layer scaling and
/// reports how often the scaled token-gradient sum aligns better with the
/// target gradient than the plain sum.
pub fn theorem1_montecarlo(cfg: &AlignmentTrialConfig) -> Result<AlignmentSummary> {
    cfg.validate()?;
    let base = Rng::new(cfg.seed, 0x616c_6967);
    let deltas: Vec<f64> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| alignment_trial(cfg, &mut base.split(i as u64)))
        .collect();
    let improved = deltas.iter().filter(|&&d| d > 0.0).count();
    Ok(AlignmentSummary {
        improvement_fraction: improved as f64 / cfg.trials as f64,
        mean_delta: deltas.iter().sum::<f64>() / cfg.trials as f64,
        deltas,
    })
}

/// Binary greyscale PGM bytes, linearly rescaling `values` to `0..=255`.
pub fn pgm_bytes(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width || values.is_empty() {
        return Err(Error::shape(&[height, width], &[values.len()]));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    let bytes = pgm_bytes(values, height, width)?;
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)
}

/// Channel-averaged `ln(1 + |F|²)` spectrum, DC at the centre.
pub fn log_spectrum(delta: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (delta.shape()[0], delta.shape()[1], delta.shape()[2]);
    let mut acc = Tensor::zeros(&[h, w]);
    for ch in 0..c {
        let p = fft2_power(&Tensor::new(&[h, w], delta.channel(ch).to_vec())?)?;
        acc.axpy(1.0 / c as f64, &p.map(f64::ln_1p))?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{blur2d, gaussian_kernel};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn noise(seed: u64, c: usize, s: usize) -> Tensor {
        let mut rng = Rng::new(seed, 3);
        Tensor::from_fn(&[c, s, s], |_| rng.normal())
    }

    #[test]
    fn constant_has_no_high_frequencies() {
        let r = hfer(&Tensor::full(&[3, 32, 32], 0.2), None).unwrap();
        assert!(r.hfer.abs() < 1e-12);
        assert_eq!(r.radius, 8.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn low_cosine_is_inside_band() {
        let d = Tensor::from_fn(&[1, 32, 32], |i| (std::f64::consts::TAU * 2.0 * (i % 32) as f64 / 32.0).cos());
        assert!(hfer(&d, None).unwrap().hfer < 1e-12);
        let hi = Tensor::from_fn(&[1, 32, 32], |i| (std::f64::consts::TAU * 12.0 * (i % 32) as f64 / 32.0).cos());
        assert!((hfer(&hi, None).unwrap().hfer - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_input_is_flagged() {
        let r = hfer(&Tensor::zeros(&[2, 16, 16]), None).unwrap();
        assert_eq!(r.hfer, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn white_noise_matches_bin_fraction() {
        let (s, r) = (32usize, 8.0);
        let c = s as f64 / 2.0;
        let low = (0..s * s)
            .filter(|i| ((i / s) as f64 - c).hypot((i % s) as f64 - c) <= r)
            .count();
        let expected = 1.0 - low as f64 / (s * s) as f64;
        let mean = (0..50).map(|k| hfer(&noise(k, 1, s), Some(r)).unwrap().hfer).sum::<f64>() / 50.0;
        assert!((mean - expected).abs() < 0.03, "{mean} vs {expected}");
    }

    #[test]
    fn blur_lowers_hfer() {
        for k in 0..10 {
            let d = noise(100 + k, 3, 32);
            let base = hfer(&d, None).unwrap().hfer;
            let mut prev = base;
            for sigma in [0.5, 0.7, 1.0] {
                let h = hfer(&blur2d(&d, &gaussian_kernel(sigma, 3).unwrap()).unwrap(), None).unwrap().hfer;
                assert!(h <= base);
                assert!(h <= prev + 1e-12);
                prev = h;
            }
        }
    }

    #[test]
    fn log_variant_is_a_ratio() {
        let r = hfer_with(&noise(1, 3, 16), None, SpectrumScale::LogMagnitude).unwrap();
        assert!((0.0..=1.0).contains(&r.hfer));
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::full(&[3, 8, 8], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 16.0 / 255.0);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-9);
        assert!((p - 24.05).abs() < 0.01);
        assert!(psnr(&a, &Tensor::zeros(&[3, 8, 9])).is_err());
    }

    #[test]
    fn ssim_cases() {
        let mut rng = Rng::new(2, 0);
        let a = Tensor::from_fn(&[3, 16, 16], |_| rng.uniform());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 1.0);
        assert!(ssim(&Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[1, 4, 4])).is_err());
    }

    #[test]
    fn stabilization_examples() {
        assert_eq!(stabilization_iteration(&[0, 0, 2, 2, 2], 0), Some(3));
        assert_eq!(stabilization_iteration(&[0, 2, 0, 2, 2], 0), Some(4));
        assert_eq!(stabilization_iteration(&[0, 0, 0], 0), None);
        assert_eq!(stabilization_iteration(&[1, 2, 3], 0), Some(3));
        assert_eq!(stabilization_iteration(&[], 0), None);
    }

    #[test]
    fn cosine_examples() {
        let mut rng = Rng::new(5, 0);
        let g = Tensor::from_fn(&[10], |_| rng.normal());
        let h = Tensor::from_fn(&[10], |_| rng.normal());
        assert!((cosine_alignment(&g, &g).unwrap().cosine - 1.0).abs() < 1e-12);
        assert!((cosine_alignment(&g, &g.scale(-1.0)).unwrap().cosine + 1.0).abs() < 1e-12);
        let c = cosine_alignment(&g, &h).unwrap().cosine;
        assert!((cosine_alignment(&g.scale(3.7), &h).unwrap().cosine - c).abs() < 1e-12);
        let z = cosine_alignment(&Tensor::zeros(&[10]), &Tensor::zeros(&[10])).unwrap();
        assert!(z.degenerate && z.cosine == 0.0);
    }

    #[test]
    fn correlated_unit_has_requested_cosine() {
        let mut rng = Rng::new(1, 1);
        let mut u: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        unit(&mut u);
        for rho in [0.0, 0.3, 0.8, 1.0] {
            let v = correlated_unit(&u, rho, &mut rng);
            assert!((cosine(&u, &v) - rho).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_improves_under_assumption() {
        let cfg = AlignmentTrialConfig { trials: 200, ..Default::default() };
        let s = theorem1_montecarlo(&cfg).unwrap();
        assert!(s.improvement_fraction >= 0.95, "{}", s.improvement_fraction);
        assert!(s.mean_delta > 0.0);
    }

    #[test]
    fn zero_lambda_changes_nothing() {
        for gamma in [0.5, 0.3, 1.0] {
            let cfg = AlignmentTrialConfig { trials: 100, lambda: 0.0, gamma_base: gamma, ..Default::default() };
            assert!(theorem1_montecarlo(&cfg).unwrap().deltas.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn equal_alignment_equal_norms_is_neutral() {
        let cfg = AlignmentTrialConfig {
            trials: 100,
            rho_sem: 0.3,
            rho_bg: 0.3,
            norm_coupling: false,
            ..Default::default()
        };
        let s = theorem1_montecarlo(&cfg).unwrap();
        assert!(s.mean_delta.abs() < 1e-12);
    }

    #[test]
    fn pgm_header_and_scaling() {
        let bytes = pgm_bytes(&[0.0, 1.0, 0.5, 1.0], 2, 2).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 128, 255]);
        assert!(pgm_bytes(&[0.0; 3], 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn psnr_and_ssim_symmetric(seed in any::<u64>()) {
            let mut rng = Rng::new(seed, 0);
            let a = Tensor::from_fn(&[2, 12, 12], |_| rng.uniform());
            let b = Tensor::from_fn(&[2, 12, 12], |_| rng.uniform());
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn stabilization_depends_on_suffix(prefix in prop::collection::vec(0usize..4, 0..6), tail in 1usize..5) {
            let mut labels = prefix.clone();
            labels.extend(std::iter::repeat_n(3, tail));
            let s = stabilization_iteration(&labels, 0).unwrap();
            prop_assert!(s <= prefix.len() + 1);
            prop_assert!(labels[s - 1..].iter().all(|&l| l == 3));
            if s > 1 {
                prop_assert_ne!(labels[s - 2], 3);
            }
        }

        #[test]
        fn hfer_in_unit_interval(seed in any::<u64>()) {
            let r = hfer(&noise(seed, 2, 8), None).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.hfer));
        }
    }
}

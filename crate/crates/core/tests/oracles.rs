//! Independent direct-formula re-implementations checked against the library.

use tesser_core::analysis::{psnr, ssim};
use tesser_core::model::ModuleTag;
use tesser_core::modulation::{apply_modulation, scale_factors, token_importance, ModulationConfig};
use tesser_core::{Rng, Tensor};

fn oracle_importance(z: &[f64], t: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut norms = vec![0.0; t];
    for i in 0..t {
        let mut acc = 0.0;
        for k in 0..d {
            acc += z[i * d + k].powi(2);
        }
        norms[i] = acc.sqrt();
    }
    let mut lo = norms[0];
    let mut hi = norms[0];
    for &n in &norms {
        if n < lo {
            lo = n;
        }
        if n > hi {
            hi = n;
        }
    }
    norms.iter().map(|n| (n - lo) / (hi - lo + eps)).collect()
}

fn oracle_factor(a: f64, early: bool, gamma: f64, lambda: f64) -> f64 {
    if early {
        gamma + lambda * (1.0 - a)
    } else {
        gamma + lambda * a
    }
}

/// Element-by-element reference for the modulation pipeline.
fn oracle_modulate(g: &Tensor, z: &Tensor, l: usize, m: ModuleTag, cfg: &ModulationConfig) -> Vec<f64> {
    let (t, d) = (z.shape()[0], z.shape()[1]);
    let a = oracle_importance(z.as_slice(), t, d, cfg.eps_norm);
    let omega = cfg.omega.get(m);
    let lambda = cfg.lambda.get(m);
    let early = cfg.early.contains(&l);
    let mut out = g.as_slice().to_vec();
    let shape = g.shape();
    for (idx, v) in out.iter_mut().enumerate() {
        let token = match m {
            ModuleTag::Attn => (idx / shape[2]) % shape[1],
            _ => idx / shape[1],
        };
        if m == ModuleTag::Attn && l >= cfg.l_cut {
            *v = 0.0;
        } else {
            *v = *v * omega * oracle_factor(a[token], early, cfg.gamma_base, lambda);
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn importance_matches_oracle_on_65_by_64() {
    for seed in 0..100 {
        let mut rng = Rng::new(seed, 77);
        let z = Tensor::from_fn(&[65, 64], |_| rng.normal() * rng.uniform_range(0.1, 3.0));
        let imp = token_importance(&z, 1e-8).unwrap();
        let oracle = oracle_importance(z.as_slice(), 65, 64, 1e-8);
        assert!(max_diff(&imp.normalized, &oracle) < 1e-12);
    }
}

#[test]
fn scale_factors_match_oracle() {
    let cfg = ModulationConfig::reference(12);
    for seed in 0..100u64 {
        let mut rng = Rng::new(seed, 78);
        let z = Tensor::from_fn(&[17, 8], |_| rng.normal());
        let imp = token_importance(&z, cfg.eps_norm).unwrap();
        let l = (seed % 12) as usize;
        for m in ModuleTag::ALL {
            let s = scale_factors(&imp, l, m, &cfg).factors;
            let o: Vec<f64> = imp
                .normalized
                .iter()
                .map(|&a| oracle_factor(a, cfg.early.contains(&l), cfg.gamma_base, cfg.lambda.get(m)))
                .collect();
            assert!(max_diff(&s, &o) < 1e-12);
        }
    }
}

#[test]
fn modulation_matches_oracle_with_reference_hyperparameters() {
    let cfg = ModulationConfig::reference(12);
    assert_eq!((cfg.omega.attn, cfg.lambda.attn, cfg.gamma_base, cfg.l_cut), (0.45, 0.4, 0.5, 10));
    for seed in 0..100u64 {
        let mut rng = Rng::new(seed, 79);
        let (t, d, h) = (9, 8, 2);
        let z = Tensor::from_fn(&[t, d], |_| rng.normal());
        let l = (seed % 12) as usize;
        for (m, shape) in [
            (ModuleTag::Attn, vec![h, t, t]),
            (ModuleTag::Qkv, vec![t, 3 * d]),
            (ModuleTag::Mlp, vec![t, d]),
        ] {
            let g = Tensor::from_fn(&shape, |_| rng.normal());
            let out = apply_modulation(g.clone(), &z, l, m, &cfg).unwrap();
            assert!(max_diff(out.as_slice(), &oracle_modulate(&g, &z, l, m, &cfg)) < 1e-12);
        }
    }
}

/// SSIM via raw moment sums rather than centred deviations.
fn oracle_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (c1, c2) = (1e-4, 9e-4);
    let mut scores = Vec::new();
    for ch in 0..c {
        let mut y0 = 0;
        while y0 + 8 <= h {
            let mut x0 = 0;
            while x0 + 8 <= w {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for y in y0..y0 + 8 {
                    for x in x0..x0 + 8 {
                        xs.push(a.as_slice()[ch * h * w + y * w + x]);
                        ys.push(b.as_slice()[ch * h * w + y * w + x]);
                    }
                }
                let n = 64.0;
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let sxx = xs.iter().map(|v| v * v).sum::<f64>() / n - mx * mx;
                let syy = ys.iter().map(|v| v * v).sum::<f64>() / n - my * my;
                let sxy = xs.iter().zip(&ys).map(|(p, q)| p * q).sum::<f64>() / n - mx * my;
                scores.push(
                    ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2)),
                );
                x0 += 4;
            }
            y0 += 4;
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn ssim_matches_oracle() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed, 80);
        let a = Tensor::from_fn(&[3, 32, 32], |_| rng.uniform());
        let b = a.map(|v| (v + 0.2 * (rng_hash(v) - 0.5)).clamp(0.0, 1.0));
        assert!((ssim(&a, &b).unwrap() - oracle_ssim(&a, &b)).abs() < 1e-10);
    }
}

fn rng_hash(v: f64) -> f64 {
    (v * 12.9898).sin().abs().fract()
}

#[test]
fn psnr_matches_closed_form() {
    let mut rng = Rng::new(4, 81);
    let a = Tensor::from_fn(&[3, 32, 32], |_| rng.uniform_range(0.1, 0.9));
    let b = a.map(|v| v - 16.0 / 255.0);
    assert!((psnr(&a, &b).unwrap() - 24.05).abs() < 0.01);
}

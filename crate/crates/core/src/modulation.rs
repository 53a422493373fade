//! Token-importance gradient scaling, module-wise weakening and attention
//! truncation, packaged as [`GradientHooks`] for the ViT reverse pass.
//!
//! Blocks are indexed from 0. Truncation fires for blocks `l >= l_cut`, so
//! `l_cut == depth` disables it. The early set selects blocks whose scaling
//! favours low-importance tokens.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{GradientHooks, ModuleTag};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One value per hookable module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerModule<T> {
    pub attn: T,
    pub qkv: T,
    pub mlp: T,
}

impl<T: Copy> PerModule<T> {
    pub fn splat(v: T) -> Self {
        Self { attn: v, qkv: v, mlp: v }
    }

    pub fn get(&self, m: ModuleTag) -> T {
        match m {
            ModuleTag::Attn => self.attn,
            ModuleTag::Qkv => self.qkv,
            ModuleTag::Mlp => self.mlp,
        }
    }

    pub fn set(&mut self, m: ModuleTag, v: T) {
        match m {
            ModuleTag::Attn => self.attn = v,
            ModuleTag::Qkv => self.qkv = v,
            ModuleTag::Mlp => self.mlp = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationConfig {
    pub depth: usize,
    pub gamma_base: f64,
    pub lambda: PerModule<f64>,
    pub omega: PerModule<f64>,
    pub l_cut: usize,
    pub early: BTreeSet<usize>,
    pub eps_norm: f64,
    /// Per-module master switch; a disabled module's gradient is untouched.
    pub modules: PerModule<bool>,
    pub enable_fsgs: bool,
    pub enable_weakening: bool,
    pub enable_truncation: bool,
    /// Replace importance-driven factors with uniform draws in the same range.
    pub random_scaling: bool,
    /// Whether token 0 (CLS) takes part in the min/max statistics.
    pub include_cls: bool,
}

impl ModulationConfig {
    /// Reference hyperparameters for a ViT surrogate of `depth` blocks.
    /// The truncation depth keeps the 10-of-12 ratio of the reference setting.
    pub fn reference(depth: usize) -> Self {
        Self {
            depth,
            gamma_base: 0.5,
            lambda: PerModule { attn: 0.4, qkv: 0.5, mlp: 0.55 },
            omega: PerModule { attn: 0.45, qkv: 0.5, mlp: 0.7 },
            l_cut: (10 * depth).div_ceil(12),
            early: default_early_set(depth),
            eps_norm: 1e-8,
            modules: PerModule::splat(true),
            enable_fsgs: true,
            enable_weakening: true,
            enable_truncation: true,
            random_scaling: false,
            include_cls: true,
        }
    }

    /// Settings under which every hook is the identity.
    pub fn neutral(depth: usize) -> Self {
        Self {
            gamma_base: 1.0,
            lambda: PerModule::splat(0.0),
            omega: PerModule::splat(1.0),
            l_cut: depth,
            early: BTreeSet::new(),
            ..Self::reference(depth)
        }
    }

    /// Reference settings with adaptive scaling switched off (`λ = 0`).
    pub fn att_like(depth: usize) -> Self {
        Self {
            lambda: PerModule::splat(0.0),
            ..Self::reference(depth)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_base > 0.0 && self.gamma_base <= 1.0) {
            return Err(Error::invalid(format!("gamma_base must be in (0, 1], got {}", self.gamma_base)));
        }
        for m in ModuleTag::ALL {
            let (w, l) = (self.omega.get(m), self.lambda.get(m));
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::invalid(format!("omega.{} must be in (0, 1], got {w}", m.name())));
            }
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid(format!("lambda.{} must be non-negative, got {l}", m.name())));
            }
        }
        if self.l_cut > self.depth {
            return Err(Error::invalid(format!("l_cut {} exceeds depth {}", self.l_cut, self.depth)));
        }
        if let Some(&l) = self.early.iter().find(|&&l| l >= self.depth) {
            return Err(Error::invalid(format!("early block {l} outside 0..{}", self.depth)));
        }
        if !(self.eps_norm > 0.0) {
            return Err(Error::invalid("eps_norm must be positive"));
        }
        Ok(())
    }

    pub fn is_early(&self, block: usize) -> bool {
        self.early.contains(&block)
    }

    fn weakening(&self, m: ModuleTag) -> f64 {
        if self.enable_weakening {
            self.omega.get(m)
        } else {
            1.0
        }
    }

    fn truncates(&self, block: usize, m: ModuleTag) -> bool {
        self.enable_truncation && m == ModuleTag::Attn && block >= self.l_cut
    }
}

/// First `⌈depth / 3⌉` blocks.
pub fn default_early_set(depth: usize) -> BTreeSet<usize> {
    (0..depth.div_ceil(3)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenImportance {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVector {
    pub factors: Vec<f64>,
    pub block: usize,
    pub module: ModuleTag,
}

/// Row norms of `z` (`[T, D]`) and their min-max normalization.
pub fn token_importance(z: &Tensor, eps_norm: f64) -> Result<TokenImportance> {
    token_importance_with(z, eps_norm, true)
}

/// As [`token_importance`]; with `include_cls == false` row 0 is left out of
/// the min/max statistics and its score is clamped into `[0, 1]`.
pub fn token_importance_with(z: &Tensor, eps_norm: f64, include_cls: bool) -> Result<TokenImportance> {
    if z.rank() != 2 {
        return Err(Error::invalid(format!("token matrix must be rank 2, got {:?}", z.shape())));
    }
    let d = z.shape()[1];
    let raw: Vec<f64> = z
        .as_slice()
        .chunks_exact(d)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let stats = if include_cls || raw.len() == 1 { &raw[..] } else { &raw[1..] };
    let lo = stats.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = stats.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized = raw
        .iter()
        .map(|&a| ((a - lo) / (hi - lo + eps_norm)).clamp(0.0, 1.0))
        .collect();
    Ok(TokenImportance { raw, normalized })
}

/// `s_i = γ + λ_m [(1 − β) α̂_i + β (1 − α̂_i)]` with `β = 1` for early blocks.
pub fn scale_factors(imp: &TokenImportance, block: usize, module: ModuleTag, cfg: &ModulationConfig) -> ScaleVector {
    let lambda = cfg.lambda.get(module);
    let beta = if cfg.is_early(block) { 1.0 } else { 0.0 };
    let factors = imp
        .normalized
        .iter()
        .map(|&a| cfg.gamma_base + lambda * ((1.0 - beta) * a + beta * (1.0 - a)))
        .collect();
    ScaleVector { factors, block, module }
}

/// Uniform draws in `[γ, γ + λ_m]`, the random-scaling ablation baseline.
pub fn random_scale_factors(
    tokens: usize,
    block: usize,
    module: ModuleTag,
    cfg: &ModulationConfig,
    rng: &mut Rng,
) -> ScaleVector {
    let lambda = cfg.lambda.get(module);
    let factors = (0..tokens)
        .map(|_| cfg.gamma_base + lambda * rng.uniform())
        .collect();
    ScaleVector { factors, block, module }
}

fn check_grad_shape(grad: &Tensor, z: &Tensor, m: ModuleTag) -> Result<()> {
    let (t, d) = (z.shape()[0], z.shape()[1]);
    let s = grad.shape();
    let ok = match m {
        ModuleTag::Attn => s.len() == 3 && s[1] == t && s[2] == t,
        ModuleTag::Qkv => s == [t, 3 * d],
        ModuleTag::Mlp => s == [t, d],
    };
    if ok {
        Ok(())
    } else {
        Err(Error::ContractViolation(format!(
            "{} gradient of shape {s:?} does not match {t} tokens of width {d}",
            m.name()
        )))
    }
}

/// Multiplies each token's gradient slice by its factor. For attention the
/// token axis is the query (row) axis of every head.
fn scale_tokens(grad: &mut Tensor, m: ModuleTag, factors: &[f64]) {
    let s = grad.shape().to_vec();
    let row = match m {
        ModuleTag::Attn => s[2],
        ModuleTag::Qkv | ModuleTag::Mlp => s[1],
    };
    let t = factors.len();
    for (r, chunk) in grad.as_mut_slice().chunks_exact_mut(row).enumerate() {
        let f = factors[r % t];
        chunk.iter_mut().for_each(|v| *v *= f);
    }
}

fn modulate(
    grad: Tensor,
    z: &Tensor,
    block: usize,
    m: ModuleTag,
    cfg: &ModulationConfig,
    rng: Option<&mut Rng>,
) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(Error::ContractViolation(format!("token matrix must be rank 2, got {:?}", z.shape())));
    }
    check_grad_shape(&grad, z, m)?;
    if !cfg.modules.get(m) {
        return Ok(grad);
    }
    if cfg.truncates(block, m) {
        return Ok(Tensor::zeros(grad.shape()));
    }
    let w = cfg.weakening(m);
    let mut out = if w == 1.0 { grad } else { grad.scale(w) };
    if cfg.enable_fsgs {
        let scales = match rng {
            Some(rng) if cfg.random_scaling => random_scale_factors(z.shape()[0], block, m, cfg, rng),
            _ => {
                let imp = token_importance_with(z, cfg.eps_norm, cfg.include_cls)?;
                scale_factors(&imp, block, m, cfg)
            }
        };
        if scales.factors.iter().any(|&f| f != 1.0) {
            scale_tokens(&mut out, m, &scales.factors);
        }
    }
    Ok(out)
}

/// Weakening, then truncation, then token scaling, for the gradient of
/// module `m` at `block` given the block's input tokens `z`.
pub fn apply_modulation(
    grad: Tensor,
    z: &Tensor,
    block: usize,
    m: ModuleTag,
    cfg: &ModulationConfig,
) -> Result<Tensor> {
    modulate(grad, z, block, m, cfg, None)
}

/// [`GradientHooks`] running [`apply_modulation`] at every tap.
///
/// With `random_scaling` set, factors are drawn from `rng` split by
/// `(block, module)` so the draws do not depend on hook call order.
pub struct FsgsHooks<'a> {
    cfg: &'a ModulationConfig,
    rng: Rng,
}

impl<'a> FsgsHooks<'a> {
    pub fn new(cfg: &'a ModulationConfig, rng: Rng) -> Self {
        Self { cfg, rng }
    }
}

impl GradientHooks for FsgsHooks<'_> {
    fn transform(&mut self, block: usize, module: ModuleTag, tokens: &Tensor, grad: Tensor) -> Result<Tensor> {
        let mut rng = self.rng.split_path(&[block as u64, module as u64]);
        modulate(grad, tokens, block, module, self.cfg, Some(&mut rng))
    }
}

//! Iterative ℓ∞ attacks: PGD, momentum iterative (MIM) and TESSER.
//!
//! All three share one loop. TESSER adds modulation hooks on the ViT
//! backward pass, an optional Gaussian blur of the model input each step
//! and optional patch-cell gradient dropout. With all of those neutral it
//! reduces to MIM, and MIM with zero momentum reduces to PGD.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{blur2d, blur2d_backward, gaussian_kernel, GaussianKernel};
use crate::model::{cross_entropy, probabilities, ModelParams};
use crate::modulation::{FsgsHooks, ModulationConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Pgd,
    Mim,
    Tesser,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pgd => "pgd",
            Method::Mim => "mim",
            Method::Tesser => "tesser",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchDropout {
    pub enabled: bool,
    pub keep_prob: f64,
    pub patch_size: usize,
}

impl Default for PatchDropout {
    fn default() -> Self {
        Self {
            enabled: false,
            keep_prob: 0.7,
            patch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub method: Method,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub momentum: f64,
    /// Used by [`Method::Tesser`] only.
    pub modulation: ModulationConfig,
    /// Blur standard deviation; `0` disables the blur.
    pub sigma: f64,
    pub blur_size: usize,
    pub targeted: bool,
    pub patch_dropout: PatchDropout,
    pub seed: u64,
}

impl AttackConfig {
    /// Reference settings for `method` against a ViT of `depth` blocks.
    pub fn reference(method: Method, depth: usize) -> Self {
        let epsilon = 16.0 / 255.0;
        let steps = 10;
        Self {
            method,
            epsilon,
            steps,
            step_size: epsilon / steps as f64,
            momentum: if method == Method::Pgd { 0.0 } else { 1.0 },
            modulation: ModulationConfig::reference(depth),
            sigma: if method == Method::Tesser { 0.5 } else { 0.0 },
            blur_size: 3,
            targeted: false,
            patch_dropout: PatchDropout::default(),
            seed: 0,
        }
    }

    /// TESSER with adaptive scaling and blur off: weakening and truncation only.
    pub fn att_like(depth: usize) -> Self {
        Self {
            modulation: ModulationConfig::att_like(depth),
            sigma: 0.0,
            ..Self::reference(Method::Tesser, depth)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.momentum >= 0.0) {
            return Err(Error::invalid(format!("momentum must be non-negative, got {}", self.momentum)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        let pd = &self.patch_dropout;
        if pd.enabled && (!(pd.keep_prob > 0.0 && pd.keep_prob <= 1.0) || pd.patch_size == 0) {
            return Err(Error::invalid("patch dropout needs keep probability in (0, 1] and a positive patch size"));
        }
        if self.method == Method::Tesser {
            self.modulation.validate()?;
        }
        Ok(())
    }

    fn blur_kernel(&self) -> Result<Option<GaussianKernel>> {
        if self.method == Method::Tesser && self.sigma > 0.0 {
            Ok(Some(gaussian_kernel(self.sigma, self.blur_size)?))
        } else {
            Ok(None)
        }
    }
}

/// Label attacked towards in targeted mode.
pub fn targeted_wrap(y: usize, classes: usize) -> usize {
    (y + 1) % classes
}

/// Clamps `delta` into the ε-ball, then `x + delta` into `[0, 1]`, and
/// returns the implied perturbation.
pub fn project(delta: &Tensor, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    x.zip_map(delta, |xv, dv| (xv + dv.clamp(-epsilon, epsilon)).clamp(0.0, 1.0) - xv)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Prediction after one iteration, evaluated on the unblurred `x + δ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub label: usize,
    /// Probability of the predicted label.
    pub confidence: f64,
    /// Probability of the label being attacked away from (untargeted) or towards (targeted).
    pub reference_prob: f64,
    /// Cross-entropy against the true label.
    pub loss: f64,
    /// The raw gradient was identically zero, so momentum was carried over.
    pub zero_gradient: bool,
    pub delta_linf: f64,
    pub pixel_min: f64,
    pub pixel_max: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub delta: Tensor,
    pub x_adv: Tensor,
    pub label: usize,
    /// Target label in targeted mode.
    pub target: Option<usize>,
    pub clean_label: usize,
    pub clean_loss: f64,
    pub adv_label: usize,
    pub success: bool,
    pub trace: Vec<TraceEntry>,
    pub seconds: f64,
}

impl AttackResult {
    pub fn zero_gradient_steps(&self) -> usize {
        self.trace.iter().filter(|e| e.zero_gradient).count()
    }

    /// Deterministic part of the result, for equality checks.
    pub fn same_outcome(&self, other: &AttackResult) -> bool {
        self.delta == other.delta && self.x_adv == other.x_adv && self.success == other.success && self.trace == other.trace
    }
}

fn summarize(logits: &Tensor, x: &Tensor, delta: &Tensor, y: usize, goal: usize, zero: bool) -> TraceEntry {
    let probs = probabilities(logits);
    let label = logits.argmax();
    let (pmin, pmax) = x
        .as_slice()
        .iter()
        .zip(delta.as_slice())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| (lo.min(a + b), hi.max(a + b)));
    TraceEntry {
        label,
        confidence: probs.as_slice()[label],
        reference_prob: probs.as_slice()[goal],
        loss: cross_entropy(logits, y).0,
        zero_gradient: zero,
        delta_linf: delta.max_abs(),
        pixel_min: pmin,
        pixel_max: pmax,
    }
}

/// Loss gradient at `input` with respect to the input, signed so that
/// ascending it pursues the attack goal.
fn attack_gradient(
    params: &ModelParams,
    input: &Tensor,
    goal: usize,
    targeted: bool,
    hooks: Option<(&ModulationConfig, Rng)>,
) -> Result<(Tensor, Tensor)> {
    let (logits, grad) = match params {
        ModelParams::Vit(p) => {
            let tr = p.forward(input)?;
            let (_, gl) = cross_entropy(&tr.logits, goal);
            let g = match hooks {
                Some((cfg, rng)) => {
                    let mut h = FsgsHooks::new(cfg, rng);
                    p.backward(&tr, &gl, Some(&mut h), false)?
                }
                None => p.backward(&tr, &gl, None, false)?,
            };
            (tr.logits, g.input)
        }
        ModelParams::Cnn(p) => {
            if hooks.is_some() {
                return Err(Error::UnsupportedArchitecture(
                    "gradient modulation needs a transformer surrogate".into(),
                ));
            }
            let tr = p.forward(input)?;
            let (_, gl) = cross_entropy(&tr.logits, goal);
            let g = p.backward(&tr, &gl, false)?;
            (tr.logits, g.input)
        }
    };
    Ok((logits, if targeted { grad.scale(-1.0) } else { grad }))
}

fn dropout_mask(grad: &mut Tensor, pd: &PatchDropout, rng: &mut Rng) {
    let s = grad.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h.div_ceil(pd.patch_size), w.div_ceil(pd.patch_size));
    let keep: Vec<bool> = (0..gh * gw).map(|_| rng.bernoulli(pd.keep_prob)).collect();
    let data = grad.as_mut_slice();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if !keep[(y / pd.patch_size) * gw + x / pd.patch_size] {
                    data[ch * h * w + y * w + x] = 0.0;
                }
            }
        }
    }
}

/// Runs the attack selected by `cfg.method` on one image. `key` separates
/// the random streams of different images under the same seed.
pub fn run_attack(params: &ModelParams, x: &Tensor, y: usize, cfg: &AttackConfig, key: u64) -> Result<AttackResult> {
    let start = Instant::now();
    cfg.validate()?;
    let arch = params.arch();
    x.expect_shape(&arch.input_shape())?;
    let classes = arch.classes();
    if y >= classes {
        return Err(Error::invalid(format!("label {y} outside 0..{classes}")));
    }
    if cfg.method == Method::Tesser && !matches!(params, ModelParams::Vit(_)) {
        return Err(Error::UnsupportedArchitecture(
            "TESSER requires a transformer surrogate".into(),
        ));
    }
    let target = cfg.targeted.then(|| targeted_wrap(y, classes));
    let goal = target.unwrap_or(y);
    let kernel = cfg.blur_kernel()?;
    let tesser = cfg.method == Method::Tesser;
    let momentum = if cfg.method == Method::Pgd { 0.0 } else { cfg.momentum };
    let rng = Rng::new(cfg.seed, 0x4154_4b00).split(key);

    let clean_logits = params.logits(x)?;
    let clean_label = clean_logits.argmax();
    let clean_loss = cross_entropy(&clean_logits, y).0;

    let mut delta = Tensor::zeros(x.shape());
    let mut m = Tensor::zeros(x.shape());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut pending: Option<bool> = None;

    for t in 0..cfg.steps {
        let point = x.add(&delta)?;
        let input = match &kernel {
            Some(k) => blur2d(&point, k)?,
            None => point.clone(),
        };
        let hooks = tesser.then(|| (&cfg.modulation, rng.split_path(&[t as u64, 1])));
        let (logits, mut g) = attack_gradient(params, &input, goal, cfg.targeted, hooks)?;
        if let Some(zero) = pending.take() {
            trace.push(summarize(&logits, x, &delta, y, goal, zero));
        }
        if let Some(k) = &kernel {
            g = blur2d_backward(&g, k)?;
        }
        if tesser && cfg.patch_dropout.enabled {
            dropout_mask(&mut g, &cfg.patch_dropout, &mut rng.split_path(&[t as u64, 2]));
        }
        let l1 = g.l1_norm();
        let zero = l1 == 0.0;
        if !zero {
            let inv = 1.0 / l1;
            for (mv, gv) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *mv = momentum * *mv + gv * inv;
            }
        }
        let step = m.map(|v| cfg.step_size * sign(v));
        delta = project(&delta.add(&step)?, x, cfg.epsilon)?;
        if kernel.is_some() {
            let logits = params.logits(&x.add(&delta)?)?;
            trace.push(summarize(&logits, x, &delta, y, goal, zero));
        } else {
            pending = Some(zero);
        }
    }

    let x_adv = x.add(&delta)?;
    let final_logits = params.logits(&x_adv)?;
    if let Some(zero) = pending {
        trace.push(summarize(&final_logits, x, &delta, y, goal, zero));
    }
    let adv_label = final_logits.argmax();
    let success = match target {
        Some(tgt) => adv_label == tgt,
        None => adv_label != y,
    };
    Ok(AttackResult {
        delta,
        x_adv,
        label: y,
        target,
        clean_label,
        clean_loss,
        adv_label,
        success,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn tesser_attack(params: &ModelParams, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack(params, x, y, &AttackConfig { method: Method::Tesser, ..cfg.clone() }, 0)
}

pub fn mim_attack(params: &ModelParams, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack(params, x, y, &AttackConfig { method: Method::Mim, ..cfg.clone() }, 0)
}

pub fn pgd_attack(params: &ModelParams, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack(params, x, y, &AttackConfig { method: Method::Pgd, ..cfg.clone() }, 0)
}

/// Attacks every image, in parallel, keyed by its position in the slice.
/// Results come back in input order.
pub fn attack_batch(
    params: &ModelParams,
    images: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
    keys: &[u64],
) -> Result<Vec<AttackResult>> {
    if images.len() != labels.len() || images.len() != keys.len() {
        return Err(Error::invalid("images, labels and keys must have equal length"));
    }
    (0..images.len())
        .into_par_iter()
        .map(|i| run_attack(params, &images[i], labels[i], cfg, keys[i]))
        .collect()
}

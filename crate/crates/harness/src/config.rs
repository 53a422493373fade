//! Experiment configuration.
//!
//! Files are UTF-8 `key=value` lines with dotted keys; `#` starts a comment.
//! Values are resolved in this order, later winning: built-in defaults, the
//! config file, then command-line overrides. Every key is listed in
//! [`SCHEMA`]; models are declared with `model.<name>.<field>` keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tesser_core::analysis::{AlignmentTrialConfig, SpectrumScale};
use tesser_core::attack::{AttackConfig, Method, PatchDropout};
use tesser_core::model::{Arch, CnnArch, DatasetSpec, ModuleTag, TrainConfig, VitArch};
use tesser_core::modulation::{default_early_set, ModulationConfig, PerModule};

use crate::error::{HarnessError, Result};

/// `(key, default, description)` for every global key.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed for attack randomness"),
    ("samples", "200", "held-out images attacked (surrogate must classify them correctly)"),
    ("out_dir", "tesser-out", "report directory; TESSER_OUT_DIR overrides the file value"),
    ("cache_dir", ".tesser-cache", "checkpoint cache; TESSER_CACHE_DIR overrides the file value"),
    ("workers", "0", "worker threads, 0 = all cores; never changes results"),
    ("sections", "methods,targeted,modules,toggles,sigma,analysis,theorem1", "report sections to run"),
    ("dataset.seed", "0", "procedural dataset seed"),
    ("dataset.train_count", "2000", "training images"),
    ("dataset.test_count", "600", "held-out images"),
    ("dataset.classes", "10", "class count, 2..=10"),
    ("dataset.image_side", "32", "image side in pixels (power of two)"),
    ("surrogate", "surrogate", "model attacked white-box"),
    ("targets", "vit_seed,vit_small,cnn", "black-box models, comma separated"),
    ("methods", "pgd,mim,att-like,tesser", "attacks: pgd, mim, att-like, tesser"),
    ("attack.epsilon", "16/255", "l-infinity budget (decimal or a/b)"),
    ("attack.steps", "10", "iterations"),
    ("attack.step_size", "auto", "per-step size; auto = epsilon / steps"),
    ("attack.momentum", "1.0", "momentum decay for mim and tesser"),
    ("attack.sigma", "0.5", "tesser input blur sigma; 0 disables"),
    ("attack.blur_size", "3", "odd blur kernel width"),
    ("attack.targeted", "false", "attack towards label (y + 1) mod K"),
    ("attack.patch_dropout", "false", "tesser patch-cell gradient dropout"),
    ("attack.keep_prob", "0.7", "patch dropout keep probability"),
    ("attack.patch_size", "4", "patch dropout cell size in pixels"),
    ("modulation.gamma_base", "0.5", "minimum token scale, in (0, 1]"),
    ("modulation.lambda_attn", "0.4", "attention scaling range"),
    ("modulation.lambda_qkv", "0.5", "qkv scaling range"),
    ("modulation.lambda_mlp", "0.55", "mlp scaling range"),
    ("modulation.omega_attn", "0.45", "attention weakening factor, in (0, 1]"),
    ("modulation.omega_qkv", "0.5", "qkv weakening factor, in (0, 1]"),
    ("modulation.omega_mlp", "0.7", "mlp weakening factor, in (0, 1]"),
    ("modulation.l_cut", "auto", "first truncated block (0-based); auto = ceil(10 * depth / 12)"),
    ("modulation.early", "auto", "early blocks (0-based, comma separated); auto = first ceil(depth / 3)"),
    ("modulation.eps_norm", "1e-8", "min-max normalization guard"),
    ("modulation.modules", "attn,qkv,mlp", "modules whose hooks are active"),
    ("modulation.fsgs", "true", "token scaling on/off"),
    ("modulation.weakening", "true", "module weakening on/off"),
    ("modulation.truncation", "true", "attention truncation on/off"),
    ("modulation.random_scaling", "false", "draw token scales uniformly instead"),
    ("modulation.include_cls", "true", "include CLS in importance statistics"),
    ("sweep.sigmas", "0,0.5,0.7,1.0", "sigma values for the blur sweep"),
    ("hfer.radius", "auto", "low-band radius in bins; auto = H / 4"),
    ("hfer.scale", "power", "spectrum: power or log"),
    ("theorem1.tokens", "65", "tokens per trial"),
    ("theorem1.dim", "64", "gradient dimension"),
    ("theorem1.semantic_fraction", "0.3", "share of semantic tokens"),
    ("theorem1.rho_sem", "0.8", "semantic gradient alignment"),
    ("theorem1.rho_bg", "0.0", "background gradient alignment"),
    ("theorem1.trials", "1000", "Monte-Carlo trials"),
    ("theorem1.gamma_base", "0.5", "scale floor"),
    ("theorem1.lambda", "0.5", "scale range"),
    ("theorem1.norm_coupling", "true", "semantic tokens get larger activation norms"),
];

/// `(field, description)` for `model.<name>.<field>` keys.
pub const MODEL_FIELDS: &[(&str, &str)] = &[
    ("arch", "vit or cnn"),
    ("seed", "initialization and shuffling seed"),
    ("patch_size", "vit patch side"),
    ("embed_dim", "vit width"),
    ("heads", "vit attention heads"),
    ("depth", "vit blocks"),
    ("mlp_ratio", "vit hidden width multiplier"),
    ("conv1", "cnn first conv channels"),
    ("conv2", "cnn second conv channels"),
    ("epochs", "training epochs"),
    ("lr", "peak learning rate"),
    ("batch_size", "mini-batch size"),
    ("momentum", "SGD momentum"),
    ("clip", "gradient-norm clip, 0 = off"),
];

const DEFAULT_MODELS: &[(&str, &[(&str, &str)])] = &[
    ("surrogate", &[("arch", "vit"), ("seed", "0")]),
    ("vit_seed", &[("arch", "vit"), ("seed", "1")]),
    ("vit_small", &[("arch", "vit"), ("seed", "2"), ("depth", "4"), ("embed_dim", "48")]),
    ("cnn", &[("arch", "cnn"), ("seed", "3")]),
];

/// Keys that locate files or size the thread pool; they never affect results
/// and are left out of config hashes.
const NON_SEMANTIC: &[&str] = &["out_dir", "cache_dir", "workers"];

pub fn help_text() -> String {
    let mut s = String::from("Configuration keys (key=value; defaults shown):\n");
    for (k, d, desc) in SCHEMA {
        let _ = writeln!(s, "  {k:<30} {d:<24} {desc}");
    }
    s.push_str("\nPer-model keys, model.<name>.<field>:\n");
    for (f, desc) in MODEL_FIELDS {
        let _ = writeln!(s, "  {f:<30} {desc}");
    }
    s.push_str("\nBuilt-in models: surrogate (vit), vit_seed (vit, seed 1), vit_small (vit, depth 4, width 48), cnn.\n");
    s
}

/// Raw key/value view with provenance-aware override handling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        let mut values: BTreeMap<String, String> =
            SCHEMA.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        for (name, fields) in DEFAULT_MODELS {
            for (f, v) in *fields {
                values.insert(format!("model.{name}.{f}"), v.to_string());
            }
        }
        Self { values }
    }
}

fn check_key(key: &str) -> Result<()> {
    if SCHEMA.iter().any(|(k, _, _)| *k == key) {
        return Ok(());
    }
    if let Some(rest) = key.strip_prefix("model.") {
        if let Some((name, field)) = rest.rsplit_once('.') {
            if !name.is_empty() && MODEL_FIELDS.iter().any(|(f, _)| *f == field) {
                return Ok(());
            }
        }
    }
    Err(HarnessError::config(key, "unknown key"))
}

impl ConfigMap {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        check_key(key)?;
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a config file's contents.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::config(format!("line {}", n + 1), "expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), v.to_string()) {
                if prev != v {
                    return Err(HarnessError::Conflict {
                        key: k.to_string(),
                        first: prev,
                        second: v.to_string(),
                    });
                }
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Input {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides; one key given two different values is
    /// an error.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<()> {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in overrides {
            if let Some(prev) = seen.insert(k, v) {
                if prev != v {
                    return Err(HarnessError::Conflict {
                        key: k.clone(),
                        first: prev.to_string(),
                        second: v.clone(),
                    });
                }
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Canonical `key=value` lines of every result-affecting key.
    pub fn canonical(&self) -> String {
        self.values
            .iter()
            .filter(|(k, _)| !NON_SEMANTIC.contains(&k.as_str()))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .filter(|(k, _)| !NON_SEMANTIC.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn hash(&self) -> String {
        short_hash(self.canonical().as_bytes())
    }
}

/// First 16 hex digits of SHA-256.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let parsed = match v.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok().zip(b.trim().parse::<f64>().ok()).map(|(a, b)| a / b),
        None => v.parse::<f64>().ok(),
    };
    parsed
        .filter(|x| x.is_finite())
        .ok_or_else(|| HarnessError::config(key, format!("expected a number, got `{v}`")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| HarnessError::config(key, format!("expected a non-negative integer, got `{v}`")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| HarnessError::config(key, format!("expected a non-negative integer, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(HarnessError::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodSpec {
    Pgd,
    Mim,
    AttLike,
    Tesser,
}

impl MethodSpec {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pgd" => Some(MethodSpec::Pgd),
            "mim" => Some(MethodSpec::Mim),
            "att-like" | "att_like" => Some(MethodSpec::AttLike),
            "tesser" => Some(MethodSpec::Tesser),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodSpec::Pgd => "pgd",
            MethodSpec::Mim => "mim",
            MethodSpec::AttLike => "att-like",
            MethodSpec::Tesser => "tesser",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Section {
    Methods,
    Targeted,
    Modules,
    Toggles,
    Sigma,
    Analysis,
    Theorem1,
}

impl Section {
    pub const ALL: [Section; 7] = [
        Section::Methods,
        Section::Targeted,
        Section::Modules,
        Section::Toggles,
        Section::Sigma,
        Section::Analysis,
        Section::Theorem1,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Section::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Section::Methods => "methods",
            Section::Targeted => "targeted",
            Section::Modules => "modules",
            Section::Toggles => "toggles",
            Section::Sigma => "sigma",
            Section::Analysis => "analysis",
            Section::Theorem1 => "theorem1",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub arch: Arch,
    pub train: TrainConfig,
}

impl ModelSpec {
    /// Stable text identifying everything that determines trained weights.
    pub fn descriptor(&self, dataset: &DatasetSpec) -> String {
        format!("{:?}|{:?}|{:?}", self.arch, dataset, self.train)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub map: ConfigMap,
    pub seed: u64,
    pub samples: usize,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub workers: usize,
    pub sections: BTreeSet<Section>,
    pub dataset: DatasetSpec,
    pub surrogate: ModelSpec,
    pub targets: Vec<ModelSpec>,
    pub methods: Vec<MethodSpec>,
    /// Attack settings shared by every method; see [`ExperimentConfig::attack_for`].
    pub attack: AttackConfig,
    pub sigmas: Vec<f64>,
    pub hfer_radius: Option<f64>,
    pub hfer_scale: SpectrumScale,
    pub theorem1: AlignmentTrialConfig,
}

fn model_spec(map: &ConfigMap, name: &str, image_side: usize, classes: usize) -> Result<ModelSpec> {
    let get = |f: &str| map.get(&format!("model.{name}.{f}"));
    let arch_name = get("arch").ok_or_else(|| HarnessError::UnknownModel(name.to_string()))?;
    let key = |f: &str| format!("model.{name}.{f}");
    let uget = |f: &str, d: usize| -> Result<usize> { get(f).map_or(Ok(d), |v| parse_usize(&key(f), v)) };
    let fget = |f: &str, d: f64| -> Result<f64> { get(f).map_or(Ok(d), |v| parse_f64(&key(f), v)) };
    let arch = match arch_name {
        "vit" => {
            let d = VitArch::default();
            Arch::Vit(VitArch {
                image_side,
                channels: 3,
                patch_size: uget("patch_size", d.patch_size)?,
                embed_dim: uget("embed_dim", d.embed_dim)?,
                heads: uget("heads", d.heads)?,
                depth: uget("depth", d.depth)?,
                mlp_ratio: uget("mlp_ratio", d.mlp_ratio)?,
                classes,
            })
        }
        "cnn" => {
            let d = CnnArch::default();
            Arch::Cnn(CnnArch {
                image_side,
                channels: 3,
                conv1: uget("conv1", d.conv1)?,
                conv2: uget("conv2", d.conv2)?,
                classes,
            })
        }
        other => return Err(HarnessError::config(key("arch"), format!("expected vit or cnn, got `{other}`"))),
    };
    arch.validate()
        .map_err(|e| HarnessError::config(format!("model.{name}"), e.to_string()))?;
    let d = TrainConfig::default();
    let train = TrainConfig {
        epochs: uget("epochs", d.epochs)?,
        lr: fget("lr", d.lr)?,
        batch_size: uget("batch_size", d.batch_size)?,
        momentum: fget("momentum", d.momentum)?,
        max_grad_norm: fget("clip", d.max_grad_norm)?,
        seed: get("seed").map_or(Ok(0), |v| parse_u64(&key("seed"), v))?,
    };
    Ok(ModelSpec {
        name: name.to_string(),
        arch,
        train,
    })
}

impl ExperimentConfig {
    pub fn from_map(map: ConfigMap) -> Result<Self> {
        let req = |k: &str| -> &str { map.get(k).unwrap_or_default() };
        let f = |k: &str| parse_f64(k, req(k));
        let u = |k: &str| parse_usize(k, req(k));
        let b = |k: &str| parse_bool(k, req(k));

        let dataset = DatasetSpec {
            seed: parse_u64("dataset.seed", req("dataset.seed"))?,
            train_count: u("dataset.train_count")?,
            test_count: u("dataset.test_count")?,
            classes: u("dataset.classes")?,
            image_side: u("dataset.image_side")?,
        };
        dataset
            .validate()
            .map_err(|e| HarnessError::config("dataset", e.to_string()))?;
        if !dataset.image_side.is_power_of_two() {
            return Err(HarnessError::config("dataset.image_side", "must be a power of two"));
        }

        let surrogate = model_spec(&map, req("surrogate"), dataset.image_side, dataset.classes)?;
        let depth = match surrogate.arch {
            Arch::Vit(a) => a.depth,
            Arch::Cnn(_) => return Err(HarnessError::config("surrogate", "the surrogate must be a vit")),
        };
        let targets = parse_list(req("targets"))
            .iter()
            .map(|n| model_spec(&map, n, dataset.image_side, dataset.classes))
            .collect::<Result<Vec<_>>>()?;
        let mut names = BTreeSet::from([surrogate.name.clone()]);
        for t in &targets {
            if !names.insert(t.name.clone()) {
                return Err(HarnessError::config("targets", format!("model `{}` listed twice", t.name)));
            }
        }

        let methods = parse_list(req("methods"))
            .iter()
            .map(|m| MethodSpec::parse(m).ok_or_else(|| HarnessError::config("methods", format!("unknown method `{m}`"))))
            .collect::<Result<Vec<_>>>()?;
        if methods.is_empty() {
            return Err(HarnessError::config("methods", "at least one method is required"));
        }
        let sections = parse_list(req("sections"))
            .iter()
            .map(|s| Section::parse(s).ok_or_else(|| HarnessError::config("sections", format!("unknown section `{s}`"))))
            .collect::<Result<BTreeSet<_>>>()?;

        let mut modulation = ModulationConfig::reference(depth);
        modulation.gamma_base = f("modulation.gamma_base")?;
        modulation.lambda = PerModule {
            attn: f("modulation.lambda_attn")?,
            qkv: f("modulation.lambda_qkv")?,
            mlp: f("modulation.lambda_mlp")?,
        };
        modulation.omega = PerModule {
            attn: f("modulation.omega_attn")?,
            qkv: f("modulation.omega_qkv")?,
            mlp: f("modulation.omega_mlp")?,
        };
        modulation.l_cut = match req("modulation.l_cut") {
            "auto" => (10 * depth).div_ceil(12),
            v => parse_usize("modulation.l_cut", v)?,
        };
        modulation.early = match req("modulation.early") {
            "auto" => default_early_set(depth),
            v => parse_list(v)
                .iter()
                .map(|x| parse_usize("modulation.early", x))
                .collect::<Result<_>>()?,
        };
        modulation.eps_norm = f("modulation.eps_norm")?;
        let active = parse_list(req("modulation.modules"));
        for m in ModuleTag::ALL {
            modulation.modules.set(m, active.iter().any(|a| a == m.name()));
        }
        if let Some(bad) = active.iter().find(|a| !ModuleTag::ALL.iter().any(|m| m.name() == a.as_str())) {
            return Err(HarnessError::config("modulation.modules", format!("unknown module `{bad}`")));
        }
        modulation.enable_fsgs = b("modulation.fsgs")?;
        modulation.enable_weakening = b("modulation.weakening")?;
        modulation.enable_truncation = b("modulation.truncation")?;
        modulation.random_scaling = b("modulation.random_scaling")?;
        modulation.include_cls = b("modulation.include_cls")?;
        modulation
            .validate()
            .map_err(|e| HarnessError::config("modulation", e.to_string()))?;

        let epsilon = f("attack.epsilon")?;
        let steps = u("attack.steps")?;
        let step_size = match req("attack.step_size") {
            "auto" => epsilon / steps.max(1) as f64,
            v => parse_f64("attack.step_size", v)?,
        };
        let seed = parse_u64("seed", req("seed"))?;
        let attack = AttackConfig {
            method: Method::Tesser,
            epsilon,
            steps,
            step_size,
            momentum: f("attack.momentum")?,
            modulation,
            sigma: f("attack.sigma")?,
            blur_size: u("attack.blur_size")?,
            targeted: b("attack.targeted")?,
            patch_dropout: PatchDropout {
                enabled: b("attack.patch_dropout")?,
                keep_prob: f("attack.keep_prob")?,
                patch_size: u("attack.patch_size")?,
            },
            seed,
        };
        attack
            .validate()
            .map_err(|e| HarnessError::config("attack", e.to_string()))?;

        let samples = u("samples")?;
        if samples == 0 {
            return Err(HarnessError::config("samples", "must be at least 1"));
        }
        let sigmas = parse_list(req("sweep.sigmas"))
            .iter()
            .map(|s| parse_f64("sweep.sigmas", s))
            .collect::<Result<Vec<_>>>()?;
        if sigmas.iter().any(|&s| s < 0.0) {
            return Err(HarnessError::config("sweep.sigmas", "sigmas must be non-negative"));
        }
        let hfer_radius = match req("hfer.radius") {
            "auto" => None,
            v => Some(parse_f64("hfer.radius", v)?),
        };
        let hfer_scale = match req("hfer.scale") {
            "power" => SpectrumScale::Power,
            "log" => SpectrumScale::LogMagnitude,
            v => return Err(HarnessError::config("hfer.scale", format!("expected power or log, got `{v}`"))),
        };
        let theorem1 = AlignmentTrialConfig {
            tokens: u("theorem1.tokens")?,
            dim: u("theorem1.dim")?,
            semantic_fraction: f("theorem1.semantic_fraction")?,
            rho_sem: f("theorem1.rho_sem")?,
            rho_bg: f("theorem1.rho_bg")?,
            trials: u("theorem1.trials")?,
            seed,
            gamma_base: f("theorem1.gamma_base")?,
            lambda: f("theorem1.lambda")?,
            norm_coupling: b("theorem1.norm_coupling")?,
        };
        theorem1
            .validate()
            .map_err(|e| HarnessError::config("theorem1", e.to_string()))?;

        let out_dir = std::env::var_os("TESSER_OUT_DIR")
            .filter(|_| map.get("out_dir") == Some("tesser-out"))
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(req("out_dir")));
        let cache_dir = std::env::var_os("TESSER_CACHE_DIR")
            .filter(|_| map.get("cache_dir") == Some(".tesser-cache"))
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(req("cache_dir")));

        Ok(Self {
            seed,
            samples,
            out_dir,
            cache_dir,
            workers: u("workers")?,
            sections,
            dataset,
            surrogate,
            targets,
            methods,
            attack,
            sigmas,
            hfer_radius,
            hfer_scale,
            theorem1,
            map,
        })
    }

    pub fn surrogate_depth(&self) -> usize {
        self.attack.modulation.depth
    }

    /// Attack settings for one method, derived from the shared settings.
    pub fn attack_for(&self, method: MethodSpec) -> AttackConfig {
        let base = &self.attack;
        match method {
            MethodSpec::Pgd => AttackConfig {
                method: Method::Pgd,
                momentum: 0.0,
                sigma: 0.0,
                patch_dropout: PatchDropout { enabled: false, ..base.patch_dropout },
                ..base.clone()
            },
            MethodSpec::Mim => AttackConfig {
                method: Method::Mim,
                sigma: 0.0,
                patch_dropout: PatchDropout { enabled: false, ..base.patch_dropout },
                ..base.clone()
            },
            MethodSpec::AttLike => {
                let mut c = AttackConfig {
                    method: Method::Tesser,
                    sigma: 0.0,
                    ..base.clone()
                };
                c.modulation.lambda = PerModule::splat(0.0);
                c
            }
            MethodSpec::Tesser => AttackConfig {
                method: Method::Tesser,
                ..base.clone()
            },
        }
    }

    pub fn hash(&self) -> String {
        self.map.hash()
    }

    pub fn all_models(&self) -> Vec<&ModelSpec> {
        std::iter::once(&self.surrogate).chain(&self.targets).collect()
    }
}

/// Stable identity of an attack configuration, used to label report
/// sections and to reuse identical runs.
pub fn attack_key(cfg: &AttackConfig) -> String {
    format!("{cfg:?}")
}

pub fn attack_hash(cfg: &AttackConfig) -> String {
    short_hash(attack_key(cfg).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(text: &str) -> Result<ExperimentConfig> {
        let mut m = ConfigMap::default();
        m.apply_text(text)?;
        ExperimentConfig::from_map(m)
    }

    #[test]
    fn defaults_resolve() {
        let c = build("").unwrap();
        assert_eq!(c.samples, 200);
        assert_eq!(c.targets.len(), 3);
        assert_eq!(c.attack.modulation.l_cut, 5);
        assert!((c.attack.epsilon - 16.0 / 255.0).abs() < 1e-15);
        assert!((c.attack.step_size - 1.6 / 255.0).abs() < 1e-15);
        assert_eq!(c.methods.len(), 4);
        match c.targets[1].arch {
            Arch::Vit(a) => assert_eq!((a.depth, a.embed_dim), (4, 48)),
            _ => panic!(),
        }
    }

    #[test]
    fn file_syntax() {
        let c = build("# comment\nsamples = 3  # trailing\n\nmodulation.lambda_attn=0.1\n").unwrap();
        assert_eq!(c.samples, 3);
        assert_eq!(c.attack.modulation.lambda.attn, 0.1);
        assert!(build("nonsense").is_err());
        assert!(matches!(build("bogus.key=1"), Err(HarnessError::Config { .. })));
        assert!(matches!(build("samples=1\nsamples=2"), Err(HarnessError::Conflict { .. })));
    }

    #[test]
    fn custom_model() {
        let c = build("model.tiny.arch=vit\nmodel.tiny.depth=2\ntargets=tiny,cnn").unwrap();
        assert_eq!(c.targets[0].name, "tiny");
        assert!(matches!(build("targets=ghost"), Err(HarnessError::UnknownModel(_))));
    }

    #[test]
    fn overrides_conflict() {
        let mut m = ConfigMap::default();
        let o = vec![("seed".to_string(), "1".to_string()), ("seed".to_string(), "2".to_string())];
        assert!(matches!(m.apply_overrides(&o), Err(HarnessError::Conflict { .. })));
    }

    #[test]
    fn hash_ignores_locations() {
        let a = ConfigMap::default();
        let mut b = ConfigMap::default();
        b.set("out_dir", "/elsewhere").unwrap();
        b.set("workers", "3").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "9").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn method_derivation() {
        let c = build("").unwrap();
        let att = c.attack_for(MethodSpec::AttLike);
        assert_eq!(att.sigma, 0.0);
        assert_eq!(att.modulation.lambda, PerModule::splat(0.0));
        assert_eq!(c.attack_for(MethodSpec::Pgd).momentum, 0.0);
        assert_eq!(c.attack_for(MethodSpec::Tesser).sigma, 0.5);
    }

    #[test]
    fn rejects_invalid_values() {
        for bad in [
            "samples=0",
            "modulation.gamma_base=0",
            "modulation.l_cut=9",
            "attack.epsilon=abc",
            "methods=fgsm",
            "sections=everything",
            "surrogate=cnn",
            "modulation.modules=attn,foo",
        ] {
            assert!(build(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn help_lists_every_key() {
        let h = help_text();
        for (k, _, _) in SCHEMA {
            assert!(h.contains(k));
        }
    }
}

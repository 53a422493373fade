//! Experiment orchestration: train or load models, run attack cells, and
//! assemble the report.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use tesser_core::analysis::{
    cosine_alignment, hfer_with, log_spectrum, pgm_bytes, psnr, ssim, stabilization_iteration, theorem1_montecarlo,
    AlignmentTrialConfig,
};
use tesser_core::attack::{attack_batch, AttackConfig, AttackResult};
use tesser_core::model::{
    accuracy, cross_entropy, load_checkpoint, save_checkpoint, train, Dataset, ModelParams, ModuleTag,
};
use tesser_core::modulation::FsgsHooks;
use tesser_core::{Rng, Tensor};

use crate::config::{attack_key, short_hash, ExperimentConfig, MethodSpec, ModelSpec, Section};
use crate::error::{Context, HarnessError, Result};

/// Slack on the ℓ∞ budget check; re-deriving δ after the pixel clamp can
/// move it by a few ulps.
pub const BUDGET_TOLERANCE: f64 = 1e-12;

pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub test_accuracy: f64,
    pub checkpoint: PathBuf,
    pub from_cache: bool,
    pub seconds: f64,
}

/// Loads the checkpoint for `spec` from `cache_dir`, training and saving it
/// first when absent. The returned weights are always the reloaded f32
/// copy, so cached and fresh runs agree bitwise.
pub fn load_or_train(
    spec: &ModelSpec,
    cfg: &ExperimentConfig,
    train_data: &dyn Fn() -> Result<Arc<Dataset>>,
    test: &Dataset,
) -> Result<TrainedModel> {
    let start = Instant::now();
    let hash = short_hash(spec.descriptor(&cfg.dataset).as_bytes());
    let path = cfg.cache_dir.join(format!("{}-{hash}.tsrc", spec.name));
    let from_cache = path.exists();
    if !from_cache {
        let data = train_data()?;
        let init = ModelParams::init(spec.arch, &mut Rng::new(spec.train.seed, 1)).context(|| format!("initializing `{}`", spec.name))?;
        let (params, _) = train(init, &data, &spec.train).map_err(|source| HarnessError::Training {
            model: spec.name.clone(),
            source,
        })?;
        std::fs::create_dir_all(&cfg.cache_dir).map_err(|source| HarnessError::Output {
            path: cfg.cache_dir.clone(),
            source,
        })?;
        save_checkpoint(&params, &path).context(|| format!("saving `{}`", spec.name))?;
    }
    let params = load_checkpoint(&path, Some(spec.arch)).context(|| format!("loading {}", path.display()))?;
    let test_accuracy = accuracy(&params, test).context(|| format!("evaluating `{}`", spec.name))?;
    Ok(TrainedModel {
        spec: spec.clone(),
        params,
        test_accuracy,
        checkpoint: path,
        from_cache,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub struct Models {
    pub surrogate: TrainedModel,
    pub targets: Vec<TrainedModel>,
}

pub fn prepare_models(cfg: &ExperimentConfig, test: &Dataset) -> Result<Models> {
    let cached: Mutex<Option<Arc<Dataset>>> = Mutex::new(None);
    let train_data = || -> Result<Arc<Dataset>> {
        let mut slot = cached.lock().expect("dataset lock");
        if let Some(d) = slot.as_ref() {
            return Ok(d.clone());
        }
        let d = Arc::new(cfg.dataset.train().context(|| "generating the training set".into())?);
        *slot = Some(d.clone());
        Ok(d)
    };
    let surrogate = load_or_train(&cfg.surrogate, cfg, &train_data, test)?;
    let targets = cfg
        .targets
        .iter()
        .map(|t| load_or_train(t, cfg, &train_data, test))
        .collect::<Result<Vec<_>>>()?;
    Ok(Models { surrogate, targets })
}

/// Indices of the first `cfg.samples` test images the surrogate gets right.
pub fn evaluation_indices(cfg: &ExperimentConfig, surrogate: &ModelParams, test: &Dataset) -> Result<Vec<usize>> {
    let preds: Vec<usize> = test
        .images
        .par_iter()
        .map(|x| surrogate.predict(x))
        .collect::<std::result::Result<_, _>>()
        .context(|| "classifying the test set".into())?;
    let idx: Vec<usize> = (0..test.len())
        .filter(|&i| preds[i] == test.labels[i])
        .take(cfg.samples)
        .collect();
    if idx.len() < cfg.samples {
        return Err(HarnessError::config(
            "samples",
            format!("only {} correctly classified test images are available", idx.len()),
        ));
    }
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageRecord {
    pub image: usize,
    pub label: usize,
    /// Target label in targeted mode, otherwise the true label.
    pub goal: usize,
    pub adv_label: usize,
    pub success: bool,
    pub stabilization: Option<usize>,
    pub confidence: Option<f64>,
    pub hfer: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Per target model, in roster order.
    pub fooled: Vec<bool>,
    pub zero_gradient_steps: usize,
    pub budget_ok: bool,
}

pub struct Cell {
    pub config_hash: String,
    pub cfg: AttackConfig,
    pub records: Vec<ImageRecord>,
    pub deltas: Vec<Tensor>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub config_hash: String,
    pub n: usize,
    pub whitebox_asr: f64,
    pub target_asr: BTreeMap<String, f64>,
    pub mean_blackbox_asr: f64,
    pub hfer_mean: f64,
    pub hfer_se: f64,
    /// Mean over images with finite PSNR.
    pub psnr_mean: Option<f64>,
    pub ssim_mean: f64,
    /// Mean over images whose prediction stabilized.
    pub stabilization_mean: Option<f64>,
    pub stabilized: usize,
    /// Mean final probability of the predicted label over successful images.
    pub confidence_mean: Option<f64>,
    pub zero_gradient_steps: usize,
    pub budget_violations: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean and standard error of the mean.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = mean(v).unwrap_or(0.0);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn percent(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

impl Cell {
    pub fn summary(&self, target_names: &[String]) -> CellSummary {
        let r = &self.records;
        let n = r.len();
        let target_asr: BTreeMap<String, f64> = target_names
            .iter()
            .enumerate()
            .map(|(t, name)| (name.clone(), percent(r.iter().filter(|x| x.fooled[t]).count(), n)))
            .collect();
        let hfers: Vec<f64> = r.iter().map(|x| x.hfer).collect();
        let (hfer_mean, hfer_se) = mean_se(&hfers);
        let psnrs: Vec<f64> = r.iter().map(|x| x.psnr).filter(|p| p.is_finite()).collect();
        let ssims: Vec<f64> = r.iter().map(|x| x.ssim).collect();
        let stab: Vec<f64> = r.iter().filter_map(|x| x.stabilization.map(|s| s as f64)).collect();
        let conf: Vec<f64> = r.iter().filter(|x| x.success).filter_map(|x| x.confidence).collect();
        CellSummary {
            config_hash: self.config_hash.clone(),
            n,
            whitebox_asr: percent(r.iter().filter(|x| x.success).count(), n),
            mean_blackbox_asr: mean(&target_asr.values().copied().collect::<Vec<_>>()).unwrap_or(0.0),
            target_asr,
            hfer_mean,
            hfer_se,
            psnr_mean: mean(&psnrs),
            ssim_mean: mean(&ssims).unwrap_or(0.0),
            stabilization_mean: mean(&stab),
            stabilized: stab.len(),
            confidence_mean: mean(&conf),
            zero_gradient_steps: r.iter().map(|x| x.zero_gradient_steps).sum(),
            budget_violations: r.iter().filter(|x| !x.budget_ok).count(),
        }
    }
}

fn budget_ok(res: &AttackResult, eps: f64) -> bool {
    let within = |linf: f64, lo: f64, hi: f64| linf <= eps + BUDGET_TOLERANCE && lo >= 0.0 && hi <= 1.0;
    let final_ok = within(
        res.delta.max_abs(),
        res.x_adv.as_slice().iter().copied().fold(f64::INFINITY, f64::min),
        res.x_adv.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    final_ok && res.trace.iter().all(|e| within(e.delta_linf, e.pixel_min, e.pixel_max))
}

/// Shared state for one experiment: data, models, and memoized cells.
pub struct Runner<'a> {
    pub cfg: &'a ExperimentConfig,
    pub models: &'a Models,
    pub test: &'a Dataset,
    pub indices: Vec<usize>,
    fingerprint: String,
    cells: Mutex<BTreeMap<String, Arc<Cell>>>,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a ExperimentConfig, models: &'a Models, test: &'a Dataset, indices: Vec<usize>) -> Self {
        let mut fingerprint = format!("{:?}|samples={}|hfer={:?},{:?}", cfg.dataset, cfg.samples, cfg.hfer_radius, cfg.hfer_scale);
        for m in cfg.all_models() {
            fingerprint.push('|');
            fingerprint.push_str(&m.descriptor(&cfg.dataset));
        }
        Self {
            cfg,
            models,
            test,
            indices,
            fingerprint,
            cells: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn target_names(&self) -> Vec<String> {
        self.models.targets.iter().map(|t| t.spec.name.clone()).collect()
    }

    pub fn cell_hash(&self, cfg: &AttackConfig) -> String {
        short_hash(format!("{}|{}", self.fingerprint, attack_key(cfg)).as_bytes())
    }

    pub fn section_hash(&self, cfgs: &[&AttackConfig]) -> String {
        let mut keys: Vec<String> = cfgs.iter().map(|c| attack_key(c)).collect();
        keys.sort();
        short_hash(format!("{}|{}", self.fingerprint, keys.join("|")).as_bytes())
    }

    /// Runs (or reuses) the attack cell for `cfg` over the evaluation set.
    pub fn cell(&self, cfg: &AttackConfig) -> Result<Arc<Cell>> {
        let key = attack_key(cfg);
        if let Some(c) = self.cells.lock().expect("cell lock").get(&key) {
            return Ok(c.clone());
        }
        let start = Instant::now();
        let images: Vec<Tensor> = self.indices.iter().map(|&i| self.test.images[i].clone()).collect();
        let labels: Vec<usize> = self.indices.iter().map(|&i| self.test.labels[i]).collect();
        let keys: Vec<u64> = self.indices.iter().map(|&i| i as u64).collect();
        let surrogate = &self.models.surrogate.params;
        let results = attack_batch(surrogate, &images, &labels, cfg, &keys)
            .context(|| format!("attacking with {}", cfg.method.name()))?;
        let records = results
            .par_iter()
            .enumerate()
            .map(|(k, res)| self.record(self.indices[k], &images[k], labels[k], res, cfg))
            .collect::<Result<Vec<_>>>()?;
        let cell = Arc::new(Cell {
            config_hash: self.cell_hash(cfg),
            cfg: cfg.clone(),
            records,
            deltas: results.into_iter().map(|r| r.delta).collect(),
            seconds: start.elapsed().as_secs_f64(),
        });
        self.cells.lock().expect("cell lock").insert(key, cell.clone());
        Ok(cell)
    }

    fn record(&self, image: usize, x: &Tensor, y: usize, res: &AttackResult, cfg: &AttackConfig) -> Result<ImageRecord> {
        let goal = res.target.unwrap_or(y);
        let fooled = self
            .models
            .targets
            .iter()
            .map(|t| {
                let p = t.params.predict(&res.x_adv)?;
                Ok(if cfg.targeted { p == goal } else { p != y })
            })
            .collect::<tesser_core::Result<Vec<_>>>()
            .context(|| "evaluating targets".into())?;
        let labels: Vec<usize> = res.trace.iter().map(|e| e.label).collect();
        let stabilization = if cfg.targeted {
            stabilized_on(&labels, goal)
        } else {
            stabilization_iteration(&labels, y)
        };
        Ok(ImageRecord {
            image,
            label: y,
            goal,
            adv_label: res.adv_label,
            success: res.success,
            stabilization,
            confidence: res.trace.last().map(|e| e.confidence),
            hfer: hfer_with(&res.delta, self.cfg.hfer_radius, self.cfg.hfer_scale)
                .context(|| "hfer".into())?
                .hfer,
            psnr: psnr(x, &res.x_adv).context(|| "psnr".into())?,
            ssim: ssim(x, &res.x_adv).context(|| "ssim".into())?,
            fooled,
            zero_gradient_steps: res.zero_gradient_steps(),
            budget_ok: budget_ok(res, cfg.epsilon),
        })
    }

    pub fn cells_run(&self) -> Vec<Arc<Cell>> {
        self.cells.lock().expect("cell lock").values().cloned().collect()
    }
}

/// 1-indexed first step from which every later prediction equals `goal`.
fn stabilized_on(labels: &[usize], goal: usize) -> Option<usize> {
    if labels.last() != Some(&goal) {
        return None;
    }
    let tail = labels.iter().rev().take_while(|&&l| l == goal).count();
    Some(labels.len() - tail + 1)
}

/// Named attack variants of one report section, in table order.
pub fn section_cells(cfg: &ExperimentConfig, section: Section) -> Vec<(String, AttackConfig)> {
    let tesser = cfg.attack_for(MethodSpec::Tesser);
    match section {
        Section::Methods => cfg.methods.iter().map(|&m| (m.name().to_string(), cfg.attack_for(m))).collect(),
        Section::Targeted => cfg
            .methods
            .iter()
            .map(|&m| {
                let mut c = cfg.attack_for(m);
                c.targeted = true;
                (m.name().to_string(), c)
            })
            .collect(),
        Section::Modules => (0..8u8)
            .map(|bits| {
                let mut c = tesser.clone();
                let mut on = Vec::new();
                for (k, m) in ModuleTag::ALL.into_iter().enumerate() {
                    if bits & (1 << k) != 0 {
                        on.push(m.name());
                    } else {
                        c.modulation.lambda.set(m, 0.0);
                    }
                }
                let name = if on.is_empty() { "none".to_string() } else { on.join("+") };
                (name, c)
            })
            .collect(),
        Section::Toggles => {
            let mut v = vec![("default".to_string(), tesser.clone())];
            let mut c = tesser.clone();
            c.modulation.enable_weakening = false;
            v.push(("no-weakening".into(), c));
            let mut c = tesser.clone();
            c.modulation.enable_truncation = false;
            v.push(("no-truncation".into(), c));
            let mut c = tesser.clone();
            c.modulation.enable_fsgs = false;
            v.push(("no-fsgs".into(), c));
            let mut c = tesser.clone();
            c.modulation.random_scaling = true;
            v.push(("random-scaling".into(), c));
            let mut c = tesser.clone();
            c.patch_dropout.enabled = true;
            v.push(("patch-dropout".into(), c));
            v
        }
        Section::Sigma => cfg
            .sigmas
            .iter()
            .map(|&s| (format!("{s:.4}"), AttackConfig { sigma: s, ..tesser.clone() }))
            .collect(),
        Section::Analysis | Section::Theorem1 => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRow {
    pub name: String,
    pub role: String,
    pub arch: String,
    pub seed: u64,
    pub epochs: usize,
    pub test_accuracy: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantRow {
    pub variant: String,
    #[serde(flatten)]
    pub summary: CellSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableSection {
    pub config_hash: String,
    pub rows: Vec<VariantRow>,
}

impl TableSection {
    pub fn row(&self, variant: &str) -> Option<&CellSummary> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| &r.summary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub target: String,
    pub plain_cosine: f64,
    pub fsgs_cosine: f64,
    pub fsgs_improved_fraction: f64,
    pub degenerate: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisSection {
    pub config_hash: String,
    pub alignment: Vec<AlignmentRow>,
    pub images: Vec<String>,
    /// PGM bytes keyed by file name.
    #[serde(skip)]
    pub pgm: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Section {
    pub config_hash: String,
    pub trials: usize,
    pub rho_sem: f64,
    pub rho_bg: f64,
    pub lambda: f64,
    pub improvement_fraction: f64,
    pub mean_delta: f64,
    /// Largest |Δcos| with the scaling range set to zero.
    pub lambda_zero_max_abs_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerImageRow {
    pub section: String,
    pub variant: String,
    #[serde(flatten)]
    pub record: ImageRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub version: String,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub surrogate: String,
    pub targets: Vec<String>,
    pub models: Vec<ModelRow>,
    pub samples: usize,
    pub hfer_radius: f64,
    pub epsilon: f64,
    pub methods: Option<TableSection>,
    pub targeted: Option<TableSection>,
    pub modules: Option<TableSection>,
    pub toggles: Option<TableSection>,
    pub sigma: Option<TableSection>,
    pub analysis: Option<AnalysisSection>,
    pub theorem1: Option<Theorem1Section>,
    #[serde(skip)]
    pub per_image: Vec<PerImageRow>,
    #[serde(skip)]
    pub timing: Timing,
}

/// Wall-clock costs; machine dependent, so kept out of the report proper.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub models: BTreeMap<String, f64>,
    /// `(section/variant, mean seconds per image)`.
    pub cells: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

fn model_row(m: &TrainedModel, role: &str) -> ModelRow {
    let arch = match m.spec.arch {
        tesser_core::model::Arch::Vit(a) => format!(
            "vit(patch={},dim={},heads={},depth={},mlp={})",
            a.patch_size, a.embed_dim, a.heads, a.depth, a.mlp_ratio
        ),
        tesser_core::model::Arch::Cnn(a) => format!("cnn(conv1={},conv2={})", a.conv1, a.conv2),
    };
    ModelRow {
        name: m.spec.name.clone(),
        role: role.to_string(),
        arch,
        seed: m.spec.train.seed,
        epochs: m.spec.train.epochs,
        test_accuracy: m.test_accuracy,
        checkpoint: m
            .checkpoint
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
    }
}

/// Trains or loads every configured model without attacking.
pub fn train_models(cfg: &ExperimentConfig) -> Result<(Vec<ModelRow>, Timing)> {
    with_pool(cfg.workers, || {
        let test = cfg.dataset.test().context(|| "generating the test set".into())?;
        let models = prepare_models(cfg, &test)?;
        let mut timing = Timing::default();
        let mut rows = vec![model_row(&models.surrogate, "surrogate")];
        timing.models.insert(models.surrogate.spec.name.clone(), models.surrogate.seconds);
        for t in &models.targets {
            rows.push(model_row(t, "target"));
            timing.models.insert(t.spec.name.clone(), t.seconds);
        }
        Ok((rows, timing))
    })
}

pub fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::config("workers", e.to_string()))?;
    pool.install(f)
}

/// Runs every configured section and returns the assembled report. Nothing
/// is written to disk; see [`crate::report::write_report`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    with_pool(cfg.workers, || run_in_pool(cfg))
}

fn needs_models(cfg: &ExperimentConfig) -> bool {
    cfg.sections.iter().any(|s| *s != Section::Theorem1)
}

fn run_in_pool(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let mut report = ExperimentReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        config: cfg.map.echo(),
        surrogate: cfg.surrogate.name.clone(),
        targets: cfg.targets.iter().map(|t| t.name.clone()).collect(),
        models: Vec::new(),
        samples: cfg.samples,
        hfer_radius: cfg.hfer_radius.unwrap_or(cfg.dataset.image_side as f64 / 4.0),
        epsilon: cfg.attack.epsilon,
        methods: None,
        targeted: None,
        modules: None,
        toggles: None,
        sigma: None,
        analysis: None,
        theorem1: None,
        per_image: Vec::new(),
        timing: Timing::default(),
    };
    if cfg.sections.contains(&Section::Theorem1) {
        report.theorem1 = Some(theorem1_section(cfg)?);
    }
    if !needs_models(cfg) {
        report.timing.total_seconds = start.elapsed().as_secs_f64();
        return Ok(report);
    }

    let test = cfg.dataset.test().context(|| "generating the test set".into())?;
    let models = prepare_models(cfg, &test)?;
    report.models.push(model_row(&models.surrogate, "surrogate"));
    report.timing.models.insert(models.surrogate.spec.name.clone(), models.surrogate.seconds);
    for t in &models.targets {
        report.models.push(model_row(t, "target"));
        report.timing.models.insert(t.spec.name.clone(), t.seconds);
    }
    let indices = evaluation_indices(cfg, &models.surrogate.params, &test)?;
    let runner = Runner::new(cfg, &models, &test, indices);
    let names = runner.target_names();

    for section in cfg.sections.iter().copied() {
        let variants = section_cells(cfg, section);
        if variants.is_empty() {
            continue;
        }
        let cfgs: Vec<&AttackConfig> = variants.iter().map(|(_, c)| c).collect();
        let config_hash = runner.section_hash(&cfgs);
        let mut rows = Vec::new();
        for (variant, c) in &variants {
            let cell = runner.cell(c)?;
            rows.push(VariantRow {
                variant: variant.clone(),
                summary: cell.summary(&names),
            });
            report.timing.cells.insert(
                format!("{}/{}", section.name(), variant),
                cell.seconds / cell.records.len().max(1) as f64,
            );
            report.per_image.extend(cell.records.iter().map(|r| PerImageRow {
                section: section.name().to_string(),
                variant: variant.clone(),
                record: r.clone(),
            }));
        }
        let table = Some(TableSection { config_hash, rows });
        match section {
            Section::Methods => report.methods = table,
            Section::Targeted => report.targeted = table,
            Section::Modules => report.modules = table,
            Section::Toggles => report.toggles = table,
            Section::Sigma => report.sigma = table,
            Section::Analysis | Section::Theorem1 => {}
        }
    }
    if cfg.sections.contains(&Section::Analysis) {
        report.analysis = Some(analysis_section(&runner)?);
    }
    report.timing.total_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn theorem1_section(cfg: &ExperimentConfig) -> Result<Theorem1Section> {
    let t = &cfg.theorem1;
    let summary = theorem1_montecarlo(t).context(|| "theorem1 trials".into())?;
    let flat = theorem1_montecarlo(&AlignmentTrialConfig { lambda: 0.0, ..t.clone() })
        .context(|| "theorem1 trials".into())?;
    Ok(Theorem1Section {
        config_hash: short_hash(format!("{t:?}").as_bytes()),
        trials: t.trials,
        rho_sem: t.rho_sem,
        rho_bg: t.rho_bg,
        lambda: t.lambda,
        improvement_fraction: summary.improvement_fraction,
        mean_delta: summary.mean_delta,
        lambda_zero_max_abs_delta: flat.deltas.iter().fold(0.0, |m, d| m.max(d.abs())),
    })
}

/// Input gradient of the surrogate, optionally passed through the TESSER
/// modulation hooks.
fn surrogate_gradient(params: &ModelParams, x: &Tensor, y: usize, hooks: Option<(&AttackConfig, Rng)>) -> tesser_core::Result<Tensor> {
    match (params, hooks) {
        (ModelParams::Vit(p), Some((cfg, rng))) => {
            let tr = p.forward(x)?;
            let (_, gl) = cross_entropy(&tr.logits, y);
            let mut h = FsgsHooks::new(&cfg.modulation, rng);
            Ok(p.backward(&tr, &gl, Some(&mut h), false)?.input)
        }
        _ => Ok(params.input_gradient(x, y)?.1),
    }
}

fn analysis_section(runner: &Runner) -> Result<AnalysisSection> {
    let cfg = runner.cfg;
    let tesser = cfg.attack_for(MethodSpec::Tesser);
    let sur = &runner.models.surrogate.params;
    let base = Rng::new(cfg.seed, 0x414e_4c00);
    let per_image = runner
        .indices
        .par_iter()
        .map(|&i| {
            let (x, y) = (&runner.test.images[i], runner.test.labels[i]);
            let plain = surrogate_gradient(sur, x, y, None)?;
            let fsgs = surrogate_gradient(sur, x, y, Some((&tesser, base.split(i as u64))))?;
            runner
                .models
                .targets
                .iter()
                .map(|t| {
                    let g = t.params.input_gradient(x, y)?.1;
                    Ok((cosine_alignment(&plain, &g)?, cosine_alignment(&fsgs, &g)?))
                })
                .collect::<tesser_core::Result<Vec<_>>>()
        })
        .collect::<tesser_core::Result<Vec<_>>>()
        .context(|| "gradient alignment".into())?;
    let n = per_image.len();
    let alignment = runner
        .models
        .targets
        .iter()
        .enumerate()
        .map(|(t, m)| {
            let pairs: Vec<_> = per_image.iter().map(|v| v[t]).collect();
            AlignmentRow {
                target: m.spec.name.clone(),
                plain_cosine: pairs.iter().map(|p| p.0.cosine).sum::<f64>() / n as f64,
                fsgs_cosine: pairs.iter().map(|p| p.1.cosine).sum::<f64>() / n as f64,
                fsgs_improved_fraction: pairs.iter().filter(|p| p.1.cosine > p.0.cosine).count() as f64 / n as f64,
                degenerate: pairs.iter().filter(|p| p.0.degenerate || p.1.degenerate).count(),
                n,
            }
        })
        .collect();

    let mut pgm = BTreeMap::new();
    for m in &cfg.methods {
        let cell = runner.cell(&cfg.attack_for(*m))?;
        let (spec, sal) = cell_images(&cell)?;
        let (h, w) = (spec.shape()[0], spec.shape()[1]);
        for (name, t) in [("spectrum", &spec), ("saliency", &sal)] {
            let bytes = pgm_bytes(t.as_slice(), h, w).context(|| "pgm".into())?;
            pgm.insert(format!("{name}_{}.pgm", m.name()), bytes);
        }
    }
    let mut all = vec![&tesser];
    let method_cfgs: Vec<AttackConfig> = cfg.methods.iter().map(|m| cfg.attack_for(*m)).collect();
    all.extend(method_cfgs.iter());
    Ok(AnalysisSection {
        config_hash: runner.section_hash(&all),
        alignment,
        images: pgm.keys().cloned().collect(),
        pgm,
    })
}

/// Mean log spectrum and mean channel-summed |δ| of a cell, each `[H, W]`.
pub fn cell_images(cell: &Cell) -> Result<(Tensor, Tensor)> {
    let first = cell
        .deltas
        .first()
        .ok_or_else(|| HarnessError::Check("cell has no images".into()))?;
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let k = cell.deltas.len() as f64;
    let mut spec = Tensor::zeros(&[h, w]);
    let mut sal = Tensor::zeros(&[h, w]);
    for d in &cell.deltas {
        spec.axpy(1.0 / k, &log_spectrum(d).context(|| "spectrum".into())?)
            .context(|| "spectrum".into())?;
        let s = sal.as_mut_slice();
        for ch in 0..c {
            for (acc, v) in s.iter_mut().zip(d.channel(ch)) {
                *acc += v.abs() / k;
            }
        }
    }
    Ok((spec, sal))
}

//! Report emission and the independent ASR recount.
//!
//! Every file except `timing.json` is a pure function of the configuration:
//! floats are printed with four decimals and rows are sorted by their key
//! columns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::experiment::{CellSummary, ExperimentReport, ModelRow, TableSection, Timing};
use crate::error::{HarnessError, Result};

pub fn f4(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        let s = format!("{x:.4}");
        if s == "-0.0000" { "0.0000".into() } else { s }
    }
}

fn opt4(x: Option<f64>) -> String {
    x.map(f4).unwrap_or_default()
}

/// Rounds every float in a JSON tree to four decimals.
fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                let r = (x * 1e4).round() / 1e4;
                *v = serde_json::Number::from_f64(if r == 0.0 { 0.0 } else { r }).map_or(Value::Null, Value::Number);
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_json),
        Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

pub fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value).map_err(|e| HarnessError::Check(format!("serializing report: {e}")))?;
    round_json(&mut v);
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| HarnessError::Check(format!("serializing report: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// A CSV table; rows are sorted on write.
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort();
        let mut out = self.header.join(",");
        out.push('\n');
        for r in rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Parses a CSV produced by [`Csv::render`] into header-keyed rows.
pub fn parse_csv(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().map(|h| h.split(',').collect()).unwrap_or_default();
    lines
        .filter(|l| !l.is_empty())
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(String::from)).collect())
        .collect()
}

fn asr_matrix(report: &ExperimentReport, table: &TableSection) -> Csv {
    let mut csv = Csv::new(["method", "surrogate", "target", "asr_percent", "n"]);
    for row in &table.rows {
        let s = &row.summary;
        csv.push(vec![
            row.variant.clone(),
            report.surrogate.clone(),
            report.surrogate.clone(),
            f4(s.whitebox_asr),
            s.n.to_string(),
        ]);
        for (t, asr) in &s.target_asr {
            csv.push(vec![row.variant.clone(), report.surrogate.clone(), t.clone(), f4(*asr), s.n.to_string()]);
        }
    }
    csv
}

const METRIC_COLUMNS: [&str; 15] = [
    "config_hash",
    "whitebox_asr",
    "mean_blackbox_asr",
    "hfer_mean",
    "hfer_se",
    "hfer_radius",
    "psnr_mean",
    "ssim_mean",
    "stabilization_mean",
    "stabilized",
    "confidence_mean",
    "zero_gradient_steps",
    "budget_violations",
    "n",
    "section_hash",
];

fn metric_cells(s: &CellSummary, radius: f64, section_hash: &str) -> Vec<String> {
    vec![
        s.config_hash.clone(),
        f4(s.whitebox_asr),
        f4(s.mean_blackbox_asr),
        f4(s.hfer_mean),
        f4(s.hfer_se),
        f4(radius),
        opt4(s.psnr_mean),
        f4(s.ssim_mean),
        opt4(s.stabilization_mean),
        s.stabilized.to_string(),
        opt4(s.confidence_mean),
        s.zero_gradient_steps.to_string(),
        s.budget_violations.to_string(),
        s.n.to_string(),
        section_hash.to_string(),
    ]
}

/// Every attacked table in one long file: `section,variant,<metrics>`.
fn metrics(report: &ExperimentReport) -> Csv {
    let mut csv = Csv::new(["section", "variant"].into_iter().chain(METRIC_COLUMNS));
    for (name, table) in tables(report) {
        for row in &table.rows {
            let mut cells = vec![name.to_string(), row.variant.clone()];
            cells.extend(metric_cells(&row.summary, report.hfer_radius, &table.config_hash));
            csv.push(cells);
        }
    }
    csv
}

fn tables(report: &ExperimentReport) -> Vec<(&'static str, &TableSection)> {
    [
        ("methods", &report.methods),
        ("targeted", &report.targeted),
        ("modules", &report.modules),
        ("toggles", &report.toggles),
        ("sigma", &report.sigma),
    ]
    .into_iter()
    .filter_map(|(n, t)| t.as_ref().map(|t| (n, t)))
    .collect()
}

/// Wide ASR table: one column per target plus white-box and mean.
fn wide(report: &ExperimentReport, table: &TableSection, key: &str, with_hfer: bool) -> Csv {
    let mut header = vec![key.to_string(), "config_hash".into(), "whitebox_asr".into()];
    header.extend(report.targets.iter().map(|t| format!("{t}_asr")));
    header.push("mean_blackbox_asr".into());
    if with_hfer {
        header.extend(["hfer_mean".into(), "hfer_se".into()]);
    }
    header.extend(["n".into(), "section_hash".into()]);
    let mut csv = Csv::new(header);
    for row in &table.rows {
        let s = &row.summary;
        let mut cells = vec![row.variant.clone(), s.config_hash.clone(), f4(s.whitebox_asr)];
        cells.extend(report.targets.iter().map(|t| f4(s.target_asr[t])));
        cells.push(f4(s.mean_blackbox_asr));
        if with_hfer {
            cells.extend([f4(s.hfer_mean), f4(s.hfer_se)]);
        }
        cells.extend([s.n.to_string(), table.config_hash.clone()]);
        csv.push(cells);
    }
    csv
}

fn per_image(report: &ExperimentReport) -> Csv {
    let mut header: Vec<String> = [
        "section",
        "variant",
        "image",
        "label",
        "goal",
        "adv_label",
        "success",
        "stabilization",
        "confidence",
        "hfer",
        "psnr",
        "ssim",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(report.targets.iter().map(|t| format!("fooled_{t}")));
    let mut csv = Csv::new(header);
    for row in &report.per_image {
        let r = &row.record;
        let mut cells = vec![
            row.section.clone(),
            row.variant.clone(),
            format!("{:06}", r.image),
            r.label.to_string(),
            r.goal.to_string(),
            r.adv_label.to_string(),
            u8::from(r.success).to_string(),
            r.stabilization.map(|s| s.to_string()).unwrap_or_default(),
            opt4(r.confidence),
            f4(r.hfer),
            f4(r.psnr),
            f4(r.ssim),
        ];
        cells.extend(r.fooled.iter().map(|&f| u8::from(f).to_string()));
        csv.push(cells);
    }
    csv
}

fn models_csv(rows: &[ModelRow]) -> Csv {
    let mut csv = Csv::new(["name", "role", "arch", "seed", "epochs", "test_accuracy", "checkpoint"]);
    for m in rows {
        csv.push(vec![
            m.name.clone(),
            m.role.clone(),
            m.arch.clone(),
            m.seed.to_string(),
            m.epochs.to_string(),
            f4(m.test_accuracy),
            m.checkpoint.clone(),
        ]);
    }
    csv
}

fn put(files: &mut BTreeMap<String, Vec<u8>>, name: &str, text: String) {
    files.insert(name.to_string(), text.into_bytes());
}

/// File name and contents of every deterministic report file.
pub fn render(report: &ExperimentReport) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    put(&mut files, "report.json", to_json(report)?);
    if !report.models.is_empty() {
        put(&mut files, "models.csv", models_csv(&report.models).render());
    }
    if let Some(t) = &report.methods {
        put(&mut files, "asr_matrix.csv", asr_matrix(report, t).render());
    }
    if !tables(report).is_empty() {
        put(&mut files, "metrics.csv", metrics(report).render());
        put(&mut files, "per_image.csv", per_image(report).render());
    }
    if let Some(t) = &report.targeted {
        put(&mut files, "targeted.csv", asr_matrix(report, t).render());
    }
    if let Some(t) = &report.modules {
        put(&mut files, "ablation_modules.csv", wide(report, t, "subset", false).render());
    }
    if let Some(t) = &report.toggles {
        put(&mut files, "ablation_toggles.csv", wide(report, t, "variant", false).render());
    }
    if let Some(t) = &report.sigma {
        put(&mut files, "sigma_sweep.csv", wide(report, t, "sigma", true).render());
    }
    if let Some(a) = &report.analysis {
        let mut csv = Csv::new(["target", "plain_cosine", "fsgs_cosine", "fsgs_improved_fraction", "degenerate", "n", "section_hash"]);
        for r in &a.alignment {
            csv.push(vec![
                r.target.clone(),
                f4(r.plain_cosine),
                f4(r.fsgs_cosine),
                f4(r.fsgs_improved_fraction),
                r.degenerate.to_string(),
                r.n.to_string(),
                a.config_hash.clone(),
            ]);
        }
        put(&mut files, "alignment.csv", csv.render());
        for (name, bytes) in &a.pgm {
            files.insert(name.clone(), bytes.clone());
        }
    }
    if let Some(t) = &report.theorem1 {
        let mut csv = Csv::new([
            "config_hash",
            "trials",
            "rho_sem",
            "rho_bg",
            "lambda",
            "improvement_fraction",
            "mean_delta",
            "lambda_zero_max_abs_delta",
        ]);
        csv.push(vec![
            t.config_hash.clone(),
            t.trials.to_string(),
            f4(t.rho_sem),
            f4(t.rho_bg),
            f4(t.lambda),
            f4(t.improvement_fraction),
            format!("{:.4e}", t.mean_delta),
            format!("{:.4e}", t.lambda_zero_max_abs_delta),
        ]);
        put(&mut files, "theorem1.csv", csv.render());
    }
    Ok(files)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| HarnessError::Output {
        path: path.to_path_buf(),
        source,
    })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Output {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes the deterministic files plus `timing.json`; returns the paths written.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    for (name, bytes) in render(report)? {
        let p = dir.join(name);
        write(&p, &bytes)?;
        written.push(p);
    }
    let p = dir.join("timing.json");
    write(&p, to_json(&report.timing)?.as_bytes())?;
    written.push(p);
    Ok(written)
}

pub fn write_models(rows: &[ModelRow], timing: &Timing, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let a = dir.join("models.csv");
    write(&a, models_csv(rows).render().as_bytes())?;
    let b = dir.join("timing.json");
    write(&b, to_json(timing)?.as_bytes())?;
    Ok(vec![a, b])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recount {
    pub file: String,
    pub method: String,
    pub target: String,
    pub reported: f64,
    pub recounted: f64,
    pub n: usize,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Input {
        path: path.to_path_buf(),
        source,
    })
}

/// Recomputes every ASR in `asr_matrix.csv` and `targeted.csv` from
/// `per_image.csv`. Errors if any reported value disagrees.
pub fn recount(dir: &Path) -> Result<Vec<Recount>> {
    let images = parse_csv(&read(&dir.join("per_image.csv"))?);
    let mut out = Vec::new();
    for (file, section) in [("asr_matrix.csv", "methods"), ("targeted.csv", "targeted")] {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        let surrogate_rows = parse_csv(&read(&path)?);
        for row in surrogate_rows {
            let get = |k: &str| row.get(k).cloned().unwrap_or_default();
            let (method, surrogate, target) = (get("method"), get("surrogate"), get("target"));
            let column = if target == surrogate { "success".to_string() } else { format!("fooled_{target}") };
            let rows: Vec<_> = images
                .iter()
                .filter(|r| r.get("section").map(String::as_str) == Some(section) && r.get("variant") == Some(&method))
                .collect();
            let hits = rows.iter().filter(|r| r.get(&column).map(String::as_str) == Some("1")).count();
            let n = rows.len();
            let recounted = if n == 0 { 0.0 } else { 100.0 * hits as f64 / n as f64 };
            let reported: f64 = get("asr_percent")
                .parse()
                .map_err(|_| HarnessError::Check(format!("{file}: bad asr_percent for {method}/{target}")))?;
            let reported_n: usize = get("n").parse().unwrap_or(usize::MAX);
            if f4(recounted) != f4(reported) || reported_n != n {
                return Err(HarnessError::Check(format!(
                    "{file}: {method} -> {target} reports {reported} over {reported_n} images, per_image.csv gives {} over {n}",
                    f4(recounted)
                )));
            }
            out.push(Recount {
                file: file.to_string(),
                method,
                target,
                reported,
                recounted,
                n,
            });
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Check(format!("no ASR tables found in {}", dir.display())));
    }
    Ok(out)
}

use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 8] = ["train", "attack", "eval", "ablate", "sweep-sigma", "analyze", "theorem1", "run"];

const TINY: &str = "\
# small enough to train in seconds
samples = 3
dataset.train_count = 240
dataset.test_count = 60
dataset.image_side = 16
model.surrogate.depth = 2
model.surrogate.embed_dim = 16
model.surrogate.heads = 2
model.surrogate.epochs = 3
model.mini.arch = cnn
model.mini.conv1 = 4
model.mini.conv2 = 8
model.mini.epochs = 2
model.mini.seed = 5
targets = mini
sweep.sigmas = 0,1.0
theorem1.trials = 50
";

fn tesser(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tesser"));
    cmd.args(args).env_remove("TESSER_OUT_DIR").env_remove("TESSER_CACHE_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn tesser")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn help_on_every_subcommand() {
    for sub in SUBCOMMANDS {
        let o = tesser(&[sub, "--help"], &[]);
        assert!(o.status.success(), "{sub}");
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("Usage"), "{sub}");
        assert!(text.contains("modulation.lambda_attn") && text.contains("model.<name>.<field>"), "{sub}");
    }
    assert!(tesser(&["--help"], &[]).status.success());
}

#[test]
fn unknown_subcommand_is_a_one_line_error() {
    let o = tesser(&["frobnicate"], &[]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert_eq!(e.lines().count(), 1, "{e}");
    assert!(e.starts_with("error[usage]") && e.contains("frobnicate"), "{e}");
}

#[test]
fn config_errors_are_tagged() {
    let o = tesser(&["attack", "--set", "seed=1", "--seed", "2"], &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[conflict]"), "{}", stderr(&o));

    let o = tesser(&["attack", "--set", "attack.bogus=1"], &[]);
    assert!(stderr(&o).starts_with("error[config]") && stderr(&o).contains("attack.bogus"));

    let o = tesser(&["attack", "--config", "/nonexistent/tesser.cfg"], &[]);
    assert!(stderr(&o).starts_with("error[input]"));

    let o = tesser(&["attack", "--set", "targets=ghost"], &[]);
    assert!(stderr(&o).starts_with("error[unknown-model]"));

    let o = tesser(&["attack", "--bogus-flag"], &[]);
    assert!(!o.status.success() && stderr(&o).starts_with("error[usage]"));
}

#[test]
fn theorem1_runs_without_models_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (dir, workers) in [(&a, "1"), (&b, "3")] {
        let o = tesser(
            &["theorem1", "--trials", "200", "--out", dir.to_str().unwrap(), "--workers", workers],
            &[],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(listing(&a), listing(&b));
    let csv = std::fs::read_to_string(a.join("theorem1.csv")).unwrap();
    assert!(csv.starts_with("config_hash,trials,"));
}

#[test]
fn out_dir_env_override() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("env-out");
    let o = tesser(&["theorem1", "--trials", "20"], &[("TESSER_OUT_DIR", &dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("theorem1.csv").exists());
}

#[test]
fn tiny_pipeline_is_repeatable_and_recounts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let cache = tmp.path().join("cache");
    let env = [("TESSER_CACHE_DIR", cache.as_path())];
    let cfg = cfg.to_str().unwrap();

    let o = tesser(&["train", "--config", cfg, "--out", tmp.path().join("m").to_str().unwrap()], &env);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 2);

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (dir, workers) in [(&a, "1"), (&b, "4")] {
        let d = dir.to_str().unwrap();
        let o = tesser(
            &["attack", "--config", cfg, "--method", "tesser", "--seed", "7", "--out", d, "--workers", workers],
            &env,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let o = tesser(&["eval", "--config", cfg, "--out", d], &env);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(listing(&a), listing(&b));
    let matrix = std::fs::read_to_string(a.join("asr_matrix.csv")).unwrap();
    assert!(matrix.starts_with("method,surrogate,target,asr_percent,n\n"));
    assert_eq!(matrix.lines().count(), 3);

    let full = tmp.path().join("full");
    let o = tesser(&["run", "--config", cfg, "--method", "pgd", "--out", full.to_str().unwrap()], &env);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "report.json",
        "asr_matrix.csv",
        "metrics.csv",
        "per_image.csv",
        "targeted.csv",
        "ablation_modules.csv",
        "ablation_toggles.csv",
        "sigma_sweep.csv",
        "alignment.csv",
        "theorem1.csv",
        "spectrum_pgd.pgm",
        "saliency_pgd.pgm",
        "timing.json",
    ] {
        assert!(full.join(f).exists(), "{f}");
    }
    let modules = std::fs::read_to_string(full.join("ablation_modules.csv")).unwrap();
    assert_eq!(modules.lines().count(), 9);
}

#[test]
fn unwritable_output_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = blocker.join("sub");
    let o = tesser(&["theorem1", "--trials", "10", "--out", out.to_str().unwrap()], &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[output]"), "{}", stderr(&o));
}

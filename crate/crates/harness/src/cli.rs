//! Command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{help_text, ConfigMap, ExperimentConfig, Section};
use crate::error::{HarnessError, Result};
use crate::experiment::{run_experiment, train_models, ExperimentReport};
use crate::report::{f4, recount, write_models, write_report};

#[derive(Debug, Parser)]
#[command(name = "tesser", version, about = "Transfer attacks with feature-sensitive gradient scaling on toy vision models")]
pub struct Cli {
    /// Config file of key=value lines.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Output directory (config key out_dir).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads, 0 = all cores (config key workers).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Attack methods, comma separated (config key methods).
    #[arg(long, value_name = "LIST")]
    pub method: Option<String>,

    /// Global seed (config key seed).
    #[arg(long)]
    pub seed: Option<u64>,

    /// Number of attacked images (config key samples).
    #[arg(long)]
    pub samples: Option<usize>,

    /// Attack towards label (y + 1) mod K (config key attack.targeted).
    #[arg(long)]
    pub targeted: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, or load from the cache, the surrogate and every target model.
    Train,
    /// Run the configured attacks and write the ASR matrix and metrics.
    Attack(RunArgs),
    /// Recount ASR from per_image.csv and check it against the ASR tables.
    Eval,
    /// Module-subset and toggle ablations.
    Ablate(RunArgs),
    /// Blur-strength sweep.
    SweepSigma {
        #[command(flatten)]
        run: RunArgs,
        /// Sigma values, comma separated (config key sweep.sigmas).
        #[arg(long, value_name = "LIST")]
        sigmas: Option<String>,
    },
    /// Gradient alignment and spectrum/saliency images.
    Analyze(RunArgs),
    /// Synthetic gradient-alignment trials.
    Theorem1 {
        /// Trial count (config key theorem1.trials).
        #[arg(long)]
        trials: Option<usize>,
        /// Global seed (config key seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Every report section.
    Run(RunArgs),
}

fn split_kv(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| HarnessError::config(s, "expected KEY=VALUE"))
}

fn run_overrides(run: &RunArgs, out: &mut Vec<(String, String)>) {
    if let Some(m) = &run.method {
        out.push(("methods".into(), m.clone()));
    }
    if let Some(s) = run.seed {
        out.push(("seed".into(), s.to_string()));
    }
    if let Some(n) = run.samples {
        out.push(("samples".into(), n.to_string()));
    }
    if run.targeted {
        out.push(("attack.targeted".into(), "true".into()));
    }
}

fn sections(list: &[Section]) -> String {
    list.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")
}

impl Cli {
    /// Every override implied by the command line, in precedence order.
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = self.set.iter().map(|s| split_kv(s)).collect::<Result<Vec<_>>>()?;
        if let Some(o) = &self.out {
            out.push(("out_dir".into(), o.display().to_string()));
        }
        if let Some(w) = self.workers {
            out.push(("workers".into(), w.to_string()));
        }
        let section_list = match &self.command {
            Command::Train | Command::Eval => None,
            Command::Attack(r) => {
                run_overrides(r, &mut out);
                Some(sections(&[Section::Methods]))
            }
            Command::Ablate(r) => {
                run_overrides(r, &mut out);
                Some(sections(&[Section::Modules, Section::Toggles]))
            }
            Command::SweepSigma { run, sigmas } => {
                run_overrides(run, &mut out);
                if let Some(s) = sigmas {
                    out.push(("sweep.sigmas".into(), s.clone()));
                }
                Some(sections(&[Section::Sigma]))
            }
            Command::Analyze(r) => {
                run_overrides(r, &mut out);
                Some(sections(&[Section::Analysis]))
            }
            Command::Theorem1 { trials, seed } => {
                if let Some(t) = trials {
                    out.push(("theorem1.trials".into(), t.to_string()));
                }
                if let Some(s) = seed {
                    out.push(("seed".into(), s.to_string()));
                }
                Some(sections(&[Section::Theorem1]))
            }
            Command::Run(r) => {
                run_overrides(r, &mut out);
                None
            }
        };
        if let Some(s) = section_list {
            out.push(("sections".into(), s));
        }
        Ok(out)
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        let mut map = ConfigMap::default();
        if let Some(path) = &self.config {
            map.apply_file(path)?;
        }
        map.apply_overrides(&self.overrides()?)?;
        ExperimentConfig::from_map(map)
    }
}

pub fn command() -> clap::Command {
    let help = help_text();
    Cli::command()
        .after_long_help(help.clone())
        .mut_subcommands(|s| s.after_long_help(help.clone()))
}

fn print_report(out: &mut dyn Write, report: &ExperimentReport) -> std::io::Result<()> {
    for (name, table) in [
        ("methods", &report.methods),
        ("targeted", &report.targeted),
        ("modules", &report.modules),
        ("toggles", &report.toggles),
        ("sigma", &report.sigma),
    ] {
        let Some(t) = table else { continue };
        writeln!(out, "[{name}] config {}", t.config_hash)?;
        for r in &t.rows {
            let s = &r.summary;
            write!(out, "  {:<16} white-box {:>8}", r.variant, f4(s.whitebox_asr))?;
            for (target, asr) in &s.target_asr {
                write!(out, "  {target} {}", f4(*asr))?;
            }
            writeln!(out, "  mean {}  hfer {}", f4(s.mean_blackbox_asr), f4(s.hfer_mean))?;
        }
    }
    if let Some(a) = &report.analysis {
        writeln!(out, "[analysis] config {}", a.config_hash)?;
        for r in &a.alignment {
            writeln!(out, "  {:<16} cos plain {}  fsgs {}", r.target, f4(r.plain_cosine), f4(r.fsgs_cosine))?;
        }
    }
    if let Some(t) = &report.theorem1 {
        writeln!(
            out,
            "[theorem1] config {}  improved {}  mean delta {:.4e}",
            t.config_hash,
            f4(t.improvement_fraction),
            t.mean_delta
        )?;
    }
    Ok(())
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.config()?;
    let io = |source| HarnessError::Output {
        path: PathBuf::from("<stdout>"),
        source,
    };
    match cli.command {
        Command::Train => {
            let (rows, timing) = train_models(&cfg)?;
            for r in &rows {
                writeln!(out, "{:<12} {:<9} acc {}  {}", r.name, r.role, f4(r.test_accuracy), r.checkpoint).map_err(io)?;
            }
            write_models(&rows, &timing, &cfg.out_dir)?;
        }
        Command::Eval => {
            for r in recount(&cfg.out_dir)? {
                writeln!(
                    out,
                    "{:<16} {:<10} {:<12} reported {} recounted {} n {}",
                    r.file,
                    r.method,
                    r.target,
                    f4(r.reported),
                    f4(r.recounted),
                    r.n
                )
                .map_err(io)?;
            }
            writeln!(out, "ok: every ASR matches per_image.csv").map_err(io)?;
        }
        _ => {
            let report = run_experiment(&cfg)?;
            print_report(out, &report).map_err(io)?;
            let written = write_report(&report, &cfg.out_dir)?;
            writeln!(out, "wrote {} files to {}", written.len(), cfg.out_dir.display()).map_err(io)?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = write!(err, "{}", e.render());
                return 2;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            let _ = writeln!(err, "error[usage]: {first}");
            return 2;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error[usage]: {}", e.to_string().lines().next().unwrap_or(""));
            return 2;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error[{}]: {msg}", e.kind());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_become_overrides() {
        let c = parse(&["tesser", "attack", "--method", "tesser", "--seed", "7", "--workers", "2"]);
        let o = c.overrides().unwrap();
        assert!(o.contains(&("methods".into(), "tesser".into())));
        assert!(o.contains(&("seed".into(), "7".into())));
        assert!(o.contains(&("sections".into(), "methods".into())));
        let cfg = c.config().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.workers, 2);
    }

    #[test]
    fn flag_and_set_conflict() {
        let c = parse(&["tesser", "attack", "--set", "seed=1", "--seed", "2"]);
        assert!(matches!(c.config(), Err(HarnessError::Conflict { .. })));
        let c = parse(&["tesser", "attack", "--set", "seed=2", "--seed", "2"]);
        assert!(c.config().is_ok());
    }

    #[test]
    fn cli_definition_is_consistent() {
        command().debug_assert();
    }
}

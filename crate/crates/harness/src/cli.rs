//! `fp-bandits` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error (including I/O),
//! 2 a verification check failed.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use fp_bandits::verification::{run_check, CHECK_NAMES};

use crate::config::{load_config, ExperimentConfig};
use crate::experiment::{run_experiment_with_threads, ExperimentResult};
use crate::output::{write_experiment, write_reports_csv};
use crate::presets::{preset, PRESET_NAMES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VERIFY_FAILED: i32 = 2;

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "FP_BANDITS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "fp-bandits", version, about = "Feature-perturbation bandit experiments")]
pub struct Cli {
    /// Base seed; run r uses seed + r.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of independent runs per policy.
    #[arg(long, global = true)]
    pub runs: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (overridden by FP_BANDITS_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a JSON or flat key=value config.
    Run { config: PathBuf },
    /// Run verification oracles (all of them unless --check is given).
    Verify {
        #[arg(long)]
        check: Option<String>,
    },
    /// Run a built-in preset.
    Replicate {
        preset: String,
        /// Scaled-down variant.
        #[arg(long)]
        desk: bool,
        /// Also write per-round traces.
        #[arg(long)]
        traces: bool,
    },
}

fn thread_count(flag: Option<usize>) -> Result<usize, String> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        return v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"));
    }
    match flag {
        Some(0) => Err("--threads must be positive".into()),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, cli: &Cli) {
    if let Some(s) = cli.seed {
        cfg.base_seed = s;
    }
    if let Some(r) = cli.runs {
        cfg.n_runs = r;
    }
}

fn print_summary(out: &mut dyn Write, res: &ExperimentResult) -> std::io::Result<()> {
    writeln!(
        out,
        "T = {}, runs = {}, config {}",
        res.aggregate.horizon,
        res.config.n_runs,
        &res.aggregate.config_hash[..12]
    )?;
    for p in &res.aggregate.policies {
        writeln!(
            out,
            "  {:<14} final regret {:>12.3} +- {:.3} (se)",
            p.policy,
            p.final_mean(),
            p.final_se()
        )?;
    }
    let failed = res.runs.iter().filter(|r| !r.epl.pass).count();
    if failed > 0 {
        writeln!(out, "  warning: {failed} runs violated the elliptical potential bound")?;
    }
    Ok(())
}

fn run_and_write(
    cfg: &ExperimentConfig,
    threads: usize,
    dir: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let res = match run_experiment_with_threads(cfg, threads) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(dir) = dir {
        if let Err(e) = write_experiment(dir, &res) {
            let _ = writeln!(err, "error: cannot write {}: {e}", dir.display());
            return EXIT_CONFIG;
        }
    }
    let _ = print_summary(out, &res);
    EXIT_OK
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = if code == EXIT_OK {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(n) => n,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };

    match &cli.command {
        Command::Run { config } => {
            let mut cfg = match load_config(config) {
                Ok(c) => c,
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    return EXIT_CONFIG;
                }
            };
            apply_overrides(&mut cfg, &cli);
            if let Some(o) = &cli.out {
                cfg.output = Some(o.clone());
            }
            let dir = cfg.output.clone();
            run_and_write(&cfg, threads, dir.as_deref(), out, err)
        }
        Command::Verify { check } => {
            let names: Vec<&str> = match check {
                Some(c) if CHECK_NAMES.contains(&c.as_str()) => vec![c.as_str()],
                Some(c) => {
                    let _ = writeln!(
                        err,
                        "error: unknown check `{c}`; expected one of {}",
                        CHECK_NAMES.join(", ")
                    );
                    return EXIT_CONFIG;
                }
                None => CHECK_NAMES.to_vec(),
            };
            let seed = cli.seed.unwrap_or(0);
            let mut reports = Vec::new();
            for name in names {
                match run_check(name, seed) {
                    Ok(r) => reports.extend(r),
                    Err(e) => {
                        let _ = writeln!(err, "error: {name}: {e}");
                        return EXIT_CONFIG;
                    }
                }
            }
            if write_reports_csv(&mut *out, &reports).is_err() {
                return EXIT_CONFIG;
            }
            if let Some(dir) = &cli.out {
                let written = std::fs::create_dir_all(dir)
                    .and_then(|_| std::fs::File::create(dir.join("verify.csv")))
                    .and_then(|f| write_reports_csv(f, &reports));
                if let Err(e) = written {
                    let _ = writeln!(err, "error: cannot write {}: {e}", dir.display());
                    return EXIT_CONFIG;
                }
            }
            if reports.iter().all(|r| r.pass) {
                EXIT_OK
            } else {
                EXIT_VERIFY_FAILED
            }
        }
        Command::Replicate {
            preset: name,
            desk,
            traces,
        } => {
            let Some(runs) = preset(name, *desk) else {
                let _ = writeln!(
                    err,
                    "error: unknown preset `{name}`; expected one of {}",
                    PRESET_NAMES.join(", ")
                );
                return EXIT_CONFIG;
            };
            let base = cli.out.clone().unwrap_or_else(|| {
                PathBuf::from("results").join(if *desk { format!("{name}-desk") } else { name.clone() })
            });
            for run in runs {
                let mut cfg = run.config;
                apply_overrides(&mut cfg, &cli);
                cfg.record_traces |= *traces;
                let dir = if run.tag.is_empty() {
                    base.clone()
                } else {
                    base.join(&run.tag)
                };
                cfg.output = Some(dir.clone());
                if !run.tag.is_empty() {
                    let _ = writeln!(out, "[{}]", run.tag);
                }
                let code = run_and_write(&cfg, threads, Some(&dir), out, err);
                if code != EXIT_OK {
                    return code;
                }
            }
            EXIT_OK
        }
    }
}

//! CSV and JSON emitters.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces the in-memory values exactly.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use fp_bandits::{OracleReport, RegretTrace};
use serde::{Deserialize, Serialize};

use crate::experiment::{AggregateResult, ExperimentResult};

pub const TRACE_HEADER: [&str; 8] = [
    "run_id",
    "t",
    "policy",
    "chosen_arm",
    "inst_regret",
    "cum_regret",
    "diag_width",
    "diag_kappa_star",
];

pub const AGGREGATE_HEADER: [&str; 5] = ["policy", "t", "mean_cum_regret", "std_cum_regret", "n_runs"];

fn csv_err(e: csv::Error) -> io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => io::Error::other(format!("{other:?}")),
    }
}

/// Writes traces in order; flushes every `checkpoint_every` rounds.
pub fn write_trace_csv<'a, W: Write>(
    out: W,
    traces: impl IntoIterator<Item = &'a RegretTrace>,
    checkpoint_every: Option<usize>,
) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for trace in traces {
        let run = trace.run_id.to_string();
        for r in &trace.records {
            w.write_record([
                run.as_str(),
                &r.t.to_string(),
                &trace.policy,
                &r.chosen.to_string(),
                &r.inst_regret.to_string(),
                &r.cum_regret.to_string(),
                &r.width.to_string(),
                &r.kappa_star_term.to_string(),
            ])
            .map_err(csv_err)?;
            if checkpoint_every.is_some_and(|k| r.t % k == 0) {
                w.flush()?;
            }
        }
    }
    w.flush()
}

pub fn write_aggregate_csv<W: Write>(out: W, agg: &AggregateResult) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_HEADER).map_err(csv_err)?;
    for p in &agg.policies {
        let n = p.n_runs.to_string();
        for (i, (m, s)) in p.mean.iter().zip(&p.std).enumerate() {
            w.write_record([
                p.policy.as_str(),
                &(i + 1).to_string(),
                &m.to_string(),
                &s.to_string(),
                &n,
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()
}

/// One row of `aggregate.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub policy: String,
    pub t: usize,
    pub mean_cum_regret: f64,
    pub std_cum_regret: f64,
    pub n_runs: u64,
}

pub fn read_aggregate_csv(path: &Path) -> io::Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Aggregate rows in file order, for comparison with [`read_aggregate_csv`].
pub fn aggregate_rows(agg: &AggregateResult) -> Vec<AggregateRow> {
    agg.policies
        .iter()
        .flat_map(|p| {
            p.mean.iter().zip(&p.std).enumerate().map(|(i, (m, s))| AggregateRow {
                policy: p.policy.clone(),
                t: i + 1,
                mean_cum_regret: *m,
                std_cum_regret: *s,
                n_runs: p.n_runs,
            })
        })
        .collect()
}

/// Per-policy summary of final regret and diagnostics.
pub fn write_summary_csv<W: Write>(out: W, res: &ExperimentResult) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "policy",
        "n_runs",
        "mean_final_regret",
        "std_final_regret",
        "se_final_regret",
        "q05",
        "q25",
        "q50",
        "q75",
        "q95",
        "mean_kappa_star_emp",
        "min_kappa_emp_lower_bound",
        "epl_pass_runs",
        "fits",
        "newton_iterations",
        "non_converged_fits",
        "clipped_fits",
    ])
    .map_err(csv_err)?;
    for agg in &res.aggregate.policies {
        let runs: Vec<_> = res.runs.iter().filter(|r| r.policy == agg.policy).collect();
        let constants: Vec<_> = runs.iter().filter_map(|r| r.constants).collect();
        let kappa_star = if constants.is_empty() {
            f64::NAN
        } else {
            constants.iter().map(|c| c.kappa_star).sum::<f64>() / constants.len() as f64
        };
        let kappa = constants.iter().map(|c| c.kappa).fold(f64::NAN, f64::min);
        let sum =
            |f: fn(&fp_bandits::estimation::FitStats) -> usize| -> usize { runs.iter().map(|r| f(&r.fit_stats)).sum() };
        w.write_record([
            agg.policy.clone(),
            agg.n_runs.to_string(),
            agg.final_mean().to_string(),
            agg.final_std().to_string(),
            agg.final_se().to_string(),
            agg.final_quantile(0.05).to_string(),
            agg.final_quantile(0.25).to_string(),
            agg.final_quantile(0.5).to_string(),
            agg.final_quantile(0.75).to_string(),
            agg.final_quantile(0.95).to_string(),
            kappa_star.to_string(),
            kappa.to_string(),
            runs.iter().filter(|r| r.epl.pass).count().to_string(),
            sum(|s| s.fits).to_string(),
            sum(|s| s.newton_iterations).to_string(),
            sum(|s| s.non_converged).to_string(),
            sum(|s| s.clipped).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

pub const REPORT_HEADER: [&str; 7] = [
    "check",
    "statistic",
    "threshold",
    "comparison",
    "pass",
    "n_samples",
    "seed",
];

pub fn write_reports_csv<W: Write>(out: W, reports: &[OracleReport]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in reports {
        let comparison = match r.comparison {
            fp_bandits::verification::Comparison::AtLeast => ">=",
            fp_bandits::verification::Comparison::AtMost => "<=",
            fp_bandits::verification::Comparison::Below => "<",
        };
        w.write_record([
            r.check.clone(),
            r.statistic.to_string(),
            r.threshold.to_string(),
            comparison.to_string(),
            r.pass.to_string(),
            r.n_samples.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

#[derive(Serialize)]
struct Meta<'a> {
    config: &'a crate::config::ExperimentConfig,
    config_hash: &'a str,
    version: &'a str,
    wall_time_secs: f64,
    threads: usize,
}

/// Writes `aggregate.csv`, `summary.csv`, `meta.json` and, when traces were
/// kept, `trace.csv` into `dir`. Timing lives only in `meta.json`, so the
/// CSV files are reproducible byte for byte.
pub fn write_experiment(dir: &Path, res: &ExperimentResult) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_aggregate_csv(BufWriter::new(File::create(dir.join("aggregate.csv"))?), &res.aggregate)?;
    write_summary_csv(BufWriter::new(File::create(dir.join("summary.csv"))?), res)?;
    if res.config.record_traces {
        let traces = res.runs.iter().filter_map(|r| r.trace.as_ref());
        write_trace_csv(
            BufWriter::new(File::create(dir.join("trace.csv"))?),
            traces,
            res.config.checkpoint_every,
        )?;
    }
    let meta = Meta {
        config: &res.config,
        config_hash: &res.aggregate.config_hash,
        version: &res.aggregate.version,
        wall_time_secs: res.aggregate.wall_time_secs,
        threads: rayon::current_num_threads(),
    };
    let mut f = BufWriter::new(File::create(dir.join("meta.json"))?);
    serde_json::to_writer_pretty(&mut f, &meta)?;
    writeln!(f)?;
    f.flush()
}

//! Aggregation of per-step records and the on-disk output set.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, FilterSpec, MseConvention};
use super::run::{FailureRecord, RunReport, StepRecord, Trajectory};
use crate::error::{Error, Result};
use crate::evidence::{relative_logz_mse, EvidenceRow};

/// Average MSE over kept trials and the number of lost ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseSummary {
    /// NaN when every trial is lost.
    pub avg_mse: f64,
    pub lost: usize,
}

/// Per-trial time-averaged per-component MSE (`None` for a failed trial)
/// folded into the average over kept trials. A trial is lost when its
/// root-mean-square error exceeds `√d / 2`.
pub fn compute_mse_and_lost_tracks(trial_mse: &[Option<f64>], d: usize) -> Result<MseSummary> {
    if trial_mse.is_empty() {
        return Err(Error::Input("no trials to aggregate".into()));
    }
    let threshold = (d as f64).sqrt() / 2.0;
    let mut kept = Vec::new();
    let mut lost = 0;
    for m in trial_mse {
        match m {
            Some(v) if v.is_finite() && v.sqrt() <= threshold => kept.push(*v),
            _ => lost += 1,
        }
    }
    let avg_mse = if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    Ok(MseSummary { avg_mse, lost })
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub filter: String,
    pub n_particles: Option<usize>,
    pub avg_mse: f64,
    pub rho1: Option<f64>,
    pub rho2: Option<f64>,
    pub rho3: Option<f64>,
    pub ess: Option<f64>,
    pub exec_time_s: f64,
    pub lost_tracks: usize,
}

/// One row of `logz.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogzRow {
    pub filter: String,
    pub n_particles: Option<usize>,
    pub rel_logz_mse: f64,
}

/// Aggregates for one roster entry.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterSummary {
    pub spec: FilterSpec,
    pub row: SummaryRow,
    /// Mean relative log-Z MSE over completed trials, when exact evidence exists.
    pub rel_logz_mse: Option<f64>,
    pub trial_mse: Vec<Option<f64>>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Pure fold over step and failure records.
pub fn summarize(cfg: &ExperimentConfig, roster: &[FilterSpec], steps: &[StepRecord], failures: &[FailureRecord]) -> Result<Vec<FilterSummary>> {
    let d = cfg.dim as f64;
    let mut out = Vec::with_capacity(roster.len());
    for spec in roster {
        let label = spec.to_string();
        let mut by_trial: BTreeMap<usize, Vec<&StepRecord>> = BTreeMap::new();
        for r in steps.iter().filter(|r| r.filter == label) {
            by_trial.entry(r.trial).or_default().push(r);
        }
        let failed = |t: usize| failures.iter().any(|f| f.trial == t && f.filter == label);
        let mut trial_mse = Vec::with_capacity(cfg.trials);
        let mut rel = Vec::new();
        let mut ok_rows: Vec<&StepRecord> = Vec::new();
        for t in 0..cfg.trials {
            let rows = by_trial.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            if failed(t) || rows.len() != cfg.time_steps {
                trial_mse.push(None);
                continue;
            }
            trial_mse.push(mean(rows.iter().map(|r| r.sq_error / d)));
            ok_rows.extend_from_slice(rows);
            if spec.kind.estimates_evidence() && rows.iter().all(|r| r.true_cum_log_z.is_some()) {
                let truth: Vec<f64> = rows.iter().map(|r| r.true_cum_log_z.unwrap_or(f64::NAN)).collect();
                let est: Option<Vec<f64>> = rows.iter().map(|r| r.cum_log_z).collect();
                rel.push(match est {
                    Some(e) => relative_logz_mse(&e, &truth)?,
                    None => f64::INFINITY,
                });
            }
        }
        let ms = if roster.is_empty() || cfg.trials == 0 {
            MseSummary { avg_mse: f64::NAN, lost: 0 }
        } else {
            compute_mse_and_lost_tracks(&trial_mse, cfg.dim)?
        };
        let avg_mse = match cfg.mse_convention {
            MseConvention::PerComponent => ms.avg_mse,
            MseConvention::Sum => ms.avg_mse * d,
        };
        let row = SummaryRow {
            filter: spec.kind.name().to_string(),
            n_particles: spec.n_particles,
            avg_mse,
            rho1: mean(ok_rows.iter().filter_map(|r| r.rho1)),
            rho2: mean(ok_rows.iter().filter_map(|r| r.rho2)),
            rho3: mean(ok_rows.iter().filter_map(|r| r.rho3)),
            ess: mean(ok_rows.iter().filter_map(|r| r.ess)),
            exec_time_s: mean(ok_rows.iter().map(|r| r.wall_time_s)).unwrap_or(f64::NAN),
            lost_tracks: ms.lost,
        };
        out.push(FilterSummary {
            spec: *spec,
            row,
            rel_logz_mse: mean(rel.into_iter()),
            trial_mse,
        });
    }
    Ok(out)
}

impl RunReport {
    pub fn step_records(&self) -> Vec<StepRecord> {
        self.runs.iter().flat_map(|r| r.steps.iter().cloned()).collect()
    }

    pub fn failures(&self) -> Vec<FailureRecord> {
        self.runs.iter().filter_map(|r| r.failure.clone()).collect()
    }

    pub fn summarize(&self) -> Result<Vec<FilterSummary>> {
        summarize(&self.config, &self.roster, &self.step_records(), &self.failures())
    }

    pub fn summary_for(&self, filter: &str) -> Result<FilterSummary> {
        let spec: FilterSpec = filter.parse()?;
        self.summarize()?
            .into_iter()
            .find(|s| s.spec == spec)
            .ok_or_else(|| Error::Input(format!("filter '{filter}' not in the roster")))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        let line = serde_json::to_string(&r).map_err(|e| Error::io(path, e.into()))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::io(path, e.into()))?);
    }
    Ok(out)
}

const SUMMARY_HEADER: [&str; 9] = [
    "filter",
    "n_particles",
    "avg_mse",
    "rho1",
    "rho2",
    "rho3",
    "ess",
    "exec_time_s",
    "lost_tracks",
];

fn file_label(spec: &FilterSpec) -> String {
    spec.to_string().replace(':', "_")
}

fn fmt_num(v: f64) -> String {
    format!("{v:.10e}")
}

/// Space-separated columns: `step` followed by one column per entry.
fn write_dat(path: &Path, labels: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "# step {}", labels.join(" ")).map_err(io_err(path))?;
    for (i, r) in rows.iter().enumerate() {
        let cols: Vec<String> = r.iter().map(|v| fmt_num(*v)).collect();
        writeln!(w, "{} {}", i + 1, cols.join(" ")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Run environment written next to the results.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub available_cpus: usize,
    pub workers: Option<usize>,
}

impl RunMetadata {
    pub fn current(workers: Option<usize>) -> Self {
        RunMetadata {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            available_cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            workers,
        }
    }
}

/// Writes the full output set under `dir`:
/// `config.toml`, `summary.csv`, `logz.csv` (exact evidence only),
/// `detail.jsonl`, `failures.jsonl`, `evidence/<filter>/trial_NNN.csv`,
/// `plot/mse.dat`, `plot/logz.dat`, `data/trial_NNN.json`, `metadata.json`.
pub fn emit_outputs(report: &RunReport, dir: &Path, metadata: &RunMetadata) -> Result<Vec<FilterSummary>> {
    for sub in ["", "evidence", "plot", "data"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let cfg = &report.config;
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()?).map_err(io_err(&p))?;
    let p = dir.join("metadata.json");
    let meta = serde_json::to_string_pretty(metadata).map_err(|e| Error::io(&p, e.into()))?;
    fs::write(&p, meta).map_err(io_err(&p))?;

    let summary = report.summarize()?;
    let rows: Vec<&SummaryRow> = summary.iter().map(|s| &s.row).collect();
    write_csv(&dir.join("summary.csv"), &rows, &SUMMARY_HEADER)?;
    let has_truth = report.runs.iter().flat_map(|r| &r.steps).any(|s| s.true_cum_log_z.is_some());
    if has_truth {
        let logz: Vec<LogzRow> = summary
            .iter()
            .filter_map(|s| {
                s.rel_logz_mse.map(|v| LogzRow {
                    filter: s.row.filter.clone(),
                    n_particles: s.row.n_particles,
                    rel_logz_mse: v,
                })
            })
            .collect();
        write_csv(&dir.join("logz.csv"), &logz, &["filter", "n_particles", "rel_logz_mse"])?;
    }
    write_jsonl(&dir.join("detail.jsonl"), report.runs.iter().flat_map(|r| r.steps.iter()))?;
    write_jsonl(&dir.join("failures.jsonl"), report.runs.iter().filter_map(|r| r.failure.as_ref()))?;

    for run in &report.runs {
        if !run.steps.iter().any(|s| s.log_increment.is_some()) {
            continue;
        }
        let sub = dir.join("evidence").join(file_label(&run.filter));
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let rows: Vec<EvidenceRow> = run
            .steps
            .iter()
            .map(|s| EvidenceRow {
                step: s.step,
                log_increment: s.log_increment.unwrap_or(f64::NAN),
                cum_log_z: s.cum_log_z.unwrap_or(f64::NAN),
            })
            .collect();
        write_csv(&sub.join(format!("trial_{:03}.csv", run.trial)), &rows, &["step", "log_increment", "cum_log_z"])?;
    }

    write_plots(report, &summary, &dir.join("plot"))?;

    for traj in &report.trajectories {
        let p = dir.join("data").join(format!("trial_{:03}.json", traj.trial));
        let text = serde_json::to_string(traj).map_err(|e| Error::io(&p, e.into()))?;
        fs::write(&p, text).map_err(io_err(&p))?;
    }
    Ok(summary)
}

fn write_plots(report: &RunReport, summary: &[FilterSummary], dir: &Path) -> Result<()> {
    let cfg = &report.config;
    let d = cfg.dim as f64;
    let labels: Vec<String> = report.roster.iter().map(|s| s.to_string()).collect();
    // per-step MSE averaged over kept trials
    let mut mse = vec![vec![f64::NAN; labels.len()]; cfg.time_steps];
    let mut logz = vec![vec![f64::NAN; labels.len() + 1]; cfg.time_steps];
    let threshold = d.sqrt() / 2.0;
    for (j, s) in summary.iter().enumerate() {
        let kept: Vec<usize> = s
            .trial_mse
            .iter()
            .enumerate()
            .filter(|(_, m)| matches!(m, Some(v) if v.sqrt() <= threshold))
            .map(|(t, _)| t)
            .collect();
        for (k, row) in mse.iter_mut().enumerate() {
            let vals = report
                .runs_for(&s.spec)
                .filter(|r| kept.contains(&r.trial))
                .filter_map(|r| r.steps.get(k))
                .map(|st| st.sq_error / d);
            row[j] = mean(vals).unwrap_or(f64::NAN);
        }
        for (k, row) in logz.iter_mut().enumerate() {
            let vals = report.runs_for(&s.spec).filter_map(|r| r.steps.get(k)).filter_map(|st| st.cum_log_z);
            row[j + 1] = mean(vals).unwrap_or(f64::NAN);
            let truth = report.runs_for(&s.spec).filter_map(|r| r.steps.get(k)).filter_map(|st| st.true_cum_log_z);
            if let Some(t) = mean(truth) {
                row[0] = t;
            }
        }
    }
    write_dat(&dir.join("mse.dat"), &labels, &mse)?;
    let mut logz_labels = vec!["exact".to_string()];
    logz_labels.extend(labels);
    write_dat(&dir.join("logz.dat"), &logz_labels, &logz)
}

/// Output set read back from disk.
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub steps: Vec<StepRecord>,
    pub failures: Vec<FailureRecord>,
    pub summary_csv: Vec<SummaryRow>,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(LoadedRun {
            config: ExperimentConfig::load(&dir.join("config.toml"))?,
            steps: read_jsonl(&dir.join("detail.jsonl"))?,
            failures: read_jsonl(&dir.join("failures.jsonl"))?,
            summary_csv: read_csv(&dir.join("summary.csv"))?,
        })
    }

    /// Aggregates recomputed from the detail file.
    pub fn recompute(&self) -> Result<Vec<FilterSummary>> {
        summarize(&self.config, &self.config.roster()?, &self.steps, &self.failures)
    }
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    read_csv(path)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::io(path, e.into()))
}

/// Fixed-width table for terminals.
pub fn format_table(summary: &[FilterSummary]) -> String {
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    let mut s = format!(
        "{:<16} {:>9} {:>10} {:>7} {:>7} {:>7} {:>8} {:>10} {:>5} {:>11}\n",
        "filter", "particles", "avg_mse", "rho1", "rho2", "rho3", "ess", "time_s", "lost", "rel_logz"
    );
    for f in summary {
        let r = &f.row;
        s.push_str(&format!(
            "{:<16} {:>9} {:>10.4} {:>7} {:>7} {:>7} {:>8} {:>10.4} {:>5} {:>11}\n",
            r.filter,
            r.n_particles.map_or("-".to_string(), |n| n.to_string()),
            r.avg_mse,
            opt(r.rho1, 3),
            opt(r.rho2, 3),
            opt(r.rho3, 3),
            opt(r.ess, 1),
            r.exec_time_s,
            r.lost_tracks,
            f.rel_logz_mse.map_or("-".to_string(), |v| format!("{v:.3e}")),
        ));
    }
    s
}

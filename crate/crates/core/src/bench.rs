//! Repeated-run experiments and their reports.
//!
//! Run `r` of an experiment uses seed `base_seed + r`. Runs that diverge are
//! recorded as missing and left out of the statistics; an experiment where
//! every run diverged has no mean and is reported as `NC`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::TrainConfig;
use crate::problems::problem_by_label;
use crate::schemes::{solve, DsTerminal, LogObserver, NetworkShape, SchemeKind, SolveInput};
use crate::stochastics::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scheme: SchemeKind,
    pub problem: String,
    pub dim: usize,
    pub n_steps: usize,
    pub shape: NetworkShape,
    pub train: TrainConfig,
    pub runs: usize,
    pub base_seed: u64,
    pub ds_terminal: DsTerminal,
    /// When set, run `r` is saved under `<dir>/run_<r>`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(scheme: SchemeKind, problem: &str, dim: usize, n_steps: usize, train: TrainConfig, runs: usize) -> Self {
        Self {
            scheme,
            problem: problem.to_string(),
            dim,
            n_steps,
            shape: NetworkShape::default_for(dim),
            base_seed: train.seed,
            train,
            runs,
            ds_terminal: DsTerminal::Fit,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// `None` if the run did not converge.
    pub y0: Option<f64>,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scheme: SchemeKind,
    pub problem: String,
    pub dim: usize,
    pub n_steps: usize,
    pub runs: usize,
    /// Mean of the converged runs' `Û_0(x0)`.
    pub mean: Option<f64>,
    /// Sample standard deviation over converged runs (0 for a single run).
    pub std: Option<f64>,
    /// True when at most one run converged, so `std` carries no information.
    pub single_run: bool,
    pub reference: Option<f64>,
    pub rel_err_pct: Option<f64>,
    pub seconds: f64,
    pub train: TrainConfig,
    pub shape: NetworkShape,
    pub ds_terminal: DsTerminal,
    /// One entry per requested run, in seed order.
    pub records: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn converged(&self) -> usize {
        self.records.iter().filter(|r| r.y0.is_some()).count()
    }

    /// `"NC"` when no run converged, `"ok"` otherwise.
    pub fn status(&self) -> &'static str {
        if self.mean.is_some() {
            "ok"
        } else {
            "NC"
        }
    }
}

/// Mean and sample standard deviation of the present values.
pub fn summarize(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    match v.len() {
        0 => (None, None),
        1 => (Some(v[0]), Some(0.0)),
        n => {
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (Some(mean), Some(var.sqrt()))
        }
    }
}

/// `100 |mean - reference| / |reference|`.
pub fn relative_error_pct(mean: f64, reference: f64) -> f64 {
    100.0 * (mean - reference).abs() / reference.abs()
}

/// Runs every repetition of `spec`. Divergence is recorded, other errors
/// are returned.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    if spec.runs == 0 {
        return Err(Error::InvalidArgument("an experiment needs at least one run".into()));
    }
    let problem = problem_by_label(&spec.problem, spec.dim)?;
    let grid = TimeGrid::uniform(problem.model.horizon(), spec.n_steps)?;
    let started = Instant::now();
    let mut records = Vec::with_capacity(spec.runs);
    for r in 0..spec.runs {
        let seed = spec.base_seed.wrapping_add(r as u64);
        let mut input = SolveInput::new(
            problem.model.clone(),
            problem.x0.clone(),
            grid.clone(),
            spec.shape.clone(),
            spec.train.with_seed(seed),
        );
        input.ds_terminal = spec.ds_terminal;
        let t0 = Instant::now();
        let outcome = solve(spec.scheme, &input, &mut LogObserver::new(spec.scheme));
        let seconds = t0.elapsed().as_secs_f64();
        let record = match outcome {
            Ok(sol) => {
                if let Some(dir) = &spec.checkpoint_dir {
                    sol.save(dir.join(format!("run_{r}")))?;
                }
                let y0 = sol.y0(&problem.x0)?;
                log::info!("{} run {r} (seed {seed}): Y0 = {y0:.6} in {seconds:.1}s", spec.scheme);
                RunRecord {
                    seed,
                    y0: y0.is_finite().then_some(y0),
                    seconds,
                    failure: (!y0.is_finite()).then(|| "non-finite estimate".to_string()),
                }
            }
            Err(e @ Error::Diverged { .. }) => {
                log::warn!("{} run {r} (seed {seed}) did not converge: {e}", spec.scheme);
                RunRecord {
                    seed,
                    y0: None,
                    seconds,
                    failure: Some(e.to_string()),
                }
            }
            Err(e) => return Err(e),
        };
        records.push(record);
    }
    let values: Vec<Option<f64>> = records.iter().map(|r| r.y0).collect();
    let (mean, std) = summarize(&values);
    let reference = problem.reference_y0;
    let rel_err_pct = mean.zip(reference).map(|(m, r)| relative_error_pct(m, r));
    Ok(ExperimentReport {
        scheme: spec.scheme,
        problem: spec.problem.clone(),
        dim: spec.dim,
        n_steps: spec.n_steps,
        runs: spec.runs,
        mean,
        std,
        single_run: values.iter().flatten().count() <= 1,
        reference,
        rel_err_pct,
        seconds: started.elapsed().as_secs_f64(),
        train: spec.train.clone(),
        shape: spec.shape.clone(),
        ds_terminal: spec.ds_terminal,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Unknown {
                kind: "report format",
                name: s.to_string(),
            }),
        }
    }
}

pub const CSV_HEADER: &str = "scheme,problem,d,N,runs,mean,std,reference,rel_err_pct,seconds";

fn csv_float(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// One CSV row; a missing mean is written as `NC`, other missing values as
/// empty fields.
pub fn csv_row(r: &ExperimentReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.scheme,
        r.problem,
        r.dim,
        r.n_steps,
        r.runs,
        r.mean.map(|m| format!("{m:.16e}")).unwrap_or_else(|| "NC".into()),
        csv_float(r.std),
        csv_float(r.reference),
        csv_float(r.rel_err_pct),
        format_args!("{:.16e}", r.seconds),
    )
}

/// JSON: one object. CSV: the header and one row.
pub fn write_report(report: &ExperimentReport, format: ReportFormat, out: &mut dyn Write) -> Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut *out, report)?;
            writeln!(out)?;
        }
        ReportFormat::Csv => {
            writeln!(out, "{CSV_HEADER}")?;
            writeln!(out, "{}", csv_row(report))?;
        }
    }
    Ok(())
}

/// Writes the report to `path`.
pub fn emit_report(report: &ExperimentReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_report(report, format, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn read_json_report(text: &str) -> Result<ExperimentReport> {
    Ok(serde_json::from_str(text)?)
}

/// A parsed CSV summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSummary {
    pub scheme: SchemeKind,
    pub problem: String,
    pub dim: usize,
    pub n_steps: usize,
    pub runs: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub reference: Option<f64>,
    pub rel_err_pct: Option<f64>,
    pub seconds: f64,
}

pub fn read_csv_reports(text: &str) -> Result<Vec<CsvSummary>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::InvalidArgument("missing or unexpected CSV header".into())),
    }
    let bad = |line: &str| Error::InvalidArgument(format!("malformed CSV row '{line}'"));
    let opt = |s: &str, line: &str| -> Result<Option<f64>> {
        match s {
            "" | "NC" => Ok(None),
            v => v.parse().map(Some).map_err(|_| bad(line)),
        }
    };
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(line));
            }
            Ok(CsvSummary {
                scheme: f[0].parse()?,
                problem: f[1].to_string(),
                dim: f[2].parse().map_err(|_| bad(line))?,
                n_steps: f[3].parse().map_err(|_| bad(line))?,
                runs: f[4].parse().map_err(|_| bad(line))?,
                mean: opt(f[5], line)?,
                std: opt(f[6], line)?,
                reference: opt(f[7], line)?,
                rel_err_pct: opt(f[8], line)?,
                seconds: f[9].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use sfao_core::metrics::fmt_f64;
use sfao_core::runner::RunOutcome;
use sfao_core::{
    make_stream, run_continual_observed, AccuracyMatrix, Method, Metrics, OptimizerConfig,
    RunReport,
};

use crate::config::ExperimentConfig;

pub const OUT_ENV: &str = "SFAO_OUT";

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }
}

pub fn output_root(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone())
}

pub fn cmd_run(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<RunReport>, Failure> {
    let jobs: Vec<(u64, PathBuf)> = cfg
        .seeds
        .iter()
        .map(|&s| (s, root.join(format!("run-{s}"))))
        .collect();
    let reports = execute(cfg, &cfg.optimizer, &jobs).map_err(Failure::Runtime)?;
    let agg = Aggregate::from_reports(&reports);
    write_json(&root.join("aggregate.json"), &agg).map_err(Failure::Runtime)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub avg_accuracy: f64,
    pub avg_forgetting: f64,
    pub psm: f64,
    pub memory_mb: f64,
    pub lambda_proj: f64,
}

pub fn cmd_sweep(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<SweepRow>, Failure> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Failure::Config(anyhow::anyhow!("config has no sweep section")))?;
    let points = sweep.thresholds().map_err(Failure::Config)?;
    let opts: Vec<OptimizerConfig> = points
        .iter()
        .map(|&thresholds| OptimizerConfig {
            method: Method::Sfao,
            thresholds,
            ..cfg.optimizer
        })
        .collect();

    let mut jobs = Vec::new();
    for (p, opt) in opts.iter().enumerate() {
        for &seed in &cfg.seeds {
            jobs.push((
                p,
                opt,
                seed,
                root.join(format!("point-{p}")).join(format!("run-{seed}")),
            ));
        }
    }
    let pool = pool(cfg.workers).map_err(Failure::Runtime)?;
    let reports: Vec<(usize, RunReport)> = pool
        .install(|| {
            jobs.par_iter()
                .map(|(p, opt, seed, dir)| one_run(cfg, opt, *seed, dir).map(|r| (*p, r)))
                .collect::<Result<Vec<_>>>()
        })
        .map_err(Failure::Runtime)?;

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let rows: Vec<SweepRow> = points
        .iter()
        .enumerate()
        .map(|(p, th)| {
            let rs: Vec<&RunReport> = reports
                .iter()
                .filter(|(q, _)| *q == p)
                .map(|(_, r)| r)
                .collect();
            let pick =
                |f: fn(&RunReport) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            SweepRow {
                threshold: th.lambda_accept(),
                avg_accuracy: pick(|r| r.metrics.avg_accuracy),
                avg_forgetting: pick(|r| r.metrics.avg_forgetting),
                psm: pick(|r| r.metrics.psm),
                memory_mb: pick(|r| r.memory_mb),
                lambda_proj: th.lambda_proj(),
            }
        })
        .collect();

    let write = || -> Result<()> {
        let mut w = csv::Writer::from_path(root.join("sweep.csv"))?;
        w.write_record([
            "threshold",
            "avg_accuracy",
            "avg_forgetting",
            "psm",
            "memory_mb",
            "lambda_proj",
        ])?;
        for r in &rows {
            w.write_record(
                [
                    r.threshold,
                    r.avg_accuracy,
                    r.avg_forgetting,
                    r.psm,
                    r.memory_mb,
                    r.lambda_proj,
                ]
                .map(fmt_f64),
            )?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(Failure::Runtime)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: PathBuf,
    pub metrics: Metrics,
    /// `None` when the run directory has no report.json.
    pub matches_report: Option<bool>,
}

pub fn cmd_report(dir: &Path) -> Result<Vec<ReportRow>, Failure> {
    let mut found = Vec::new();
    find_matrices(dir, &mut found).map_err(Failure::Runtime)?;
    found.sort();
    if found.is_empty() {
        return Err(Failure::Config(anyhow::anyhow!(
            "no matrix.csv under {}",
            dir.display()
        )));
    }

    let mut rows = Vec::new();
    for path in &found {
        let row = report_one(dir, path).map_err(Failure::Runtime)?;
        rows.push(row);
    }

    println!(
        "{:<24} {:>6} {:>10} {:>10} {:>10} {:>10} {:>8}",
        "run", "tasks", "avg_acc", "avg_forget", "bwt", "psm", "report"
    );
    for r in &rows {
        let m = &r.metrics;
        let check = match r.matches_report {
            Some(true) => "match",
            Some(false) => "DIFFERS",
            None => "-",
        };
        println!(
            "{:<24} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8}",
            r.run.display(),
            m.final_accuracies.len(),
            m.avg_accuracy,
            m.avg_forgetting,
            m.bwt,
            m.psm,
            check
        );
    }

    let write = || -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("curve.csv"))?;
        w.write_record(["run", "after_task", "avg_forgetting"])?;
        for r in &rows {
            for (j, f) in r.metrics.forgetting_curve.iter().enumerate() {
                w.write_record([
                    r.run.display().to_string(),
                    (j + 1).to_string(),
                    fmt_f64(*f),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(Failure::Runtime)?;

    if rows.iter().any(|r| r.matches_report == Some(false)) {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "recomputed metrics differ from a stored report.json"
        )));
    }
    Ok(rows)
}

fn report_one(root: &Path, matrix_path: &Path) -> Result<ReportRow> {
    let text = fs::read_to_string(matrix_path)?;
    let matrix = AccuracyMatrix::from_csv(&text)
        .with_context(|| format!("reading {}", matrix_path.display()))?;
    let metrics = Metrics::from_matrix(&matrix)
        .with_context(|| format!("scoring {}", matrix_path.display()))?;
    let run_dir = matrix_path.parent().unwrap_or(root);
    let stored = run_dir.join("report.json");
    let matches_report = if stored.exists() {
        let report: RunReport = serde_json::from_str(&fs::read_to_string(&stored)?)
            .with_context(|| format!("parsing {}", stored.display()))?;
        Some(report.metrics == metrics && report.matrix == matrix)
    } else {
        None
    };
    let run = run_dir.strip_prefix(root).unwrap_or(run_dir).to_path_buf();
    let run = if run.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        run
    };
    Ok(ReportRow {
        run,
        metrics,
        matches_report,
    })
}

fn find_matrices(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            find_matrices(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "matrix.csv") {
            out.push(path);
        }
    }
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()?)
}

fn execute(
    cfg: &ExperimentConfig,
    opt: &OptimizerConfig,
    jobs: &[(u64, PathBuf)],
) -> Result<Vec<RunReport>> {
    pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|(seed, dir)| one_run(cfg, opt, *seed, dir))
            .collect()
    })
}

fn one_run(
    cfg: &ExperimentConfig,
    opt: &OptimizerConfig,
    seed: u64,
    dir: &Path,
) -> Result<RunReport> {
    let stream = make_stream(&cfg.stream, seed)
        .with_context(|| format!("building stream for seed {seed}"))?;
    let outcome = run_continual_observed(&stream, opt, &cfg.train, seed, |_| {})
        .with_context(|| format!("training seed {seed}"))?;
    write_run(dir, &outcome, cfg.checkpoint)
        .with_context(|| format!("writing {}", dir.display()))?;
    let m = &outcome.report.metrics;
    eprintln!(
        "{}: avg_acc {:.4} avg_forgetting {:.4} psm {:.4} memory {:.3} MB",
        dir.display(),
        m.avg_accuracy,
        m.avg_forgetting,
        m.psm,
        outcome.report.memory_mb
    );
    Ok(outcome.report)
}

fn write_run(dir: &Path, outcome: &RunOutcome, checkpoint: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("matrix.csv"), outcome.report.matrix.to_csv())?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    let mut w = csv::Writer::from_path(dir.join("decisions.csv"))?;
    for d in &outcome.decisions {
        w.serialize(d)?;
    }
    w.flush()?;
    if checkpoint {
        let mut f = BufWriter::new(File::create(dir.join("model.ckpt"))?);
        outcome.model.save(&mut f)?;
        f.flush()?;
        for (g, buf) in outcome.buffers.iter().enumerate() {
            let mut f = BufWriter::new(File::create(dir.join(format!("buffer-{g}.bin")))?);
            buf.write_snapshot(&mut f)?;
            f.flush()?;
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub final_accuracy: Vec<Stat>,
    pub per_task_forgetting: Vec<Stat>,
    pub avg_accuracy: Stat,
    pub avg_forgetting: Stat,
    pub bwt: Stat,
    pub psm: Stat,
    pub memory_mb: Stat,
}

impl Aggregate {
    pub fn from_reports(reports: &[RunReport]) -> Aggregate {
        let col =
            |f: &dyn Fn(&RunReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
        let per_task = |f: &dyn Fn(&RunReport) -> &Vec<f64>| {
            let n = reports.first().map_or(0, |r| f(r).len());
            (0..n)
                .map(|i| Stat::of(&reports.iter().map(|r| f(r)[i]).collect::<Vec<_>>()))
                .collect()
        };
        Aggregate {
            seeds: reports.iter().map(|r| r.seed).collect(),
            final_accuracy: per_task(&|r| &r.metrics.final_accuracies),
            per_task_forgetting: per_task(&|r| &r.metrics.per_task_forgetting),
            avg_accuracy: col(&|r| r.metrics.avg_accuracy),
            avg_forgetting: col(&|r| r.metrics.avg_forgetting),
            bwt: col(&|r| r.metrics.bwt),
            psm: col(&|r| r.metrics.psm),
            memory_mb: col(&|r| r.memory_mb),
        }
    }
}

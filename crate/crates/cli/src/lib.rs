//! Config-driven runner for the verification suites.

pub mod config;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use outerprod::verify::{run_suite, AllocProbe, CheckRecord, Executor, Sequential, VerifyCtx};
use rayon::prelude::*;

use config::RunConfig;
use report::{CheckReport, Report};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("suite {suite}: {source}")]
    Suite {
        suite: String,
        source: outerprod::Error,
    },
    #[error("cannot write report to {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Suite { .. } | CliError::Output { .. } => 3,
        }
    }
}

pub struct RayonExec;

impl Executor for RayonExec {
    fn run(
        &self,
        jobs: usize,
        f: &(dyn Fn(usize) -> outerprod::Result<Vec<CheckRecord>> + Sync),
    ) -> Vec<outerprod::Result<Vec<CheckRecord>>> {
        (0..jobs).into_par_iter().map(f).collect()
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub parallel: bool,
    pub timings: bool,
    pub probe: Option<&'a dyn AllocProbe>,
}

/// Runs the configured suites in order.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<Report, CliError> {
    cfg.validate()?;
    let exec: &dyn Executor = if opts.parallel { &RayonExec } else { &Sequential };
    let mut ctx = VerifyCtx::new(cfg.arch()?, cfg.batch, cfg.seed)
        .with_fd(cfg.fd.step, cfg.fd.kink_margin)
        .map_err(|e| CliError::Config(e.to_string()))?;
    ctx.dense_cap = cfg.dense_cap;
    ctx.exec = exec;
    ctx.probe = opts.probe;
    let mut checks = Vec::new();
    for suite in &cfg.checks {
        let t = Instant::now();
        let recs = run_suite(suite, &ctx).map_err(|source| CliError::Suite {
            suite: suite.clone(),
            source,
        })?;
        let ms = opts.timings.then(|| t.elapsed().as_secs_f64() * 1e3);
        checks.extend(recs.into_iter().map(|r| CheckReport::from_record(suite, r, ms)));
    }
    Ok(Report::new(cfg.clone(), checks))
}

/// Writes to `out`, or stdout when `None`.
pub fn emit(report: &Report, out: Option<&Path>) -> Result<(), CliError> {
    let text = report.to_json();
    match out {
        Some(p) => std::fs::write(p, text).map_err(|source| CliError::Output {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// 0 when every check passes, 1 when any fails.
pub fn exit_code(report: &Report) -> i32 {
    if report.all_passed() {
        0
    } else {
        1
    }
}

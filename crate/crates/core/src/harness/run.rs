use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde_json::json;

use super::config::{config_hash, ConfigError, Method, SamplerConfig};
use super::io::{create, write_samples_binary, CsvWriter};
use crate::config_space::{Ensemble, Field};
use crate::diagnostics::{ensemble_moments, pool_samples};
use crate::error::{Error, Result};
use crate::random::{substream, Purpose};
use crate::svgd::svgd_step;
use crate::svn::{ssvn_step_cholesky, svn_block_diagonal_step, SvnOptions};
use crate::svn_cg::ssvn_step_cg;
use crate::targets::Target;

/// Failures of the harness itself, as opposed to sampler failures recorded
/// in the run status.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sampler(#[from] Error),
    #[error("thread pool: {0}")]
    Threads(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_owned(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        HarnessError::Format {
            path: path.to_owned(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// The stepper failed while producing `iteration`.
    Failed {
        iteration: usize,
        error: Error,
    },
}

/// Paths and summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub meta: PathBuf,
    pub metrics: PathBuf,
    pub trace: PathBuf,
    /// Pooled samples; absent when the run failed.
    pub samples: Option<PathBuf>,
    pub samples_binary: Option<PathBuf>,
    pub status: RunStatus,
    pub config_hash: String,
    pub gradient_evaluations: u64,
    pub hessian_evaluations: u64,
    /// First iteration whose pooled window matched the reference moments.
    pub converged_at: Option<usize>,
}

/// Target wrapper counting score and curvature evaluations.
struct Counting<'a> {
    inner: &'a dyn Target,
    gradients: AtomicU64,
    hessians: AtomicU64,
}

impl Target for Counting<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn name(&self) -> &str {
        self.inner.name()
    }

    fn residuals(&self, x: &[f64]) -> DVector<f64> {
        self.inner.residuals(x)
    }

    fn residual_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.inner.residual_jacobian(x)
    }

    fn residual_curvature(&self, x: &[f64], r: &DVector<f64>) -> DMatrix<f64> {
        self.inner.residual_curvature(x, r)
    }

    fn sample_ground_truth(&self, count: usize, rng: &mut dyn RngCore) -> Option<Result<Field>> {
        self.inner.sample_ground_truth(count, rng)
    }

    fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.gradients.fetch_add(1, Ordering::Relaxed);
        self.inner.grad_log_density(x)
    }

    fn gauss_newton_hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.hessians.fetch_add(1, Ordering::Relaxed);
        self.inner.gauss_newton_hessian(x)
    }

    fn neg_hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.hessians.fetch_add(1, Ordering::Relaxed);
        self.inner.neg_hessian(x)
    }
}

fn initial_ensemble(config: &SamplerConfig, d: usize) -> Result<Ensemble> {
    let mut rng = substream(config.seed, Purpose::Init, 0);
    let (lo, hi) = (config.init.uniform_low, config.init.uniform_high);
    let data = (0..config.particles * d)
        .map(|_| rng.random_range(lo..hi))
        .collect();
    Ensemble::new(Field::from_vec(config.particles, d, data)?)
}

/// Means and `1/n` variances; a single sample has zero variance.
fn moments(samples: &Field) -> (Vec<f64>, Vec<f64>) {
    match ensemble_moments(samples) {
        Ok(m) => m,
        Err(_) => (samples.row(0).to_vec(), vec![0.0; samples.d()]),
    }
}

struct StepOutput {
    ensemble: Ensemble,
    cg: Option<(usize, f64)>,
}

fn step(
    config: &SamplerConfig,
    ensemble: &Ensemble,
    target: &dyn Target,
    kernel: &crate::kernels::KernelSpec,
) -> Result<StepOutput> {
    let index = ensemble.iteration as u64 + 1;
    let options = SvnOptions {
        tau: config.tau,
        lambda: config.lambda,
        flags: config.svn,
    };
    let plain = |ensemble| StepOutput { ensemble, cg: None };
    Ok(match config.method {
        Method::Svgd => {
            let mut rng = substream(config.seed, Purpose::SvgdNoise, index);
            plain(svgd_step(
                ensemble, target, kernel, config.tau, false, &mut rng,
            )?)
        }
        Method::Ssvgd => {
            let mut rng = substream(config.seed, Purpose::SvgdNoise, index);
            plain(svgd_step(
                ensemble, target, kernel, config.tau, true, &mut rng,
            )?)
        }
        Method::Svn => {
            let mut rng = substream(config.seed, Purpose::SvnNoise, index);
            plain(ssvn_step_cholesky(
                ensemble, target, kernel, &options, false, &mut rng,
            )?)
        }
        Method::SvnBd => plain(svn_block_diagonal_step(
            ensemble,
            target,
            kernel,
            config.tau,
            config.svn.gauss_newton,
        )?),
        Method::SsvnChol => {
            let mut rng = substream(config.seed, Purpose::SvnNoise, index);
            plain(ssvn_step_cholesky(
                ensemble, target, kernel, &options, true, &mut rng,
            )?)
        }
        Method::SsvnCg => {
            let mut rng = substream(config.seed, Purpose::SvnNoise, index);
            let (ensemble, outcome) = ssvn_step_cg(
                ensemble, target, kernel, &options, &config.cg, true, &mut rng,
            )?;
            StepOutput {
                ensemble,
                cg: Some((outcome.iterations, outcome.relative_residual)),
            }
        }
    })
}

fn write_json_line(
    out: &mut impl Write,
    path: &Path,
    value: &serde_json::Value,
) -> std::result::Result<(), HarnessError> {
    writeln!(out, "{value}")
        .and_then(|_| out.flush())
        .map_err(|e| HarnessError::io(path, e))
}

/// Execute a run into `out_dir`, creating it if needed.
///
/// Sampler failures do not produce an `Err`: they are recorded in the meta
/// file and in [`RunArtifacts::status`], with every trace row written before
/// the failure kept on disk. `threads` pins the size of the worker pool.
pub fn run(
    config: &SamplerConfig,
    out_dir: &Path,
    threads: Option<usize>,
) -> std::result::Result<RunArtifacts, HarnessError> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| HarnessError::Threads(e.to_string()))?;
    pool.install(|| run_in_pool(config, out_dir))
}

fn run_in_pool(
    config: &SamplerConfig,
    out_dir: &Path,
) -> std::result::Result<RunArtifacts, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let inner = config.target.build()?;
    let d = inner.dim();
    let target = Counting {
        inner: inner.as_ref(),
        gradients: AtomicU64::new(0),
        hessians: AtomicU64::new(0),
    };
    let kernel = config.kernel_spec(d)?;
    let hash = config_hash(config);

    let meta_path = out_dir.join("meta.jsonl");
    let metrics_path = out_dir.join("metrics.jsonl");
    let trace_path = out_dir.join("trace.csv");
    let mut meta = create(&meta_path)?;
    write_json_line(
        &mut meta,
        &meta_path,
        &json!({
            "event": "start",
            "config": config,
            "config_hash": hash,
            "threads": rayon::current_num_threads(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    let mut metrics = create(&metrics_path)?;
    let mut trace = CsvWriter::create(&trace_path, d)?;

    let mut ensemble = initial_ensemble(config, d)?;
    trace.ensemble(&ensemble)?;
    trace.flush()?;

    let mut pooled: VecDeque<Ensemble> = VecDeque::with_capacity(config.pool_last);
    let window = config.reference.as_ref().map_or(0, |r| r.window);
    let mut recent: VecDeque<Ensemble> = VecDeque::with_capacity(window);
    let mut converged_at = None;
    let mut cg_total = 0usize;
    let mut status = RunStatus::Completed;

    for t in 1..=config.iterations {
        let out = match step(config, &ensemble, &target, &kernel) {
            Ok(out) => out,
            Err(error) => {
                status = RunStatus::Failed {
                    iteration: t,
                    error,
                };
                break;
            }
        };
        ensemble = out.ensemble;
        let (mean, variance) = moments(&ensemble.positions);
        let mut row = json!({ "iter": t, "mean": mean, "variance": variance });
        if let Some((iterations, residual)) = out.cg {
            cg_total += iterations;
            row["cg_iterations"] = json!(iterations);
            row["cg_relative_residual"] = json!(residual);
        }
        write_json_line(&mut metrics, &metrics_path, &row)?;
        if t % config.record_every == 0 || t == config.iterations {
            trace.ensemble(&ensemble)?;
            trace.flush()?;
        }

        if let Some(reference) = &config.reference {
            if recent.len() == window {
                recent.pop_front();
            }
            recent.push_back(ensemble.clone());
            if converged_at.is_none() && recent.len() == window {
                let (m, v) = moments(&pool_samples(recent.make_contiguous(), window)?);
                if reference.matches(&m, &v) {
                    converged_at = Some(t);
                }
            }
        }
        if t + config.pool_last > config.iterations {
            pooled.push_back(ensemble.clone());
        }
    }

    let (mut samples, mut samples_binary) = (None, None);
    if status == RunStatus::Completed {
        let pool = pool_samples(pooled.make_contiguous(), config.pool_last)?;
        let path = out_dir.join("samples.csv");
        let mut w = CsvWriter::create(&path, d)?;
        for e in pooled.iter() {
            w.ensemble(e)?;
        }
        w.flush()?;
        samples = Some(path);
        if config.write_binary {
            let path = out_dir.join("samples.bin");
            write_samples_binary(&path, &pool)?;
            samples_binary = Some(path);
        }
    }

    let gradient_evaluations = target.gradients.load(Ordering::Relaxed);
    let hessian_evaluations = target.hessians.load(Ordering::Relaxed);
    let (failing_iteration, error, completed) = match &status {
        RunStatus::Completed => (None, None, config.iterations),
        RunStatus::Failed { iteration, error } => {
            (Some(*iteration), Some(error.to_string()), iteration - 1)
        }
    };
    let mut finish = json!({
        "event": "finish",
        "status": if failing_iteration.is_none() { "completed" } else { "failed" },
        "iterations_completed": completed,
        "failing_iteration": failing_iteration,
        "error": error,
        "gradient_evaluations": gradient_evaluations,
        "hessian_evaluations": hessian_evaluations,
        "converged_at": converged_at,
    });
    if config.method == Method::SsvnCg {
        finish["cg_iterations_total"] = json!(cg_total);
    }
    write_json_line(&mut meta, &meta_path, &finish)?;

    Ok(RunArtifacts {
        dir: out_dir.to_owned(),
        meta: meta_path,
        metrics: metrics_path,
        trace: trace_path,
        samples,
        samples_binary,
        status,
        config_hash: hash,
        gradient_evaluations,
        hessian_evaluations,
        converged_at,
    })
}

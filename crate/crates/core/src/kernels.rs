//! Anisotropic squared-exponential kernel and per-iteration gram data.
//!
//! ```text
//! k(x, y) = exp(-(x - y)' M (x - y) / (2h))
//! grad_1 k(x, y) = -(1/h) M (x - y) k(x, y)
//! ```
//!
//! The bandwidth `h` defaults to the dimension `d`. The metric `M` is either
//! the identity, a fixed user matrix, or the average Gauss-Newton Hessian over
//! the current ensemble, recomputed once per iteration.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config_space::Ensemble;
use crate::error::{Error, Result};
use crate::linalg::{factor_gram, symmetrize, Factor};
use crate::targets::Target;

/// How the kernel metric is chosen each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    Identity,
    #[default]
    AveragedGaussNewton,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    bandwidth: f64,
    metric: DMatrix<f64>,
    mode: MetricMode,
}

impl KernelSpec {
    /// Validates `h > 0` and that `metric` is symmetric positive definite.
    pub fn new(bandwidth: f64, metric: DMatrix<f64>, mode: MetricMode) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel bandwidth must be positive, got {bandwidth}"
            )));
        }
        check_metric(&metric)?;
        Ok(Self {
            bandwidth,
            metric,
            mode,
        })
    }

    /// Identity metric with the default bandwidth `h = d`.
    pub fn isotropic(d: usize) -> Self {
        Self {
            bandwidth: d as f64,
            metric: DMatrix::identity(d, d),
            mode: MetricMode::Identity,
        }
    }

    /// Default bandwidth `h = d` with the given metric policy. The stored
    /// metric starts as the identity.
    pub fn with_mode(d: usize, mode: MetricMode) -> Self {
        Self {
            mode,
            ..Self::isotropic(d)
        }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    pub fn mode(&self) -> MetricMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.metric.nrows()
    }

    /// Same bandwidth and mode, different metric.
    pub fn with_metric(&self, metric: DMatrix<f64>) -> Result<Self> {
        Self::new(self.bandwidth, metric, self.mode)
    }

    fn check_dims(&self, x: &[f64], y: &[f64]) -> Result<()> {
        let d = self.dim();
        for v in [x, y] {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_dims(x, y)?;
        Ok(self.eval_with_grad(x, y, &mut vec![0.0; x.len()]))
    }

    /// Gradient of `k(x, y)` in its first argument. By symmetry,
    /// `grad_2 k(x, y) = grad1(y, x)`.
    pub fn grad1(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, y)?;
        let mut grad = vec![0.0; x.len()];
        self.eval_with_grad(x, y, &mut grad);
        Ok(grad)
    }

    /// Unchecked evaluation; writes `grad_1 k(x, y)` into `grad`.
    fn eval_with_grad(&self, x: &[f64], y: &[f64], grad: &mut [f64]) -> f64 {
        let d = x.len();
        let mut quad = 0.0;
        for i in 0..d {
            let mut md = 0.0;
            for j in 0..d {
                md += self.metric[(i, j)] * (x[j] - y[j]);
            }
            grad[i] = md;
            quad += (x[i] - y[i]) * md;
        }
        let k = (-quad / (2.0 * self.bandwidth)).exp();
        let scale = -k / self.bandwidth;
        grad.iter_mut().for_each(|g| *g *= scale);
        k
    }
}

fn check_metric(metric: &DMatrix<f64>) -> Result<()> {
    if !metric.is_square() || metric.nrows() == 0 {
        return Err(Error::InvalidParameter(
            "kernel metric must be square".into(),
        ));
    }
    let asym = (metric - metric.transpose()).amax();
    let scale = metric.amax().max(1.0);
    if asym > 1e-12 * scale || metric.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "kernel metric must be symmetric".into(),
        ));
    }
    if nalgebra::Cholesky::new(metric.clone()).is_none() {
        return Err(Error::DegenerateMetric);
    }
    Ok(())
}

/// Average of per-particle Gauss-Newton Hessians, symmetrized.
pub fn averaged_metric(hessians: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = hessians
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty ensemble".into()))?;
    let mut sum = DMatrix::zeros(first.nrows(), first.ncols());
    for h in hessians {
        sum += h;
    }
    sum /= hessians.len() as f64;
    symmetrize(&mut sum);
    if sum.iter().any(|v| !v.is_finite()) || nalgebra::Cholesky::new(sum.clone()).is_none() {
        return Err(Error::DegenerateMetric);
    }
    Ok(sum)
}

/// The metric for the current iteration.
///
/// `gauss_newton` may carry per-particle Gauss-Newton Hessians that the caller
/// already computed; they are evaluated here otherwise.
pub fn metric_update(
    spec: &KernelSpec,
    ensemble: &Ensemble,
    target: &dyn Target,
    gauss_newton: Option<&[DMatrix<f64>]>,
) -> Result<DMatrix<f64>> {
    match spec.mode {
        MetricMode::Identity => Ok(DMatrix::identity(ensemble.d(), ensemble.d())),
        MetricMode::Fixed => Ok(spec.metric.clone()),
        MetricMode::AveragedGaussNewton => match gauss_newton {
            Some(h) => averaged_metric(h),
            None => {
                let h = gauss_newton_blocks(target, ensemble)?;
                averaged_metric(&h)
            }
        },
    }
}

/// Per-particle Gauss-Newton Hessians.
pub fn gauss_newton_blocks(target: &dyn Target, ensemble: &Ensemble) -> Result<Vec<DMatrix<f64>>> {
    (0..ensemble.n())
        .into_par_iter()
        .map(|m| target.gauss_newton_hessian(ensemble.particle(m)))
        .collect()
}

/// Resolve the kernel used for one iteration.
pub(crate) fn resolve_kernel(
    spec: &KernelSpec,
    ensemble: &Ensemble,
    target: &dyn Target,
    gauss_newton: Option<&[DMatrix<f64>]>,
) -> Result<KernelSpec> {
    if spec.dim() != ensemble.d() {
        return Err(Error::DimensionMismatch {
            expected: ensemble.d(),
            got: spec.dim(),
        });
    }
    match spec.mode {
        MetricMode::Fixed => Ok(spec.clone()),
        _ => spec.with_metric(metric_update(spec, ensemble, target, gauss_newton)?),
    }
}

/// Kernel values and first-argument gradients over all ordered particle pairs.
#[derive(Debug)]
pub struct GramBundle {
    n: usize,
    d: usize,
    gram: DMatrix<f64>,
    /// `grad_1 k(z_m, z_n)` at offset `(m * n + n) * d`.
    grad1: Vec<f64>,
    chol: OnceLock<Result<Factor>>,
}

impl GramBundle {
    pub fn build(spec: &KernelSpec, ensemble: &Ensemble) -> Result<Self> {
        let (n, d) = (ensemble.n(), ensemble.d());
        if spec.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: spec.dim(),
            });
        }
        if !ensemble.positions.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        // Each row is written by exactly one task, so the result does not
        // depend on the thread count.
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|m| {
                let zm = ensemble.particle(m);
                let mut k_row = vec![0.0; n];
                let mut g_row = vec![0.0; n * d];
                for j in 0..n {
                    k_row[j] = spec.eval_with_grad(
                        zm,
                        ensemble.particle(j),
                        &mut g_row[j * d..(j + 1) * d],
                    );
                }
                (k_row, g_row)
            })
            .collect();
        let mut gram = DMatrix::zeros(n, n);
        let mut grad1 = Vec::with_capacity(n * n * d);
        for (m, (k_row, g_row)) in rows.into_iter().enumerate() {
            for (j, k) in k_row.into_iter().enumerate() {
                gram[(m, j)] = k;
            }
            grad1.extend(g_row);
        }
        Ok(Self {
            n,
            d,
            gram,
            grad1,
            chol: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// The `N x N` gram matrix `kbar_{mn} = k(z_m, z_n)`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `grad_1 k(z_m, z_n)`.
    pub fn grad1(&self, m: usize, n: usize) -> &[f64] {
        let off = (m * self.n + n) * self.d;
        &self.grad1[off..off + self.d]
    }

    /// Cholesky factor of the gram matrix, computed on first use.
    pub fn cholesky(&self) -> Result<&Factor> {
        self.chol
            .get_or_init(|| factor_gram(&self.gram))
            .as_ref()
            .map_err(Clone::clone)
    }
}

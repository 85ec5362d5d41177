//! Matrix-free sSVN.
//!
//! With block-diagonal kernel-gradient term the SVN-Hessian factors as
//! `H = N K C K + H2`, where `C` is block diagonal with the per-particle
//! curvature. Products with `H_lambda = H + lambda N K` then cost two
//! applications of `K` and a few block multiplies, and `N(0, H)` can be drawn
//! as `sqrt(N) K eta + zeta` with `eta_m ~ N(0, C_m)` and
//! `zeta_m = N^{-1/2} sum_n grad_1 k(z_m, z_n) g_mn`.
//!
//! The step perturbs the SVGD direction,
//! `v* = v_svgd + sqrt(2 / (N tau)) N(0, H_lambda)`, solves `H_lambda x = v*`
//! by conjugate gradients and moves `z <- z + tau N K x`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config_space::{apply_k, ssvgd_noise, Ensemble, Field};
use crate::error::{Error, Result};
use crate::kernels::{GramBundle, KernelSpec};
use crate::linalg::{factor_scaled, Factor};
use crate::random::NormalSource;
use crate::svn::{check_stochastic_flags, h2_blocks, newton_state, SvnOptions};
use crate::targets::Target;

/// A symmetric linear map on flat vectors.
pub trait LinearOperator {
    fn dim(&self) -> usize;

    /// `y <- A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);

    /// `y <- M^{-1} x`. Identity unless overridden.
    fn precondition(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
}

/// `H_lambda` in matrix-free form.
#[derive(Debug)]
pub struct HessianOperator {
    gram: GramBundle,
    curvature: Vec<DMatrix<f64>>,
    h2: Vec<DMatrix<f64>>,
    lambda: f64,
    curvature_factors: Vec<std::sync::OnceLock<Result<Factor>>>,
}

impl HessianOperator {
    pub fn new(gram: GramBundle, curvature: Vec<DMatrix<f64>>, lambda: f64) -> Result<Self> {
        let (n, d) = (gram.n(), gram.d());
        if curvature.len() != n || curvature.iter().any(|c| c.nrows() != d || c.ncols() != d) {
            return Err(Error::ShapeMismatch(format!(
                "expected {n} curvature blocks of size {d} x {d}"
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "damping must be non-negative, got {lambda}"
            )));
        }
        let h2 = h2_blocks(&gram);
        Ok(Self {
            curvature_factors: (0..n).map(|_| std::sync::OnceLock::new()).collect(),
            gram,
            curvature,
            h2,
            lambda,
        })
    }

    pub fn n(&self) -> usize {
        self.gram.n()
    }

    pub fn d(&self) -> usize {
        self.gram.d()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gram(&self) -> &GramBundle {
        &self.gram
    }

    /// `H_lambda v`.
    pub fn hvp(&self, v: &Field) -> Result<Field> {
        v.check_shape(self.n(), self.d())?;
        let n = self.n() as f64;
        let kv = apply_k(&self.gram, v)?;
        let weighted: Vec<f64> = (0..self.n())
            .into_par_iter()
            .flat_map_iter(|m| {
                let x = DVector::from_column_slice(kv.row(m));
                (&self.curvature[m] * x).as_slice().to_vec()
            })
            .collect::<Vec<f64>>();
        let weighted = Field::from_vec(self.n(), self.d(), weighted)?;
        let mut out = apply_k(&self.gram, &weighted)?;
        out.scale(n);
        for m in 0..self.n() {
            let h2v = &self.h2[m] * DVector::from_column_slice(v.row(m));
            for (o, x) in out.row_mut(m).iter_mut().zip(h2v.iter()) {
                *o += x;
            }
        }
        if self.lambda > 0.0 {
            out.axpy(self.lambda * n, &kv);
        }
        Ok(out)
    }

    fn curvature_factor(&self, m: usize) -> Result<&Factor> {
        self.curvature_factors[m]
            .get_or_init(|| factor_scaled(&self.curvature[m], "curvature block"))
            .as_ref()
            .map_err(Clone::clone)
    }

    /// A draw from `N(0, H)`, undamped.
    ///
    /// Consumes `N d` normals for the curvature part, then `N^2` for the
    /// kernel-gradient part.
    pub fn sample_noise(&self, noise: &mut dyn NormalSource) -> Result<Field> {
        let (n, d) = (self.n(), self.d());
        let mut eta = vec![0.0; n * d];
        noise.fill_standard_normal(&mut eta);
        let mut gamma = vec![0.0; n * n];
        noise.fill_standard_normal(&mut gamma);

        let mut scaled = Field::zeros(n, d);
        for m in 0..n {
            let l = self.curvature_factor(m)?.l();
            let x = l * DVector::from_column_slice(&eta[m * d..(m + 1) * d]);
            scaled.row_mut(m).copy_from_slice(x.as_slice());
        }
        let mut out = apply_k(&self.gram, &scaled)?;
        out.scale((n as f64).sqrt());
        let inv_sqrt_n = 1.0 / (n as f64).sqrt();
        for m in 0..n {
            let row = out.row_mut(m);
            for j in 0..n {
                let g = self.gram.grad1(m, j);
                let w = gamma[m * n + j] * inv_sqrt_n;
                for (o, gi) in row.iter_mut().zip(g) {
                    *o += w * gi;
                }
            }
        }
        Ok(out)
    }

    /// A draw from `N(0, H_lambda)`: [`Self::sample_noise`] plus an
    /// independent `N(0, lambda N K)` term, which consumes `N d` more normals.
    pub fn sample_noise_damped(&self, noise: &mut dyn NormalSource) -> Result<Field> {
        let mut out = self.sample_noise(noise)?;
        if self.lambda > 0.0 {
            let k_draw = ssvgd_noise(&self.gram, noise)?;
            out.axpy((self.lambda * self.n() as f64 / 2.0).sqrt(), &k_draw);
        } else {
            let mut skip = vec![0.0; self.n() * self.d()];
            noise.fill_standard_normal(&mut skip);
        }
        Ok(out)
    }
}

impl LinearOperator for HessianOperator {
    fn dim(&self) -> usize {
        self.n() * self.d()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let v = Field::from_vec(self.n(), self.d(), x.to_vec()).expect("operator dimension");
        let hv = self.hvp(&v).expect("operator dimension");
        y.copy_from_slice(hv.as_slice());
    }
}

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Tolerances for the conjugate-gradient solve.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgOptions {
    #[serde(default = "CgOptions::default_rel_tol")]
    pub rel_tol: f64,
    /// Defaults to the system size `N d`.
    #[serde(default)]
    pub max_iter: Option<usize>,
}

impl CgOptions {
    fn default_rel_tol() -> f64 {
        1e-6
    }
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            rel_tol: Self::default_rel_tol(),
            max_iter: None,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients from a zero initial guess.
///
/// Stops once `|A x - b| / |b| <= rel_tol` or after `max_iter` iterations;
/// running out of iterations is reported through `converged`, not as an error.
pub fn cg_solve(
    op: &dyn LinearOperator,
    rhs: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    let dim = op.dim();
    if rhs.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: rhs.len(),
        });
    }
    if !(rel_tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "relative tolerance must be positive, got {rel_tol}"
        )));
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let b_norm = dot(rhs, rhs).sqrt();
    let mut x = vec![0.0; dim];
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            solution: x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let mut r = rhs.to_vec();
    let mut z = vec![0.0; dim];
    op.precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; dim];
    let mut rel = 1.0;
    let mut iterations = 0;
    while iterations < max_iter {
        op.apply(&p, &mut ap);
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            return Err(Error::Breakdown {
                iteration: iterations,
                curvature,
            });
        }
        let alpha = rz / curvature;
        for i in 0..dim {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= rel_tol {
            break;
        }
        op.precondition(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..dim {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(CgOutcome {
        solution: x,
        iterations,
        relative_residual: rel,
        converged: rel <= rel_tol,
    })
}

/// One matrix-free SVN step; with `stochastic` one sSVN step.
///
/// The operator always uses the block-diagonal kernel-gradient term.
/// Normals: `N d + N^2 + N d` per stochastic step.
pub fn ssvn_step_cg(
    ensemble: &Ensemble,
    target: &dyn Target,
    kernel: &KernelSpec,
    options: &SvnOptions,
    cg: &CgOptions,
    stochastic: bool,
    noise: &mut dyn NormalSource,
) -> Result<(Ensemble, CgOutcome)> {
    if !(options.tau > 0.0 && options.tau.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "step size must be positive, got {}",
            options.tau
        )));
    }
    if !options.flags.h2_block_diagonal {
        return Err(Error::InvalidParameter(
            "the matrix-free operator needs a block-diagonal kernel-gradient term".into(),
        ));
    }
    if stochastic {
        check_stochastic_flags(options.flags)?;
    }
    let state = newton_state(ensemble, target, kernel, options.flags.gauss_newton)?;
    let (n, d) = (ensemble.n(), ensemble.d());
    let mut rhs = state.velocity;
    let op = HessianOperator::new(state.gram, state.curvature, options.lambda)?;
    if stochastic {
        let draw = op.sample_noise_damped(noise)?;
        rhs.axpy((2.0 / (n as f64 * options.tau)).sqrt(), &draw);
    }
    let max_iter = cg.max_iter.unwrap_or(n * d);
    let outcome = cg_solve(&op, rhs.as_slice(), cg.rel_tol, max_iter)?;
    let x = Field::from_vec(n, d, outcome.solution.clone())?;
    let mut update = apply_k(op.gram(), &x)?;
    update.scale(options.tau * n as f64);
    Ok((ensemble.advanced(&update)?, outcome))
}

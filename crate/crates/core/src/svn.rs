//! Stein variational Newton.
//!
//! The SVN-Hessian is an `Nd x Nd` matrix of `d x d` blocks
//!
//! ```text
//! h^{mn} = (1/N) sum_p [ k(z_p, z_m) k(z_p, z_n) C_p + grad_1 k(z_p, z_n) grad_1 k(z_p, z_m)' ]
//! ```
//!
//! where `C_p = -hess ln pi(z_p)` or its Gauss-Newton surrogate. Solving
//! `H alpha = v_svgd` and mapping back with `N K alpha` gives the SVN
//! direction. With Levenberg damping `H_lambda = H + lambda N K` the
//! stochastic variant adds `sqrt(tau) sqrt(2N) K L^{-T} xi`, where
//! `L L' = H_lambda`, which has covariance `2 N K H_lambda^{-1} K`.
//!
//! Positive definiteness of `H_lambda` for the stochastic step is guaranteed
//! by Gauss-Newton curvature together with the block-diagonal approximation
//! of the kernel-gradient term, so both are required when `stochastic` is set.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config_space::{apply_k, dense_k, Ensemble, Field};
use crate::error::{Error, Result};
use crate::kernels::{gauss_newton_blocks, resolve_kernel, GramBundle, KernelSpec, MetricMode};
use crate::linalg::{factor_scaled, symmetrize, Factor};
use crate::random::NormalSource;
use crate::svgd::{scores, svgd_velocity};
use crate::targets::Target;

/// Structural choices for the SVN-Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvnFlags {
    /// Use `2 J'J` instead of the exact `-hess ln pi`.
    pub gauss_newton: bool,
    /// Keep the kernel-gradient term only on diagonal blocks.
    pub h2_block_diagonal: bool,
}

impl Default for SvnFlags {
    fn default() -> Self {
        Self {
            gauss_newton: true,
            h2_block_diagonal: true,
        }
    }
}

/// Step size, damping and Hessian structure for the Newton steppers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvnOptions {
    pub tau: f64,
    pub lambda: f64,
    pub flags: SvnFlags,
}

impl Default for SvnOptions {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.01,
            flags: SvnFlags::default(),
        }
    }
}

impl SvnOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "step size must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "damping must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-particle curvature `C_m`: the Gauss-Newton matrix or the exact `-hess ln pi`.
///
/// Either way the result is already negated, so it enters the assembly as is.
pub fn curvature_blocks(
    target: &dyn Target,
    ensemble: &Ensemble,
    gauss_newton: bool,
) -> Result<Vec<DMatrix<f64>>> {
    if gauss_newton {
        gauss_newton_blocks(target, ensemble)
    } else {
        (0..ensemble.n())
            .into_par_iter()
            .map(|m| target.neg_hessian(ensemble.particle(m)))
            .collect()
    }
}

/// Block-diagonal kernel-gradient term, `(1/N) sum_n grad_1 k(z_m, z_n) grad_1 k(z_m, z_n)'`.
pub fn h2_blocks(gram: &GramBundle) -> Vec<DMatrix<f64>> {
    let (n, d) = (gram.n(), gram.d());
    (0..n)
        .map(|m| {
            let mut block = DMatrix::zeros(d, d);
            for j in 0..n {
                let g = gram.grad1(m, j);
                for a in 0..d {
                    for b in 0..d {
                        block[(a, b)] += g[a] * g[b];
                    }
                }
            }
            block / n as f64
        })
        .collect()
}

/// Assembled SVN-Hessian, optionally damped and factored.
#[derive(Debug, Clone)]
pub struct SvnSystem {
    n: usize,
    d: usize,
    matrix: DMatrix<f64>,
    lambda: f64,
    flags: SvnFlags,
    factor: Option<Factor>,
}

impl SvnSystem {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// `H` (or `H_lambda` once damped), particle-major block layout.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn flags(&self) -> SvnFlags {
        self.flags
    }

    pub fn factor(&self) -> Option<&Factor> {
        self.factor.as_ref()
    }

    /// Block `h^{mn}`.
    pub fn block(&self, m: usize, n: usize) -> DMatrix<f64> {
        self.matrix
            .view((m * self.d, n * self.d), (self.d, self.d))
            .into_owned()
    }

    fn factored(&self) -> Result<&Factor> {
        self.factor.as_ref().ok_or_else(|| {
            Error::InvalidParameter("SVN system must be damped and factored before solving".into())
        })
    }

    /// Solve `H_lambda alpha = rhs` with the cached factor.
    pub fn solve(&self, rhs: &Field) -> Result<Field> {
        rhs.check_shape(self.n, self.d)?;
        let factor = self.factored()?;
        let x = factor.chol.solve(&rhs.to_dvector());
        Field::from_vec(self.n, self.d, x.as_slice().to_vec())
    }

    /// `L^{-T} xi`, whose covariance is `H_lambda^{-1}`.
    pub fn inverse_factor_transpose_apply(&self, xi: &[f64]) -> Result<Field> {
        let factor = self.factored()?;
        let l = factor.chol.l_dirty();
        let w = l
            .tr_solve_lower_triangular(&DVector::from_column_slice(xi))
            .ok_or(Error::CholeskyFailure {
                what: "damped SVN-Hessian",
                max_jitter: factor.jitter,
            })?;
        Field::from_vec(self.n, self.d, w.as_slice().to_vec())
    }
}

/// Assemble the dense SVN-Hessian from per-particle curvature `C_p` (already
/// the negated log-density Hessian).
pub fn assemble_svn_hessian(
    gram: &GramBundle,
    curvature: &[DMatrix<f64>],
    flags: SvnFlags,
) -> Result<SvnSystem> {
    let (n, d) = (gram.n(), gram.d());
    if curvature.len() != n || curvature.iter().any(|c| c.nrows() != d || c.ncols() != d) {
        return Err(Error::ShapeMismatch(format!(
            "expected {n} curvature blocks of size {d} x {d}"
        )));
    }
    let kbar = gram.gram();
    let inv_n = 1.0 / n as f64;
    let mut h = DMatrix::zeros(n * d, n * d);

    // First term, entry (i, j) of every block: kbar' diag(C(i,j)) kbar / N.
    for i in 0..d {
        for j in i..d {
            let mut scaled = kbar.clone();
            for p in 0..n {
                let c = curvature[p][(i, j)] * inv_n;
                scaled.row_mut(p).scale_mut(c);
            }
            let t = kbar.tr_mul(&scaled);
            for m in 0..n {
                for q in 0..n {
                    h[(m * d + i, q * d + j)] += t[(m, q)];
                    if i != j {
                        h[(m * d + j, q * d + i)] += t[(m, q)];
                    }
                }
            }
        }
    }

    if flags.h2_block_diagonal {
        for (m, block) in h2_blocks(gram).into_iter().enumerate() {
            let mut view = h.view_mut((m * d, m * d), (d, d));
            view += block;
        }
    } else {
        // Entry (i, j) of block (m, q) is (1/N) sum_p g_pq[i] g_pm[j].
        let grads: Vec<DMatrix<f64>> = (0..d)
            .map(|i| DMatrix::from_fn(n, n, |p, q| gram.grad1(p, q)[i]))
            .collect();
        for i in 0..d {
            for j in 0..d {
                let t = grads[j].tr_mul(&grads[i]);
                for m in 0..n {
                    for q in 0..n {
                        h[(m * d + i, q * d + j)] += t[(m, q)] * inv_n;
                    }
                }
            }
        }
    }
    symmetrize(&mut h);
    Ok(SvnSystem {
        n,
        d,
        matrix: h,
        lambda: 0.0,
        flags,
        factor: None,
    })
}

/// `H_lambda = H + lambda N K`, then factor it.
pub fn damp_hessian(mut system: SvnSystem, gram: &GramBundle, lambda: f64) -> Result<SvnSystem> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "damping must be non-negative, got {lambda}"
        )));
    }
    let (n, d) = (system.n, system.d);
    if gram.n() != n || gram.d() != d {
        return Err(Error::ShapeMismatch("gram and SVN system disagree".into()));
    }
    if lambda > 0.0 {
        let kbar = gram.gram();
        for m in 0..n {
            for q in 0..n {
                let w = lambda * kbar[(m, q)];
                for i in 0..d {
                    system.matrix[(m * d + i, q * d + i)] += w;
                }
            }
        }
    }
    system.lambda = lambda;
    system.factor = Some(factor_scaled(&system.matrix, "damped SVN-Hessian")?);
    Ok(system)
}

/// Everything one Newton iteration needs at a given configuration.
pub(crate) struct NewtonState {
    pub gram: GramBundle,
    pub velocity: Field,
    pub curvature: Vec<DMatrix<f64>>,
}

pub(crate) fn newton_state(
    ensemble: &Ensemble,
    target: &dyn Target,
    kernel: &KernelSpec,
    gauss_newton: bool,
) -> Result<NewtonState> {
    let needs_gn = gauss_newton || kernel.mode() == MetricMode::AveragedGaussNewton;
    let gn = if needs_gn {
        Some(gauss_newton_blocks(target, ensemble)?)
    } else {
        None
    };
    let kernel = resolve_kernel(kernel, ensemble, target, gn.as_deref())?;
    let gram = GramBundle::build(&kernel, ensemble)?;
    let velocity = svgd_velocity(&gram, &scores(target, ensemble)?)?;
    let curvature = match gn {
        Some(gn) if gauss_newton => gn,
        _ => curvature_blocks(target, ensemble, false)?,
    };
    Ok(NewtonState {
        gram,
        velocity,
        curvature,
    })
}

pub(crate) fn check_stochastic_flags(flags: SvnFlags) -> Result<()> {
    if flags.gauss_newton && flags.h2_block_diagonal {
        Ok(())
    } else {
        Err(Error::InvalidParameter(
            "stochastic SVN requires Gauss-Newton curvature and a block-diagonal kernel-gradient term"
                .into(),
        ))
    }
}

/// One SVN step with the dense Cholesky factor of `H_lambda`; with `stochastic`
/// one sSVN step. The deterministic correction is not included.
///
/// Normals are consumed in particle-major order, `N d` per step.
pub fn ssvn_step_cholesky(
    ensemble: &Ensemble,
    target: &dyn Target,
    kernel: &KernelSpec,
    options: &SvnOptions,
    stochastic: bool,
    noise: &mut dyn NormalSource,
) -> Result<Ensemble> {
    options.validate()?;
    if stochastic {
        check_stochastic_flags(options.flags)?;
    }
    let state = newton_state(ensemble, target, kernel, options.flags.gauss_newton)?;
    let system = assemble_svn_hessian(&state.gram, &state.curvature, options.flags)?;
    let system = damp_hessian(system, &state.gram, options.lambda)?;
    let alpha = system.solve(&state.velocity)?;
    let n = ensemble.n() as f64;
    let mut update = apply_k(&state.gram, &alpha)?;
    update.scale(options.tau * n);
    if stochastic {
        let mut xi = vec![0.0; ensemble.n() * ensemble.d()];
        noise.fill_standard_normal(&mut xi);
        let w = system.inverse_factor_transpose_apply(&xi)?;
        let mut stc = apply_k(&state.gram, &w)?;
        stc.scale((2.0 * n).sqrt());
        update.axpy(options.tau.sqrt(), &stc);
    }
    ensemble.advanced(&update)
}

const V_DET_MAX_SIZE: usize = 64;

/// `K H_lambda^{-1}` at a configuration, plus `K` itself.
fn k_times_inverse(
    ensemble: &Ensemble,
    target: &dyn Target,
    kernel: &KernelSpec,
    lambda: f64,
    flags: SvnFlags,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let state = newton_state(ensemble, target, kernel, flags.gauss_newton)?;
    let system = assemble_svn_hessian(&state.gram, &state.curvature, flags)?;
    let system = damp_hessian(system, &state.gram, lambda)?;
    let k = dense_k(&state.gram);
    // H^{-1} K is the transpose of K H^{-1} since both factors are symmetric.
    let hinv_k = system.factored()?.chol.solve(&k);
    Ok((hinv_k.transpose(), k))
}

/// Deterministic correction `v_a = N K_bc d/dz_c (K H_lambda^{-1})_ab`, with
/// the configuration derivative taken by central differences of step `fd_step`.
///
/// A dense test oracle; limited to `N d <= 64`.
pub fn v_det_finite_difference(
    ensemble: &Ensemble,
    target: &dyn Target,
    kernel: &KernelSpec,
    lambda: f64,
    flags: SvnFlags,
    fd_step: f64,
) -> Result<Field> {
    let (n, d) = (ensemble.n(), ensemble.d());
    let size = n * d;
    if size > V_DET_MAX_SIZE {
        return Err(Error::SizeExceeded {
            size,
            limit: V_DET_MAX_SIZE,
        });
    }
    if !(fd_step > 0.0) {
        return Err(Error::InvalidParameter(
            "finite-difference step must be positive".into(),
        ));
    }
    let (_, k) = k_times_inverse(ensemble, target, kernel, lambda, flags)?;
    let mut v = DVector::zeros(size);
    for c in 0..size {
        let mut plus = ensemble.clone();
        let mut minus = ensemble.clone();
        plus.positions.as_mut_slice()[c] += fd_step;
        minus.positions.as_mut_slice()[c] -= fd_step;
        let (a_plus, _) = k_times_inverse(&plus, target, kernel, lambda, flags)?;
        let (a_minus, _) = k_times_inverse(&minus, target, kernel, lambda, flags)?;
        let da = (a_plus - a_minus) / (2.0 * fd_step);
        v += da * k.column(c);
    }
    v *= n as f64;
    Field::from_vec(n, d, v.as_slice().to_vec())
}

/// Diagonal block `h^{mm}` of the SVN-Hessian.
pub fn diagonal_block(gram: &GramBundle, curvature: &[DMatrix<f64>], m: usize) -> DMatrix<f64> {
    let (n, d) = (gram.n(), gram.d());
    let kbar = gram.gram();
    let mut block = DMatrix::zeros(d, d);
    for p in 0..n {
        let w = kbar[(p, m)] * kbar[(p, m)];
        block += &curvature[p] * w;
        let g = gram.grad1(p, m);
        for a in 0..d {
            for b in 0..d {
                block[(a, b)] += g[a] * g[b];
            }
        }
    }
    block / n as f64
}

/// Block-diagonal SVN: solve `h^{mm} alpha_m = v_svgd(z_m)` per particle and
/// step `z_m <- z_m + tau alpha_m`. Deterministic only.
pub fn svn_block_diagonal_step(
    ensemble: &Ensemble,
    target: &dyn Target,
    kernel: &KernelSpec,
    tau: f64,
    gauss_newton: bool,
) -> Result<Ensemble> {
    SvnOptions {
        tau,
        lambda: 0.0,
        flags: SvnFlags::default(),
    }
    .validate()?;
    let state = newton_state(ensemble, target, kernel, gauss_newton)?;
    let (n, d) = (ensemble.n(), ensemble.d());
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|m| {
            let block = diagonal_block(&state.gram, &state.curvature, m);
            let factor = factor_scaled(&block, "SVN diagonal block")?;
            let rhs = DVector::from_column_slice(state.velocity.row(m));
            Ok(factor
                .chol
                .solve(&rhs)
                .as_slice()
                .iter()
                .map(|a| tau * a)
                .collect())
        })
        .collect::<Result<_>>()?;
    let update = Field::from_vec(n, d, rows.concat())?;
    ensemble.advanced(&update)
}

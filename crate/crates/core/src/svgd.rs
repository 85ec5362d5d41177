//! SVGD velocity and the SVGD / stochastic SVGD transitions.

use rayon::prelude::*;

use crate::config_space::{apply_k, divergence_k, ssvgd_noise, Ensemble, Field};
use crate::error::{Error, Result};
use crate::kernels::{gauss_newton_blocks, resolve_kernel, GramBundle, KernelSpec, MetricMode};
use crate::random::NormalSource;
use crate::targets::Target;

/// Scores `grad ln pi(z_m)` for every particle, as a field.
pub fn scores(target: &dyn Target, ensemble: &Ensemble) -> Result<Field> {
    let rows: Vec<Vec<f64>> = (0..ensemble.n())
        .into_par_iter()
        .map(|m| target.grad_log_density(ensemble.particle(m)))
        .collect::<Result<_>>()?;
    Field::from_rows(&rows)
}

/// `v(z_m) = (1/N) sum_n [k(z_m, z_n) grad ln pi(z_n) + grad_2 k(z_m, z_n)]`.
pub fn svgd_velocity(gram: &GramBundle, scores: &Field) -> Result<Field> {
    let mut v = apply_k(gram, scores)?;
    v.axpy(1.0, &divergence_k(gram));
    Ok(v)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "step size must be positive, got {tau}"
        )))
    }
}

/// One SVGD step, `z <- z + tau v`, or with `stochastic` one sSVGD step,
/// `z <- z + tau v + sqrt(tau) xi` with `xi ~ N(0, 2K)`.
///
/// The averaged Gauss-Newton metric, when selected, is recomputed from the
/// current ensemble before the gram matrix is built.
pub fn svgd_step(
    ensemble: &Ensemble,
    target: &dyn Target,
    kernel: &KernelSpec,
    tau: f64,
    stochastic: bool,
    noise: &mut dyn NormalSource,
) -> Result<Ensemble> {
    check_tau(tau)?;
    let gn = match kernel.mode() {
        MetricMode::AveragedGaussNewton => Some(gauss_newton_blocks(target, ensemble)?),
        _ => None,
    };
    let kernel = resolve_kernel(kernel, ensemble, target, gn.as_deref())?;
    let gram = GramBundle::build(&kernel, ensemble)?;
    let scores = scores(target, ensemble)?;
    let mut update = svgd_velocity(&gram, &scores)?;
    update.scale(tau);
    if stochastic {
        let stc = ssvgd_noise(&gram, noise)?;
        update.axpy(tau.sqrt(), &stc);
    }
    ensemble.advanced(&update)
}

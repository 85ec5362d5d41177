//! Dense factorization helpers shared by the kernel and Newton modules.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// A Cholesky factor together with the diagonal shift that was needed to obtain it.
#[derive(Debug, Clone)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    /// Diagonal jitter added before factorization succeeded (0 when none was needed).
    pub jitter: f64,
}

impl Factor {
    /// Lower-triangular factor `L` with `A + jitter*I = L L'`.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Factor `matrix`, escalating a diagonal shift from `start` by factors of ten
/// up to `stop` when the plain factorization fails.
pub(crate) fn cholesky_with_jitter(
    matrix: &DMatrix<f64>,
    start: f64,
    stop: f64,
    what: &'static str,
) -> Result<Factor> {
    if let Some(chol) = Cholesky::new(matrix.clone()) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let mut jitter = start;
    while jitter <= stop * (1.0 + 1e-9) {
        let mut shifted = matrix.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(Factor { chol, jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::CholeskyFailure {
        what,
        max_jitter: stop,
    })
}

/// Absolute jitter ladder for kernel gram matrices (entries lie in (0, 1]).
pub(crate) fn factor_gram(gram: &DMatrix<f64>) -> Result<Factor> {
    cholesky_with_jitter(gram, 1e-12, 1e-6, "kernel gram matrix")
}

/// Jitter ladder scaled by the largest diagonal magnitude, for curvature matrices.
pub(crate) fn factor_scaled(matrix: &DMatrix<f64>, what: &'static str) -> Result<Factor> {
    let scale = matrix
        .diagonal()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    cholesky_with_jitter(matrix, 1e-10 * scale, 1e-6 * scale, what)
}

/// Symmetrize in place: `A <- (A + A')/2`.
pub(crate) fn symmetrize(matrix: &mut DMatrix<f64>) {
    let n = matrix.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = avg;
            matrix[(j, i)] = avg;
        }
    }
}

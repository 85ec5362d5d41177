//! Configuration-space algebra over `X = R^{N d}`.
//!
//! A configuration stacks the `N` particle positions of an ensemble into one
//! vector in particle-major order: the `d` coordinates of particle 0, then
//! those of particle 1, and so on. The SVGD diffusion matrix `K` acts on such
//! vectors as a kernel average over particles,
//!
//! ```text
//! (K v)_m = (1/N) * sum_n k(z_m, z_n) v_n,
//! ```
//!
//! so it is applied here without ever materializing the `Nd x Nd` matrix.
//! Permuting to dimension-major order turns `K` into `d` identical copies of
//! the gram matrix divided by `N`, which is what makes the noise draw cheap:
//! only the `N x N` gram needs a Cholesky factor.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::GramBundle;
use crate::random::NormalSource;

/// An `N x d` array of reals read as a vector in `R^{N d}` (particle-major).
///
/// Used for ensembles, velocity fields, scores and sample sets alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            data: vec![0.0; n * d],
        }
    }

    /// Wrap a particle-major buffer of length `n * d`.
    pub fn from_vec(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::ShapeMismatch(format!(
                "buffer of length {} cannot hold {n} x {d}",
                data.len()
            )));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in rows {
            let row = row.as_ref();
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            n: rows.len(),
            d,
            data,
        })
    }

    /// Number of rows (particles or samples).
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of columns (dimension).
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * self.d..(m + 1) * self.d]
    }

    pub fn row_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.data[m * self.d..(m + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on zero chunk size
        let d = self.d.max(1);
        self.data.chunks_exact(d).take(self.n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, m: usize, i: usize) -> f64 {
        self.data[m * self.d + i]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.n == other.n && self.d == other.d
    }

    pub fn dot(&self, other: &Field) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Field) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// The field as a column vector in `R^{N d}`.
    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    pub(crate) fn check_shape(&self, n: usize, d: usize) -> Result<()> {
        if self.n != n || self.d != d {
            return Err(Error::ShapeMismatch(format!(
                "expected {n} x {d} field, got {} x {}",
                self.n, self.d
            )));
        }
        Ok(())
    }
}

/// The Markov-chain state: particle positions plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub positions: Field,
    pub iteration: usize,
}

impl Ensemble {
    pub fn new(positions: Field) -> Result<Self> {
        if positions.n() == 0 || positions.d() == 0 {
            return Err(Error::InvalidParameter(
                "an ensemble needs at least one particle and one dimension".into(),
            ));
        }
        if !positions.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self {
            positions,
            iteration: 0,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Field::from_rows(rows)?)
    }

    pub fn n(&self) -> usize {
        self.positions.n()
    }

    pub fn d(&self) -> usize {
        self.positions.d()
    }

    pub fn particle(&self, m: usize) -> &[f64] {
        self.positions.row(m)
    }

    /// Advance by `z <- z + update`, rejecting non-finite results.
    pub(crate) fn advanced(&self, update: &Field) -> Result<Ensemble> {
        let mut positions = self.positions.clone();
        positions.axpy(1.0, update);
        let iteration = self.iteration + 1;
        if let Some(bad) = positions
            .rows()
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFiniteUpdate {
                iteration,
                particle: bad,
            });
        }
        Ok(Ensemble {
            positions,
            iteration,
        })
    }
}

/// Apply the diffusion matrix: `(K v)_m = (1/N) sum_n kbar_{mn} v_n`.
pub fn apply_k(gram: &GramBundle, field: &Field) -> Result<Field> {
    let (n, d) = (gram.n(), gram.d());
    field.check_shape(n, d)?;
    let kbar = gram.gram();
    let inv_n = 1.0 / n as f64;
    let mut out = Field::zeros(n, d);
    for m in 0..n {
        let row = out.row_mut(m);
        for j in 0..n {
            let w = kbar[(m, j)];
            for (o, v) in row.iter_mut().zip(field.row(j)) {
                *o += w * v;
            }
        }
        row.iter_mut().for_each(|o| *o *= inv_n);
    }
    Ok(out)
}

/// Direction of the particle/dimension basis change `P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    /// Apply `P`: `(x1, y1, x2, y2, ...)` to `(x1, x2, ..., y1, y2, ...)`.
    ParticleToDimension,
    /// Apply `P'`, the inverse reshape.
    DimensionToParticle,
}

/// Reorder a flat `N d` vector between particle-major and dimension-major layouts.
pub fn permute_basis(values: &[f64], n: usize, d: usize, direction: Basis) -> Result<Vec<f64>> {
    if values.len() != n * d {
        return Err(Error::ShapeMismatch(format!(
            "vector of length {} is not {n} x {d}",
            values.len()
        )));
    }
    let mut out = vec![0.0; n * d];
    for m in 0..n {
        for i in 0..d {
            let particle_major = m * d + i;
            let dimension_major = i * n + m;
            match direction {
                Basis::ParticleToDimension => out[dimension_major] = values[particle_major],
                Basis::DimensionToParticle => out[particle_major] = values[dimension_major],
            }
        }
    }
    Ok(out)
}

/// Divergence of `K` per particle, `(1/N) sum_n grad_2 k(z_m, z_n)`.
///
/// The self term `grad_1 k(z_m, z_m)` of the full divergence vanishes for
/// flat-top kernels and is omitted.
pub fn divergence_k(gram: &GramBundle) -> Field {
    let (n, d) = (gram.n(), gram.d());
    let inv_n = 1.0 / n as f64;
    let mut out = Field::zeros(n, d);
    for m in 0..n {
        debug_assert!(
            gram.grad1(m, m).iter().all(|g| *g == 0.0),
            "kernel lacks a flat top"
        );
        let row = out.row_mut(m);
        for j in 0..n {
            // grad_2 k(z_m, z_j) = grad_1 k(z_j, z_m)
            for (o, g) in row.iter_mut().zip(gram.grad1(j, m)) {
                *o += g;
            }
        }
        row.iter_mut().for_each(|o| *o *= inv_n);
    }
    out
}

/// Draw `v ~ N(0, 2K)` using only the `N x N` gram factor.
///
/// Consumes `N d` normals in dimension-major order: all `N` values for the
/// first coordinate, then the second, and so on.
pub fn ssvgd_noise(gram: &GramBundle, noise: &mut dyn NormalSource) -> Result<Field> {
    let (n, d) = (gram.n(), gram.d());
    let l = gram.cholesky()?.l();
    let mut xi = vec![0.0; n * d];
    noise.fill_standard_normal(&mut xi);
    let scale = (2.0 / n as f64).sqrt();
    let mut dimension_major = vec![0.0; n * d];
    for i in 0..d {
        let block = &xi[i * n..(i + 1) * n];
        for m in 0..n {
            let mut acc = 0.0;
            for (j, x) in block.iter().enumerate().take(m + 1) {
                acc += l[(m, j)] * x;
            }
            dimension_major[i * n + m] = scale * acc;
        }
    }
    let particle_major = permute_basis(&dimension_major, n, d, Basis::DimensionToParticle)?;
    Field::from_vec(n, d, particle_major)
}

/// The dense `Nd x Nd` diffusion matrix. Intended for small instances and oracles.
pub fn dense_k(gram: &GramBundle) -> DMatrix<f64> {
    let (n, d) = (gram.n(), gram.d());
    let kbar = gram.gram();
    let inv_n = 1.0 / n as f64;
    DMatrix::from_fn(n * d, n * d, |a, b| {
        let (m, i) = (a / d, a % d);
        let (j, k) = (b / d, b % d);
        if i == k {
            kbar[(m, j)] * inv_n
        } else {
            0.0
        }
    })
}

//! Benchmark posterior densities.
//!
//! Every target is written in residual form, `ln pi(x) = -|r(x)|^2 + const`,
//! which gives the score `-2 J' r` and the Gauss-Newton curvature `2 J' J`
//! for free. `J` is the residual Jacobian.
//!
//! | target            | residuals                                                        |
//! |-------------------|------------------------------------------------------------------|
//! | Hybrid Rosenbrock | `sqrt(a)(x_1 - mu)`, `sqrt(b)(x_{j,i} - x_{j,i-1}^2)`             |
//! | double banana     | `x / (sqrt(2) s1)`, `(y - ln((1-x_1)^2 + 100(x_2-x_1^2)^2)) / (sqrt(2) s2)` |
//! | Gaussian          | `U'(x - mean) / sqrt(2)` with `U U'` the precision                |

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config_space::Field;
use crate::error::{Error, Result};

/// A differentiable log-density with residual structure.
///
/// Implementors provide the residual vector, its Jacobian and the contraction
/// `sum_k r_k * hess(r_k)`; the checked density, score and curvature methods
/// are derived from those.
pub trait Target: Send + Sync {
    fn dim(&self) -> usize;

    fn name(&self) -> &str;

    /// Residuals `r(x)` with `ln pi(x) = -|r(x)|^2 + const`.
    fn residuals(&self, x: &[f64]) -> DVector<f64>;

    /// `dr/dx`, one row per residual.
    fn residual_jacobian(&self, x: &[f64]) -> DMatrix<f64>;

    /// `sum_k r_k(x) * hess(r_k)(x)`, needed only for the exact Hessian.
    fn residual_curvature(&self, x: &[f64], r: &DVector<f64>) -> DMatrix<f64>;

    /// Exact i.i.d. draws from the normalized density, when available.
    fn sample_ground_truth(&self, _count: usize, _rng: &mut dyn RngCore) -> Option<Result<Field>> {
        None
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(-self.residuals(x).norm_squared())
    }

    /// `grad ln pi(x) = -2 J' r`.
    fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let r = self.residuals(x);
        let g = self.residual_jacobian(x).tr_mul(&r) * -2.0;
        Ok(g.as_slice().to_vec())
    }

    /// Gauss-Newton surrogate `2 J' J` for `-hess ln pi`; symmetric PSD.
    fn gauss_newton_hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let j = self.residual_jacobian(x);
        Ok(j.tr_mul(&j) * 2.0)
    }

    /// Exact `-hess ln pi(x) = 2 (J' J + sum_k r_k hess(r_k))`.
    fn neg_hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let r = self.residuals(x);
        let j = self.residual_jacobian(x);
        Ok((j.tr_mul(&j) + self.residual_curvature(x, &r)) * 2.0)
    }
}

/// Dimension of a Hybrid Rosenbrock density with `n2` blocks of length `n1`.
pub fn hybrid_rosenbrock_dim(n1: usize, n2: usize) -> Result<usize> {
    if n1 < 2 || n2 < 1 {
        return Err(Error::InvalidParameter(format!(
            "hybrid rosenbrock needs n1 >= 2 and n2 >= 1, got n1 = {n1}, n2 = {n2}"
        )));
    }
    Ok((n1 - 1) * n2 + 1)
}

fn default_mu() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridRosenbrockParams {
    /// Block length.
    pub n1: usize,
    /// Block count.
    pub n2: usize,
    /// Precision of the shared first coordinate.
    pub a: f64,
    /// Precision of the recursive terms.
    pub b: f64,
    /// Location of the first coordinate.
    #[serde(default = "default_mu")]
    pub mu: f64,
}

impl HybridRosenbrockParams {
    pub fn new(n1: usize, n2: usize, a: f64, b: f64) -> Self {
        Self {
            n1,
            n2,
            a,
            b,
            mu: 1.0,
        }
    }

    pub fn dim(&self) -> Result<usize> {
        hybrid_rosenbrock_dim(self.n1, self.n2)
    }
}

/// Hybrid Rosenbrock density
///
/// ```text
/// ln pi(x) = -a (x_1 - mu)^2 - sum_j sum_{i=2}^{n1} b (x_{j,i} - x_{j,i-1}^2)^2
/// ```
///
/// with `x_{j,1} = x_1` shared by all blocks. Coordinates are stored as
/// `x_1` followed by the `n1 - 1` free coordinates of each block in turn.
#[derive(Debug, Clone)]
pub struct HybridRosenbrock {
    params: HybridRosenbrockParams,
    dim: usize,
    sqrt_a: f64,
    sqrt_b: f64,
}

impl HybridRosenbrock {
    pub fn new(params: HybridRosenbrockParams) -> Result<Self> {
        let dim = params.dim()?;
        if !(params.a > 0.0 && params.b > 0.0) || !params.mu.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "hybrid rosenbrock needs a > 0, b > 0 and finite mu, got a = {}, b = {}, mu = {}",
                params.a, params.b, params.mu
            )));
        }
        Ok(Self {
            sqrt_a: params.a.sqrt(),
            sqrt_b: params.b.sqrt(),
            params,
            dim,
        })
    }

    pub fn params(&self) -> &HybridRosenbrockParams {
        &self.params
    }

    /// Index of `x_{j,i}` for block `j` (0-based) and in-block position `i >= 1`.
    fn index(&self, j: usize, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            1 + j * (self.params.n1 - 1) + (i - 1)
        }
    }

    /// Iterate over `(residual index, coordinate, predecessor)` for the block terms.
    fn links(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let n1 = self.params.n1;
        (0..self.params.n2).flat_map(move |j| {
            (1..n1).map(move |i| {
                let k = self.index(j, i);
                (k, k, self.index(j, i - 1))
            })
        })
    }

    /// Draw `count` exact samples by sequential conditional normals.
    pub fn sample(&self, count: usize, rng: &mut dyn RngCore) -> Result<Field> {
        if count == 0 {
            return Err(Error::InvalidParameter(
                "sample count must be positive".into(),
            ));
        }
        let first = Normal::new(self.params.mu, (0.5 / self.params.a).sqrt())
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let sd = (0.5 / self.params.b).sqrt();
        let mut out = Field::zeros(count, self.dim);
        for s in 0..count {
            let row = out.row_mut(s);
            row[0] = first.sample(rng);
            for (_, k, prev) in self.links() {
                let z: f64 = StandardNormal.sample(rng);
                row[k] = row[prev] * row[prev] + sd * z;
            }
        }
        Ok(out)
    }
}

impl Target for HybridRosenbrock {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> &str {
        "hybrid_rosenbrock"
    }

    fn residuals(&self, x: &[f64]) -> DVector<f64> {
        let mut r = DVector::zeros(self.dim);
        r[0] = self.sqrt_a * (x[0] - self.params.mu);
        for (k, cur, prev) in self.links() {
            r[k] = self.sqrt_b * (x[cur] - x[prev] * x[prev]);
        }
        r
    }

    fn residual_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.dim, self.dim);
        j[(0, 0)] = self.sqrt_a;
        for (k, cur, prev) in self.links() {
            j[(k, cur)] = self.sqrt_b;
            j[(k, prev)] = -2.0 * self.sqrt_b * x[prev];
        }
        j
    }

    fn residual_curvature(&self, _x: &[f64], r: &DVector<f64>) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for (k, _, prev) in self.links() {
            c[(prev, prev)] += -2.0 * self.sqrt_b * r[k];
        }
        c
    }

    fn sample_ground_truth(&self, count: usize, rng: &mut dyn RngCore) -> Option<Result<Field>> {
        Some(self.sample(count, rng))
    }
}

fn default_banana_y() -> f64 {
    30f64.ln()
}

fn default_sigma1() -> f64 {
    1.0
}

fn default_sigma2() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleBananaParams {
    /// Observed datum.
    #[serde(default = "default_banana_y")]
    pub y: f64,
    /// Prior standard deviation.
    #[serde(default = "default_sigma1")]
    pub sigma1: f64,
    /// Likelihood standard deviation.
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
}

impl Default for DoubleBananaParams {
    fn default() -> Self {
        Self {
            y: default_banana_y(),
            sigma1: default_sigma1(),
            sigma2: default_sigma2(),
        }
    }
}

/// Two-dimensional double banana,
/// `ln pi(x) = -|x|^2/(2 s1^2) - (y - F(x))^2/(2 s2^2)` with
/// `F(x) = ln((1 - x_1)^2 + 100 (x_2 - x_1^2)^2)`.
///
/// `F` is singular at `(1, 1)`, where the density vanishes.
#[derive(Debug, Clone)]
pub struct DoubleBanana {
    params: DoubleBananaParams,
}

impl DoubleBanana {
    pub fn new(params: DoubleBananaParams) -> Result<Self> {
        if !(params.sigma1 > 0.0 && params.sigma2 > 0.0) || !params.y.is_finite() {
            return Err(Error::InvalidParameter(
                "double banana needs positive sigmas and a finite datum".into(),
            ));
        }
        Ok(Self { params })
    }

    /// `(g, grad g, hess g)` for the inner Rosenbrock polynomial.
    fn inner(x: &[f64]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let (u, v) = (x[0], x[1]);
        let w = v - u * u;
        let g = (1.0 - u).powi(2) + 100.0 * w * w;
        let grad = [-2.0 * (1.0 - u) - 400.0 * u * w, 200.0 * w];
        let hess = [
            [2.0 - 400.0 * w + 800.0 * u * u, -400.0 * u],
            [-400.0 * u, 200.0],
        ];
        (g, grad, hess)
    }
}

impl Target for DoubleBanana {
    fn dim(&self) -> usize {
        2
    }

    fn name(&self) -> &str {
        "double_banana"
    }

    fn residuals(&self, x: &[f64]) -> DVector<f64> {
        let (g, _, _) = Self::inner(x);
        let s1 = std::f64::consts::SQRT_2 * self.params.sigma1;
        let s2 = std::f64::consts::SQRT_2 * self.params.sigma2;
        DVector::from_vec(vec![x[0] / s1, x[1] / s1, (self.params.y - g.ln()) / s2])
    }

    fn residual_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let (g, grad, _) = Self::inner(x);
        let s1 = std::f64::consts::SQRT_2 * self.params.sigma1;
        let s2 = std::f64::consts::SQRT_2 * self.params.sigma2;
        DMatrix::from_row_slice(
            3,
            2,
            &[
                1.0 / s1,
                0.0,
                0.0,
                1.0 / s1,
                -grad[0] / (g * s2),
                -grad[1] / (g * s2),
            ],
        )
    }

    fn residual_curvature(&self, x: &[f64], r: &DVector<f64>) -> DMatrix<f64> {
        let (g, grad, hess) = Self::inner(x);
        let s2 = std::f64::consts::SQRT_2 * self.params.sigma2;
        // hess F = hess g / g - grad g grad g' / g^2; the last residual is (y - F)/s2
        DMatrix::from_fn(2, 2, |i, j| {
            let hf = hess[i][j] / g - grad[i] * grad[j] / (g * g);
            -r[2] * hf / s2
        })
    }
}

/// Multivariate normal `N(mean, covariance)`.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vec<f64>,
    /// Lower Cholesky factor of the covariance.
    cov_factor: DMatrix<f64>,
    /// Lower Cholesky factor `U` of the precision, `U U' = covariance^{-1}`.
    prec_factor: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::InvalidParameter(
                "gaussian covariance must be d x d with d >= 1".into(),
            ));
        }
        let cov_factor = nalgebra::Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::InvalidParameter("covariance is not positive definite".into()))?
            .l();
        let precision = covariance
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("covariance is singular".into()))?;
        let mut precision = precision;
        crate::linalg::symmetrize(&mut precision);
        let prec_factor = nalgebra::Cholesky::new(precision)
            .ok_or_else(|| Error::InvalidParameter("precision is not positive definite".into()))?
            .l();
        Ok(Self {
            mean,
            cov_factor,
            prec_factor,
        })
    }

    pub fn standard(d: usize) -> Self {
        Self::new(vec![0.0; d], DMatrix::identity(d, d)).expect("identity covariance")
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sample(&self, count: usize, rng: &mut dyn RngCore) -> Result<Field> {
        if count == 0 {
            return Err(Error::InvalidParameter(
                "sample count must be positive".into(),
            ));
        }
        let d = self.mean.len();
        let mut out = Field::zeros(count, d);
        for s in 0..count {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            let x = &self.cov_factor * z;
            for (o, (xi, mi)) in out.row_mut(s).iter_mut().zip(x.iter().zip(&self.mean)) {
                *o = xi + mi;
            }
        }
        Ok(out)
    }
}

impl Target for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn name(&self) -> &str {
        "gaussian"
    }

    fn residuals(&self, x: &[f64]) -> DVector<f64> {
        let diff = DVector::from_fn(self.dim(), |i, _| x[i] - self.mean[i]);
        self.prec_factor.tr_mul(&diff) * std::f64::consts::FRAC_1_SQRT_2
    }

    fn residual_jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.prec_factor.transpose() * std::f64::consts::FRAC_1_SQRT_2
    }

    fn residual_curvature(&self, _x: &[f64], _r: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }

    fn sample_ground_truth(&self, count: usize, rng: &mut dyn RngCore) -> Option<Result<Field>> {
        Some(self.sample(count, rng))
    }
}

/// Serializable target selection, tagged by `name`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TargetSpec {
    HybridRosenbrock(HybridRosenbrockParams),
    DoubleBanana(DoubleBananaParams),
    Gaussian(GaussianParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    /// Row-major covariance; identity when absent.
    #[serde(default)]
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl TargetSpec {
    pub fn build(&self) -> Result<Box<dyn Target>> {
        Ok(match self {
            TargetSpec::HybridRosenbrock(p) => Box::new(HybridRosenbrock::new(p.clone())?),
            TargetSpec::DoubleBanana(p) => Box::new(DoubleBanana::new(p.clone())?),
            TargetSpec::Gaussian(p) => {
                let d = p.mean.len();
                let cov = match &p.covariance {
                    None => DMatrix::identity(d, d),
                    Some(rows) => {
                        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                            return Err(Error::InvalidParameter(
                                "gaussian covariance must be d x d".into(),
                            ));
                        }
                        DMatrix::from_fn(d, d, |i, j| rows[i][j])
                    }
                };
                Box::new(Gaussian::new(p.mean.clone(), cov)?)
            }
        })
    }

    pub fn dim(&self) -> Result<usize> {
        match self {
            TargetSpec::HybridRosenbrock(p) => p.dim(),
            TargetSpec::DoubleBanana(_) => Ok(2),
            TargetSpec::Gaussian(p) => Ok(p.mean.len()),
        }
    }
}

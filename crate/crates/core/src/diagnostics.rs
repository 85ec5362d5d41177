//! Sample-quality diagnostics: MMD, moments, P-P curves and pooling.
//!
//! Sample sets are [`Field`]s with one sample per row.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config_space::{Ensemble, Field};
use crate::error::{Error, Result};

/// Bandwidth of the MMD kernel `exp(-|x - y|^2 / (2 s))`, on the squared scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median squared pairwise distance of the pooled samples.
    Auto,
}

/// Points per set used by the median heuristic.
const MEDIAN_SUBSET: usize = 1000;

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn strided(samples: &Field) -> Vec<&[f64]> {
    let step = samples.n().div_ceil(MEDIAN_SUBSET).max(1);
    samples.rows().step_by(step).collect()
}

/// Median heuristic over distinct pairs of the pooled set. Sets larger than
/// 1000 rows are thinned by a fixed stride first.
pub fn median_bandwidth(x: &Field, y: &Field) -> Result<f64> {
    let mut points = strided(x);
    points.extend(strided(y));
    if points.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: points.len(),
        });
    }
    let mut dists: Vec<f64> = (0..points.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let points = &points;
            (i + 1..points.len()).map(move |j| squared_distance(points[i], points[j]))
        })
        .collect();
    let mid = dists.len() / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(*median)
}

fn kernel_sum(x: &Field, y: &Field, scale: f64) -> f64 {
    let rows: Vec<f64> = x
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|a| {
            y.rows()
                .map(|b| (-squared_distance(a, b) * scale).exp())
                .sum()
        })
        .collect();
    rows.iter().sum()
}

/// Biased (V-statistic) squared MMD with a squared-exponential kernel.
///
/// `mmd(x, x) == 0` and `mmd(x, y) == mmd(y, x)` hold exactly.
pub fn mmd(x: &Field, y: &Field, bandwidth: Bandwidth) -> Result<f64> {
    if x.n() == 0 || y.n() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if x.d() != y.d() {
        return Err(Error::DimensionMismatch {
            expected: x.d(),
            got: y.d(),
        });
    }
    let s = match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Auto => median_bandwidth(x, y)?,
    };
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "MMD bandwidth must be positive, got {s}"
        )));
    }
    let scale = 0.5 / s;
    let (nx, ny) = (x.n() as f64, y.n() as f64);
    let xx = kernel_sum(x, x, scale) / (nx * nx);
    let yy = kernel_sum(y, y, scale) / (ny * ny);
    let xy = 0.5 * (kernel_sum(x, y, scale) + kernel_sum(y, x, scale)) / (nx * ny);
    Ok((xx + yy - 2.0 * xy).max(0.0))
}

/// Per-dimension mean and population (`1/n`) variance.
pub fn ensemble_moments(samples: &Field) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = samples.n();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let d = samples.d();
    let mut mean = vec![0.0; d];
    for row in samples.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in samples.rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    Ok((mean, var))
}

/// Number of probability levels on a P-P curve.
pub const PP_LEVELS: usize = 100;

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// P-P curve per dimension: at levels `p = 1/101, ..., 100/101`, `q` is the
/// fraction of `samples` at or below the `p`-quantile of `truth`.
pub fn pp_curve(samples: &Field, truth: &Field) -> Result<Vec<Vec<(f64, f64)>>> {
    for set in [samples, truth] {
        if set.n() < 10 {
            return Err(Error::InsufficientSamples {
                needed: 10,
                got: set.n(),
            });
        }
    }
    if samples.d() != truth.d() {
        return Err(Error::DimensionMismatch {
            expected: truth.d(),
            got: samples.d(),
        });
    }
    let column = |f: &Field, i: usize| {
        let mut c: Vec<f64> = f.rows().map(|r| r[i]).collect();
        c.sort_by(f64::total_cmp);
        c
    };
    (0..truth.d())
        .map(|i| {
            let t = column(truth, i);
            let s = column(samples, i);
            Ok((0..PP_LEVELS)
                .map(|k| {
                    let p = (k + 1) as f64 / (PP_LEVELS + 1) as f64;
                    let x = quantile(&t, p);
                    let below = s.partition_point(|v| *v <= x);
                    (p, below as f64 / s.len() as f64)
                })
                .collect())
        })
        .collect()
}

/// Largest `|q - p|` over every dimension of a P-P curve.
pub fn pp_sup_deviation(curve: &[Vec<(f64, f64)>]) -> f64 {
    curve
        .iter()
        .flatten()
        .map(|(p, q)| (q - p).abs())
        .fold(0.0, f64::max)
}

/// Concatenate the final `last` ensembles of a trace, oldest first.
pub fn pool_samples(trace: &[Ensemble], last: usize) -> Result<Field> {
    if last == 0 || last > trace.len() {
        return Err(Error::OutOfRange(format!(
            "cannot pool the last {last} of {} ensembles",
            trace.len()
        )));
    }
    let tail = &trace[trace.len() - last..];
    let d = tail[0].d();
    let mut data = Vec::with_capacity(tail.iter().map(|e| e.n() * d).sum());
    for e in tail {
        if e.d() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: e.d(),
            });
        }
        data.extend_from_slice(e.positions.as_slice());
    }
    Field::from_vec(data.len() / d, d, data)
}

/// Means and variances recorded once per iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentTrace {
    pub iterations: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl MomentTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, ensemble: &Ensemble) -> Result<()> {
        let (m, v) = ensemble_moments(&ensemble.positions)?;
        self.iterations.push(ensemble.iteration);
        self.means.push(m);
        self.variances.push(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }
}

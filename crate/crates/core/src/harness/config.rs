use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::kernels::{KernelSpec, MetricMode};
use crate::svn::SvnFlags;
use crate::svn_cg::CgOptions;
use crate::targets::TargetSpec;

/// Sampler selected by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Svgd,
    Ssvgd,
    /// Deterministic SVN with the dense damped Hessian.
    Svn,
    SvnBd,
    SsvnChol,
    SsvnCg,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Svgd,
        Method::Ssvgd,
        Method::Svn,
        Method::SvnBd,
        Method::SsvnChol,
        Method::SsvnCg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Svgd => "svgd",
            Method::Ssvgd => "ssvgd",
            Method::Svn => "svn",
            Method::SvnBd => "svn_bd",
            Method::SsvnChol => "ssvn_chol",
            Method::SsvnCg => "ssvn_cg",
        }
    }

    pub fn is_newton(self) -> bool {
        !matches!(self, Method::Svgd | Method::Ssvgd)
    }

    fn default_tau(self) -> f64 {
        match self {
            Method::Ssvgd => 0.01,
            _ => 0.1,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown method `{s}`, expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub bandwidth: f64,
    pub metric_mode: MetricMode,
    /// Row-major metric, required for the `fixed` mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub uniform_low: f64,
    pub uniform_high: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            uniform_low: -6.0,
            uniform_high: 6.0,
        }
    }
}

/// Reference moments for recording when a run first matches them.
///
/// At iteration `t >= window` the ensembles of iterations `t - window + 1..=t`
/// are pooled; the run has converged once every mean is within
/// `mean_tol` reference standard deviations and every variance within
/// `variance_rel_tol` relative error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    #[serde(default = "Reference::default_mean_tol")]
    pub mean_tol: f64,
    #[serde(default = "Reference::default_variance_rel_tol")]
    pub variance_rel_tol: f64,
    #[serde(default = "Reference::default_window")]
    pub window: usize,
}

impl Reference {
    fn default_mean_tol() -> f64 {
        0.2
    }

    fn default_variance_rel_tol() -> f64 {
        0.3
    }

    fn default_window() -> usize {
        1
    }

    /// Whether the given moments are within tolerance.
    pub fn matches(&self, mean: &[f64], variance: &[f64]) -> bool {
        let means_ok = mean
            .iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .all(|((m, r), v)| (m - r).abs() <= self.mean_tol * v.sqrt());
        let vars_ok = variance
            .iter()
            .zip(&self.variance)
            .all(|(v, r)| (v - r).abs() <= self.variance_rel_tol * r);
        means_ok && vars_ok
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    pub target: TargetSpec,
    #[serde(rename = "N")]
    pub particles: usize,
    #[serde(rename = "L")]
    pub iterations: usize,
    pub tau: f64,
    pub lambda: f64,
    pub kernel: KernelConfig,
    pub init: InitConfig,
    pub seed: u64,
    pub record_every: usize,
    pub pool_last: usize,
    pub cg: CgOptions,
    pub svn: SvnFlags,
    pub write_binary: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKernel {
    bandwidth: Option<f64>,
    metric_mode: Option<MetricMode>,
    metric: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    method: Option<String>,
    target: TargetSpec,
    #[serde(rename = "N", alias = "particles")]
    particles: usize,
    #[serde(rename = "L", alias = "iterations")]
    iterations: usize,
    tau: Option<f64>,
    lambda: Option<f64>,
    #[serde(default)]
    kernel: RawKernel,
    #[serde(default)]
    init: InitConfig,
    #[serde(default)]
    seed: u64,
    record_every: Option<usize>,
    pool_last: Option<usize>,
    #[serde(default)]
    cg: CgOptions,
    #[serde(default)]
    svn: SvnFlags,
    #[serde(default)]
    write_binary: bool,
    reference: Option<Reference>,
}

/// Why a configuration document was rejected.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error at `{path}` (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// Parse a JSON configuration, filling documented defaults and checking
/// invariants. Unknown keys are errors.
pub fn parse_config(text: &str) -> Result<SamplerConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::Parse {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    resolve(raw)
}

fn resolve(raw: RawConfig) -> Result<SamplerConfig, ConfigError> {
    let method: Method = match raw.method.as_deref().map(str::trim) {
        None | Some("") => return Err(invalid("method", "a sampler method is required")),
        Some(name) => name.parse().map_err(|e: String| invalid("method", e))?,
    };
    let d = raw
        .target
        .dim()
        .map_err(|e| invalid("target", e.to_string()))?;
    let metric_mode = raw.kernel.metric_mode.unwrap_or_default();
    let config = SamplerConfig {
        method,
        particles: raw.particles,
        iterations: raw.iterations,
        tau: raw.tau.unwrap_or(method.default_tau()),
        lambda: raw.lambda.unwrap_or(0.01),
        kernel: KernelConfig {
            bandwidth: raw.kernel.bandwidth.unwrap_or(d as f64),
            metric_mode,
            metric: raw.kernel.metric,
        },
        init: raw.init,
        seed: raw.seed,
        record_every: raw.record_every.unwrap_or(1),
        pool_last: raw.pool_last.unwrap_or(raw.iterations.min(100)),
        cg: raw.cg,
        svn: raw.svn,
        write_binary: raw.write_binary,
        reference: raw.reference,
        target: raw.target,
    };
    config.validate()?;
    Ok(config)
}

impl SamplerConfig {
    /// Check the invariants `parse_config` enforces.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self
            .target
            .dim()
            .map_err(|e| invalid("target", e.to_string()))?;
        self.target
            .build()
            .map_err(|e| invalid("target", e.to_string()))?;
        if self.particles < 1 {
            return Err(invalid("N", "need at least one particle"));
        }
        if self.iterations < 1 {
            return Err(invalid("L", "need at least one iteration"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid("tau", "step size must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", "damping must be non-negative"));
        }
        if !(self.init.uniform_low < self.init.uniform_high)
            || !self.init.uniform_low.is_finite()
            || !self.init.uniform_high.is_finite()
        {
            return Err(invalid("init", "uniform_low must be below uniform_high"));
        }
        if self.record_every < 1 {
            return Err(invalid("record_every", "must be at least 1"));
        }
        if self.pool_last < 1 || self.pool_last > self.iterations {
            return Err(invalid("pool_last", "must lie in 1..=L"));
        }
        if !(self.cg.rel_tol > 0.0) {
            return Err(invalid("cg.rel_tol", "must be positive"));
        }
        if self.cg.max_iter == Some(0) {
            return Err(invalid("cg.max_iter", "must be at least 1"));
        }
        match (self.kernel.metric_mode, &self.kernel.metric) {
            (MetricMode::Fixed, None) => {
                return Err(invalid(
                    "kernel.metric",
                    "the fixed metric mode needs a metric",
                ))
            }
            (MetricMode::Fixed, Some(_)) => {}
            (_, Some(_)) => {
                return Err(invalid(
                    "kernel.metric",
                    "a metric is only used with the fixed mode",
                ))
            }
            _ => {}
        }
        self.kernel_spec(d)?;
        if matches!(self.method, Method::SsvnChol | Method::SsvnCg)
            && !(self.svn.gauss_newton && self.svn.h2_block_diagonal)
        {
            return Err(invalid(
                "svn",
                "stochastic SVN needs gauss_newton and h2_block_diagonal",
            ));
        }
        if self.method == Method::SsvnCg && !self.svn.h2_block_diagonal {
            return Err(invalid("svn.h2_block_diagonal", "required by ssvn_cg"));
        }
        if let Some(r) = &self.reference {
            if r.mean.len() != d || r.variance.len() != d {
                return Err(invalid(
                    "reference",
                    format!("moments must have length {d}"),
                ));
            }
            if r.variance.iter().any(|v| !(*v > 0.0)) {
                return Err(invalid("reference.variance", "must be positive"));
            }
            if r.window < 1 || r.window > self.iterations {
                return Err(invalid("reference.window", "must lie in 1..=L"));
            }
        }
        Ok(())
    }

    /// Kernel for a target of dimension `d`.
    pub fn kernel_spec(&self, d: usize) -> Result<KernelSpec, ConfigError> {
        let metric = match &self.kernel.metric {
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(invalid("kernel.metric", format!("must be {d} x {d}")));
                }
                DMatrix::from_fn(d, d, |i, j| rows[i][j])
            }
            None => DMatrix::identity(d, d),
        };
        KernelSpec::new(self.kernel.bandwidth, metric, self.kernel.metric_mode)
            .map_err(|e| invalid("kernel", e.to_string()))
    }

    /// Canonical JSON of the resolved configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Hex SHA-256 of the canonical JSON of a resolved configuration.
pub fn config_hash(config: &SamplerConfig) -> String {
    let digest = Sha256::digest(config.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

//! Reproducible runs: configuration, seeded execution and artifact files.
//!
//! A run directory holds
//!
//! * `meta.jsonl`: a `start` record with the resolved configuration and its
//!   SHA-256 hash, then a `finish` record with status and evaluation counts;
//! * `metrics.jsonl`: per-iteration ensemble means and variances;
//! * `trace.csv`: ensemble snapshots, header `iter,particle,x1..xd`;
//! * `samples.csv`: the pooled final ensembles in the same layout, plus
//!   `samples.bin` and `samples.json` when binary output is enabled.

mod config;
mod io;
mod run;

pub use config::{
    config_hash, parse_config, ConfigError, InitConfig, KernelConfig, Method, Reference,
    SamplerConfig,
};
pub use io::{read_samples, read_samples_binary, write_samples_binary, write_samples_csv};
pub use run::{run, HarnessError, RunArtifacts, RunStatus};

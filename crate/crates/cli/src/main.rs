use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use ssvn::diagnostics::{ensemble_moments, mmd, pp_curve, Bandwidth};
use ssvn::harness::{
    parse_config, read_samples, read_samples_binary, run, write_samples_binary, write_samples_csv,
    RunStatus,
};
use ssvn::random::{substream, Purpose};
use ssvn::{Field, TargetSpec};

#[derive(Parser)]
#[command(
    name = "ssvn",
    version,
    about = "Stein variational samplers and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sampler from a JSON config into a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Draw exact samples from a target that supports it.
    GroundTruth {
        /// JSON target spec, or `name:key=value,...`.
        #[arg(long)]
        target: String,
        #[arg(long)]
        count: usize,
        /// Output file; `.bin` writes binary with a JSON sidecar, anything else CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the squared MMD between two sample files.
    Mmd {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        /// Squared-scale bandwidth, or `auto` for the median heuristic.
        #[arg(long, default_value = "auto")]
        bandwidth: String,
    },
    /// Write P-P curve data as `dimension,p,q` CSV.
    Pp {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-dimension mean and variance.
    Moments {
        #[arg(long)]
        samples: PathBuf,
    },
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn load(path: &Path) -> Result<Field> {
    let samples = if is_binary(path) {
        read_samples_binary(path)?
    } else {
        read_samples(path)?
    };
    Ok(samples)
}

/// Split on commas outside brackets.
fn split_params(text: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in text.char_indices() {
        match c {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    parts
}

fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_owned()))
}

/// Accepts a JSON object or the shorthand `name:key=value,...`.
fn parse_target(text: &str) -> Result<TargetSpec> {
    let text = text.trim();
    let value = if text.starts_with('{') {
        serde_json::from_str(text).context("target spec is not valid JSON")?
    } else {
        let (name, params) = text.split_once(':').unwrap_or((text, ""));
        let mut object = Map::new();
        object.insert("name".into(), Value::String(name.trim().to_owned()));
        for pair in split_params(params)
            .into_iter()
            .filter(|p| !p.trim().is_empty())
        {
            let Some((key, value)) = pair.split_once('=') else {
                bail!("expected key=value in target spec, got `{pair}`");
            };
            object.insert(key.trim().to_owned(), parse_value(value.trim()));
        }
        Value::Object(object)
    };
    serde_json::from_value(value).context("invalid target spec")
}

fn parse_bandwidth(text: &str) -> Result<Bandwidth> {
    if text.eq_ignore_ascii_case("auto") {
        return Ok(Bandwidth::Auto);
    }
    let value: f64 = text
        .parse()
        .with_context(|| format!("bandwidth must be a number or `auto`, got `{text}`"))?;
    Ok(Bandwidth::Fixed(value))
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = parse_config(&text)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let artifacts = run(&cfg, &out, threads)?;
            match artifacts.status {
                RunStatus::Completed => {
                    println!(
                        "completed {} iterations into {} (config {})",
                        cfg.iterations,
                        out.display(),
                        artifacts.config_hash
                    );
                    Ok(ExitCode::SUCCESS)
                }
                RunStatus::Failed { iteration, error } => {
                    eprintln!("run failed at iteration {iteration}: {error}");
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Command::GroundTruth {
            target,
            count,
            out,
            seed,
        } => {
            let spec = parse_target(&target)?;
            let target = spec.build()?;
            let mut rng = substream(seed, Purpose::GroundTruth, 0);
            let Some(samples) = target.sample_ground_truth(count, &mut rng) else {
                bail!("target `{}` has no exact sampler", target.name());
            };
            let samples = samples?;
            if is_binary(&out) {
                write_samples_binary(&out, &samples)?;
            } else {
                write_samples_csv(&out, &samples)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Mmd { x, y, bandwidth } => {
            let value = mmd(&load(&x)?, &load(&y)?, parse_bandwidth(&bandwidth)?)?;
            println!("{value}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Pp {
            samples,
            truth,
            out,
        } => {
            let curve = pp_curve(&load(&samples)?, &load(&truth)?)?;
            let mut file = std::io::BufWriter::new(
                std::fs::File::create(&out)
                    .with_context(|| format!("creating {}", out.display()))?,
            );
            writeln!(file, "dimension,p,q")?;
            for (i, points) in curve.iter().enumerate() {
                for (p, q) in points {
                    writeln!(file, "{},{p},{q}", i + 1)?;
                }
            }
            file.flush()?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Moments { samples } => {
            let (mean, variance) = ensemble_moments(&load(&samples)?)?;
            println!("dimension,mean,variance");
            for (i, (m, v)) in mean.iter().zip(&variance).enumerate() {
                println!("{},{m},{v}", i + 1);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

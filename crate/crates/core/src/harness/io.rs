use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::HarnessError;
use crate::config_space::{Ensemble, Field};

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, HarnessError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| HarnessError::io(path, e))
}

/// CSV writer for `iter,particle,x1..xd` rows.
pub(crate) struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, d: usize) -> Result<Self, HarnessError> {
        let mut w = Self {
            path: path.to_owned(),
            out: create(path)?,
        };
        let mut header = String::from("iter,particle");
        for i in 1..=d {
            header.push_str(&format!(",x{i}"));
        }
        w.line(&header)?;
        Ok(w)
    }

    fn line(&mut self, text: &str) -> Result<(), HarnessError> {
        writeln!(self.out, "{text}").map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn rows(&mut self, iteration: usize, samples: &Field) -> Result<(), HarnessError> {
        for (m, row) in samples.rows().enumerate() {
            let mut text = format!("{iteration},{m}");
            for v in row {
                text.push_str(&format!(",{v}"));
            }
            self.line(&text)?;
        }
        Ok(())
    }

    pub fn ensemble(&mut self, ensemble: &Ensemble) -> Result<(), HarnessError> {
        self.rows(ensemble.iteration, &ensemble.positions)
    }

    pub fn flush(&mut self) -> Result<(), HarnessError> {
        self.out
            .flush()
            .map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// Write samples as CSV with iteration column 0 and the row index as particle.
pub fn write_samples_csv(path: &Path, samples: &Field) -> Result<(), HarnessError> {
    let mut w = CsvWriter::create(path, samples.d())?;
    w.rows(0, samples)?;
    w.flush()
}

fn coordinate_index(name: &str) -> Option<usize> {
    let digits = name.trim().strip_prefix('x')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Read a sample CSV, keeping the `x1..xd` columns in index order.
pub fn read_samples(path: &Path) -> Result<Field, HarnessError> {
    let mut lines = open(path)?.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| HarnessError::io(path, e))?,
        None => return Err(HarnessError::format(path, "empty file")),
    };
    let mut columns: Vec<(usize, usize)> = header
        .split(',')
        .enumerate()
        .filter_map(|(col, name)| coordinate_index(name).map(|i| (i, col)))
        .collect();
    columns.sort_unstable();
    if columns.is_empty() {
        return Err(HarnessError::format(path, "no x<k> columns in header"));
    }
    let expected: Vec<usize> = (1..=columns.len()).collect();
    if columns.iter().map(|c| c.0).ne(expected) {
        return Err(HarnessError::format(
            path,
            "coordinate columns must be x1..xd",
        ));
    }
    let d = columns.len();
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        for &(_, col) in &columns {
            let value = fields
                .get(col)
                .and_then(|f| f.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    HarnessError::format(path, format!("bad value on line {}", lineno + 2))
                })?;
            data.push(value);
        }
    }
    Ok(Field::from_vec(data.len() / d, d, data)?)
}

/// Shape and layout of a binary sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySidecar {
    pub rows: usize,
    pub columns: usize,
    pub dtype: String,
    pub order: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write samples as flat little-endian `f64`, row-major, with a JSON sidecar
/// next to it (same stem, `.json` extension).
pub fn write_samples_binary(path: &Path, samples: &Field) -> Result<(), HarnessError> {
    let mut out = create(path)?;
    for v in samples.as_slice() {
        out.write_all(&v.to_le_bytes())
            .map_err(|e| HarnessError::io(path, e))?;
    }
    out.flush().map_err(|e| HarnessError::io(path, e))?;
    let sidecar = BinarySidecar {
        rows: samples.n(),
        columns: samples.d(),
        dtype: "f64-le".into(),
        order: "row-major".into(),
    };
    let side = sidecar_path(path);
    let mut w = create(&side)?;
    serde_json::to_writer_pretty(&mut w, &sidecar)
        .map_err(|e| HarnessError::format(&side, e.to_string()))?;
    w.flush().map_err(|e| HarnessError::io(&side, e))
}

/// Read a binary sample file written by [`write_samples_binary`].
pub fn read_samples_binary(path: &Path) -> Result<Field, HarnessError> {
    let side = sidecar_path(path);
    let sidecar: BinarySidecar = serde_json::from_reader(open(&side)?)
        .map_err(|e| HarnessError::format(&side, e.to_string()))?;
    if sidecar.dtype != "f64-le" || sidecar.order != "row-major" {
        return Err(HarnessError::format(&side, "unsupported layout"));
    }
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| HarnessError::io(path, e))?;
    if bytes.len() != sidecar.rows * sidecar.columns * 8 {
        return Err(HarnessError::format(path, "size disagrees with sidecar"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Field::from_vec(sidecar.rows, sidecar.columns, data)?)
}

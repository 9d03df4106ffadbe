//! Generalization testing on longer operands, and read/write trace export.

use std::fs;
use std::io::{self, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph};
use crate::controller::Model;
use crate::tasks::{sample_with_length, TaskError, TaskExample, TaskKind};
use crate::training::bits_per_sequence;

/// Operand lengths tested after training on operands of at most 8 bits.
pub const DEFAULT_LENGTHS: [usize; 11] = [8, 10, 12, 16, 20, 24, 28, 32, 36, 42, 48];
pub const DEFAULT_TRIALS: usize = 100;
pub const REPORT_HEADER: &str = "length,trials,mean_bits_error,std_bits_error";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("trial count must be positive")]
    NoTrials,
    #[error("{0} model has no memory to trace")]
    NoMemory(&'static str),
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: io::Error },
}

/// Anything that maps an example to output-phase probabilities
/// (number steps followed by the END step).
pub trait Predictor {
    fn predict_example(&self, example: &TaskExample) -> Result<Vec<[f64; 3]>, EvalError>;
}

impl Predictor for Model {
    fn predict_example(&self, example: &TaskExample) -> Result<Vec<[f64; 3]>, EvalError> {
        Ok(self.predict(&example.input, example.target.len())?)
    }
}

/// Returns the target exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleStub;

impl Predictor for OracleStub {
    fn predict_example(&self, example: &TaskExample) -> Result<Vec<[f64; 3]>, EvalError> {
        Ok(example.target.clone())
    }
}

/// Returns the target with the first channel of the first result bit flipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct OneFlipStub;

impl Predictor for OneFlipStub {
    fn predict_example(&self, example: &TaskExample) -> Result<Vec<[f64; 3]>, EvalError> {
        let mut out = example.target.clone();
        out[0][0] = 1.0 - out[0][0];
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub length: usize,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeneralizationReport {
    pub rows: Vec<ReportRow>,
}

impl GeneralizationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.length, r.trials, r.mean, r.std));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        write_file(path.as_ref(), self.to_csv().as_bytes())
    }
}

/// Mean and population standard deviation computed from integer sums, so the
/// result does not depend on trial order.
pub fn summarize(errors: &[usize]) -> (f64, f64) {
    let n = errors.len() as f64;
    let sum: u128 = errors.iter().map(|&e| e as u128).sum();
    let sq: u128 = errors.iter().map(|&e| (e as u128) * (e as u128)).sum();
    let mean = sum as f64 / n;
    let var = (sq as f64 * n - (sum as f64) * (sum as f64)) / (n * n);
    (mean, var.max(0.0).sqrt())
}

/// Scores `trials` fresh examples at every operand length. Examples for a
/// length come from their own ChaCha stream, so a row does not depend on
/// which other lengths are requested.
pub fn evaluate_generalization<P: Predictor + Sync>(
    model: &P,
    kind: TaskKind,
    lengths: &[usize],
    trials: usize,
    seed: u64,
) -> Result<GeneralizationReport, EvalError> {
    if trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(len as u64);
        let examples = (0..trials)
            .map(|_| sample_with_length(&mut rng, len, kind))
            .collect::<Result<Vec<_>, _>>()?;
        let errors = examples
            .par_iter()
            .map(|ex| Ok(bits_per_sequence(&model.predict_example(ex)?, &ex.target)))
            .collect::<Result<Vec<_>, EvalError>>()?;
        let (mean, std) = summarize(&errors);
        rows.push(ReportRow {
            length: len,
            trials,
            mean,
            std,
        });
    }
    Ok(GeneralizationReport { rows })
}

/// Post-addressing weightings for every step of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryTrace {
    /// `read[t][i]`: read weighting of row `i` at step `t`.
    pub read: Vec<Vec<f64>>,
    pub write: Vec<Vec<f64>>,
    /// Step at which the END input is consumed.
    pub marker: usize,
}

pub fn record_trace(model: &Model, example: &TaskExample) -> Result<MemoryTrace, EvalError> {
    if !model.spec.is_ntm() {
        return Err(EvalError::NoMemory(model.spec.kind.architecture_name()));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false)?;
    let ep = model.run_episode(&mut g, &bound, &example.input, example.target.len())?;
    let rows = |vs: &[crate::autodiff::Var]| vs.iter().map(|&v| g.data(v).to_vec()).collect();
    Ok(MemoryTrace {
        read: rows(&ep.read_weightings),
        write: rows(&ep.write_weightings),
        marker: example.input.len() - 1,
    })
}

/// Grey level for a weighting: `round(255·w)`, clamped to `0..=255`.
pub fn pixel(w: f64) -> u8 {
    (255.0 * w).round().clamp(0.0, 255.0) as u8
}

/// Binary PGM with memory rows down and time across.
pub fn to_pgm(matrix: &[Vec<f64>]) -> Vec<u8> {
    let width = matrix.len();
    let height = matrix.first().map_or(0, |r| r.len());
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for i in 0..height {
        out.extend(matrix.iter().map(|row| pixel(row[i])));
    }
    out
}

/// Parses a P5 image written by [`to_pgm`]; returns `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes.get(pos)?.is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let w: usize = fields[1].parse().ok()?;
    let h: usize = fields[2].parse().ok()?;
    let px = bytes.get(pos..pos + w * h)?.to_vec();
    Some((w, h, px))
}

pub fn to_csv(matrix: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    let err = |source| EvalError::Write {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(err)?;
    f.write_all(bytes).map_err(err)
}

/// Writes `read_weights.{csv,pgm}`, `write_weights.{csv,pgm}` and `marker.txt` into `dir`.
pub fn export_heatmap(trace: &MemoryTrace, dir: impl AsRef<Path>) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| EvalError::Write {
        path: dir.display().to_string(),
        source,
    })?;
    write_file(&dir.join("read_weights.csv"), to_csv(&trace.read).as_bytes())?;
    write_file(&dir.join("write_weights.csv"), to_csv(&trace.write).as_bytes())?;
    write_file(&dir.join("read_weights.pgm"), &to_pgm(&trace.read))?;
    write_file(&dir.join("write_weights.pgm"), &to_pgm(&trace.write))?;
    write_file(&dir.join("marker.txt"), format!("{}\n", trace.marker).as_bytes())
}

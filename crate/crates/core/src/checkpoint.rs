//! Binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "NTMA"  u32 version  u32 manifest_len  manifest (UTF-8 key=value lines)
//! f64 × P   parameters
//! f64 × P   RMSProp mean-square accumulator
//! u32 × W   bits-per-sequence window, oldest first
//! ```
//!
//! `P` and `W` are recorded in the manifest, along with one
//! `param <name> <offset> <len> <dims>` line per parameter group.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::controller::{ControllerKind, ControllerSpec, Model, ParamLayout};
use crate::tasks::TaskKind;
use crate::training::{OptimizerState, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"NTMA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("bad checkpoint manifest: {0}")]
    Manifest(String),
}

/// Training progress carried alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub task: TaskKind,
    pub seed: u64,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub clip: f64,
    pub max_bits: usize,
    pub curve_window: usize,
    pub examples_seen: u64,
    pub data_word_pos: u128,
    pub window: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub train: TrainState,
}

impl Checkpoint {
    pub(crate) fn from_trainer(t: &Trainer) -> Self {
        let c = &t.config;
        Checkpoint {
            model: t.model.clone(),
            optimizer: t.optimizer.clone(),
            train: TrainState {
                task: c.task,
                seed: c.seed,
                learning_rate: c.learning_rate,
                rmsprop_decay: c.rmsprop_decay,
                clip: c.clip,
                max_bits: c.max_bits,
                curve_window: c.curve_window,
                examples_seen: t.examples_seen,
                data_word_pos: t.data_word_pos(),
                window: t.window_contents(),
            },
        }
    }

    /// A fresh-model checkpoint, e.g. for evaluating an untrained network.
    pub fn untrained(model: Model, task: TaskKind) -> Self {
        let d = TrainConfig::default();
        Checkpoint {
            optimizer: OptimizerState::new(model.params.len()),
            model,
            train: TrainState {
                task,
                seed: d.seed,
                learning_rate: d.learning_rate,
                rmsprop_decay: d.rmsprop_decay,
                clip: d.clip,
                max_bits: d.max_bits,
                curve_window: d.curve_window,
                examples_seen: 0,
                data_word_pos: 0,
                window: Vec::new(),
            },
        }
    }

    /// The stored run settings, with output paths and run length taken from `base`.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let s = &self.model.spec;
        let t = &self.train;
        TrainConfig {
            task: t.task,
            controller: s.kind,
            hidden: s.hidden_size,
            learning_rate: t.learning_rate,
            rmsprop_decay: t.rmsprop_decay,
            max_bits: t.max_bits,
            mem_rows: s.mem_rows,
            mem_cols: s.mem_cols,
            clip: t.clip,
            curve_window: t.curve_window,
            seed: t.seed,
            ..base.clone()
        }
    }

    fn manifest(&self) -> String {
        let s = &self.model.spec;
        let t = &self.train;
        let mut m = String::new();
        let mut kv = |k: &str, v: String| {
            m.push_str(k);
            m.push('=');
            m.push_str(&v);
            m.push('\n');
        };
        kv("controller", s.kind.to_string());
        kv("hidden", s.hidden_size.to_string());
        kv("input", s.input_size.to_string());
        kv("output", s.output_size.to_string());
        kv("mem_rows", s.mem_rows.to_string());
        kv("mem_cols", s.mem_cols.to_string());
        kv("task", t.task.to_string());
        kv("seed", t.seed.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("rmsprop_decay", t.rmsprop_decay.to_string());
        kv("clip", t.clip.to_string());
        kv("max_bits", t.max_bits.to_string());
        kv("curve_window", t.curve_window.to_string());
        kv("examples_seen", t.examples_seen.to_string());
        kv("optimizer_step", self.optimizer.step.to_string());
        kv("data_word_pos", t.data_word_pos.to_string());
        kv("param_count", self.model.params.len().to_string());
        kv("window_len", t.window.len().to_string());
        for g in self.model.layout.groups() {
            let dims: Vec<String> = g.shape.iter().map(|d| d.to_string()).collect();
            m.push_str(&format!(
                "param {} {} {} {}\n",
                g.name,
                g.offset,
                g.len(),
                dims.join("x")
            ));
        }
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let p = self.model.params.len();
        let mut out = Vec::with_capacity(12 + manifest.len() + 16 * p + 4 * self.train.window.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for v in self.model.params.iter().chain(&self.optimizer.mean_square) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for b in &self.train.window {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mlen = r.u32()? as usize;
        let manifest = std::str::from_utf8(r.take(mlen)?).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

        let mut kv = HashMap::new();
        let mut params = Vec::new();
        for line in manifest.lines().filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("param ") {
                params.push(rest.to_string());
            } else if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            } else {
                return Err(CheckpointError::Manifest(format!("unreadable line {line:?}")));
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| CheckpointError::Manifest(format!("missing {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, CheckpointError> {
            v.parse()
                .map_err(|_| CheckpointError::Manifest(format!("bad value for {k}: {v:?}")))
        }
        macro_rules! field {
            ($k:literal) => {
                num($k, get($k)?)?
            };
        }

        let kind: ControllerKind = get("controller")?
            .parse()
            .map_err(|_| CheckpointError::Manifest("unknown controller".into()))?;
        let mut spec = ControllerSpec::new(kind)
            .with_hidden(field!("hidden"))
            .with_memory(field!("mem_rows"), field!("mem_cols"));
        spec.input_size = field!("input");
        spec.output_size = field!("output");
        let layout = ParamLayout::for_spec(&spec);
        check_layout(&layout, &params)?;

        let p: usize = field!("param_count");
        if p != layout.total() {
            return Err(CheckpointError::Manifest(format!(
                "param_count {p} does not match layout total {}",
                layout.total()
            )));
        }
        let values = r.f64s(p)?;
        let mean_square = r.f64s(p)?;
        let wlen: usize = field!("window_len");
        let window = (0..wlen).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Manifest("trailing bytes".into()));
        }

        let mut model = Model::zeros(spec);
        model.params = values;
        Ok(Checkpoint {
            model,
            optimizer: OptimizerState {
                mean_square,
                step: field!("optimizer_step"),
            },
            train: TrainState {
                task: get("task")?
                    .parse()
                    .map_err(|_| CheckpointError::Manifest("unknown task".into()))?,
                seed: field!("seed"),
                learning_rate: field!("learning_rate"),
                rmsprop_decay: field!("rmsprop_decay"),
                clip: field!("clip"),
                max_bits: field!("max_bits"),
                curve_window: field!("curve_window"),
                examples_seen: field!("examples_seen"),
                data_word_pos: field!("data_word_pos"),
                window,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_layout(layout: &ParamLayout, lines: &[String]) -> Result<(), CheckpointError> {
    if lines.len() != layout.groups().len() {
        return Err(CheckpointError::Manifest(format!(
            "{} parameter groups listed, architecture has {}",
            lines.len(),
            layout.groups().len()
        )));
    }
    for (line, g) in lines.iter().zip(layout.groups()) {
        let dims: Vec<String> = g.shape.iter().map(|d| d.to_string()).collect();
        let expected = format!("{} {} {} {}", g.name, g.offset, g.len(), dims.join("x"));
        if *line != expected {
            return Err(CheckpointError::Manifest(format!(
                "parameter group {line:?} does not match {expected:?}"
            )));
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::sample_example;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: ControllerKind) -> Model {
        let spec = ControllerSpec::new(kind).with_hidden(12).with_memory(10, 5);
        Model::new(spec, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in [
            ControllerKind::Feedforward,
            ControllerKind::Lstm,
            ControllerKind::Baseline,
        ] {
            let mut ck = Checkpoint::untrained(small(kind), TaskKind::Mul);
            ck.optimizer
                .mean_square
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = (i as f64).sqrt() / 7.0);
            ck.optimizer.step = 99;
            ck.train.window = vec![0, 3, 1];
            ck.train.data_word_pos = u64::MAX as u128 + 5;
            ck.train.learning_rate = 0.1 + 0.2;
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let model = small(ControllerKind::Feedforward);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ntma");
        Checkpoint::untrained(model.clone(), TaskKind::Add).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap().model;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let ex = sample_example(&mut rng, 6, TaskKind::Add).unwrap();
            let a = model.predict(&ex.input, ex.target.len()).unwrap();
            let b = loaded.predict(&ex.input, ex.target.len()).unwrap();
            assert!(a
                .iter()
                .flatten()
                .zip(b.iter().flatten())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = Checkpoint::untrained(small(ControllerKind::Lstm), TaskKind::Add).to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(b"XXXX\x01\0\0\0"),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated)
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&v),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        let at = bytes.windows(9).position(|w| w == b"hidden=12").unwrap();
        let mut edited = bytes.clone();
        edited[at + 8] = b'3';
        assert!(matches!(
            Checkpoint::from_bytes(&edited),
            Err(CheckpointError::Manifest(_))
        ));
    }
}

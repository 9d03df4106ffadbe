//! Objective, metric, RMSProp and the online training loop.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::controller::{ControllerKind, ControllerSpec, Model};
use crate::tasks::{sample_example, TaskError, TaskKind};

pub const RMSPROP_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite gradient in parameter group {group} (flat index {index})")]
    NonFiniteGradient { group: String, index: usize },
    #[error("non-finite loss {loss} at example {example}; last good state saved to {saved:?}")]
    NonFiniteLoss {
        example: u64,
        loss: f64,
        saved: Option<PathBuf>,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub controller: ControllerKind,
    pub hidden: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub examples: u64,
    pub max_bits: usize,
    pub mem_rows: usize,
    pub mem_cols: usize,
    pub clip: f64,
    pub curve_window: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    /// Save a checkpoint every this many examples; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::Add,
            controller: ControllerKind::Feedforward,
            hidden: ControllerKind::Feedforward.default_hidden(),
            learning_rate: 1e-4,
            rmsprop_decay: 0.95,
            examples: 1_000_000,
            max_bits: 8,
            mem_rows: 128,
            mem_cols: 20,
            clip: 10.0,
            curve_window: 1000,
            seed: 0,
            checkpoint: None,
            curve: None,
            checkpoint_every: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return bad("rmsprop decay must lie in (0, 1)");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip bound must be positive");
        }
        if self.max_bits == 0 || self.max_bits > crate::tasks::MAX_OPERAND_BITS {
            return bad("max bits must be in 1..=64");
        }
        if self.hidden == 0 || self.mem_cols == 0 || self.mem_rows < crate::memory::SHIFT_WIDTH {
            return bad("hidden size and memory columns must be positive and memory needs at least 3 rows");
        }
        if self.curve_window == 0 {
            return bad("curve window must be positive");
        }
        Ok(())
    }

    pub fn spec(&self) -> ControllerSpec {
        ControllerSpec::new(self.controller)
            .with_hidden(self.hidden)
            .with_memory(self.mem_rows, self.mem_cols)
    }

    pub fn rmsprop(&self) -> RmsProp {
        RmsProp {
            learning_rate: self.learning_rate,
            decay: self.rmsprop_decay,
            clip: self.clip,
        }
    }

    /// `key=value` lines for every setting.
    pub fn describe(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into())
        };
        let mut s = String::new();
        let _ = writeln!(s, "task={}", self.task);
        let _ = writeln!(s, "controller={}", self.controller);
        let _ = writeln!(s, "hidden={}", self.hidden);
        let _ = writeln!(s, "lr={}", self.learning_rate);
        let _ = writeln!(s, "rmsprop-decay={}", self.rmsprop_decay);
        let _ = writeln!(s, "examples={}", self.examples);
        let _ = writeln!(s, "max-bits={}", self.max_bits);
        let _ = writeln!(s, "mem-rows={}", self.mem_rows);
        let _ = writeln!(s, "mem-cols={}", self.mem_cols);
        let _ = writeln!(s, "clip={}", self.clip);
        let _ = writeln!(s, "curve-window={}", self.curve_window);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "checkpoint={}", path(&self.checkpoint));
        let _ = writeln!(s, "curve={}", path(&self.curve));
        let _ = writeln!(s, "checkpoint-every={}", self.checkpoint_every);
        s
    }
}

/// Summed binary cross entropy over the output phase.
pub fn bce_loss(g: &mut Graph, outputs: &[Var], target: &[[f64; 3]]) -> Result<Var, AutodiffError> {
    if outputs.len() != target.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "bce_loss",
            lhs: vec![outputs.len()],
            rhs: vec![target.len()],
        });
    }
    let pred = g.concat(outputs)?;
    let flat: Vec<f64> = target.iter().flatten().copied().collect();
    g.bce(pred, &flat)
}

/// Channel bits whose thresholded prediction differs from the target over the
/// number steps of the output phase. The trailing END step is not counted.
pub fn bits_per_sequence(pred: &[[f64; 3]], target: &[[f64; 3]]) -> usize {
    assert_eq!(pred.len(), target.len(), "prediction and target lengths differ");
    let steps = target.len().saturating_sub(1);
    pred[..steps]
        .iter()
        .zip(&target[..steps])
        .flat_map(|(p, t)| p.iter().zip(t))
        .filter(|(&p, &t)| (p >= 0.5) != (t >= 0.5))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub clip: f64,
}

/// Running mean of squared gradients plus the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub mean_square: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            mean_square: vec![0.0; n],
            step: 0,
        }
    }
}

/// Clips each gradient to `[-clip, clip]`, then
/// `v ← γv + (1-γ)g²; θ ← θ - α g / √(v + ε)`.
///
/// Nothing is updated if any gradient is non-finite; the error carries the
/// offending flat index.
pub fn rmsprop_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, opt: &RmsProp) -> Result<(), usize> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.mean_square.len());
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(i);
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.mean_square.iter_mut()) {
        let g = g.clamp(-opt.clip, opt.clip);
        *v = opt.decay * *v + (1.0 - opt.decay) * g * g;
        *p -= opt.learning_rate * g / (*v + RMSPROP_EPS).sqrt();
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub example: u64,
    pub loss: f64,
    pub window_mean: f64,
}

pub const CURVE_HEADER: &str = "example_index,bce_loss,bits_per_seq_window_mean";

pub fn curve_line(p: &CurvePoint) -> String {
    format!("{},{},{}", p.example, p.loss, p.window_mean)
}

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;

/// Online trainer; one example per update.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub examples_seen: u64,
    data_rng: ChaCha8Rng,
    window: VecDeque<u32>,
    window_sum: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(INIT_STREAM);
        let model = Model::new(config.spec(), &mut init_rng);
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
        data_rng.set_stream(DATA_STREAM);
        Ok(Trainer {
            optimizer: OptimizerState::new(model.params.len()),
            model,
            config,
            examples_seen: 0,
            data_rng,
            window: VecDeque::new(),
            window_sum: 0,
        })
    }

    /// Continues a run from a checkpoint. `examples`, paths and the checkpoint
    /// interval come from `config`; everything else from the checkpoint.
    pub fn resume(ckpt: Checkpoint, config: &TrainConfig) -> Result<Self, TrainError> {
        let cfg = ckpt.train_config(config);
        cfg.validate()?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        data_rng.set_stream(DATA_STREAM);
        data_rng.set_word_pos(ckpt.train.data_word_pos);
        let window: VecDeque<u32> = ckpt.train.window.iter().copied().collect();
        let window_sum = window.iter().map(|&b| b as u64).sum();
        Ok(Trainer {
            config: cfg,
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            examples_seen: ckpt.train.examples_seen,
            data_rng,
            window,
            window_sum,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(self)
    }

    pub(crate) fn data_word_pos(&self) -> u128 {
        self.data_rng.get_word_pos()
    }

    pub(crate) fn window_contents(&self) -> Vec<u32> {
        self.window.iter().copied().collect()
    }

    /// Samples, runs, backpropagates and updates once.
    pub fn step(&mut self) -> Result<CurvePoint, TrainError> {
        let example = sample_example(&mut self.data_rng, self.config.max_bits, self.config.task)?;
        let out_steps = example.target.len();

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true)?;
        let ep = self.model.run_episode(&mut g, &bound, &example.input, out_steps)?;
        let outputs = ep.output_phase(out_steps).to_vec();
        let loss = bce_loss(&mut g, &outputs, &example.target)?;
        let loss_value = g.item(loss);
        if !loss_value.is_finite() {
            let saved = self.save_checkpoint()?;
            return Err(TrainError::NonFiniteLoss {
                example: self.examples_seen,
                loss: loss_value,
                saved,
            });
        }
        let pred: Vec<[f64; 3]> = outputs
            .iter()
            .map(|&v| {
                let d = g.data(v);
                [d[0], d[1], d[2]]
            })
            .collect();
        g.backward(loss)?;
        let grads = g.grad(bound.flat());
        rmsprop_step(
            &mut self.model.params,
            &grads,
            &mut self.optimizer,
            &self.config.rmsprop(),
        )
        .map_err(|index| TrainError::NonFiniteGradient {
            group: self
                .model
                .layout
                .group_of(index)
                .map(|g| g.name.clone())
                .unwrap_or_default(),
            index,
        })?;

        let bits = bits_per_sequence(&pred, &example.target) as u32;
        self.window.push_back(bits);
        self.window_sum += bits as u64;
        if self.window.len() > self.config.curve_window {
            self.window_sum -= self.window.pop_front().unwrap_or(0) as u64;
        }
        let point = CurvePoint {
            example: self.examples_seen,
            loss: loss_value,
            window_mean: self.window_sum as f64 / self.window.len() as f64,
        };
        self.examples_seen += 1;
        Ok(point)
    }

    fn save_checkpoint(&self) -> Result<Option<PathBuf>, TrainError> {
        match &self.config.checkpoint {
            Some(path) => {
                self.checkpoint().save(path)?;
                Ok(Some(path.clone()))
            }
            None => Ok(None),
        }
    }

    /// Trains until `config.examples` examples have been seen in total,
    /// streaming the curve to `config.curve` and checkpointing periodically.
    pub fn run(&mut self) -> Result<Vec<CurvePoint>, TrainError> {
        let mut curve_out = match &self.config.curve {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{CURVE_HEADER}")?;
                Some(w)
            }
            None => None,
        };
        let mut curve = Vec::new();
        while self.examples_seen < self.config.examples {
            let point = self.step()?;
            if let Some(w) = curve_out.as_mut() {
                writeln!(w, "{}", curve_line(&point))?;
            }
            curve.push(point);
            let every = self.config.checkpoint_every;
            if every > 0 && self.examples_seen.is_multiple_of(every) && self.examples_seen < self.config.examples {
                self.save_checkpoint()?;
            }
        }
        if let Some(mut w) = curve_out {
            w.flush()?;
        }
        self.save_checkpoint()?;
        Ok(curve)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub curve: Vec<CurvePoint>,
    pub checkpoint: Checkpoint,
}

pub fn train(config: TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(config)?;
    let curve = trainer.run()?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        model: trainer.model,
        optimizer: trainer.optimizer,
        curve,
    })
}

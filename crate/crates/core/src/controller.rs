//! Controllers, head decoding, the NTM cell and the stacked-LSTM baseline.
//!
//! All trainable scalars of a model live in one flat `Vec<f64>` described by
//! a [`ParamLayout`]. Binding a model to a graph creates a single leaf for the
//! flat vector and slices every named group out of it, so the gradient of that
//! leaf is directly the flat gradient the optimizer consumes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Result, Tensor, Var};
use crate::memory::{self, HeadParams, MemoryState, SHIFT_WIDTH};

pub const IO_SIZE: usize = 3;

/// Added to `softplus` so key strength stays strictly positive.
pub const STRENGTH_EPS: f64 = 1e-6;

/// Half-width of the uniform weight initialisation.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    Feedforward,
    Lstm,
    Baseline,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Feedforward => "ff",
            ControllerKind::Lstm => "lstm",
            ControllerKind::Baseline => "baseline",
        }
    }

    pub fn default_hidden(self) -> usize {
        match self {
            ControllerKind::Baseline => 128,
            _ => 100,
        }
    }

    /// Parameter counts listed for the three reference architectures.
    pub fn published_param_count(self) -> usize {
        match self {
            ControllerKind::Feedforward => 15_011,
            ControllerKind::Lstm => 63_011,
            ControllerKind::Baseline => 333_059,
        }
    }

    pub fn architecture_name(self) -> &'static str {
        match self {
            ControllerKind::Feedforward => "FF-NTM1",
            ControllerKind::Lstm => "LSTM-NTM",
            ControllerKind::Baseline => "3h-LSTM",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ff" => Ok(ControllerKind::Feedforward),
            "lstm" => Ok(ControllerKind::Lstm),
            "baseline" => Ok(ControllerKind::Baseline),
            other => Err(format!("unknown controller {other:?} (expected ff, lstm or baseline)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub hidden_size: usize,
    pub input_size: usize,
    pub output_size: usize,
    pub mem_rows: usize,
    pub mem_cols: usize,
}

impl ControllerSpec {
    /// Default sizes: 100 hidden units for NTM controllers, 3×128 for the
    /// baseline, and a 128×20 memory.
    pub fn new(kind: ControllerKind) -> Self {
        ControllerSpec {
            kind,
            hidden_size: kind.default_hidden(),
            input_size: IO_SIZE,
            output_size: IO_SIZE,
            mem_rows: 128,
            mem_cols: 20,
        }
    }

    pub fn with_memory(mut self, rows: usize, cols: usize) -> Self {
        self.mem_rows = rows;
        self.mem_cols = cols;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden_size = hidden;
        self
    }

    pub fn is_ntm(&self) -> bool {
        self.kind != ControllerKind::Baseline
    }

    pub fn read_head_width(&self) -> usize {
        self.mem_cols + 3 + SHIFT_WIDTH
    }

    pub fn write_head_width(&self) -> usize {
        3 * self.mem_cols + 3 + SHIFT_WIDTH
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named regions of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    groups: Vec<ParamGroup>,
    total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) {
        let group = ParamGroup {
            name: name.into(),
            shape,
            offset: self.total,
            init,
        };
        self.total += group.len();
        self.groups.push(group);
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        self.push(format!("{name}.w"), vec![out, inp], Init::Uniform);
        self.push(format!("{name}.b"), vec![out], Init::Zero);
    }

    pub fn for_spec(spec: &ControllerSpec) -> Self {
        let mut l = ParamLayout::default();
        let (h, m, n) = (spec.hidden_size, spec.mem_cols, spec.mem_rows);
        let (inp, out) = (spec.input_size, spec.output_size);
        match spec.kind {
            ControllerKind::Feedforward => l.linear("controller", h, inp + m),
            ControllerKind::Lstm => l.linear("controller", 4 * h, inp + m + h),
            ControllerKind::Baseline => {
                l.linear("lstm0", 4 * h, inp + h);
                l.linear("lstm1", 4 * h, 2 * h);
                l.linear("lstm2", 4 * h, 2 * h);
                l.linear("output", out, h);
                return l;
            }
        }
        l.linear("read_head", spec.read_head_width(), h);
        l.linear("write_head", spec.write_head_width(), h);
        l.linear("output", out, h);
        l.push("read_head.init_logits", vec![n], Init::Zero);
        l.push("write_head.init_logits", vec![n], Init::Zero);
        l.push("read.init", vec![m], Init::Zero);
        l
    }

    /// Reassembles a layout from its groups, checking they tile `0..total`.
    pub fn from_groups(groups: Vec<ParamGroup>) -> Option<Self> {
        let mut total = 0;
        for g in &groups {
            if g.offset != total {
                return None;
            }
            total += g.len();
        }
        Some(ParamLayout { groups, total })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Name of the group containing flat index `i`.
    pub fn group_of(&self, i: usize) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.range().contains(&i))
    }
}

/// Exact trainable-scalar count with a per-group breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

pub fn param_count(spec: &ControllerSpec) -> ParamCount {
    let layout = ParamLayout::for_spec(spec);
    ParamCount {
        total: layout.total(),
        breakdown: layout.groups().iter().map(|g| (g.name.clone(), g.len())).collect(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let wx = g.matvec(self.w, x)?;
        g.add(wx, self.b)
    }
}

/// Parameters of an NTM bound to a graph.
#[derive(Debug, Clone, Copy)]
pub struct NtmParams {
    pub controller: Linear,
    pub read_head: Linear,
    pub write_head: Linear,
    pub output: Linear,
    pub read_init_logits: Var,
    pub write_init_logits: Var,
    pub read_init: Var,
}

#[derive(Debug, Clone)]
pub struct BaselineParams {
    pub layers: Vec<Linear>,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub enum Bound {
    Ntm { flat: Var, params: NtmParams },
    Baseline { flat: Var, params: BaselineParams },
}

impl Bound {
    /// The leaf holding every parameter.
    pub fn flat(&self) -> Var {
        match self {
            Bound::Ntm { flat, .. } | Bound::Baseline { flat, .. } => *flat,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, size: usize) -> Self {
        LstmState {
            hidden: g.constant(Tensor::zeros(vec![size])),
            cell: g.constant(Tensor::zeros(vec![size])),
        }
    }
}

/// `tanh(W [x; r_prev] + b)`.
pub fn ff_controller_step(g: &mut Graph, x: Var, r_prev: Var, p: &Linear) -> Result<Var> {
    let inp = g.concat(&[x, r_prev])?;
    let pre = p.apply(g, inp)?;
    Ok(g.tanh(pre))
}

/// Standard LSTM cell over the concatenation of `inputs` and the previous
/// hidden state. Gate rows are ordered input, forget, output, candidate.
pub fn lstm_step(g: &mut Graph, inputs: &[Var], state: &LstmState, p: &Linear) -> Result<(Var, LstmState)> {
    let h = g.value(state.hidden).len();
    let mut parts = inputs.to_vec();
    parts.push(state.hidden);
    let inp = g.concat(&parts)?;
    let pre = p.apply(g, inp)?;
    let i_pre = g.slice(pre, 0, &[h])?;
    let f_pre = g.slice(pre, h, &[h])?;
    let o_pre = g.slice(pre, 2 * h, &[h])?;
    let c_pre = g.slice(pre, 3 * h, &[h])?;
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let o = g.sigmoid(o_pre);
    let cand = g.tanh(c_pre);
    let kept = g.mul(f, state.cell)?;
    let fresh = g.mul(i, cand)?;
    let cell = g.add(kept, fresh)?;
    let tc = g.tanh(cell);
    let hidden = g.mul(o, tc)?;
    Ok((hidden, LstmState { hidden, cell }))
}

/// Head parameters for both heads plus the output logits.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub read: HeadParams,
    pub write: HeadParams,
    pub logits: Var,
}

fn decode_head(g: &mut Graph, raw: Var, m: usize, write: bool) -> Result<HeadParams> {
    let key = g.slice(raw, 0, &[m])?;
    let beta_pre = g.slice(raw, m, &[1])?;
    let sp = g.softplus(beta_pre);
    let strength = g.add_const(sp, STRENGTH_EPS);
    let gate_pre = g.slice(raw, m + 1, &[1])?;
    let gate = g.sigmoid(gate_pre);
    let shift_pre = g.slice(raw, m + 2, &[SHIFT_WIDTH])?;
    let shift = g.softmax(shift_pre)?;
    let gamma_pre = g.slice(raw, m + 2 + SHIFT_WIDTH, &[1])?;
    let gsp = g.softplus(gamma_pre);
    let sharpness = g.add_const(gsp, 1.0);
    let (erase, add) = if write {
        let base = m + 3 + SHIFT_WIDTH;
        let e_pre = g.slice(raw, base, &[m])?;
        let add = g.slice(raw, base + m, &[m])?;
        (Some(g.sigmoid(e_pre)), Some(add))
    } else {
        (None, None)
    };
    Ok(HeadParams {
        key,
        strength,
        gate,
        shift,
        sharpness,
        erase,
        add,
    })
}

/// Maps the controller output to constrained head parameters:
/// key and add are linear, strength is `softplus + ε`, gate and erase are
/// sigmoids, shift is a softmax over three offsets and sharpness is
/// `1 + softplus`.
pub fn decode_heads(g: &mut Graph, hidden: Var, p: &NtmParams, mem_cols: usize) -> Result<Decoded> {
    let read_raw = p.read_head.apply(g, hidden)?;
    let write_raw = p.write_head.apply(g, hidden)?;
    let logits = p.output.apply(g, hidden)?;
    Ok(Decoded {
        read: decode_head(g, read_raw, mem_cols, false)?,
        write: decode_head(g, write_raw, mem_cols, true)?,
        logits,
    })
}

/// Episode state of an NTM.
#[derive(Debug, Clone)]
pub struct CellState {
    pub memory: MemoryState,
    pub lstm: Option<LstmState>,
    pub step: usize,
}

/// Weightings emitted during one step.
#[derive(Debug, Clone, Copy)]
pub struct StepWeightings {
    pub read: Var,
    pub write: Var,
}

/// Output of one NTM step: probabilities, new state and the two weightings.
pub struct CellOutput {
    pub output: Var,
    pub state: CellState,
    pub weightings: StepWeightings,
}

/// Memory index of each head in [`MemoryState::prev_weightings`].
const READ: usize = 0;
const WRITE: usize = 1;

/// Episode reset: constant memory, softmax of the learned initial logits for
/// each head, learned initial read vector, zero LSTM state.
pub fn initial_cell_state(g: &mut Graph, spec: &ControllerSpec, p: &NtmParams) -> Result<CellState> {
    let w_read = g.softmax(p.read_init_logits)?;
    let w_write = g.softmax(p.write_init_logits)?;
    let memory = MemoryState::reset(g, spec.mem_rows, spec.mem_cols, vec![w_read, w_write], p.read_init);
    let lstm = match spec.kind {
        ControllerKind::Lstm => Some(LstmState::zeros(g, spec.hidden_size)),
        _ => None,
    };
    Ok(CellState { memory, lstm, step: 0 })
}

/// controller → decode → write → read → output.
pub fn ntm_cell_step(
    g: &mut Graph,
    spec: &ControllerSpec,
    p: &NtmParams,
    state: &CellState,
    x: Var,
) -> Result<CellOutput> {
    let r_prev = state.memory.read_vector;
    let (hidden, lstm) = match &state.lstm {
        None => (ff_controller_step(g, x, r_prev, &p.controller)?, None),
        Some(ls) => {
            let (h, next) = lstm_step(g, &[x, r_prev], ls, &p.controller)?;
            (h, Some(next))
        }
    };
    let d = decode_heads(g, hidden, p, spec.mem_cols)?;
    let mem = state.memory.mem;

    let w_write = memory::address(g, mem, &d.write, state.memory.prev_weightings[WRITE])?;
    let (erase, add) = (d.write.erase.expect("write head"), d.write.add.expect("write head"));
    let mem = memory::write(g, mem, w_write, erase, add)?;

    let w_read = memory::address(g, mem, &d.read, state.memory.prev_weightings[READ])?;
    let read_vector = memory::read(g, mem, w_read)?;

    let output = g.sigmoid(d.logits);
    let mut prev = vec![w_read, w_write];
    prev.truncate(state.memory.prev_weightings.len());
    Ok(CellOutput {
        output,
        state: CellState {
            memory: MemoryState {
                mem,
                prev_weightings: prev,
                read_vector,
            },
            lstm,
            step: state.step + 1,
        },
        weightings: StepWeightings {
            read: w_read,
            write: w_write,
        },
    })
}

/// Three stacked LSTM layers followed by a sigmoid output layer.
pub fn baseline_step(g: &mut Graph, p: &BaselineParams, states: &[LstmState], x: Var) -> Result<(Var, Vec<LstmState>)> {
    let mut inp = x;
    let mut next = Vec::with_capacity(states.len());
    for (layer, st) in p.layers.iter().zip(states) {
        let (h, s) = lstm_step(g, &[inp], st, layer)?;
        next.push(s);
        inp = h;
    }
    let logits = p.output.apply(g, inp)?;
    Ok((g.sigmoid(logits), next))
}

/// Per-step values of one episode.
#[derive(Debug, Clone, Default)]
pub struct Episode {
    /// Output probabilities at every step (input and output phases).
    pub outputs: Vec<Var>,
    /// Read weightings per step; empty for the baseline.
    pub read_weightings: Vec<Var>,
    /// Write weightings per step; empty for the baseline.
    pub write_weightings: Vec<Var>,
}

impl Episode {
    /// The last `n` outputs, i.e. the output phase.
    pub fn output_phase(&self, n: usize) -> &[Var] {
        &self.outputs[self.outputs.len() - n..]
    }
}

/// A model: architecture plus flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ControllerSpec,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

impl Model {
    /// Weights uniform in `[-INIT_SCALE, INIT_SCALE]`, everything else zero.
    pub fn new<R: Rng + ?Sized>(spec: ControllerSpec, rng: &mut R) -> Self {
        let layout = ParamLayout::for_spec(&spec);
        let mut params = vec![0.0; layout.total()];
        for group in layout.groups() {
            if group.init == Init::Uniform {
                for v in &mut params[group.range()] {
                    *v = rng.gen_range(-INIT_SCALE..=INIT_SCALE);
                }
            }
        }
        Model { spec, layout, params }
    }

    pub fn zeros(spec: ControllerSpec) -> Self {
        let layout = ParamLayout::for_spec(&spec);
        let params = vec![0.0; layout.total()];
        Model { spec, layout, params }
    }

    pub fn group(&self, name: &str) -> &[f64] {
        let g = self
            .layout
            .get(name)
            .unwrap_or_else(|| panic!("no parameter group {name}"));
        &self.params[g.range()]
    }

    pub fn group_mut(&mut self, name: &str) -> &mut [f64] {
        let g = self
            .layout
            .get(name)
            .unwrap_or_else(|| panic!("no parameter group {name}"))
            .range();
        &mut self.params[g]
    }

    /// Binds `self.params` to the graph as a trainable or constant leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let t = Tensor::vector(self.params.clone());
        let flat = if trainable { g.param(t) } else { g.constant(t) };
        self.bind_to(g, flat)
    }

    /// Slices every parameter group out of an existing flat leaf.
    pub fn bind_to(&self, g: &mut Graph, flat: Var) -> Result<Bound> {
        let mut take = |name: &str| -> Result<Var> {
            let grp = self
                .layout
                .get(name)
                .unwrap_or_else(|| panic!("no parameter group {name}"));
            g.slice(flat, grp.offset, &grp.shape)
        };
        let mut linear = |name: &str| -> Result<Linear> {
            Ok(Linear {
                w: take(&format!("{name}.w"))?,
                b: take(&format!("{name}.b"))?,
            })
        };
        if self.spec.kind == ControllerKind::Baseline {
            let layers = (0..3)
                .map(|l| linear(&format!("lstm{l}")))
                .collect::<Result<Vec<_>>>()?;
            let output = linear("output")?;
            return Ok(Bound::Baseline {
                flat,
                params: BaselineParams { layers, output },
            });
        }
        let controller = linear("controller")?;
        let read_head = linear("read_head")?;
        let write_head = linear("write_head")?;
        let output = linear("output")?;
        let params = NtmParams {
            controller,
            read_head,
            write_head,
            output,
            read_init_logits: take("read_head.init_logits")?,
            write_init_logits: take("write_head.init_logits")?,
            read_init: take("read.init")?,
        };
        Ok(Bound::Ntm { flat, params })
    }

    /// Runs `inputs` followed by `output_steps` zero vectors from a fresh state.
    pub fn run_episode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        inputs: &[[f64; 3]],
        output_steps: usize,
    ) -> Result<Episode> {
        let zero = [0.0; 3];
        let steps = inputs.iter().chain(std::iter::repeat_n(&zero, output_steps));
        let mut ep = Episode::default();
        match bound {
            Bound::Ntm { params, .. } => {
                let mut state = initial_cell_state(g, &self.spec, params)?;
                for x in steps {
                    let xv = g.constant(Tensor::vector(x.to_vec()));
                    let out = ntm_cell_step(g, &self.spec, params, &state, xv)?;
                    ep.outputs.push(out.output);
                    ep.read_weightings.push(out.weightings.read);
                    ep.write_weightings.push(out.weightings.write);
                    state = out.state;
                }
            }
            Bound::Baseline { params, .. } => {
                let mut states: Vec<LstmState> = (0..params.layers.len())
                    .map(|_| LstmState::zeros(g, self.spec.hidden_size))
                    .collect();
                for x in steps {
                    let xv = g.constant(Tensor::vector(x.to_vec()));
                    let (out, next) = baseline_step(g, params, &states, xv)?;
                    ep.outputs.push(out);
                    states = next;
                }
            }
        }
        Ok(ep)
    }

    /// Output-phase probabilities for an input sequence, without gradients.
    pub fn predict(&self, inputs: &[[f64; 3]], output_steps: usize) -> Result<Vec<[f64; 3]>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let ep = self.run_episode(&mut g, &bound, inputs, output_steps)?;
        Ok(ep
            .output_phase(output_steps)
            .iter()
            .map(|&v| {
                let d = g.data(v);
                [d[0], d[1], d[2]]
            })
            .collect())
    }
}

//! Dynamic reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied during the forward pass as a
//! node holding its value and the identity of the producing operation. Node
//! ids are handed out in creation order, which is always a valid topological
//! order, so [`Graph::backward`] simply walks the ids in reverse.
//!
//! Values are dense `f64` tensors in row-major layout. Binary elementwise
//! primitives broadcast a single-element operand against any shape; every
//! other shape combination must match exactly.

use thiserror::Error;

/// Guard added to `‖u‖‖v‖` in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call zero_grad before running it again")]
    BackwardTwice,
    #[error("objective is not finite ({value}) at coordinate {index}")]
    NonFinite { index: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn rows_cols(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    OneMinus(Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Outer(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Pow(Var, Var),
    Sum(Var),
    Softmax(Var),
    Cosine {
        u: Var,
        v: Var,
        norm_u: f64,
        norm_v: f64,
    },
    CosineRows {
        mat: Var,
        key: Var,
        row_norms: Vec<f64>,
        key_norm: f64,
    },
    CircConv(Var, Var),
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A dynamic computation graph built per episode.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Vec<f64>>>,
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Value of operand `t` at output position `i`, honouring scalar broadcast.
#[inline]
fn bcast(t: &[f64], i: usize) -> f64 {
    if t.len() == 1 {
        t[0]
    } else {
        t[i]
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape == tb.shape || tb.len() == 1 {
            ta.shape.clone()
        } else if ta.len() == 1 {
            tb.shape.clone()
        } else {
            return Err(self.mismatch(op, a, b));
        };
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(bcast(&ta.data, i), bcast(&tb.data, i))).collect();
        Ok((Tensor { shape, data }, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Elementwise quotient; the divisor must be nonzero everywhere.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).contains(&0.0) {
            return Err(AutodiffError::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let (t, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    /// `x + c` for a constant `c`.
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v + c).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::AddConst(x), rg)
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| 1.0 - v).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::OneMinus(x), rg)
    }

    /// `W x` for `W: [r, c]`, `x: [c]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        let (r, c) = match tw.rows_cols() {
            Some(rc) if tx.shape == [rc.1] => rc,
            _ => return Err(self.mismatch("matvec", w, x)),
        };
        let xs = &tx.data;
        let data = tw
            .data
            .chunks_exact(c)
            .map(|row| row.iter().zip(xs).map(|(a, b)| a * b).sum())
            .collect::<Vec<f64>>();
        debug_assert_eq!(data.len(), r);
        let rg = self.rg(&[w, x]);
        Ok(self.push(Tensor::vector(data), Op::MatVec(w, x), rg))
    }

    /// `wᵀ M` for `w: [n]`, `M: [n, c]`; the weighted sum of the rows of `M`.
    pub fn vecmat(&mut self, w: Var, m: Var) -> Result<Var> {
        let (tw, tm) = (self.value(w), self.value(m));
        let (n, c) = match tm.rows_cols() {
            Some(rc) if tw.shape == [rc.0] => rc,
            _ => return Err(self.mismatch("vecmat", w, m)),
        };
        let mut out = vec![0.0; c];
        for i in 0..n {
            let wi = tw.data[i];
            for (o, v) in out.iter_mut().zip(&tm.data[i * c..(i + 1) * c]) {
                *o += wi * v;
            }
        }
        let rg = self.rg(&[w, m]);
        Ok(self.push(Tensor::vector(out), Op::VecMat(w, m), rg))
    }

    /// Outer product `u vᵀ` of two vectors.
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.shape.len() != 1 || tv.shape.len() != 1 {
            return Err(self.mismatch("outer", u, v));
        }
        let (n, m) = (tu.len(), tv.len());
        let mut data = Vec::with_capacity(n * m);
        for &a in &tu.data {
            data.extend(tv.data.iter().map(|b| a * b));
        }
        let rg = self.rg(&[u, v]);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::Outer(u, v),
            rg,
        ))
    }

    /// Concatenates the flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Domain {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.data(*p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Takes `prod(shape)` consecutive elements of the flattened input starting
    /// at `start`, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let len = self.value(x).len();
        if start + n > len {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, n],
            });
        }
        let data = self.data(x)[start..start + n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Slice(x, start),
            rg,
        ))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus_scalar)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// `xᵞ` elementwise for a nonnegative base and a one-element exponent.
    pub fn pow(&mut self, x: Var, gamma: Var) -> Result<Var> {
        if self.value(gamma).len() != 1 {
            return Err(self.mismatch("pow", x, gamma));
        }
        if self.data(x).iter().any(|&v| v < 0.0) {
            return Err(AutodiffError::Domain {
                op: "pow",
                msg: "base must be nonnegative".into(),
            });
        }
        let g = self.item(gamma);
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.powf(g)).collect(),
        };
        let rg = self.rg(&[x, gamma]);
        Ok(self.push(out, Op::Pow(x, gamma), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Softmax over all elements of `x`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(AutodiffError::Domain {
                op: "softmax",
                msg: "empty input".into(),
            });
        }
        let max = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = Tensor {
            shape: t.shape.clone(),
            data: exps.into_iter().map(|e| e / z).collect(),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// `u·v / (‖u‖‖v‖ + ε)` for two vectors of equal length.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.shape.len() != 1 || tu.shape != tv.shape {
            return Err(self.mismatch("cosine_similarity", u, v));
        }
        let dot: f64 = tu.data.iter().zip(&tv.data).map(|(a, b)| a * b).sum();
        let norm_u = tu.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        let norm_v = tv.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        let value = dot / (norm_u * norm_v + COSINE_EPS);
        let rg = self.rg(&[u, v]);
        Ok(self.push(Tensor::scalar(value), Op::Cosine { u, v, norm_u, norm_v }, rg))
    }

    /// Cosine similarity of `key: [c]` against every row of `mat: [n, c]`.
    pub fn cosine_rows(&mut self, mat: Var, key: Var) -> Result<Var> {
        let (tm, tk) = (self.value(mat), self.value(key));
        let (_, c) = match tm.rows_cols() {
            Some(rc) if tk.shape == [rc.1] => rc,
            _ => return Err(self.mismatch("cosine_rows", mat, key)),
        };
        let key_norm = tk.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut row_norms = Vec::with_capacity(tm.len() / c.max(1));
        let mut out = Vec::with_capacity(row_norms.capacity());
        for row in tm.data.chunks_exact(c) {
            let dot: f64 = row.iter().zip(&tk.data).map(|(a, b)| a * b).sum();
            let rn = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            row_norms.push(rn);
            out.push(dot / (rn * key_norm + COSINE_EPS));
        }
        let rg = self.rg(&[mat, key]);
        Ok(self.push(
            Tensor::vector(out),
            Op::CosineRows {
                mat,
                key,
                row_norms,
                key_norm,
            },
            rg,
        ))
    }

    /// Circular convolution of a length-`N` weighting with an odd-length
    /// kernel indexed by offset `-(S-1)/2 ..= (S-1)/2`:
    /// `out[i] = Σ_o kernel[o] · w[(i - o) mod N]`.
    pub fn circular_conv(&mut self, w: Var, kernel: Var) -> Result<Var> {
        let (tw, tk) = (self.value(w), self.value(kernel));
        if tw.shape.len() != 1 || tk.shape.len() != 1 {
            return Err(self.mismatch("circular_conv", w, kernel));
        }
        let (n, s) = (tw.len(), tk.len());
        if s % 2 == 0 || s > n {
            return Err(AutodiffError::Domain {
                op: "circular_conv",
                msg: format!("kernel of length {s} is not an odd offset set no larger than {n}"),
            });
        }
        let half = (s / 2) as isize;
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            for (k, &sk) in tk.data.iter().enumerate() {
                let offset = k as isize - half;
                let j = (i as isize - offset).rem_euclid(n as isize) as usize;
                *o += sk * tw.data[j];
            }
        }
        let rg = self.rg(&[w, kernel]);
        Ok(self.push(Tensor::vector(out), Op::CircConv(w, kernel), rg))
    }

    /// Binary cross entropy `-Σ t ln p + (1-t) ln(1-p)`, summed over all
    /// elements, with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce",
                lhs: tp.shape.clone(),
                rhs: vec![target.len()],
            });
        }
        let loss = bce_value(&tp.data, target);
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward pass with respect to `v`, or zeros.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.as_ref().map(|g| &g[v.0]) {
            Some(g) if !g.is_empty() => g.clone(),
            _ => vec![0.0; self.value(v).len()],
        }
    }

    /// Accumulates `∂loss/∂node` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(AutodiffError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[loss.0] = vec![1.0];
        for id in (0..=loss.0).rev() {
            if grads[id].is_empty() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            self.propagate(id, &g, &mut grads);
            grads[id] = g;
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Returns the gradient buffer of `v`, allocating zeros on first touch, or
    /// `None` when `v` does not take gradients.
    fn slot<'a>(&self, grads: &'a mut [Vec<f64>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let g = &mut grads[v.0];
        if g.is_empty() {
            *g = vec![0.0; node.value.len()];
        }
        Some(g)
    }

    /// Adds `f(i)` for every output position `i` into the gradient of `v`,
    /// summing when `v` was broadcast from a single element.
    fn acc_bcast(&self, grads: &mut [Vec<f64>], v: Var, n: usize, f: impl Fn(usize) -> f64) {
        if let Some(gv) = self.slot(grads, v) {
            if gv.len() == 1 && n != 1 {
                gv[0] += (0..n).map(f).sum::<f64>();
            } else {
                for (i, x) in gv.iter_mut().enumerate() {
                    *x += f(i);
                }
            }
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[id];
        let y = &node.value.data;
        let n = g.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_bcast(grads, *a, n, |i| g[i]);
                self.acc_bcast(grads, *b, n, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_bcast(grads, *a, n, |i| g[i]);
                self.acc_bcast(grads, *b, n, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc_bcast(grads, *a, n, |i| g[i] * bcast(db, i));
                self.acc_bcast(grads, *b, n, |i| g[i] * bcast(da, i));
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc_bcast(grads, *a, n, |i| g[i] / bcast(db, i));
                self.acc_bcast(grads, *b, n, |i| {
                    let d = bcast(db, i);
                    -g[i] * bcast(da, i) / (d * d)
                });
            }
            Op::AddConst(x) => self.acc_bcast(grads, *x, n, |i| g[i]),
            Op::OneMinus(x) => self.acc_bcast(grads, *x, n, |i| -g[i]),
            Op::MatVec(w, x) => {
                let (dw, dx) = (self.data(*w), self.data(*x));
                let c = dx.len();
                if let Some(gw) = self.slot(grads, *w) {
                    for (row, &gi) in gw.chunks_exact_mut(c).zip(g) {
                        for (r, xv) in row.iter_mut().zip(dx) {
                            *r += gi * xv;
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for (row, &gi) in dw.chunks_exact(c).zip(g) {
                        for (r, wv) in gx.iter_mut().zip(row) {
                            *r += gi * wv;
                        }
                    }
                }
            }
            Op::VecMat(w, m) => {
                let (dw, dm) = (self.data(*w), self.data(*m));
                let c = n;
                if let Some(gw) = self.slot(grads, *w) {
                    for (gi, row) in gw.iter_mut().zip(dm.chunks_exact(c)) {
                        *gi += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(gm) = self.slot(grads, *m) {
                    for (row, &wi) in gm.chunks_exact_mut(c).zip(dw) {
                        for (r, gj) in row.iter_mut().zip(g) {
                            *r += wi * gj;
                        }
                    }
                }
            }
            Op::Outer(u, v) => {
                let (du, dv) = (self.data(*u), self.data(*v));
                let m = dv.len();
                if let Some(gu) = self.slot(grads, *u) {
                    for (gi, row) in gu.iter_mut().zip(g.chunks_exact(m)) {
                        *gi += row.iter().zip(dv).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(gv) = self.slot(grads, *v) {
                    for (row, &ui) in g.chunks_exact(m).zip(du) {
                        for (r, gij) in gv.iter_mut().zip(row) {
                            *r += ui * gij;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.slot(grads, *p) {
                        for (r, gi) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *r += gi;
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice(x, start) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, gi) in gx[*start..*start + n].iter_mut().zip(g) {
                        *r += gi;
                    }
                }
            }
            Op::Sigmoid(x) => self.acc_bcast(grads, *x, n, |i| g[i] * y[i] * (1.0 - y[i])),
            Op::Tanh(x) => self.acc_bcast(grads, *x, n, |i| g[i] * (1.0 - y[i] * y[i])),
            Op::Softplus(x) => {
                let dx = self.data(*x);
                self.acc_bcast(grads, *x, n, |i| g[i] * sigmoid_scalar(dx[i]));
            }
            Op::Exp(x) => self.acc_bcast(grads, *x, n, |i| g[i] * y[i]),
            Op::Pow(x, gamma) => {
                let dx = self.data(*x);
                let gm = self.item(*gamma);
                self.acc_bcast(grads, *x, n, |i| {
                    if dx[i] > 0.0 {
                        g[i] * gm * dx[i].powf(gm - 1.0)
                    } else if gm == 1.0 {
                        g[i]
                    } else {
                        0.0
                    }
                });
                if let Some(gg) = self.slot(grads, *gamma) {
                    gg[0] += (0..n)
                        .filter(|&i| dx[i] > 0.0)
                        .map(|i| g[i] * y[i] * dx[i].ln())
                        .sum::<f64>();
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                self.acc_bcast(grads, *x, len, |_| g[0]);
            }
            Op::Softmax(x) => {
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                self.acc_bcast(grads, *x, n, |i| y[i] * (g[i] - dot));
            }
            Op::Cosine { u, v, norm_u, norm_v } => {
                let (du, dv) = (self.data(*u), self.data(*v));
                let denom = norm_u * norm_v + COSINE_EPS;
                let dot: f64 = du.iter().zip(dv).map(|(a, b)| a * b).sum();
                let g0 = g[0];
                cosine_grad(
                    self.slot(grads, *u).map(|s| s.as_mut_slice()),
                    du,
                    dv,
                    *norm_u,
                    *norm_v,
                    dot,
                    denom,
                    g0,
                );
                cosine_grad(
                    self.slot(grads, *v).map(|s| s.as_mut_slice()),
                    dv,
                    du,
                    *norm_v,
                    *norm_u,
                    dot,
                    denom,
                    g0,
                );
            }
            Op::CosineRows {
                mat,
                key,
                row_norms,
                key_norm,
            } => {
                let (dm, dk) = (self.data(*mat), self.data(*key));
                let c = dk.len();
                let mut gk = self.slot(grads, *key).map(|_| vec![0.0; c]);
                if let Some(gm) = self.slot(grads, *mat) {
                    for (i, (grow, row)) in gm.chunks_exact_mut(c).zip(dm.chunks_exact(c)).enumerate() {
                        let denom = row_norms[i] * key_norm + COSINE_EPS;
                        let dot: f64 = row.iter().zip(dk).map(|(a, b)| a * b).sum();
                        cosine_grad(Some(grow), row, dk, row_norms[i], *key_norm, dot, denom, g[i]);
                    }
                }
                if let Some(gk) = gk.as_mut() {
                    for (i, row) in dm.chunks_exact(c).enumerate() {
                        let denom = row_norms[i] * key_norm + COSINE_EPS;
                        let dot: f64 = row.iter().zip(dk).map(|(a, b)| a * b).sum();
                        cosine_grad(
                            Some(gk.as_mut_slice()),
                            dk,
                            row,
                            *key_norm,
                            row_norms[i],
                            dot,
                            denom,
                            g[i],
                        );
                    }
                }
                if let (Some(src), Some(dst)) = (gk, self.slot(grads, *key)) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::CircConv(w, kernel) => {
                let (dw, dk) = (self.data(*w), self.data(*kernel));
                let half = (dk.len() / 2) as isize;
                let idx = |i: usize, k: usize| (i as isize - (k as isize - half)).rem_euclid(n as isize) as usize;
                if let Some(gw) = self.slot(grads, *w) {
                    for (i, gi) in g.iter().enumerate() {
                        for (k, sk) in dk.iter().enumerate() {
                            gw[idx(i, k)] += gi * sk;
                        }
                    }
                }
                if let Some(gk) = self.slot(grads, *kernel) {
                    for (i, gi) in g.iter().enumerate() {
                        for (k, r) in gk.iter_mut().enumerate() {
                            *r += gi * dw[idx(i, k)];
                        }
                    }
                }
            }
            Op::Bce { pred, target } => {
                let dp = self.data(*pred);
                let g0 = g[0];
                self.acc_bcast(grads, *pred, dp.len(), |i| {
                    let p = dp[i];
                    if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                        0.0
                    } else {
                        g0 * (p - target[i]) / (p * (1.0 - p))
                    }
                });
            }
        }
    }
}

/// Gradient of `dot / denom` with respect to `x`, where `denom = ‖x‖‖y‖ + ε`.
#[allow(clippy::too_many_arguments)]
fn cosine_grad(slot: Option<&mut [f64]>, x: &[f64], y: &[f64], norm_x: f64, norm_y: f64, dot: f64, denom: f64, g: f64) {
    let Some(gx) = slot else { return };
    let radial = if norm_x > 0.0 {
        dot * norm_y / (denom * denom * norm_x)
    } else {
        0.0
    };
    for ((r, xi), yi) in gx.iter_mut().zip(x).zip(y) {
        *r += g * (yi / denom - radial * xi);
    }
}

/// Plain-value binary cross entropy, matching [`Graph::bce`].
pub fn bce_value(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum()
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient of `f` at `theta` with central finite
/// differences. `f` receives a fresh graph and the parameter leaf and returns
/// the scalar objective. The relative error of a coordinate is
/// `|a - n| / max(1, |a| + |n|)`.
pub fn gradient_check<F>(f: F, theta: &[f64], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |point: Vec<f64>, index: usize| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(point));
        let out = f(&mut g, p)?;
        let value = g.item(out);
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { index, value });
        }
        Ok(value)
    };

    let mut g = Graph::new();
    let p = g.param(Tensor::vector(theta.to_vec()));
    let out = f(&mut g, p)?;
    let value = g.item(out);
    if !value.is_finite() {
        return Err(AutodiffError::NonFinite { index: 0, value });
    }
    g.backward(out)?;
    let analytic = g.grad(p);

    let mut numeric = Vec::with_capacity(theta.len());
    let mut worst = (0.0, 0);
    for i in 0..theta.len() {
        let mut plus = theta.to_vec();
        plus[i] += step;
        let mut minus = theta.to_vec();
        minus[i] -= step;
        let d = (eval(plus, i)? - eval(minus, i)?) / (2.0 * step);
        let err = (analytic[i] - d).abs() / (analytic[i].abs() + d.abs()).max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(d);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}

//! External N×M memory: blurry read, erase/add write, and the
//! content → interpolate → shift → sharpen addressing pipeline.
//!
//! Every function here is a pure graph construction: it takes graph handles
//! and returns new ones, so gradients flow through memory contents, head
//! parameters and previous weightings alike.

use crate::autodiff::{AutodiffError, Graph, Result, Tensor, Var};

/// Shift offsets `{-1, 0, +1}`.
pub const SHIFT_WIDTH: usize = 3;

/// Value of every memory cell at the start of an episode.
pub const INITIAL_MEMORY_VALUE: f64 = 1e-6;

/// Memory contents and head state of one episode.
#[derive(Debug, Clone)]
pub struct MemoryState {
    /// `N × M` memory matrix.
    pub mem: Var,
    /// Weighting each head emitted at the previous step, in head order.
    pub prev_weightings: Vec<Var>,
    /// Last read vector (length `M`).
    pub read_vector: Var,
}

impl MemoryState {
    /// Fresh episode memory filled with [`INITIAL_MEMORY_VALUE`].
    pub fn reset(g: &mut Graph, rows: usize, cols: usize, initial_weightings: Vec<Var>, initial_read: Var) -> Self {
        let mem = g.constant(Tensor::full(vec![rows, cols], INITIAL_MEMORY_VALUE));
        MemoryState {
            mem,
            prev_weightings: initial_weightings,
            read_vector: initial_read,
        }
    }
}

/// Addressing parameters emitted by one head at one timestep.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub key: Var,
    pub strength: Var,
    pub gate: Var,
    pub shift: Var,
    pub sharpness: Var,
    /// Write heads only.
    pub erase: Option<Var>,
    /// Write heads only.
    pub add: Option<Var>,
}

/// One head's contribution to a write.
#[derive(Debug, Clone, Copy)]
pub struct WriteOp {
    pub weighting: Var,
    pub erase: Var,
    pub add: Var,
}

fn rows_of(g: &Graph, mem: Var) -> Result<usize> {
    match g.shape(mem) {
        [n, _] => Ok(*n),
        s => Err(AutodiffError::Domain {
            op: "memory",
            msg: format!("memory must be a matrix, got shape {s:?}"),
        }),
    }
}

fn check_weighting(g: &Graph, op: &'static str, mem: Var, w: Var) -> Result<()> {
    let n = rows_of(g, mem)?;
    if g.shape(w) != [n] {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: g.shape(mem).to_vec(),
            rhs: g.shape(w).to_vec(),
        });
    }
    Ok(())
}

fn normalize(g: &mut Graph, w: Var) -> Result<Var> {
    let total = g.sum(w);
    g.div(w, total)
}

/// `r = Σᵢ w(i) M(i)`.
pub fn read(g: &mut Graph, mem: Var, w: Var) -> Result<Var> {
    check_weighting(g, "read", mem, w)?;
    g.vecmat(w, mem)
}

/// Erase then add with a single head:
/// `M(i) ⊙ (1 - w(i) e) + w(i) a`.
pub fn write(g: &mut Graph, mem: Var, w: Var, erase: Var, add: Var) -> Result<Var> {
    write_heads(
        g,
        mem,
        &[WriteOp {
            weighting: w,
            erase,
            add,
        }],
    )
}

/// Applies every head's erase multiplicatively before any add, so the result
/// does not depend on head order.
pub fn write_heads(g: &mut Graph, mem: Var, heads: &[WriteOp]) -> Result<Var> {
    let mut erased = mem;
    for h in heads {
        check_weighting(g, "write", mem, h.weighting)?;
        let mask = g.outer(h.weighting, h.erase)?;
        let keep = g.one_minus(mask);
        erased = g.mul(erased, keep).map_err(|_| AutodiffError::ShapeMismatch {
            op: "write",
            lhs: g.shape(mem).to_vec(),
            rhs: g.shape(h.erase).to_vec(),
        })?;
    }
    let mut out = erased;
    for h in heads {
        let delta = g.outer(h.weighting, h.add)?;
        out = g.add(out, delta).map_err(|_| AutodiffError::ShapeMismatch {
            op: "write",
            lhs: g.shape(mem).to_vec(),
            rhs: g.shape(h.add).to_vec(),
        })?;
    }
    Ok(out)
}

/// `softmax_i(β · cos(k, M(i)))`.
pub fn content_address(g: &mut Graph, mem: Var, key: Var, strength: Var) -> Result<Var> {
    let sim = g.cosine_rows(mem, key)?;
    let scaled = g.mul(strength, sim)?;
    g.softmax(scaled)
}

/// `g·w_c + (1 - g)·w_prev`, renormalized.
pub fn interpolate(g: &mut Graph, wc: Var, w_prev: Var, gate: Var) -> Result<Var> {
    let a = g.mul(gate, wc)?;
    let keep = g.one_minus(gate);
    let b = g.mul(keep, w_prev)?;
    let mixed = g.add(a, b)?;
    normalize(g, mixed)
}

/// Circular convolution with a distribution over offsets `{-1, 0, +1}`,
/// renormalized.
pub fn shift(g: &mut Graph, w: Var, s: Var) -> Result<Var> {
    let rotated = g.circular_conv(w, s)?;
    normalize(g, rotated)
}

/// `w(i)^γ / Σⱼ w(j)^γ`.
pub fn sharpen(g: &mut Graph, w: Var, gamma: Var) -> Result<Var> {
    if g.data(w).iter().all(|&x| x == 0.0) {
        return Err(AutodiffError::Domain {
            op: "sharpen",
            msg: "weighting is identically zero".into(),
        });
    }
    let p = g.pow(w, gamma)?;
    normalize(g, p)
}

/// Full addressing pipeline for one head.
pub fn address(g: &mut Graph, mem: Var, head: &HeadParams, w_prev: Var) -> Result<Var> {
    let wc = content_address(g, mem, head.key, head.strength)?;
    let wg = interpolate(g, wc, w_prev, head.gate)?;
    let ws = shift(g, wg, head.shift)?;
    sharpen(g, ws, head.sharpness)
}

/// Checks `Σ w = 1` within `tol` and `0 ≤ w(i) ≤ 1`.
pub fn is_weighting(w: &[f64], tol: f64) -> bool {
    let total: f64 = w.iter().sum();
    (total - 1.0).abs() <= tol && w.iter().all(|&x| (0.0..=1.0 + tol).contains(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;

    fn vec_c(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::vector(v.to_vec()))
    }

    fn mat_c(g: &mut Graph, rows: usize, v: &[f64]) -> Var {
        g.constant(Tensor::matrix(rows, v.len() / rows, v.to_vec()).unwrap())
    }

    fn scalar_c(g: &mut Graph, x: f64) -> Var {
        g.constant(Tensor::scalar(x))
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn read_examples() {
        let mut g = Graph::new();
        let m = mat_c(&mut g, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let onehot = vec_c(&mut g, &[0.0, 1.0, 0.0]);
        let r = read(&mut g, m, onehot).unwrap();
        assert_eq!(g.data(r), &[3.0, 4.0]);
        let uniform = vec_c(&mut g, &[1.0 / 3.0; 3]);
        let r = read(&mut g, m, uniform).unwrap();
        assert!(close(g.data(r), &[3.0, 4.0], 1e-12));

        let m = mat_c(&mut g, 2, &[1.0, 0.0, 0.0, 1.0]);
        let w = vec_c(&mut g, &[0.25, 0.75]);
        let r = read(&mut g, m, w).unwrap();
        assert_eq!(g.data(r), &[0.25, 0.75]);

        let short = vec_c(&mut g, &[1.0]);
        assert!(matches!(
            read(&mut g, m, short),
            Err(AutodiffError::ShapeMismatch { op: "read", .. })
        ));
    }

    #[test]
    fn write_examples() {
        let mut g = Graph::new();
        let cells = [0.3, -1.0, 2.0, 0.5, 1.5, -0.2];
        let m = mat_c(&mut g, 3, &cells);
        let w = vec_c(&mut g, &[0.2, 0.5, 0.3]);
        let zero = vec_c(&mut g, &[0.0, 0.0]);
        let out = write(&mut g, m, w, zero, zero).unwrap();
        assert_eq!(g.data(out), &cells);

        let onehot = vec_c(&mut g, &[0.0, 1.0, 0.0]);
        let ones = vec_c(&mut g, &[1.0, 1.0]);
        let v = vec_c(&mut g, &[7.0, -3.0]);
        let out = write(&mut g, m, onehot, ones, v).unwrap();
        assert_eq!(g.data(out), &[0.3, -1.0, 7.0, -3.0, 1.5, -0.2]);
        // read back through the same weighting
        let r = read(&mut g, out, onehot).unwrap();
        assert_eq!(g.data(r), &[7.0, -3.0]);

        let m = mat_c(&mut g, 1, &[2.0, 2.0]);
        let half = vec_c(&mut g, &[0.5]);
        let out = write(&mut g, m, half, ones, zero).unwrap();
        assert_eq!(g.data(out), &[1.0, 1.0]);

        let bad = vec_c(&mut g, &[1.0, 1.0, 1.0]);
        assert!(write(&mut g, m, half, bad, zero).is_err());
    }

    #[test]
    fn content_address_examples() {
        let mut g = Graph::new();
        let m = mat_c(&mut g, 2, &[1.0, 0.0, 0.0, 1.0]);
        let k = vec_c(&mut g, &[1.0, 0.0]);
        let beta = scalar_c(&mut g, 5.0);
        let w = content_address(&mut g, m, k, beta).unwrap();
        let e5 = 5f64.exp();
        assert!(close(g.data(w), &[e5 / (e5 + 1.0), 1.0 / (e5 + 1.0)], 1e-7));
        assert!(close(g.data(w), &[0.9933, 0.0067], 1e-4));

        let same = mat_c(&mut g, 4, &[0.2, 0.7, 0.2, 0.7, 0.2, 0.7, 0.2, 0.7]);
        let w = content_address(&mut g, same, k, beta).unwrap();
        assert!(close(g.data(w), &[0.25; 4], 1e-15));

        let tiny = scalar_c(&mut g, 1e-12);
        let w = content_address(&mut g, m, k, tiny).unwrap();
        assert!(close(g.data(w), &[0.5, 0.5], 1e-11));
    }

    #[test]
    fn interpolate_examples() {
        let mut g = Graph::new();
        let wc = vec_c(&mut g, &[1.0, 0.0]);
        let wp = vec_c(&mut g, &[0.0, 1.0]);
        for (gate, expect) in [(1.0, [1.0, 0.0]), (0.0, [0.0, 1.0]), (0.5, [0.5, 0.5])] {
            let gv = scalar_c(&mut g, gate);
            let out = interpolate(&mut g, wc, wp, gv).unwrap();
            assert_eq!(g.data(out), &expect);
        }
    }

    #[test]
    fn shift_examples() {
        let mut g = Graph::new();
        let w = vec_c(&mut g, &[1.0, 0.0, 0.0, 0.0]);
        let ident = vec_c(&mut g, &[0.0, 1.0, 0.0]);
        let out = shift(&mut g, w, ident).unwrap();
        assert_eq!(g.data(out), &[1.0, 0.0, 0.0, 0.0]);
        let plus = vec_c(&mut g, &[0.0, 0.0, 1.0]);
        let out = shift(&mut g, w, plus).unwrap();
        assert_eq!(g.data(out), &[0.0, 1.0, 0.0, 0.0]);
        let blur = vec_c(&mut g, &[0.25, 0.5, 0.25]);
        let out = shift(&mut g, w, blur).unwrap();
        assert_eq!(g.data(out), &[0.5, 0.25, 0.0, 0.25]);

        let small = vec_c(&mut g, &[0.5, 0.5]);
        assert!(shift(&mut g, small, blur).is_err());
        let one = vec_c(&mut g, &[1.0]);
        assert!(shift(&mut g, one, blur).is_err());
    }

    #[test]
    fn sharpen_examples() {
        let mut g = Graph::new();
        let w = vec_c(&mut g, &[0.75, 0.25]);
        let two = scalar_c(&mut g, 2.0);
        let out = sharpen(&mut g, w, two).unwrap();
        assert!(close(g.data(out), &[0.9, 0.1], 1e-15));
        let one = scalar_c(&mut g, 1.0);
        let out = sharpen(&mut g, w, one).unwrap();
        assert_eq!(g.data(out), &[0.75, 0.25]);
        let u = vec_c(&mut g, &[0.2; 5]);
        let big = scalar_c(&mut g, 7.3);
        let out = sharpen(&mut g, u, big).unwrap();
        assert!(close(g.data(out), &[0.2; 5], 1e-15));
        let z = vec_c(&mut g, &[0.0, 0.0]);
        assert!(matches!(
            sharpen(&mut g, z, two),
            Err(AutodiffError::Domain { op: "sharpen", .. })
        ));
    }

    fn head(g: &mut Graph, key: &[f64], beta: f64, gate: f64, s: [f64; 3], gamma: f64) -> HeadParams {
        HeadParams {
            key: vec_c(g, key),
            strength: scalar_c(g, beta),
            gate: scalar_c(g, gate),
            shift: vec_c(g, &s),
            sharpness: scalar_c(g, gamma),
            erase: None,
            add: None,
        }
    }

    #[test]
    fn address_behaviours() {
        let mut g = Graph::new();
        let m = mat_c(&mut g, 4, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        let prev = vec_c(&mut g, &[0.1, 0.6, 0.2, 0.1]);

        // content only
        let h = head(&mut g, &[0.0, 1.0], 3.0, 1.0, [0.0, 1.0, 0.0], 1.0);
        let w = address(&mut g, m, &h, prev).unwrap();
        let wc = content_address(&mut g, m, h.key, h.strength).unwrap();
        assert!(close(g.data(w), g.data(wc), 1e-12));

        // iterate from the previous weighting
        let h = head(&mut g, &[0.0, 1.0], 3.0, 0.0, [0.0, 0.0, 1.0], 1.0);
        let w = address(&mut g, m, &h, prev).unwrap();
        assert!(close(g.data(w), &[0.1, 0.1, 0.6, 0.2], 1e-12));

        // content-located then shifted: a very strong key gives a one-hot at row 1
        let h = head(&mut g, &[0.0, 1.0], 1e4, 1.0, [0.0, 0.0, 1.0], 1.0);
        let w = address(&mut g, m, &h, prev).unwrap();
        assert!(close(g.data(w), &[0.0, 0.0, 1.0, 0.0], 1e-12));
    }

    #[test]
    fn operations_pass_gradient_checks() {
        // theta: mem 4x3 | key 3 | beta | gate logit | shift logits 3 | gamma | wprev logits 4 | erase 3 | add 3
        let theta = [
            0.5, -0.2, 0.9, 0.1, 0.4, -0.7, -0.3, 0.8, 0.2, 0.6, 0.6, -0.1, // mem
            0.3, -0.5, 0.8, // key
            2.0, 0.3, // beta, gate logit
            0.1, 0.7, -0.4, // shift
            1.7,  // gamma
            0.2, -0.3, 0.5, 0.0, // wprev logits
            0.3, 0.6, 0.1, // erase
            -0.4, 0.9, 0.2, // add
        ];
        let r = gradient_check(
            |g, p| {
                let mem = g.slice(p, 0, &[4, 3])?;
                let key = g.slice(p, 12, &[3])?;
                let beta = g.slice(p, 15, &[1])?;
                let gl = g.slice(p, 16, &[1])?;
                let gate = g.sigmoid(gl);
                let sl = g.slice(p, 17, &[3])?;
                let s = g.softmax(sl)?;
                let gamma = g.slice(p, 20, &[1])?;
                let wl = g.slice(p, 21, &[4])?;
                let wprev = g.softmax(wl)?;
                let erase = g.slice(p, 25, &[3])?;
                let add = g.slice(p, 28, &[3])?;
                let h = HeadParams {
                    key,
                    strength: beta,
                    gate,
                    shift: s,
                    sharpness: gamma,
                    erase: Some(erase),
                    add: Some(add),
                };
                let w = address(g, mem, &h, wprev)?;
                let m2 = write(g, mem, w, erase, add)?;
                let r = read(g, m2, w)?;
                let c = g.concat(&[r, w])?;
                let wts = g.constant(Tensor::vector((0..7).map(|i| 1.0 + 0.3 * i as f64).collect()));
                let t = g.mul(c, wts)?;
                Ok(g.sum(t))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst_index);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
                let z: f64 = v.iter().sum();
                v.into_iter().map(|x| x / z).collect()
            })
        }

        proptest! {
            #[test]
            fn write_order_is_irrelevant(
                cells in prop::collection::vec(-2.0f64..2.0, 12),
                w1 in distribution(4),
                w2 in distribution(4),
                e1 in prop::collection::vec(0.0f64..1.0, 3),
                e2 in prop::collection::vec(0.0f64..1.0, 3),
                a1 in prop::collection::vec(-1.0f64..1.0, 3),
                a2 in prop::collection::vec(-1.0f64..1.0, 3),
            ) {
                let mut g = Graph::new();
                let m = mat_c(&mut g, 4, &cells);
                let h1 = WriteOp { weighting: vec_c(&mut g, &w1), erase: vec_c(&mut g, &e1), add: vec_c(&mut g, &a1) };
                let h2 = WriteOp { weighting: vec_c(&mut g, &w2), erase: vec_c(&mut g, &e2), add: vec_c(&mut g, &a2) };
                let ab = write_heads(&mut g, m, &[h1, h2]).unwrap();
                let ba = write_heads(&mut g, m, &[h2, h1]).unwrap();
                prop_assert!(close(g.data(ab), g.data(ba), 1e-12));
            }

            #[test]
            fn sharpen_preserves_argmax(w in distribution(10), gamma in 1.0f64..20.0) {
                let mut g = Graph::new();
                let wv = vec_c(&mut g, &w);
                let gv = scalar_c(&mut g, gamma);
                let out = sharpen(&mut g, wv, gv).unwrap();
                let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
                prop_assert_eq!(argmax(&w), argmax(g.data(out)));
                prop_assert!(is_weighting(g.data(out), 1e-6));
            }

            #[test]
            fn one_hot_write_then_read_round_trips(
                cells in prop::collection::vec(-2.0f64..2.0, 15),
                row in 0usize..5,
                v in prop::collection::vec(-3.0f64..3.0, 3),
            ) {
                let mut g = Graph::new();
                let m = mat_c(&mut g, 5, &cells);
                let mut onehot = vec![0.0; 5];
                onehot[row] = 1.0;
                let w = vec_c(&mut g, &onehot);
                let ones = vec_c(&mut g, &[1.0; 3]);
                let a = vec_c(&mut g, &v);
                let m2 = write(&mut g, m, w, ones, a).unwrap();
                let r = read(&mut g, m2, w).unwrap();
                prop_assert_eq!(g.data(r), v.as_slice());
            }
        }
    }
}

//! Binary addition and multiplication episodes.
//!
//! Numbers are little-endian bit strings (bit `i` weighs `2^i`). An input
//! sequence is `operand1, OP, operand2, END`; the target is the result bits
//! followed by `END`. Each element is a 3-vector:
//!
//! | symbol | vector  |
//! |--------|---------|
//! | `0`    | `0 0 0` |
//! | `1`    | `1 0 0` |
//! | `+ *`  | `0 1 0` |
//! | `END`  | `0 0 1` |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

/// Largest operand length representable: products must fit in `u128`.
pub const MAX_OPERAND_BITS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("{value} does not fit in {bits} bits")]
    Overflow { value: u128, bits: usize },
    #[error("operand length must be in 1..={MAX_OPERAND_BITS}, got {0}")]
    BadLength(usize),
    #[error("operands have different lengths ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("unknown task kind {0:?} (expected add or mul)")]
    UnknownKind(String),
    #[error("malformed dataset line {0:?}")]
    BadLine(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    Zero,
    One,
    Op,
    End,
}

pub fn encode_symbol(s: Symbol) -> [f64; 3] {
    match s {
        Symbol::Zero => [0.0, 0.0, 0.0],
        Symbol::One => [1.0, 0.0, 0.0],
        Symbol::Op => [0.0, 1.0, 0.0],
        Symbol::End => [0.0, 0.0, 1.0],
    }
}

fn bit_symbol(bit: u8) -> Symbol {
    if bit == 0 {
        Symbol::Zero
    } else {
        Symbol::One
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Add,
    Mul,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Add => "add",
            TaskKind::Mul => "mul",
        }
    }

    /// Number of result bits for operands of length `len`.
    pub fn result_bits(self, len: usize) -> usize {
        match self {
            TaskKind::Add => len + 1,
            TaskKind::Mul => 2 * len,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "add" => Ok(TaskKind::Add),
            "mul" => Ok(TaskKind::Mul),
            other => Err(TaskError::UnknownKind(other.to_string())),
        }
    }
}

/// Little-endian bits of `n` over exactly `len` positions.
pub fn to_little_endian(n: u128, len: usize) -> Result<Vec<u8>, TaskError> {
    if len < 128 && n >> len != 0 {
        return Err(TaskError::Overflow { value: n, bits: len });
    }
    Ok((0..len)
        .map(|i| if i < 128 { ((n >> i) & 1) as u8 } else { 0 })
        .collect())
}

pub fn from_little_endian(bits: &[u8]) -> u128 {
    bits.iter().rev().fold(0u128, |acc, &b| (acc << 1) | b as u128)
}

/// Ripple-carry sum of two equal-length little-endian numbers; `l + 1` bits.
pub fn oracle_add(n1: &[u8], n2: &[u8]) -> Result<Vec<u8>, TaskError> {
    if n1.len() != n2.len() {
        return Err(TaskError::LengthMismatch(n1.len(), n2.len()));
    }
    let mut sum = Vec::with_capacity(n1.len() + 1);
    let mut carry = 0;
    for (a, b) in n1.iter().zip(n2) {
        let t = a + b + carry;
        sum.push(t % 2);
        carry = t / 2;
    }
    sum.push(carry);
    Ok(sum)
}

/// Shift-and-add product of two equal-length little-endian numbers; `2l` bits.
pub fn oracle_mul(n1: &[u8], n2: &[u8]) -> Result<Vec<u8>, TaskError> {
    if n1.len() != n2.len() {
        return Err(TaskError::LengthMismatch(n1.len(), n2.len()));
    }
    let l = n1.len();
    let mut s = vec![0u8; 2 * l];
    for (j, _) in n1.iter().enumerate().filter(|(_, &bit)| bit == 1) {
        let mut carry = 0;
        for (i, &b) in n2.iter().enumerate() {
            let t = s[i + j] + b + carry;
            s[i + j] = t % 2;
            carry = t / 2;
        }
        let mut k = j + l;
        while carry > 0 {
            let t = s[k] + carry;
            s[k] = t % 2;
            carry = t / 2;
            k += 1;
        }
    }
    Ok(s)
}

/// One arithmetic episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub kind: TaskKind,
    pub a: u64,
    pub b: u64,
    pub operand1: Vec<u8>,
    pub operand2: Vec<u8>,
    pub result: Vec<u8>,
    pub input: Vec<[f64; 3]>,
    pub target: Vec<[f64; 3]>,
}

impl TaskExample {
    /// Operand length `l`.
    pub fn bits(&self) -> usize {
        self.operand1.len()
    }

    /// Target steps that carry result bits (everything but the final END).
    pub fn number_steps(&self) -> usize {
        self.result.len()
    }

    /// Total episode length: input steps followed by output steps.
    pub fn episode_len(&self) -> usize {
        self.input.len() + self.target.len()
    }

    /// Dataset line `<kind> <bits> <a> <b>`.
    pub fn to_line(&self) -> String {
        format!("{} {} {} {}", self.kind, self.bits(), self.a, self.b)
    }
}

/// Builds the episode for `a ∘ b` with both operands written over `bits` bits.
pub fn make_example(a: u64, b: u64, bits: usize, kind: TaskKind) -> Result<TaskExample, TaskError> {
    if bits == 0 || bits > MAX_OPERAND_BITS {
        return Err(TaskError::BadLength(bits));
    }
    let operand1 = to_little_endian(a as u128, bits)?;
    let operand2 = to_little_endian(b as u128, bits)?;
    let result = match kind {
        TaskKind::Add => oracle_add(&operand1, &operand2)?,
        TaskKind::Mul => oracle_mul(&operand1, &operand2)?,
    };

    let mut input = Vec::with_capacity(2 * bits + 2);
    input.extend(operand1.iter().map(|&b| encode_symbol(bit_symbol(b))));
    input.push(encode_symbol(Symbol::Op));
    input.extend(operand2.iter().map(|&b| encode_symbol(bit_symbol(b))));
    input.push(encode_symbol(Symbol::End));

    let mut target: Vec<[f64; 3]> = result.iter().map(|&b| encode_symbol(bit_symbol(b))).collect();
    target.push(encode_symbol(Symbol::End));

    Ok(TaskExample {
        kind,
        a,
        b,
        operand1,
        operand2,
        result,
        input,
        target,
    })
}

/// Random operands of exactly `len` bits (values uniform in `[0, 2^len)`).
pub fn sample_with_length<R: Rng + ?Sized>(rng: &mut R, len: usize, kind: TaskKind) -> Result<TaskExample, TaskError> {
    if len == 0 || len > MAX_OPERAND_BITS {
        return Err(TaskError::BadLength(len));
    }
    let bound = 1u128 << len;
    let a = rng.gen_range(0..bound) as u64;
    let b = rng.gen_range(0..bound) as u64;
    make_example(a, b, len, kind)
}

/// Operand length uniform in `1..=max_bits`, then operands uniform over that length.
pub fn sample_example<R: Rng + ?Sized>(rng: &mut R, max_bits: usize, kind: TaskKind) -> Result<TaskExample, TaskError> {
    if max_bits == 0 || max_bits > MAX_OPERAND_BITS {
        return Err(TaskError::BadLength(max_bits));
    }
    let len = rng.gen_range(1..=max_bits);
    sample_with_length(rng, len, kind)
}

/// Parses a dataset line written by [`TaskExample::to_line`].
pub fn parse_line(line: &str) -> Result<TaskExample, TaskError> {
    let bad = || TaskError::BadLine(line.to_string());
    let fields: Vec<&str> = line.split_whitespace().collect();
    let [kind, bits, a, b] = fields.as_slice() else {
        return Err(bad());
    };
    let kind: TaskKind = kind.parse()?;
    let bits: usize = bits.parse().map_err(|_| bad())?;
    let a: u64 = a.parse().map_err(|_| bad())?;
    let b: u64 = b.parse().map_err(|_| bad())?;
    make_example(a, b, bits, kind)
}

//! Straight-line reverse-mode differentiation.
//!
//! A [`TapeSession`] is built once as a list of scalar nodes, then evaluated
//! with [`TapeSession::forward`] for concrete input vectors and differentiated
//! with [`TapeSession::vjp`]. Branches are resolved before recording, so the
//! tape never contains control flow.
//!
//! `min`/`max` send the whole cotangent to the first argument on exact ties.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("input slot `{slot}` expects {expected} values, got {got}")]
    InputDimension {
        slot: String,
        expected: usize,
        got: usize,
    },
    #[error("input slot `{0}` is not bound")]
    UnboundInput(String),
    #[error("unknown input slot `{0}`")]
    UnknownInput(String),
    #[error("non-finite value at node {node} ({kind:?})")]
    NonFinite { node: usize, kind: OpKind },
    #[error("pow with non-integer exponent needs a positive base (node {node})")]
    PowDomain { node: usize },
    #[error("vjp called before forward")]
    BackwardBeforeForward,
    #[error("seed has {got} entries but the session has {expected} outputs")]
    SeedDimension { expected: usize, got: usize },
    #[error("dot product operands differ in length ({0} vs {1})")]
    DotLength(usize, usize),
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Sqrt,
    Pow,
    Min,
    Max,
    Dot,
    Sum,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Input { slot: usize, offset: usize },
    Const(S),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sqrt(Var),
    Pow(Var, S),
    Min(Var, Var),
    Max(Var, Var),
    Dot(Vec<Var>, Vec<Var>),
    Sum(Vec<Var>),
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::Const(_) => OpKind::Const,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Neg(_) => OpKind::Neg,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Pow(..) => OpKind::Pow,
            Op::Min(..) => OpKind::Min,
            Op::Max(..) => OpKind::Max,
            Op::Dot(..) => OpKind::Dot,
            Op::Sum(_) => OpKind::Sum,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input { .. } | Op::Const(_) => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Min(a, b)
            | Op::Max(a, b) => vec![*a, *b],
            Op::Neg(a) | Op::Exp(a) | Op::Log(a) | Op::Tanh(a) | Op::Sqrt(a) | Op::Pow(a, _) => {
                vec![*a]
            }
            Op::Dot(a, b) => a.iter().chain(b).copied().collect(),
            Op::Sum(a) => a.clone(),
        }
    }
}

/// Read-only view of a recorded node.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeNode<S> {
    pub kind: OpKind,
    pub parents: Vec<Var>,
    pub value: Option<S>,
}

#[derive(Debug, Clone)]
struct InputSlot {
    name: String,
    vars: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Recorded,
    Evaluated,
}

/// Adjoints of every input slot after a backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjoints<S> {
    slots: Vec<(String, Vec<S>)>,
}

impl<S: Scalar> Adjoints<S> {
    pub fn get(&self, name: &str) -> Option<&[S]> {
        self.slots
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[S])> {
        self.slots.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }
}

/// A recorded computation with named vector inputs and scalar outputs.
#[derive(Debug, Clone)]
pub struct TapeSession<S> {
    ops: Vec<Op<S>>,
    values: Vec<S>,
    slots: Vec<InputSlot>,
    outputs: Vec<Var>,
    stage: Stage,
}

impl<S: Scalar> Default for TapeSession<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> TapeSession<S> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            slots: Vec::new(),
            outputs: Vec::new(),
            stage: Stage::Recorded,
        }
    }

    fn push(&mut self, op: Op<S>) -> Var {
        self.ops.push(op);
        self.stage = Stage::Recorded;
        Var(self.ops.len() - 1)
    }

    /// Declares a named input vector of length `len`.
    pub fn input(&mut self, name: &str, len: usize) -> Vec<Var> {
        let slot = self.slots.len();
        let vars = (0..len)
            .map(|offset| self.push(Op::Input { slot, offset }))
            .collect::<Vec<_>>();
        self.slots.push(InputSlot {
            name: name.to_owned(),
            vars: vars.clone(),
        });
        vars
    }

    pub fn constant(&mut self, c: S) -> Var {
        self.push(Op::Const(c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a))
    }

    /// `a` raised to a constant exponent.
    pub fn pow(&mut self, a: Var, exponent: S) -> Var {
        self.push(Op::Pow(a, exponent))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Min(a, b))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Max(a, b))
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Result<Var, TapeError> {
        if a.len() != b.len() {
            return Err(TapeError::DotLength(a.len(), b.len()));
        }
        Ok(self.push(Op::Dot(a.to_vec(), b.to_vec())))
    }

    /// Row-major matrix of nodes times a vector of nodes.
    pub fn matvec(&mut self, rows: &[Vec<Var>], x: &[Var]) -> Result<Vec<Var>, TapeError> {
        rows.iter().map(|row| self.dot(row, x)).collect()
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        self.push(Op::Sum(terms.to_vec()))
    }

    /// Multiplies by a constant (records a const node and a product).
    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let k = self.constant(c);
        self.mul(a, k)
    }

    /// Adds a constant.
    pub fn shift(&mut self, a: Var, c: S) -> Var {
        let k = self.constant(c);
        self.add(a, k)
    }

    /// Marks the given nodes as the session outputs (in order).
    pub fn set_outputs(&mut self, outputs: &[Var]) {
        self.outputs = outputs.to_vec();
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn node(&self, v: Var) -> TapeNode<S> {
        let op = &self.ops[v.0];
        TapeNode {
            kind: op.kind(),
            parents: op.parents(),
            value: (self.stage == Stage::Evaluated).then(|| self.values[v.0]),
        }
    }

    /// Primal value of a node after [`forward`](Self::forward).
    pub fn value(&self, v: Var) -> Option<S> {
        (self.stage == Stage::Evaluated).then(|| self.values[v.0])
    }

    /// Re-applies a node's op to its parents' recorded primals.
    pub fn recompute(&self, v: Var) -> Option<S> {
        if self.stage != Stage::Evaluated {
            return None;
        }
        match &self.ops[v.0] {
            Op::Input { .. } => Some(self.values[v.0]),
            op => Some(self.apply(op)),
        }
    }

    fn apply(&self, op: &Op<S>) -> S {
        let val = |v: &Var| self.values[v.0];
        match op {
            Op::Input { .. } => unreachable!("inputs are bound, not applied"),
            Op::Const(c) => *c,
            Op::Add(a, b) => val(a) + val(b),
            Op::Sub(a, b) => val(a) - val(b),
            Op::Mul(a, b) => val(a) * val(b),
            Op::Div(a, b) => val(a) / val(b),
            Op::Neg(a) => -val(a),
            Op::Exp(a) => val(a).exp(),
            Op::Log(a) => val(a).ln(),
            Op::Tanh(a) => val(a).tanh(),
            Op::Sqrt(a) => val(a).sqrt(),
            Op::Pow(a, p) => {
                if p.fract() == S::zero() {
                    if let Some(n) = p.to_i32() {
                        return val(a).powi(n);
                    }
                }
                val(a).powf(*p)
            }
            Op::Min(a, b) => {
                if val(a) <= val(b) {
                    val(a)
                } else {
                    val(b)
                }
            }
            Op::Max(a, b) => {
                if val(a) >= val(b) {
                    val(a)
                } else {
                    val(b)
                }
            }
            Op::Dot(a, b) => a
                .iter()
                .zip(b)
                .fold(S::zero(), |acc, (x, y)| acc + val(x) * val(y)),
            Op::Sum(a) => a.iter().fold(S::zero(), |acc, x| acc + val(x)),
        }
    }

    /// Evaluates every node for the given named inputs and returns the outputs.
    pub fn forward(&mut self, inputs: &[(&str, &[S])]) -> Result<Vec<S>, TapeError> {
        for (name, _) in inputs {
            if !self.slots.iter().any(|s| s.name == *name) {
                return Err(TapeError::UnknownInput((*name).to_owned()));
            }
        }
        let mut bound: Vec<&[S]> = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            let data = inputs
                .iter()
                .find(|(n, _)| *n == slot.name)
                .map(|(_, d)| *d)
                .ok_or_else(|| TapeError::UnboundInput(slot.name.clone()))?;
            if data.len() != slot.vars.len() {
                return Err(TapeError::InputDimension {
                    slot: slot.name.clone(),
                    expected: slot.vars.len(),
                    got: data.len(),
                });
            }
            bound.push(data);
        }

        self.stage = Stage::Recorded;
        self.values.clear();
        self.values.reserve(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                Op::Input { slot, offset } => bound[*slot][*offset],
                Op::Pow(a, p) => {
                    let base = self.values[a.0];
                    if p.fract() != S::zero() && base <= S::zero() {
                        return Err(TapeError::PowDomain { node: i });
                    }
                    self.apply(op)
                }
                _ => self.apply(op),
            };
            if !v.is_finite() {
                return Err(TapeError::NonFinite {
                    node: i,
                    kind: op.kind(),
                });
            }
            self.values.push(v);
        }
        self.stage = Stage::Evaluated;
        Ok(self.outputs.iter().map(|o| self.values[o.0]).collect())
    }

    /// Pulls `seed` back through the tape: returns `seedᵀ ∂outputs/∂input` per slot.
    pub fn vjp(&self, seed: &[S]) -> Result<Adjoints<S>, TapeError> {
        if self.stage != Stage::Evaluated {
            return Err(TapeError::BackwardBeforeForward);
        }
        if seed.len() != self.outputs.len() {
            return Err(TapeError::SeedDimension {
                expected: self.outputs.len(),
                got: seed.len(),
            });
        }
        let mut bar = vec![S::zero(); self.ops.len()];
        for (o, &s) in self.outputs.iter().zip(seed) {
            bar[o.0] += s;
        }
        for i in (0..self.ops.len()).rev() {
            let g = bar[i];
            if g == S::zero() {
                continue;
            }
            let val = |v: &Var| self.values[v.0];
            match &self.ops[i] {
                Op::Input { .. } | Op::Const(_) => {}
                Op::Add(a, b) => {
                    bar[a.0] += g;
                    bar[b.0] += g;
                }
                Op::Sub(a, b) => {
                    bar[a.0] += g;
                    bar[b.0] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    bar[a.0] += g * vb;
                    bar[b.0] += g * va;
                }
                Op::Div(a, b) => {
                    let vb = val(b);
                    bar[a.0] += g / vb;
                    bar[b.0] -= g * self.values[i] / vb;
                }
                Op::Neg(a) => bar[a.0] -= g,
                Op::Exp(a) => bar[a.0] += g * self.values[i],
                Op::Log(a) => bar[a.0] += g / val(a),
                Op::Tanh(a) => {
                    let t = self.values[i];
                    bar[a.0] += g * (S::one() - t * t);
                }
                Op::Sqrt(a) => bar[a.0] += g / (S::of(2.0) * self.values[i]),
                Op::Pow(a, p) => {
                    let pm1 = *p - S::one();
                    let d = if pm1 == S::zero() {
                        S::one()
                    } else if pm1.fract() == S::zero() {
                        val(a).powi(pm1.to_i32().unwrap_or(0))
                    } else {
                        val(a).powf(pm1)
                    };
                    bar[a.0] += g * *p * d;
                }
                Op::Min(a, b) => {
                    if val(a) <= val(b) {
                        bar[a.0] += g;
                    } else {
                        bar[b.0] += g;
                    }
                }
                Op::Max(a, b) => {
                    if val(a) >= val(b) {
                        bar[a.0] += g;
                    } else {
                        bar[b.0] += g;
                    }
                }
                Op::Dot(a, b) => {
                    for (x, y) in a.iter().zip(b) {
                        let (vx, vy) = (val(x), val(y));
                        bar[x.0] += g * vy;
                        bar[y.0] += g * vx;
                    }
                }
                Op::Sum(a) => {
                    for x in a {
                        bar[x.0] += g;
                    }
                }
            }
        }
        let slots = self
            .slots
            .iter()
            .map(|s| (s.name.clone(), s.vars.iter().map(|v| bar[v.0]).collect()))
            .collect();
        Ok(Adjoints { slots })
    }
}

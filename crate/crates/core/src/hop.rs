//! High-level operator DAGs: the optimizer's input language.
//!
//! Nodes carry exact dimensions and worst-case sparsity estimates after
//! `propagate_sizes`; the optimizer relies on both for validity checks and
//! costing. DAGs are immutable after propagation.

use crate::error::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;

pub type HopId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UnaryOp {
    Exp,
    Log,
    Sqrt,
    Abs,
    Round,
    Sign,
    Sq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mult,
    Div,
    Min,
    Max,
    Neq,
    Lt,
    Gt,
    Eq,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TernaryOp {
    IfElse,
    MultAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AggFn {
    Sum,
    SumSq,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AggDir {
    Full,
    Row,
    Col,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Op {
    /// Named data input.
    Read(String),
    /// Literal scalar.
    Literal(f64),
    Unary(UnaryOp),
    Binary(BinaryOp),
    Ternary(TernaryOp),
    Agg(AggFn, AggDir),
    /// Matrix multiply (binary aggregate +*).
    MatMul,
    Transpose,
    /// Right column-range indexing, 1-based inclusive.
    ColIndex { from: u64, to: u64 },
    Cbind,
}

impl Op {
    pub fn arity(&self) -> usize {
        match self {
            Op::Read(_) | Op::Literal(_) => 0,
            Op::Unary(_) | Op::Agg(..) | Op::Transpose | Op::ColIndex { .. } => 1,
            Op::Binary(_) | Op::MatMul | Op::Cbind => 2,
            Op::Ternary(_) => 3,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Read(_) | Op::Literal(_))
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, Op::Unary(_) | Op::Binary(_) | Op::Ternary(_))
    }

    pub fn is_comparison(&self) -> bool {
        matches!(
            self,
            Op::Binary(BinaryOp::Neq | BinaryOp::Lt | BinaryOp::Gt | BinaryOp::Eq)
        )
    }

    /// Short mnemonic used in memo dumps and explain output.
    pub fn mnemonic(&self) -> String {
        match self {
            Op::Read(n) => n.clone(),
            Op::Literal(v) => format!("{v}"),
            Op::Unary(u) => format!("u({u:?})").to_lowercase(),
            Op::Binary(b) => format!("b({b:?})").to_lowercase(),
            Op::Ternary(t) => format!("t({t:?})").to_lowercase(),
            Op::Agg(f, AggDir::Full) => format!("ua({f:?})").to_lowercase(),
            Op::Agg(f, AggDir::Row) => format!("ua(r{f:?})").to_lowercase(),
            Op::Agg(f, AggDir::Col) => format!("ua(c{f:?})").to_lowercase(),
            Op::MatMul => "ba(+*)".into(),
            Op::Transpose => "t".into(),
            Op::ColIndex { .. } => "rix".into(),
            Op::Cbind => "cbind".into(),
        }
    }
}

/// Matrix dimensions; 1x1 denotes a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub rows: u64,
    pub cols: u64,
}

impl Dims {
    pub fn new(rows: u64, cols: u64) -> Self {
        Dims { rows, cols }
    }

    pub fn scalar() -> Self {
        Dims { rows: 1, cols: 1 }
    }

    pub fn cells(&self) -> u64 {
        self.rows * self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn is_col_vector(&self) -> bool {
        self.cols == 1 && self.rows > 1
    }

    pub fn is_row_vector(&self) -> bool {
        self.rows == 1 && self.cols > 1
    }

    pub fn is_matrix(&self) -> bool {
        self.rows > 1 && self.cols > 1
    }

    /// Element-wise broadcast of two shapes; scalars and aligned vectors
    /// expand against matrices.
    pub fn broadcast(&self, other: &Dims) -> Option<Dims> {
        if self == other {
            return Some(*self);
        }
        if self.is_scalar() {
            return Some(*other);
        }
        if other.is_scalar() {
            return Some(*self);
        }
        // column vector against matrix with matching rows
        if self.rows == other.rows && (self.cols == 1 || other.cols == 1) {
            return Some(Dims::new(self.rows, self.cols.max(other.cols)));
        }
        // row vector against matrix with matching cols
        if self.cols == other.cols && (self.rows == 1 || other.rows == 1) {
            return Some(Dims::new(self.rows.max(other.rows), self.cols));
        }
        None
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Hop {
    pub id: HopId,
    pub op: Op,
    pub inputs: Vec<HopId>,
    pub dims: Dims,
    /// Worst-case sparsity estimate in [0, 1].
    pub sparsity: f64,
}

#[derive(Debug, Clone, Default)]
pub struct HopDag {
    nodes: Vec<Hop>,
    consumers: Vec<Vec<HopId>>,
    /// Root outputs in assignment order: (name, hop).
    pub outputs: Vec<(String, HopId)>,
    propagated: bool,
}

/// Leaf metadata: dimensions plus sparsity per named input.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, Serialize)]
pub struct LeafMeta {
    pub rows: u64,
    pub cols: u64,
    pub sparsity: f64,
}

impl HopDag {
    pub fn new() -> Self {
        HopDag::default()
    }

    pub fn add(&mut self, op: Op, inputs: Vec<HopId>) -> HopId {
        debug_assert_eq!(op.arity(), inputs.len(), "input arity matches op");
        let id = self.nodes.len();
        for &i in &inputs {
            debug_assert!(i < id, "DAG acyclicity by construction");
            self.consumers[i].push(id);
        }
        let sparsity = if let Op::Literal(v) = op {
            if v != 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0
        };
        let dims = if matches!(op, Op::Literal(_)) {
            Dims::scalar()
        } else {
            Dims::new(0, 0)
        };
        self.nodes.push(Hop {
            id,
            op,
            inputs,
            dims,
            sparsity,
        });
        self.consumers.push(Vec::new());
        id
    }

    pub fn node(&self, id: HopId) -> &Hop {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Hop] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn consumers(&self, id: HopId) -> &[HopId] {
        &self.consumers[id]
    }

    pub fn is_propagated(&self) -> bool {
        self.propagated
    }

    /// Ids with no consumers, in creation order.
    pub fn roots(&self) -> Vec<HopId> {
        (0..self.nodes.len())
            .filter(|&id| self.consumers[id].is_empty())
            .collect()
    }

    pub fn leaves(&self) -> Vec<HopId> {
        (0..self.nodes.len())
            .filter(|&id| self.nodes[id].op.is_leaf())
            .collect()
    }

    pub fn describe(&self, id: HopId) -> String {
        let h = &self.nodes[id];
        format!("{} #{} {}", h.op.mnemonic(), id, h.dims)
    }

    /// Propagates exact dimensions and worst-case sparsity estimates bottom-up.
    /// Total and deterministic for the supported vocabulary.
    pub fn propagate_sizes(&mut self, leaf_meta: &BTreeMap<String, LeafMeta>) -> Result<()> {
        for id in 0..self.nodes.len() {
            let (dims, sparsity) = self.infer(id, leaf_meta)?;
            self.nodes[id].dims = dims;
            self.nodes[id].sparsity = sparsity.clamp(0.0, 1.0);
        }
        self.propagated = true;
        Ok(())
    }

    fn infer(&self, id: HopId, meta: &BTreeMap<String, LeafMeta>) -> Result<(Dims, f64)> {
        let h = &self.nodes[id];
        let ind = |k: usize| -> &Hop { &self.nodes[h.inputs[k]] };
        let mismatch = |msg: &str, a: &Hop, b: &Hop| {
            Err(Error::ShapeMismatch {
                msg: msg.to_string(),
                lhs: format!("{} #{} {}", a.op.mnemonic(), a.id, a.dims),
                rhs: format!("{} #{} {}", b.op.mnemonic(), b.id, b.dims),
            })
        };
        match &h.op {
            Op::Read(name) => {
                let m = meta
                    .get(name)
                    .ok_or_else(|| Error::MissingMeta(name.clone()))?;
                Ok((Dims::new(m.rows, m.cols), m.sparsity.clamp(0.0, 1.0)))
            }
            Op::Literal(v) => Ok((Dims::scalar(), if *v != 0.0 { 1.0 } else { 0.0 })),
            Op::Unary(u) => {
                let a = ind(0);
                let s = match u {
                    UnaryOp::Exp | UnaryOp::Log => 1.0,
                    UnaryOp::Sqrt | UnaryOp::Abs | UnaryOp::Round | UnaryOp::Sign | UnaryOp::Sq => {
                        a.sparsity
                    }
                };
                Ok((a.dims, s))
            }
            Op::Binary(b) => {
                let (x, y) = (ind(0), ind(1));
                let dims = match x.dims.broadcast(&y.dims) {
                    Some(d) => d,
                    None => return mismatch("element-wise operands do not align", x, y),
                };
                let s = binary_sparsity(*b, x, y);
                Ok((dims, s))
            }
            Op::Ternary(t) => {
                let (a, b, c) = (ind(0), ind(1), ind(2));
                let d1 = match a.dims.broadcast(&b.dims) {
                    Some(d) => d,
                    None => return mismatch("ternary operands do not align", a, b),
                };
                let dims = match d1.broadcast(&c.dims) {
                    Some(d) => d,
                    None => return mismatch("ternary operands do not align", b, c),
                };
                let s = match t {
                    TernaryOp::IfElse => 1.0,
                    TernaryOp::MultAdd => (a.sparsity * b.sparsity + c.sparsity).min(1.0),
                };
                Ok((dims, s))
            }
            Op::Agg(_, dir) => {
                let a = ind(0);
                let dims = match dir {
                    AggDir::Full => Dims::scalar(),
                    AggDir::Row => Dims::new(a.dims.rows, 1),
                    AggDir::Col => Dims::new(1, a.dims.cols),
                };
                let s = match dir {
                    AggDir::Full => 1.0,
                    AggDir::Row => union_sparsity(a.sparsity, a.dims.cols),
                    AggDir::Col => union_sparsity(a.sparsity, a.dims.rows),
                };
                Ok((dims, s))
            }
            Op::MatMul => {
                let (x, y) = (ind(0), ind(1));
                if x.dims.cols != y.dims.rows {
                    return mismatch("inner dimensions differ", x, y);
                }
                let dims = Dims::new(x.dims.rows, y.dims.cols);
                let s = union_sparsity(x.sparsity * y.sparsity, x.dims.cols);
                Ok((dims, s))
            }
            Op::Transpose => {
                let a = ind(0);
                Ok((Dims::new(a.dims.cols, a.dims.rows), a.sparsity))
            }
            Op::ColIndex { from, to } => {
                let a = ind(0);
                if *from < 1 || *to < *from || *to > a.dims.cols {
                    return Err(Error::ShapeMismatch {
                        msg: format!("column range {from}:{to} outside 1:{}", a.dims.cols),
                        lhs: self.describe(a.id),
                        rhs: format!("range {from}:{to}"),
                    });
                }
                Ok((Dims::new(a.dims.rows, to - from + 1), a.sparsity))
            }
            Op::Cbind => {
                let (x, y) = (ind(0), ind(1));
                if x.dims.rows != y.dims.rows {
                    return mismatch("cbind row counts differ", x, y);
                }
                let dims = Dims::new(x.dims.rows, x.dims.cols + y.dims.cols);
                let s = (x.sparsity * x.dims.cols as f64 + y.sparsity * y.dims.cols as f64)
                    / dims.cols as f64;
                Ok((dims, s))
            }
        }
    }

    /// Dense-basis flop estimate per node, used by the cost model.
    pub fn flops(&self, id: HopId) -> u64 {
        let h = &self.nodes[id];
        match &h.op {
            Op::Read(_) | Op::Literal(_) | Op::Transpose | Op::ColIndex { .. } | Op::Cbind => 0,
            Op::Unary(_) | Op::Binary(_) => h.dims.cells(),
            Op::Ternary(_) => 2 * h.dims.cells(),
            Op::Agg(f, _) => {
                let input = self.node(h.inputs[0]).dims.cells();
                match f {
                    AggFn::SumSq => 2 * input,
                    _ => input,
                }
            }
            Op::MatMul => {
                let x = self.node(h.inputs[0]).dims;
                2 * x.rows * x.cols * self.node(h.inputs[1]).dims.cols
            }
        }
    }
}

fn binary_sparsity(op: BinaryOp, x: &Hop, y: &Hop) -> f64 {
    let (sx, sy) = (x.sparsity, y.sparsity);
    match op {
        BinaryOp::Mult => {
            // independence estimate, but min() when either operand is a
            // comparison output so Outer validity stays decidable
            if x.op.is_comparison() || y.op.is_comparison() {
                sx.min(sy)
            } else {
                sx * sy
            }
        }
        BinaryOp::Add | BinaryOp::Sub | BinaryOp::Min | BinaryOp::Max => (sx + sy).min(1.0),
        BinaryOp::Div => sx,
        BinaryOp::Pow => {
            // zero-preserving for positive literal exponents
            if let Op::Literal(e) = y.op {
                if e > 0.0 {
                    return sx;
                }
            }
            1.0
        }
        BinaryOp::Neq | BinaryOp::Gt => {
            if matches!(y.op, Op::Literal(v) if v == 0.0) {
                sx
            } else {
                1.0
            }
        }
        BinaryOp::Lt => {
            if matches!(y.op, Op::Literal(v) if v == 0.0) {
                sx
            } else {
                1.0
            }
        }
        BinaryOp::Eq => 1.0,
    }
}

/// 1 - (1 - s)^n, the chance a reduced cell has any stored contribution.
fn union_sparsity(s: f64, n: u64) -> f64 {
    if s >= 1.0 {
        return 1.0;
    }
    1.0 - (1.0 - s).powf(n as f64)
}

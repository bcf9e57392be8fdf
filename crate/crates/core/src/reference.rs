//! Unfused reference interpreter.
//!
//! Evaluates a HopDag bottom-up with one materialized intermediate per node.
//! This is the "Base" execution mode and the numeric oracle that fused
//! execution is checked against. Single-threaded, deterministic; all
//! aggregations accumulate in plain f64 (no compensated summation), which is
//! a documented tolerance source for the fused/unfused comparison.

use crate::counters::KernelCounters;
use crate::error::{Error, Result};
use crate::hop::{AggDir, AggFn, BinaryOp, HopDag, HopId, Op, TernaryOp, UnaryOp};
use crate::matrix::Matrix;
use std::collections::BTreeMap;

pub fn apply_unary(op: UnaryOp, a: f64) -> f64 {
    match op {
        UnaryOp::Exp => a.exp(),
        UnaryOp::Log => a.ln(),
        UnaryOp::Sqrt => a.sqrt(),
        UnaryOp::Abs => a.abs(),
        UnaryOp::Round => a.round(),
        UnaryOp::Sign => {
            if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryOp::Sq => a * a,
    }
}

pub fn apply_binary(op: BinaryOp, a: f64, b: f64) -> f64 {
    match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mult => a * b,
        BinaryOp::Div => a / b,
        BinaryOp::Min => a.min(b),
        BinaryOp::Max => a.max(b),
        BinaryOp::Neq => (a != b) as u8 as f64,
        BinaryOp::Lt => (a < b) as u8 as f64,
        BinaryOp::Gt => (a > b) as u8 as f64,
        BinaryOp::Eq => (a == b) as u8 as f64,
        BinaryOp::Pow => a.powf(b),
    }
}

pub fn apply_ternary(op: TernaryOp, a: f64, b: f64, c: f64) -> f64 {
    match op {
        TernaryOp::IfElse => {
            if a != 0.0 {
                b
            } else {
                c
            }
        }
        TernaryOp::MultAdd => a * b + c,
    }
}

/// Evaluates one operator over already-materialized inputs.
pub fn eval_op(dag: &HopDag, id: HopId, inputs: &[&Matrix]) -> Result<Matrix> {
    let h = dag.node(id);
    let out = match &h.op {
        Op::Read(_) | Op::Literal(_) => unreachable!("leaves are bound, not evaluated"),
        Op::Unary(u) => {
            let a = inputs[0];
            let data = (0..a.rows() * a.cols())
                .map(|k| apply_unary(*u, cell(a, k / a.cols(), k % a.cols())))
                .collect();
            Matrix::dense(a.rows(), a.cols(), data)
        }
        Op::Binary(b) => {
            let (x, y) = (inputs[0], inputs[1]);
            let rows = x.rows().max(y.rows());
            let cols = x.cols().max(y.cols());
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    data.push(apply_binary(*b, bcast(x, r, c), bcast(y, r, c)));
                }
            }
            Matrix::dense(rows, cols, data)
        }
        Op::Ternary(t) => {
            let (x, y, z) = (inputs[0], inputs[1], inputs[2]);
            let rows = x.rows().max(y.rows()).max(z.rows());
            let cols = x.cols().max(y.cols()).max(z.cols());
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    data.push(apply_ternary(*t, bcast(x, r, c), bcast(y, r, c), bcast(z, r, c)));
                }
            }
            Matrix::dense(rows, cols, data)
        }
        Op::Agg(f, dir) => aggregate(inputs[0], *f, *dir),
        Op::MatMul => matmul(inputs[0], inputs[1]),
        Op::Transpose => {
            let a = inputs[0];
            let mut data = vec![0.0; a.rows() * a.cols()];
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    data[c * a.rows() + r] = cell(a, r, c);
                }
            }
            Matrix::dense(a.cols(), a.rows(), data)
        }
        Op::ColIndex { from, to } => {
            let a = inputs[0];
            let (from, to) = (*from as usize - 1, *to as usize);
            let mut data = Vec::with_capacity(a.rows() * (to - from));
            for r in 0..a.rows() {
                for c in from..to {
                    data.push(cell(a, r, c));
                }
            }
            Matrix::dense(a.rows(), to - from, data)
        }
        Op::Cbind => {
            let (x, y) = (inputs[0], inputs[1]);
            let cols = x.cols() + y.cols();
            let mut data = Vec::with_capacity(x.rows() * cols);
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    data.push(cell(x, r, c));
                }
                for c in 0..y.cols() {
                    data.push(cell(y, r, c));
                }
            }
            Matrix::dense(x.rows(), cols, data)
        }
    };
    Ok(out)
}

#[inline]
fn cell(m: &Matrix, r: usize, c: usize) -> f64 {
    m.get(r, c)
}

#[inline]
fn bcast(m: &Matrix, r: usize, c: usize) -> f64 {
    let r = if m.rows() == 1 { 0 } else { r };
    let c = if m.cols() == 1 { 0 } else { c };
    m.get(r, c)
}

fn aggregate(a: &Matrix, f: AggFn, dir: AggDir) -> Matrix {
    let map = |v: f64| if f == AggFn::SumSq { v * v } else { v };
    let combine = |acc: f64, v: f64| match f {
        AggFn::Sum | AggFn::SumSq => acc + v,
        AggFn::Min => acc.min(v),
        AggFn::Max => acc.max(v),
    };
    let init = match f {
        AggFn::Sum | AggFn::SumSq => 0.0,
        AggFn::Min => f64::INFINITY,
        AggFn::Max => f64::NEG_INFINITY,
    };
    match dir {
        AggDir::Full => {
            let mut acc = init;
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    acc = combine(acc, map(cell(a, r, c)));
                }
            }
            Matrix::scalar(acc)
        }
        AggDir::Row => {
            let mut data = Vec::with_capacity(a.rows());
            for r in 0..a.rows() {
                let mut acc = init;
                for c in 0..a.cols() {
                    acc = combine(acc, map(cell(a, r, c)));
                }
                data.push(acc);
            }
            Matrix::dense(a.rows(), 1, data)
        }
        AggDir::Col => {
            let mut data = vec![init; a.cols()];
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    data[c] = combine(data[c], map(cell(a, r, c)));
                }
            }
            Matrix::dense(1, a.cols(), data)
        }
    }
}

fn matmul(x: &Matrix, y: &Matrix) -> Matrix {
    let (m, k, n) = (x.rows(), x.cols(), y.cols());
    assert_eq!(k, y.rows(), "inner dimensions checked by propagation");
    let yd = y.to_dense();
    let mut out = vec![0.0; m * n];
    if x.is_sparse() {
        for r in 0..m {
            let (ix, vals) = x.sparse_row(r);
            for (&p, &v) in ix.iter().zip(vals) {
                let yrow = &yd.dense_data()[p * n..(p + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                for q in 0..n {
                    orow[q] += v * yrow[q];
                }
            }
        }
    } else {
        let xd = x.dense_data();
        for r in 0..m {
            for p in 0..k {
                let v = xd[r * k + p];
                if v == 0.0 {
                    continue;
                }
                let yrow = &yd.dense_data()[p * n..(p + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                for q in 0..n {
                    orow[q] += v * yrow[q];
                }
            }
        }
    }
    Matrix::dense(m, n, out)
}

pub struct ReferenceResult {
    pub outputs: BTreeMap<String, Matrix>,
    pub counters: KernelCounters,
    /// Materialized non-output intermediates.
    pub intermediates: u64,
}

/// Evaluates every node bottom-up with one materialized intermediate per node.
pub fn reference_eval(dag: &HopDag, bindings: &BTreeMap<String, Matrix>) -> Result<ReferenceResult> {
    if !dag.is_propagated() {
        return Err(Error::Contract("DAG sizes not propagated".into()));
    }
    let mut values: Vec<Option<Matrix>> = vec![None; dag.len()];
    let mut counters = KernelCounters::new();
    let mut intermediates = 0u64;
    let output_ids: Vec<HopId> = dag.outputs.iter().map(|(_, id)| *id).collect();
    for h in dag.nodes() {
        match &h.op {
            Op::Read(name) => {
                let m = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                if (m.rows() as u64, m.cols() as u64) != (h.dims.rows, h.dims.cols) {
                    return Err(Error::ShapeMismatch {
                        msg: format!("binding '{name}' does not match metadata"),
                        lhs: format!("{}x{}", m.rows(), m.cols()),
                        rhs: h.dims.to_string(),
                    });
                }
                values[h.id] = Some(m.clone());
            }
            Op::Literal(v) => values[h.id] = Some(Matrix::scalar(*v)),
            _ => {
                let inputs: Vec<&Matrix> = h
                    .inputs
                    .iter()
                    .map(|&i| values[i].as_ref().expect("bottom-up order"))
                    .collect();
                // one full read per consumed intermediate or input
                for &i in &h.inputs {
                    counters.record_read(&input_name(dag, i));
                    let inp = values[i].as_ref().unwrap();
                    counters.cells_visited += inp.cells() as u64;
                }
                counters.flops += dag.flops(h.id);
                let out = eval_op(dag, h.id, &inputs)?;
                if !output_ids.contains(&h.id) {
                    intermediates += 1;
                }
                values[h.id] = Some(out);
            }
        }
    }
    let mut outputs = BTreeMap::new();
    for (name, id) in &dag.outputs {
        outputs.insert(name.clone(), values[*id].clone().expect("root evaluated"));
    }
    Ok(ReferenceResult {
        outputs,
        counters,
        intermediates,
    })
}

/// Stable name for read accounting: leaf name or a synthetic intermediate tag.
pub fn input_name(dag: &HopDag, id: HopId) -> String {
    match &dag.node(id).op {
        Op::Read(n) => n.clone(),
        Op::Literal(v) => format!("lit({v})"),
        _ => format!("tmp#{id}"),
    }
}

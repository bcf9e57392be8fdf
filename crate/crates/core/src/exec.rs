//! Interpreted template skeletons.
//!
//! The skeletons own data access (dense or sparse, nonzero-only when the plan
//! is sparse-safe), multi-threading-free deterministic iteration, and
//! aggregation; the plan body is evaluated per value like a generated
//! genexec. Prepared operators are immutable; a structural-hash plan cache
//! avoids redundant preparation.

use crate::config::Config;
use crate::counters::KernelCounters;
use crate::cplan::{CNodeOp, CPlan, CShape, MSource, Variant};
use crate::error::{Error, Result};
use crate::hop::{AggDir, AggFn, Dims, HopDag, HopId, Op};
use crate::kernels;
use crate::matrix::{Matrix, Storage};
use crate::reference::{self, apply_binary, apply_ternary, apply_unary, input_name};
use crate::side_input::SideInput;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

#[derive(Debug)]
pub struct PreparedOp {
    pub plan: CPlan,
    needs_dense_main_row: bool,
}

pub fn prepare(plan: &CPlan) -> PreparedOp {
    let vector_nodes = plan
        .body
        .iter()
        .filter(|n| matches!(n.shape, CShape::Vec(_)) && n.op != CNodeOp::MainRow)
        .count();
    assert!(
        plan.ring_buffer_size == 0 || vector_nodes <= plan.ring_buffer_size,
        "ring buffer overflow: {} slots for size {}",
        vector_nodes,
        plan.ring_buffer_size
    );
    let needs_dense_main_row = plan.body.iter().enumerate().any(|(i, n)| {
        let uses_main = n
            .children
            .iter()
            .any(|&c| plan.body[c].op == CNodeOp::MainRow);
        uses_main && !matches!(plan.body[i].op, CNodeOp::VecMatMult { .. })
    }) || plan
        .roots
        .iter()
        .any(|&r| plan.body[r].op == CNodeOp::MainRow);
    PreparedOp {
        plan: plan.clone(),
        needs_dense_main_row,
    }
}

/// Structural-hash keyed cache of prepared operators.
#[derive(Default)]
pub struct PlanCache {
    map: HashMap<u64, Arc<PreparedOp>>,
    pub hits: u64,
    pub misses: u64,
}

impl PlanCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prepare_operator(&mut self, plan: &CPlan) -> Arc<PreparedOp> {
        if let Some(op) = self.map.get(&plan.structural_hash) {
            self.hits += 1;
            return Arc::clone(op);
        }
        self.misses += 1;
        let op = Arc::new(prepare(plan));
        self.map.insert(plan.structural_hash, op.clone());
        op
    }

    pub fn hit_rate(&self) -> f64 {
        if self.hits + self.misses == 0 {
            0.0
        } else {
            self.hits as f64 / (self.hits + self.misses) as f64
        }
    }
}

/// Runtime inputs of one fused operator.
pub struct OpInputs<'a> {
    pub main: &'a Matrix,
    pub sides: Vec<&'a Matrix>,
    pub scalars: Vec<f64>,
    pub u: Option<&'a Matrix>,
    pub v: Option<&'a Matrix>,
}

struct EvalCtx<'a> {
    sides: Vec<SideInput<'a>>,
    side_dense: Vec<Option<Matrix>>,
    scalars: &'a [f64],
    slots: Vec<f64>,
    ring: Vec<Vec<f64>>,
    u_row: &'a [f64],
    v_row: &'a [f64],
}

impl<'a> EvalCtx<'a> {
    fn side_block(&self, idx: usize) -> &Matrix {
        self.side_dense[idx]
            .as_ref()
            .expect("full-access sides are densified at bind time")
    }
}

fn agg_seed(f: AggFn) -> f64 {
    match f {
        AggFn::Sum | AggFn::SumSq => 0.0,
        AggFn::Min => f64::INFINITY,
        AggFn::Max => f64::NEG_INFINITY,
    }
}

fn agg_map(f: AggFn, v: f64) -> f64 {
    if f == AggFn::SumSq {
        v * v
    } else {
        v
    }
}

fn agg_combine(f: AggFn, acc: f64, v: f64) -> f64 {
    match f {
        AggFn::Sum | AggFn::SumSq => acc + v,
        AggFn::Min => acc.min(v),
        AggFn::Max => acc.max(v),
    }
}

/// Executes a prepared operator over bound inputs. Deterministic: iteration
/// is row-major (or stored nonzero order) and aggregation reduces in index
/// order.
pub fn execute_fused(
    op: &PreparedOp,
    inputs: &OpInputs<'_>,
    counters: &mut KernelCounters,
) -> Result<Matrix> {
    let plan = &op.plan;
    check_shapes(plan, inputs)?;
    // each bound matrix counts one full pass
    let mut read_hops: BTreeSet<HopId> = BTreeSet::new();
    let record = |hop: HopId, name: &str, set: &mut BTreeSet<HopId>, c: &mut KernelCounters| {
        if set.insert(hop) {
            c.record_read(name);
        }
    };
    record(plan.main.hop, &plan.main.name, &mut read_hops, counters);
    for s in &plan.sides {
        record(s.hop, &s.name, &mut read_hops, counters);
    }
    if let Some(o) = &plan.outer {
        record(o.u_hop, &o.u_name, &mut read_hops, counters);
        record(o.v_hop, &o.v_name, &mut read_hops, counters);
    }

    let side_dense: Vec<Option<Matrix>> = plan
        .sides
        .iter()
        .zip(&inputs.sides)
        .map(|(b, m)| {
            if b.access == crate::side_input::SideAccess::Full {
                Some(m.to_dense())
            } else {
                None
            }
        })
        .collect();
    let mut ctx = EvalCtx {
        sides: plan
            .sides
            .iter()
            .zip(&inputs.sides)
            .map(|(b, m)| SideInput::new(m, b.access))
            .collect(),
        side_dense,
        scalars: &inputs.scalars,
        slots: vec![0.0; plan.body.len()],
        ring: plan
            .body
            .iter()
            .map(|n| match n.shape {
                CShape::Vec(len) => vec![0.0; len],
                CShape::Scalar => Vec::new(),
            })
            .collect(),
        u_row: &[],
        v_row: &[],
    };

    match plan.template {
        crate::templates::TemplateKind::Cell | crate::templates::TemplateKind::MultiAgg => {
            exec_cell(op, inputs, &mut ctx, counters)
        }
        crate::templates::TemplateKind::Row => exec_row(op, inputs, &mut ctx, counters),
        crate::templates::TemplateKind::Outer => exec_outer(op, inputs, &mut ctx, counters),
    }
}

fn check_shapes(plan: &CPlan, inputs: &OpInputs<'_>) -> Result<()> {
    let want = plan.main.dims;
    let got = Dims::new(inputs.main.rows() as u64, inputs.main.cols() as u64);
    if want != got {
        return Err(Error::ShapeMismatch {
            msg: format!("main input '{}'", plan.main.name),
            lhs: want.to_string(),
            rhs: got.to_string(),
        });
    }
    for (b, m) in plan.sides.iter().zip(&inputs.sides) {
        if (b.dims.rows, b.dims.cols) != (m.rows() as u64, m.cols() as u64) {
            return Err(Error::ShapeMismatch {
                msg: format!("side input '{}'", b.name),
                lhs: b.dims.to_string(),
                rhs: format!("{}x{}", m.rows(), m.cols()),
            });
        }
    }
    Ok(())
}

/// Scalar genexec: evaluates the body at one (rix, cix) with main value `a`.
fn genexec_scalar(
    op: &PreparedOp,
    ctx: &mut EvalCtx<'_>,
    a: f64,
    rix: usize,
    cix: usize,
    flops: &mut u64,
) {
    for i in 0..op.plan.body.len() {
        let node = &op.plan.body[i];
        let val = match &node.op {
            CNodeOp::MainCell => a,
            CNodeOp::SideCell {
                side,
                swap,
                col_offset,
            } => {
                let (r, c) = if *swap { (cix, rix) } else { (rix, cix) };
                ctx.sides[*side].get_value(r, c + *col_offset as usize)
            }
            CNodeOp::SideRowValue(side) => ctx.sides[*side].get_value(rix, 0),
            CNodeOp::Lit(v) => *v,
            CNodeOp::ScalarInput(k) => ctx.scalars[*k],
            CNodeOp::Unary(u) => {
                *flops += 1;
                apply_unary(*u, ctx.slots[node.children[0]])
            }
            CNodeOp::Binary(b) => {
                *flops += 1;
                apply_binary(*b, ctx.slots[node.children[0]], ctx.slots[node.children[1]])
            }
            CNodeOp::Ternary(t) => {
                *flops += 2;
                apply_ternary(
                    *t,
                    ctx.slots[node.children[0]],
                    ctx.slots[node.children[1]],
                    ctx.slots[node.children[2]],
                )
            }
            CNodeOp::OuterDot => {
                kernels::dot_product(ctx.u_row, ctx.v_row, 0, 0, ctx.u_row.len(), flops)
            }
            other => unreachable!("vector node {other:?} in scalar body"),
        };
        ctx.slots[i] = val;
    }
}

fn exec_cell(
    op: &PreparedOp,
    inputs: &OpInputs<'_>,
    ctx: &mut EvalCtx<'_>,
    counters: &mut KernelCounters,
) -> Result<Matrix> {
    let plan = &op.plan;
    let frame = plan.main.dims;
    let (rows, cols) = (frame.rows as usize, frame.cols as usize);
    let aggs: Vec<AggFn> = match &plan.variant {
        Variant::CellNoAgg => vec![],
        Variant::CellAgg(f, _) => vec![*f],
        Variant::MultiAgg(fs) => fs.clone(),
        other => unreachable!("cell exec with {other:?}"),
    };
    let dir = match &plan.variant {
        Variant::CellAgg(_, d) => Some(*d),
        Variant::MultiAgg(_) => Some(AggDir::Full),
        _ => None,
    };
    let mut flops = 0u64;
    let sparse_iter = plan.sparse_safe && inputs.main.is_sparse();

    let mut out_dense: Vec<f64> = Vec::new();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut acc_full: Vec<f64> = aggs.iter().map(|f| agg_seed(*f)).collect();
    let mut acc_rows: Vec<f64> = Vec::new();
    let mut acc_cols: Vec<f64> = Vec::new();
    match dir {
        None => out_dense = if sparse_iter { Vec::new() } else { vec![0.0; rows * cols] },
        Some(AggDir::Row) => acc_rows = vec![agg_seed(aggs[0]); rows],
        Some(AggDir::Col) => acc_cols = vec![agg_seed(aggs[0]); cols],
        Some(AggDir::Full) => {}
    }

    let mut visited = 0u64;
    let mut visit = |r: usize, c: usize, a: f64, ctx: &mut EvalCtx<'_>, flops: &mut u64| {
        genexec_scalar(op, ctx, a, r, c, flops);
        visited += 1;
        match dir {
            None => {
                let v = ctx.slots[plan.roots[0]];
                if sparse_iter {
                    if v != 0.0 {
                        triplets.push((r, c, v));
                    }
                } else {
                    out_dense[r * cols + c] = v;
                }
            }
            Some(AggDir::Full) => {
                for (k, f) in aggs.iter().enumerate() {
                    acc_full[k] = agg_combine(*f, acc_full[k], agg_map(*f, ctx.slots[plan.roots[k]]));
                }
            }
            Some(AggDir::Row) => {
                let f = aggs[0];
                acc_rows[r] = agg_combine(f, acc_rows[r], agg_map(f, ctx.slots[plan.roots[0]]));
            }
            Some(AggDir::Col) => {
                let f = aggs[0];
                acc_cols[c] = agg_combine(f, acc_cols[c], agg_map(f, ctx.slots[plan.roots[0]]));
            }
        }
    };

    if sparse_iter {
        for r in 0..rows {
            let (ix, vals) = inputs.main.sparse_row(r);
            for (&c, &v) in ix.iter().zip(vals) {
                visit(r, c, v, ctx, &mut flops);
            }
        }
    } else {
        let main_bcast = inputs.main.rows() == 1 || inputs.main.cols() == 1;
        for r in 0..rows {
            for c in 0..cols {
                let a = if main_bcast {
                    let mr = if inputs.main.rows() == 1 { 0 } else { r };
                    let mc = if inputs.main.cols() == 1 { 0 } else { c };
                    inputs.main.get(mr, mc)
                } else {
                    inputs.main.get(r, c)
                };
                visit(r, c, a, ctx, &mut flops);
            }
        }
    }
    counters.genexec_calls += visited;
    counters.cells_visited += visited;
    counters.flops += flops;

    // skipped zero cells contribute map(0) to min/max aggregates
    let cells = (rows * cols) as u64;
    if sparse_iter && visited < cells {
        for (k, f) in aggs.iter().enumerate() {
            if matches!(f, AggFn::Min | AggFn::Max) {
                acc_full[k] = agg_combine(*f, acc_full[k], agg_map(*f, 0.0));
            }
        }
        if dir == Some(AggDir::Row) && matches!(aggs[0], AggFn::Min | AggFn::Max) {
            for v in acc_rows.iter_mut() {
                *v = agg_combine(aggs[0], *v, 0.0);
            }
        }
        if dir == Some(AggDir::Col) && matches!(aggs[0], AggFn::Min | AggFn::Max) {
            for v in acc_cols.iter_mut() {
                *v = agg_combine(aggs[0], *v, 0.0);
            }
        }
        // empty sum seeds are already zero
    }

    let out = match dir {
        None => {
            if sparse_iter {
                Matrix::from_triplets(rows, cols, triplets)?
            } else {
                Matrix::dense(rows, cols, out_dense)
            }
        }
        Some(AggDir::Full) => {
            if acc_full.len() == 1 {
                Matrix::scalar(acc_full[0])
            } else {
                Matrix::dense(acc_full.len(), 1, acc_full)
            }
        }
        Some(AggDir::Row) => Matrix::dense(rows, 1, acc_rows),
        Some(AggDir::Col) => Matrix::dense(1, cols, acc_cols),
    };
    Ok(out)
}

/// Vector genexec for one row of the main input.
#[allow(clippy::too_many_arguments)]
fn genexec_row(
    op: &PreparedOp,
    ctx: &mut EvalCtx<'_>,
    rix: usize,
    dense_row: Option<&[f64]>,
    sparse_row: Option<(&[usize], &[f64])>,
    flops: &mut u64,
) {
    let plan = &op.plan;
    for i in 0..plan.body.len() {
        let node = &plan.body[i];
        match &node.op {
            CNodeOp::MainRow => {} // accessed by consumers directly
            CNodeOp::SideRowValue(side) => {
                ctx.slots[i] = ctx.sides[*side].get_value(rix, 0);
            }
            CNodeOp::SideRowVec {
                side,
                from,
                to,
                broadcast_row,
            } => {
                let r = if *broadcast_row { 0 } else { rix };
                // read the sliced row into the ring slot
                let width = (*to - *from) as usize;
                let mut tmp = std::mem::take(&mut ctx.ring[i]);
                debug_assert!(tmp.len() == width);
                match ctx.sides[*side].matrix().storage() {
                    Storage::Dense(d) => {
                        let cols = ctx.sides[*side].matrix().cols();
                        tmp.copy_from_slice(
                            &d[r * cols + *from as usize..r * cols + *to as usize],
                        );
                    }
                    Storage::Sparse { .. } => {
                        tmp.fill(0.0);
                        let (ix, vals) = ctx.sides[*side].matrix().sparse_row(r);
                        for (&c, &v) in ix.iter().zip(vals) {
                            if c >= *from as usize && c < *to as usize {
                                tmp[c - *from as usize] = v;
                            }
                        }
                    }
                }
                ctx.ring[i] = tmp;
            }
            CNodeOp::Lit(v) => ctx.slots[i] = *v,
            CNodeOp::ScalarInput(k) => ctx.slots[i] = ctx.scalars[*k],
            CNodeOp::Unary(u) => {
                *flops += 1;
                ctx.slots[i] = apply_unary(*u, ctx.slots[node.children[0]]);
            }
            CNodeOp::Binary(b) => {
                *flops += 1;
                ctx.slots[i] = apply_binary(
                    *b,
                    ctx.slots[node.children[0]],
                    ctx.slots[node.children[1]],
                );
            }
            CNodeOp::Ternary(t) => {
                *flops += 2;
                ctx.slots[i] = apply_ternary(
                    *t,
                    ctx.slots[node.children[0]],
                    ctx.slots[node.children[1]],
                    ctx.slots[node.children[2]],
                );
            }
            CNodeOp::VecUnary(u) => {
                let c = node.children[0];
                let mut out = std::mem::take(&mut ctx.ring[i]);
                let f = *u;
                let src = row_operand(op, ctx, c, dense_row);
                let len = out.len();
                kernels::vect_unary_write(|x| apply_unary(f, x), src, &mut out, len, flops);
                ctx.ring[i] = out;
            }
            CNodeOp::VecBinary(b) => {
                let (l, r) = (node.children[0], node.children[1]);
                let mut out = std::mem::take(&mut ctx.ring[i]);
                let len = out.len();
                let f = *b;
                match (plan.body[l].shape, plan.body[r].shape) {
                    (CShape::Vec(_), CShape::Vec(_)) => {
                        let lv = row_operand(op, ctx, l, dense_row);
                        let rv = row_operand(op, ctx, r, dense_row);
                        kernels::vect_binary_write(
                            |a, b| apply_binary(f, a, b),
                            lv,
                            rv,
                            &mut out,
                            len,
                            flops,
                        );
                    }
                    (CShape::Vec(_), CShape::Scalar) => {
                        let s = ctx.slots[r];
                        let lv = row_operand(op, ctx, l, dense_row);
                        kernels::vect_scalar_write(
                            |a, b| apply_binary(f, a, b),
                            lv,
                            s,
                            &mut out,
                            len,
                            flops,
                        );
                    }
                    (CShape::Scalar, CShape::Vec(_)) => {
                        let s = ctx.slots[l];
                        let rv = row_operand(op, ctx, r, dense_row);
                        kernels::vect_scalar_write(
                            |a, b| apply_binary(f, b, a),
                            rv,
                            s,
                            &mut out,
                            len,
                            flops,
                        );
                    }
                    _ => unreachable!("scalar-scalar handled as Binary"),
                }
                ctx.ring[i] = out;
            }
            CNodeOp::VecAgg(f) => {
                let src = row_operand(op, ctx, node.children[0], dense_row);
                let v = match f {
                    AggFn::Sum => kernels::vect_sum(src, 0, src.len(), flops),
                    AggFn::Min => kernels::vect_min(src, 0, src.len(), flops),
                    AggFn::Max => kernels::vect_max(src, 0, src.len(), flops),
                    AggFn::SumSq => {
                        let mut acc = 0.0;
                        for v in src.iter() {
                            acc += v * v;
                        }
                        *flops += 2 * src.len() as u64;
                        acc
                    }
                };
                ctx.slots[i] = v;
            }
            CNodeOp::VecMatMult { side } => {
                let mcols = op.plan.sides[*side].dims.cols as usize;
                let mut out = std::mem::take(&mut ctx.ring[i]);
                let child = node.children[0];
                let block = std::mem::take(&mut ctx.side_dense[*side])
                    .expect("matmult side is densified");
                {
                    let bd = block.dense_data();
                    if plan.body[child].op == CNodeOp::MainRow {
                        match (dense_row, sparse_row) {
                            (_, Some((ix, vals))) => kernels::vect_mat_mult_sparse(
                                vals, ix, bd, mcols, &mut out, flops,
                            ),
                            (Some(d), None) => {
                                kernels::vect_mat_mult(d, 0, d.len(), bd, mcols, &mut out, flops)
                            }
                            _ => unreachable!(),
                        }
                    } else {
                        let src = row_operand(op, ctx, child, dense_row);
                        kernels::vect_mat_mult(src, 0, src.len(), bd, mcols, &mut out, flops);
                    }
                }
                ctx.side_dense[*side] = Some(block);
                ctx.ring[i] = out;
            }
            CNodeOp::VecSlice { from, to } => {
                let mut out = std::mem::take(&mut ctx.ring[i]);
                let src = row_operand(op, ctx, node.children[0], dense_row);
                out.copy_from_slice(&src[*from as usize..*to as usize]);
                ctx.ring[i] = out;
            }
            other => unreachable!("cell node {other:?} in row body"),
        }
    }
}

/// Vector operand of a row-body node: a ring slot or the main row.
fn row_operand<'c>(
    op: &PreparedOp,
    ctx: &'c EvalCtx<'_>,
    node: crate::cplan::CNodeId,
    dense_row: Option<&'c [f64]>,
) -> &'c [f64] {
    if op.plan.body[node].op == CNodeOp::MainRow {
        dense_row.expect("dense main row required")
    } else {
        &ctx.ring[node]
    }
}

fn exec_row(
    op: &PreparedOp,
    inputs: &OpInputs<'_>,
    ctx: &mut EvalCtx<'_>,
    counters: &mut KernelCounters,
) -> Result<Matrix> {
    let plan = &op.plan;
    let rows = plan.main.dims.rows as usize;
    let main_cols = plan.main.dims.cols as usize;
    let out_rows = plan.out_dims.rows as usize;
    let out_cols = plan.out_dims.cols as usize;
    let root = plan.roots[0];
    let mut flops = 0u64;

    let mut out = vec![0.0; out_rows * out_cols];
    let mut acc_scalar = f64::NAN;
    if let Variant::RowAgg(f, AggDir::Full) = &plan.variant {
        acc_scalar = agg_seed(*f);
    }
    if let Variant::RowAgg(f, AggDir::Col) = &plan.variant {
        out.fill(agg_seed(*f));
    }

    let mut dense_scratch = vec![0.0; main_cols];
    let main_sparse = inputs.main.is_sparse();
    for r in 0..rows {
        let (dense_row, sparse_row): (Option<&[f64]>, Option<(&[usize], &[f64])>) = if main_sparse
        {
            let (ix, vals) = inputs.main.sparse_row(r);
            counters.cells_visited += ix.len() as u64;
            if op.needs_dense_main_row {
                dense_scratch.fill(0.0);
                for (&c, &v) in ix.iter().zip(vals) {
                    dense_scratch[c] = v;
                }
                (Some(&dense_scratch[..]), Some((ix, vals)))
            } else {
                (None, Some((ix, vals)))
            }
        } else {
            counters.cells_visited += main_cols as u64;
            (Some(inputs.main.dense_row(r)), None)
        };
        genexec_row(op, ctx, r, dense_row, sparse_row, &mut flops);
        counters.genexec_calls += 1;

        match &plan.variant {
            Variant::RowNoAgg => {
                match plan.body[root].shape {
                    CShape::Vec(_) => {
                        let v = row_operand(op, ctx, root, dense_row);
                        out[r * out_cols..(r + 1) * out_cols].copy_from_slice(v);
                    }
                    CShape::Scalar => out[r * out_cols] = ctx.slots[root],
                }
            }
            Variant::RowAgg(f, AggDir::Row) => {
                out[r] = match plan.body[root].shape {
                    CShape::Scalar => ctx.slots[root],
                    CShape::Vec(_) => {
                        fold_vec(*f, row_operand(op, ctx, root, dense_row), &mut flops)
                    }
                };
            }
            Variant::RowAgg(f, AggDir::Col) => {
                let v = row_operand(op, ctx, root, dense_row);
                for (o, x) in out.iter_mut().zip(v.iter()) {
                    *o = agg_combine(*f, *o, agg_map(*f, *x));
                }
                flops += v.len() as u64;
            }
            Variant::RowAgg(f, AggDir::Full) => {
                let contrib = match plan.body[root].shape {
                    CShape::Scalar => agg_map(*f, ctx.slots[root]),
                    CShape::Vec(_) => {
                        fold_vec(*f, row_operand(op, ctx, root, dense_row), &mut flops)
                    }
                };
                acc_scalar = agg_combine(*f, acc_scalar, contrib);
            }
            Variant::RowColTAgg => {
                // out[main_cols x k] += main_row (x) chain_row
                let w = match plan.body[root].shape {
                    CShape::Vec(_) => row_operand(op, ctx, root, dense_row).to_vec(),
                    CShape::Scalar => vec![ctx.slots[root]],
                };
                match (dense_row, sparse_row) {
                    (Some(d), _) => kernels::vect_outer_mult_add(
                        d,
                        0,
                        main_cols,
                        &w,
                        w.len(),
                        &mut out,
                        &mut flops,
                    ),
                    (None, Some((ix, vals))) => kernels::vect_outer_mult_add_sparse(
                        vals,
                        ix,
                        &w,
                        w.len(),
                        &mut out,
                        &mut flops,
                    ),
                    _ => unreachable!(),
                }
            }
            other => unreachable!("row exec with {other:?}"),
        }
    }
    counters.flops += flops;
    let result = match &plan.variant {
        Variant::RowAgg(_, AggDir::Full) => Matrix::scalar(acc_scalar),
        _ => Matrix::dense(out_rows, out_cols, out),
    };
    Ok(result)
}

fn fold_vec(f: AggFn, v: &[f64], flops: &mut u64) -> f64 {
    let mut acc = agg_seed(f);
    for &x in v {
        acc = agg_combine(f, acc, agg_map(f, x));
    }
    *flops += v.len() as u64;
    acc
}

fn exec_outer(
    op: &PreparedOp,
    inputs: &OpInputs<'_>,
    ctx: &mut EvalCtx<'_>,
    counters: &mut KernelCounters,
) -> Result<Matrix> {
    let plan = &op.plan;
    let outer = plan.outer.as_ref().expect("outer bindings");
    let u = inputs.u.expect("U bound").to_dense();
    let v = inputs.v.expect("V bound").to_dense();
    let rank = outer.rank as usize;
    let (rows, cols) = (plan.main.dims.rows as usize, plan.main.dims.cols as usize);
    let root = plan.roots[0];
    let mut flops = 0u64;

    let m_block: Option<Matrix> = match &plan.variant {
        Variant::OuterRightMm(m) | Variant::OuterLeftMm(m) => Some(match m {
            MSource::U => u.clone(),
            MSource::V => v.clone(),
            MSource::Side(i) => ctx.side_block(*i).clone(),
        }),
        _ => None,
    };
    let (out_rows, out_cols) = (plan.out_dims.rows as usize, plan.out_dims.cols as usize);
    let mut out = vec![0.0; out_rows * out_cols];
    let mut acc = match &plan.variant {
        Variant::OuterFullAgg(f) => agg_seed(*f),
        _ => 0.0,
    };
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();

    let mut visit = |i: usize, j: usize, a: f64, ctx: &mut EvalCtx<'_>, flops: &mut u64| {
        let urow = &u.dense_data()[i * rank..(i + 1) * rank];
        let vrow = &v.dense_data()[j * rank..(j + 1) * rank];
        eval_outer_body(op, ctx, a, i, j, urow, vrow, flops);
        let w = ctx.slots[root];
        match &plan.variant {
            Variant::OuterFullAgg(f) => acc = agg_combine(*f, acc, agg_map(*f, w)),
            Variant::OuterNoAgg => {
                if inputs.main.is_sparse() {
                    if w != 0.0 {
                        triplets.push((i, j, w));
                    }
                } else {
                    out[i * out_cols + j] = w;
                }
            }
            Variant::OuterRightMm(_) => {
                let m = m_block.as_ref().unwrap();
                let mrow = &m.dense_data()[j * out_cols..(j + 1) * out_cols];
                kernels::vect_mult_add(mrow, w, &mut out, 0, i * out_cols, out_cols, flops);
            }
            Variant::OuterLeftMm(_) => {
                let m = m_block.as_ref().unwrap();
                for l in 0..out_rows {
                    out[l * out_cols + j] += m.dense_data()[l * m.cols() + i] * w;
                }
                *flops += 2 * out_rows as u64;
            }
            other => unreachable!("outer exec with {other:?}"),
        }
    };

    let mut calls = 0u64;
    if inputs.main.is_sparse() {
        for r in 0..rows {
            let (ix, vals) = inputs.main.sparse_row(r);
            for (&c, &val) in ix.iter().zip(vals) {
                visit(r, c, val, ctx, &mut flops);
                calls += 1;
            }
        }
    } else {
        let d = inputs.main.dense_data();
        for r in 0..rows {
            for c in 0..cols {
                let val = d[r * cols + c];
                if val != 0.0 {
                    visit(r, c, val, ctx, &mut flops);
                    calls += 1;
                }
            }
        }
    }
    counters.genexec_calls += calls;
    counters.cells_visited += calls;
    counters.flops += flops;

    let result = match &plan.variant {
        Variant::OuterFullAgg(_) => Matrix::scalar(acc),
        Variant::OuterNoAgg if inputs.main.is_sparse() => {
            Matrix::from_triplets(out_rows, out_cols, triplets)?
        }
        _ => Matrix::dense(out_rows, out_cols, out),
    };
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn eval_outer_body(
    op: &PreparedOp,
    ctx: &mut EvalCtx<'_>,
    a: f64,
    rix: usize,
    cix: usize,
    urow: &[f64],
    vrow: &[f64],
    flops: &mut u64,
) {
    for i in 0..op.plan.body.len() {
        let node = &op.plan.body[i];
        let val = match &node.op {
            CNodeOp::MainCell => a,
            CNodeOp::OuterDot => kernels::dot_product(urow, vrow, 0, 0, urow.len(), flops),
            CNodeOp::SideCell {
                side,
                swap,
                col_offset,
            } => {
                let (r, c) = if *swap { (cix, rix) } else { (rix, cix) };
                ctx.sides[*side].get_value(r, c + *col_offset as usize)
            }
            CNodeOp::SideRowValue(side) => ctx.sides[*side].get_value(rix, 0),
            CNodeOp::Lit(v) => *v,
            CNodeOp::ScalarInput(k) => ctx.scalars[*k],
            CNodeOp::Unary(u) => {
                *flops += 1;
                apply_unary(*u, ctx.slots[node.children[0]])
            }
            CNodeOp::Binary(b) => {
                *flops += 1;
                apply_binary(*b, ctx.slots[node.children[0]], ctx.slots[node.children[1]])
            }
            CNodeOp::Ternary(t) => {
                *flops += 2;
                apply_ternary(
                    *t,
                    ctx.slots[node.children[0]],
                    ctx.slots[node.children[1]],
                    ctx.slots[node.children[2]],
                )
            }
            other => unreachable!("vector node {other:?} in outer body"),
        };
        ctx.slots[i] = val;
    }
}

// ---- program runner ----

pub struct ProgramResult {
    pub outputs: BTreeMap<String, Matrix>,
    /// (operator label, counters) in execution order.
    pub op_stats: Vec<(String, KernelCounters)>,
    pub total: KernelCounters,
    /// Materialized non-output intermediates.
    pub intermediates: u64,
}

/// Executes the rewritten DAG: fused operators for covered regions, basic
/// reference kernels elsewhere.
pub fn run_program(
    dag: &HopDag,
    cplans: &[CPlan],
    bindings: &BTreeMap<String, Matrix>,
    cache: &mut PlanCache,
) -> Result<ProgramResult> {
    let mut values: Vec<Option<Matrix>> = vec![None; dag.len()];
    let mut op_stats: Vec<(String, KernelCounters)> = Vec::new();
    let mut total = KernelCounters::new();
    let mut intermediates = 0u64;
    let output_ids: BTreeSet<HopId> = dag.outputs.iter().map(|(_, id)| *id).collect();

    // trigger position: a plan executes at its last output hop; earlier
    // output hops wait for it
    let mut trigger: BTreeMap<HopId, usize> = BTreeMap::new();
    let mut pending_outputs: BTreeSet<HopId> = BTreeSet::new();
    let mut covered: BTreeSet<HopId> = BTreeSet::new();
    for (pi, p) in cplans.iter().enumerate() {
        let last = *p.out_hops.iter().max().unwrap();
        trigger.insert(last, pi);
        for &h in &p.out_hops {
            if h != last {
                pending_outputs.insert(h);
            }
        }
        for &h in &p.covered {
            if !p.out_hops.contains(&h) {
                covered.insert(h);
            }
        }
    }
    // a covered hop that some plan or basic op still reads must materialize
    let needed: BTreeSet<HopId> = {
        let mut n = BTreeSet::new();
        for p in cplans {
            n.insert(p.main.hop);
            for s in &p.sides {
                n.insert(s.hop);
            }
            for (h, _) in &p.scalars {
                n.insert(*h);
            }
            if let Some(o) = &p.outer {
                n.insert(o.u_hop);
                n.insert(o.v_hop);
            }
        }
        n
    };

    for h in dag.nodes() {
        let id = h.id;
        if let Some(&pi) = trigger.get(&id) {
            let plan = &cplans[pi];
            let op = cache.prepare_operator(plan);
            let get = |hop: HopId| -> Result<&Matrix> {
                values[hop]
                    .as_ref()
                    .ok_or_else(|| Error::Internal(format!("binding #{hop} not materialized")))
            };
            let inputs = OpInputs {
                main: get(plan.main.hop)?,
                sides: plan
                    .sides
                    .iter()
                    .map(|s| get(s.hop))
                    .collect::<Result<Vec<_>>>()?,
                scalars: plan
                    .scalars
                    .iter()
                    .map(|(h, _)| Ok(get(*h)?.as_scalar()))
                    .collect::<Result<Vec<f64>>>()?,
                u: plan
                    .outer
                    .as_ref()
                    .map(|o| get(o.u_hop))
                    .transpose()?,
                v: plan
                    .outer
                    .as_ref()
                    .map(|o| get(o.v_hop))
                    .transpose()?,
            };
            let mut counters = KernelCounters::new();
            let result = execute_fused(&op, &inputs, &mut counters)?;
            if plan.out_hops.len() == 1 {
                if !output_ids.contains(&plan.out_hops[0]) {
                    intermediates += 1;
                }
                values[plan.out_hops[0]] = Some(result);
            } else {
                // stacked multi-aggregate output: one scalar per root
                for (k, &oh) in plan.out_hops.iter().enumerate() {
                    if !output_ids.contains(&oh) {
                        intermediates += 1;
                    }
                    values[oh] = Some(Matrix::scalar(result.get(k, 0)));
                }
            }
            total.merge(&counters);
            op_stats.push((
                format!(
                    "fused_{:016x} {:?}({})",
                    plan.structural_hash,
                    plan.template,
                    plan.variant_name()
                ),
                counters,
            ));
            continue;
        }
        if pending_outputs.contains(&id) {
            continue; // produced by a multi-output operator later on
        }
        if covered.contains(&id) && !needed.contains(&id) && !output_ids.contains(&id) {
            continue; // fused away, never materialized
        }
        match &h.op {
            Op::Read(name) => {
                let m = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                values[id] = Some(m.clone());
            }
            Op::Literal(v) => values[id] = Some(Matrix::scalar(*v)),
            _ => {
                let ins: Vec<&Matrix> = h
                    .inputs
                    .iter()
                    .map(|&i| {
                        values[i]
                            .as_ref()
                            .ok_or_else(|| Error::Internal(format!("input #{i} missing")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut counters = KernelCounters::new();
                for &i in &h.inputs {
                    counters.record_read(&input_name(dag, i));
                }
                counters.flops += dag.flops(id);
                let out = reference::eval_op(dag, id, &ins)?;
                counters.cells_visited += ins.iter().map(|m| m.cells() as u64).sum::<u64>();
                if !output_ids.contains(&id) {
                    intermediates += 1;
                }
                values[id] = Some(out);
                total.merge(&counters);
                op_stats.push((format!("basic #{id} {}", h.op.mnemonic()), counters));
            }
        }
    }

    let mut outputs = BTreeMap::new();
    for (name, id) in &dag.outputs {
        let v = values[*id]
            .clone()
            .ok_or_else(|| Error::Internal(format!("output '{name}' not produced")))?;
        outputs.insert(name.clone(), v);
    }
    Ok(ProgramResult {
        outputs,
        op_stats,
        total,
        intermediates,
    })
}

/// Full pipeline on one DAG: explore, select, construct, execute.
pub fn optimize_and_run(
    dag: &HopDag,
    cfg: &Config,
    bindings: &BTreeMap<String, Matrix>,
    cache: &mut PlanCache,
) -> Result<(crate::select::Selection, Vec<CPlan>, ProgramResult)> {
    let mut memo = crate::explore::ofmc_explore(dag, cfg);
    let selection = crate::select::select_plans(&mut memo, dag, cfg);
    let cplans = crate::cplan::construct_cplans(dag, &memo, cfg, &selection.filter, selection.mode)?;
    let result = run_program(dag, &cplans, bindings, cache)?;
    Ok((selection, cplans, result))
}

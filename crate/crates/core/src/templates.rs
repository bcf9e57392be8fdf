//! The four fusion templates and their open/fuse/merge/close predicates.
//!
//! Predicates are pure functions of the DAG and operator metadata, separated
//! from traversal. They may peek at consumers for pattern entry points (a
//! transpose feeding a matrix multiply), but never mutate anything.

use crate::config::Config;
use crate::hop::{AggDir, AggFn, BinaryOp, Dims, Hop, HopDag, HopId, Op, UnaryOp};
use serde::Serialize;
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum TemplateKind {
    Cell,
    MultiAgg,
    Row,
    Outer,
}

pub const ALL_TEMPLATES: [TemplateKind; 4] = [
    TemplateKind::Cell,
    TemplateKind::MultiAgg,
    TemplateKind::Row,
    TemplateKind::Outer,
];

/// Operators that no template can start at without consumer context.
pub const NON_FUSIBLE: &[&str] = &["t", "cbind"];

impl TemplateKind {
    /// Sparsity exploitation first: Outer > MultiAgg > Row > Cell.
    pub fn preference(&self) -> u8 {
        match self {
            TemplateKind::Outer => 3,
            TemplateKind::MultiAgg => 2,
            TemplateKind::Row => 1,
            TemplateKind::Cell => 0,
        }
    }

    pub fn short(&self) -> &'static str {
        match self {
            TemplateKind::Cell => "C",
            TemplateKind::MultiAgg => "M",
            TemplateKind::Row => "R",
            TemplateKind::Outer => "O",
        }
    }

    /// May an entry of `self` reference a group whose plan has template `child`?
    pub fn compatible_child(&self, child: TemplateKind) -> bool {
        use TemplateKind::*;
        matches!(
            (self, child),
            (Cell, Cell) | (MultiAgg, Cell) | (Row, Row) | (Row, Cell) | (Outer, Outer) | (Outer, Cell)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum CloseStatus {
    OpenValid,
    /// Usable inside a larger plan but not as an operator root.
    OpenInvalid,
    ClosedValid,
    ClosedInvalid,
}

impl CloseStatus {
    pub fn is_closed(&self) -> bool {
        matches!(self, CloseStatus::ClosedValid | CloseStatus::ClosedInvalid)
    }

    pub fn referencable(&self) -> bool {
        matches!(self, CloseStatus::OpenValid | CloseStatus::OpenInvalid)
    }

    pub fn root_usable(&self) -> bool {
        matches!(self, CloseStatus::OpenValid | CloseStatus::ClosedValid)
    }
}

// ---- shape/op classification helpers ----

pub fn is_cell_op(h: &Hop) -> bool {
    h.op.is_elementwise() && !h.dims.is_scalar()
}

pub fn is_agg(h: &Hop) -> bool {
    matches!(h.op, Op::Agg(..))
}

pub fn is_full_agg(h: &Hop) -> bool {
    matches!(h.op, Op::Agg(_, AggDir::Full))
}

pub fn is_vector_dot(dag: &HopDag, h: &Hop) -> bool {
    if h.op != Op::MatMul {
        return false;
    }
    let l = dag.node(h.inputs[0]).dims;
    let r = dag.node(h.inputs[1]).dims;
    l.rows == 1 && r.cols == 1
}

/// Matrix multiply with a narrow right operand, the Row entry pattern.
pub fn is_row_matmul(dag: &HopDag, h: &Hop, cfg: &Config) -> bool {
    if h.op != Op::MatMul || is_vector_dot(dag, h) {
        return false;
    }
    let l = dag.node(h.inputs[0]).dims;
    let r = dag.node(h.inputs[1]).dims;
    l.rows > 1 && l.cols > 1 && r.cols <= cfg.row_block_width
}

/// Outer-product-like matrix multiply: small inner dimension against a large
/// output, with the right operand given as a transpose.
pub fn is_outer_mm(dag: &HopDag, h: &Hop, cfg: &Config) -> bool {
    if h.op != Op::MatMul {
        return false;
    }
    let right = dag.node(h.inputs[1]);
    if right.op != Op::Transpose {
        return false;
    }
    let k = dag.node(h.inputs[0]).dims.cols;
    k >= 2 && k <= cfg.outer_max_rank && h.dims.is_matrix() && h.dims.cells() >= cfg.outer_min_cells
}

fn single_consumer<'d>(dag: &'d HopDag, h: &Hop) -> Option<&'d Hop> {
    match dag.consumers(h.id) {
        [c] => Some(dag.node(*c)),
        _ => None,
    }
}

/// Transpose whose only consumer is a matrix multiply using it as the left
/// operand: the entry point for column-aggregating Row plans.
fn is_transpose_under_row_mm(dag: &HopDag, h: &Hop, cfg: &Config) -> bool {
    h.op == Op::Transpose
        && single_consumer(dag, h).is_some_and(|c| {
            c.op == Op::MatMul && c.inputs[0] == h.id && is_row_matmul(dag, c, cfg)
        })
}

/// Transpose feeding the right side of an outer-product-like multiply.
fn is_transpose_under_outer_mm(dag: &HopDag, h: &Hop, cfg: &Config) -> bool {
    h.op == Op::Transpose
        && single_consumer(dag, h)
            .is_some_and(|c| c.inputs.get(1) == Some(&h.id) && is_outer_mm(dag, c, cfg))
}

fn row_frame_rows(dag: &HopDag, h: &Hop) -> u64 {
    match h.op {
        Op::MatMul => {
            let left = dag.node(h.inputs[0]);
            if left.op == Op::Transpose {
                dag.node(left.inputs[0]).dims.rows
            } else {
                left.dims.rows
            }
        }
        Op::Agg(..) | Op::ColIndex { .. } => dag.node(h.inputs[0]).dims.rows,
        _ => h.dims.rows,
    }
}

// ---- the OFMC predicates ----

/// Can a new fused operator of this template start at `h`, covering its
/// operation and reading materialized inputs?
pub fn open(t: TemplateKind, dag: &HopDag, h: &Hop, cfg: &Config) -> bool {
    debug_assert!(dag.is_propagated(), "open requires propagated sizes");
    match t {
        TemplateKind::Cell => is_cell_op(h),
        TemplateKind::MultiAgg => is_full_agg(h),
        TemplateKind::Row => {
            if is_row_matmul(dag, h, cfg) || is_transpose_under_row_mm(dag, h, cfg) {
                return true;
            }
            if let Op::Agg(_, AggDir::Row | AggDir::Col) = h.op {
                let input = dag.node(h.inputs[0]).dims;
                return input.rows > 1 && input.cols > 1;
            }
            if let Op::ColIndex { .. } = h.op {
                return dag.node(h.inputs[0]).dims.is_matrix();
            }
            // element-wise over row-aligned operands: a matrix against a
            // row vector shared by every row
            if let Op::Binary(_) = h.op {
                let a = dag.node(h.inputs[0]).dims;
                let b = dag.node(h.inputs[1]).dims;
                return h.dims.is_matrix()
                    && ((a.is_matrix() && b.is_row_vector() && a.cols == b.cols)
                        || (b.is_matrix() && a.is_row_vector() && a.cols == b.cols));
            }
            false
        }
        TemplateKind::Outer => {
            is_outer_mm(dag, h, cfg) || is_transpose_under_outer_mm(dag, h, cfg)
        }
    }
}

/// Can an open operator at input `inp` expand to its consumer `h`?
pub fn fuse(t: TemplateKind, dag: &HopDag, h: &Hop, inp: &Hop, cfg: &Config) -> bool {
    match t {
        TemplateKind::Cell => {
            is_cell_op(h) || (is_agg(h) && !dag.node(h.inputs[0]).dims.is_scalar())
                || is_vector_dot(dag, h)
        }
        // multi-aggregate entries exist only at the aggregation itself
        TemplateKind::MultiAgg => false,
        TemplateKind::Row => {
            // a transpose below is only row-local as the left side of a matmul
            if inp.op == Op::Transpose && !(h.op == Op::MatMul && h.inputs[0] == inp.id) {
                return false;
            }
            match h.op {
                Op::MatMul => {
                    (h.inputs[0] == inp.id && is_row_matmul(dag, h, cfg))
                        || (h.inputs[1] == inp.id
                            && dag.node(h.inputs[0]).op == Op::Transpose
                            && is_row_matmul(dag, h, cfg))
                }
                Op::Agg(..) => true,
                Op::ColIndex { .. } => true,
                _ => is_cell_op(h) && h.dims.rows == inp.dims.rows,
            }
        }
        TemplateKind::Outer => match &h.op {
            Op::Unary(
                UnaryOp::Exp | UnaryOp::Log | UnaryOp::Sqrt | UnaryOp::Abs | UnaryOp::Sign
                | UnaryOp::Round | UnaryOp::Sq,
            ) => true,
            Op::Binary(b) => {
                let other = if h.inputs[0] == inp.id {
                    dag.node(h.inputs[1])
                } else {
                    dag.node(h.inputs[0])
                };
                if other.dims.is_scalar() {
                    true
                } else {
                    // matrix side operands must be zero-preserving:
                    // anything else destroys nonzero-only iteration
                    *b == BinaryOp::Mult
                }
            }
            Op::Agg(AggFn::Sum | AggFn::SumSq, AggDir::Full) => true,
            Op::MatMul => {
                // chain %*% V closes as right_mm; U %*% chain as left_mm
                (h.inputs[0] == inp.id && dag.node(h.inputs[1]).dims.cols <= cfg.outer_max_rank)
                    || (h.inputs[1] == inp.id
                        && dag.node(h.inputs[0]).dims.rows <= cfg.outer_max_rank)
            }
            _ => false,
        },
    }
}

/// Can an open operator at consumer `h` absorb an open plan at input `inp`?
pub fn merge(t: TemplateKind, dag: &HopDag, h: &Hop, inp: &Hop, _cfg: &Config) -> bool {
    match t {
        TemplateKind::Cell => inp.dims.broadcast(&h.dims).is_some(),
        TemplateKind::MultiAgg => true,
        TemplateKind::Row => match h.op {
            Op::MatMul => {
                let left = dag.node(h.inputs[0]);
                if inp.id == h.inputs[0] {
                    // plain left chain or the transpose entry point
                    true
                } else {
                    // the right chain is row-aligned only under a transposed left
                    left.op == Op::Transpose && inp.dims.rows == row_frame_rows(dag, h)
                }
            }
            Op::Agg(..) | Op::ColIndex { .. } => true,
            _ => inp.dims.rows == h.dims.rows || inp.dims.is_scalar(),
        },
        TemplateKind::Outer => match h.op {
            Op::MatMul => is_outer_mm(dag, h, _cfg) && inp.id == h.inputs[1],
            Op::Agg(..) => true,
            _ => inp.dims.broadcast(&h.dims).is_some(),
        },
    }
}

/// Status of a template after covering `h`. Outer closes additionally require
/// a sparse-driver validation over the covered plan (see `find_sparse_driver`).
pub fn close(t: TemplateKind, dag: &HopDag, h: &Hop, cfg: &Config) -> CloseStatus {
    match t {
        TemplateKind::Cell => {
            if is_agg(h) || is_vector_dot(dag, h) {
                CloseStatus::ClosedValid
            } else {
                CloseStatus::OpenValid
            }
        }
        TemplateKind::MultiAgg => {
            if is_full_agg(h) {
                CloseStatus::ClosedValid
            } else {
                CloseStatus::OpenInvalid
            }
        }
        TemplateKind::Row => match h.op {
            Op::Agg(_, AggDir::Col | AggDir::Full) => CloseStatus::ClosedValid,
            Op::MatMul if dag.node(h.inputs[0]).op == Op::Transpose => CloseStatus::ClosedValid,
            Op::Transpose => CloseStatus::OpenInvalid,
            _ => CloseStatus::OpenValid,
        },
        TemplateKind::Outer => match h.op {
            Op::Agg(..) => CloseStatus::ClosedValid,
            Op::MatMul if !is_outer_mm(dag, h, cfg) => CloseStatus::ClosedValid,
            Op::Transpose => CloseStatus::OpenInvalid,
            _ => CloseStatus::OpenValid,
        },
    }
}

/// Finds a sparse driver for a covered plan: an out-of-region matrix operand
/// whose zeros force the chain value under `root` to zero, permitting
/// nonzero-only iteration. Returns the sparsest eligible candidate.
pub fn find_sparse_driver(
    dag: &HopDag,
    region: &BTreeSet<HopId>,
    root: HopId,
    cfg: &Config,
) -> Option<HopId> {
    // the cell frame the driver must align with
    let frame = chain_frame(dag, region, root);
    let mut candidates: Vec<HopId> = Vec::new();
    for &n in region {
        for &i in &dag.node(n).inputs {
            if region.contains(&i) {
                continue;
            }
            let cand = dag.node(i);
            if cand.dims == frame
                && !cand.dims.is_scalar()
                && cand.sparsity <= cfg.outer_max_driver_sparsity
                && !candidates.contains(&i)
            {
                candidates.push(i);
            }
        }
    }
    candidates.sort_by(|a, b| {
        dag.node(*a)
            .sparsity
            .partial_cmp(&dag.node(*b).sparsity)
            .unwrap()
            .then(a.cmp(b))
    });
    candidates
        .into_iter()
        .find(|&d| zero_when_driver_zero(dag, region, root, d))
}

/// The element-wise frame of the plan under `root`: for closing aggregations
/// and matrix multiplies the frame is the chain input's shape.
fn chain_frame(dag: &HopDag, region: &BTreeSet<HopId>, root: HopId) -> Dims {
    let h = dag.node(root);
    match h.op {
        Op::Agg(..) => dag.node(h.inputs[0]).dims,
        Op::MatMul => {
            // the in-region side is the chain
            let chain = h
                .inputs
                .iter()
                .copied()
                .find(|i| region.contains(i))
                .unwrap_or(h.inputs[0]);
            dag.node(chain).dims
        }
        _ => h.dims,
    }
}

/// Symbolic zero-propagation: is the chain value under `root` zero whenever
/// `driver` is zero, for arbitrary other operand values?
fn zero_when_driver_zero(dag: &HopDag, region: &BTreeSet<HopId>, root: HopId, driver: HopId) -> bool {
    let mut marked: BTreeSet<HopId> = BTreeSet::new();
    let is_zero = |id: HopId, marked: &BTreeSet<HopId>| id == driver || marked.contains(&id);
    for &n in region {
        let h = dag.node(n);
        let m = match &h.op {
            Op::Binary(BinaryOp::Mult) => {
                is_zero(h.inputs[0], &marked) || is_zero(h.inputs[1], &marked)
            }
            Op::Binary(BinaryOp::Div) => is_zero(h.inputs[0], &marked),
            Op::Binary(BinaryOp::Add | BinaryOp::Sub) => {
                is_zero(h.inputs[0], &marked) && is_zero(h.inputs[1], &marked)
            }
            Op::Binary(BinaryOp::Pow) => {
                is_zero(h.inputs[0], &marked)
                    && matches!(dag.node(h.inputs[1]).op, Op::Literal(e) if e > 0.0)
            }
            // pseudo-sparse-safe comparisons against a zero literal
            Op::Binary(BinaryOp::Neq | BinaryOp::Gt | BinaryOp::Lt) => {
                (is_zero(h.inputs[0], &marked)
                    && matches!(dag.node(h.inputs[1]).op, Op::Literal(v) if v == 0.0))
                    || (is_zero(h.inputs[1], &marked)
                        && matches!(dag.node(h.inputs[0]).op, Op::Literal(v) if v == 0.0))
            }
            Op::Unary(
                UnaryOp::Sqrt | UnaryOp::Abs | UnaryOp::Sign | UnaryOp::Round | UnaryOp::Sq,
            ) => is_zero(h.inputs[0], &marked),
            Op::Agg(AggFn::Sum | AggFn::SumSq, _) => is_zero(h.inputs[0], &marked),
            Op::Ternary(crate::hop::TernaryOp::MultAdd) => {
                (is_zero(h.inputs[0], &marked) || is_zero(h.inputs[1], &marked))
                    && is_zero(h.inputs[2], &marked)
            }
            _ => false,
        };
        if m {
            marked.insert(n);
        }
    }
    let r = dag.node(root);
    match r.op {
        // the closing op aggregates zero contributions away
        Op::Agg(AggFn::Sum | AggFn::SumSq, _) => is_zero(r.inputs[0], &marked),
        Op::MatMul => r
            .inputs
            .iter()
            .any(|i| region.contains(i) && is_zero(*i, &marked)),
        _ => is_zero(root, &marked) || marked.contains(&root),
    }
}

/// One row of the per-operation admissibility matrix.
#[derive(Debug, Clone, Serialize)]
pub struct Admissibility {
    pub op: String,
    /// open/fuse/close status per template, in `ALL_TEMPLATES` order.
    pub open: [bool; 4],
    pub fuse: [bool; 4],
    pub close: [CloseStatus; 4],
    pub declared_non_fusible: bool,
}

/// Probes every operation in the vocabulary against canonical shapes; the
/// basis of the totality check and the `explain --templates` dump.
pub fn admissibility_matrix(cfg: &Config) -> Vec<Admissibility> {
    use crate::hop::{AggFn, TernaryOp};
    let mut out = Vec::new();
    let binaries = [
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mult,
        BinaryOp::Div,
        BinaryOp::Min,
        BinaryOp::Max,
        BinaryOp::Neq,
        BinaryOp::Lt,
        BinaryOp::Gt,
        BinaryOp::Eq,
        BinaryOp::Pow,
    ];
    let unaries = [
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Sqrt,
        UnaryOp::Abs,
        UnaryOp::Round,
        UnaryOp::Sign,
        UnaryOp::Sq,
    ];
    let aggs = [
        (AggFn::Sum, AggDir::Full),
        (AggFn::Sum, AggDir::Row),
        (AggFn::Sum, AggDir::Col),
        (AggFn::SumSq, AggDir::Full),
        (AggFn::Min, AggDir::Full),
        (AggFn::Max, AggDir::Full),
    ];
    let mut probe = |op: Op| out.push(probe_op(cfg, op));
    for b in binaries {
        probe(Op::Binary(b));
    }
    for u in unaries {
        probe(Op::Unary(u));
    }
    probe(Op::Ternary(TernaryOp::IfElse));
    probe(Op::Ternary(TernaryOp::MultAdd));
    for (f, d) in aggs {
        probe(Op::Agg(f, d));
    }
    probe(Op::MatMul);
    probe(Op::Transpose);
    probe(Op::ColIndex { from: 1, to: 3 });
    probe(Op::Cbind);
    out
}

/// Builds a canonical probe DAG for one operation: a fusible element-wise
/// chain feeding the probed operator over favorably-shaped operands.
fn probe_op(cfg: &Config, op: Op) -> Admissibility {
    use crate::hop::HopDag;
    let mut dag = HopDag::new();
    let x = dag.add(Op::Read("X".into()), vec![]);
    let y = dag.add(Op::Read("Y".into()), vec![]);
    let chain = dag.add(Op::Binary(BinaryOp::Mult), vec![x, y]);
    let rv = dag.add(Op::Read("w".into()), vec![]);
    let nv = dag.add(Op::Read("v".into()), vec![]);
    let id = match &op {
        Op::Binary(_) => dag.add(op.clone(), vec![chain, rv]),
        Op::Unary(_) | Op::Agg(..) | Op::Transpose | Op::ColIndex { .. } => {
            dag.add(op.clone(), vec![chain])
        }
        Op::Ternary(_) => dag.add(op.clone(), vec![chain, x, y]),
        Op::MatMul => dag.add(op.clone(), vec![chain, nv]),
        Op::Cbind => dag.add(op.clone(), vec![chain, nv]),
        Op::Read(_) | Op::Literal(_) => unreachable!(),
    };
    let meta: std::collections::BTreeMap<String, crate::hop::LeafMeta> = [
        ("X", (4000u64, 64u64)),
        ("Y", (4000, 64)),
        ("w", (1, 64)),
        ("v", (64, 8)),
    ]
    .into_iter()
    .map(|(n, (r, c))| {
        (
            n.to_string(),
            crate::hop::LeafMeta {
                rows: r,
                cols: c,
                sparsity: 1.0,
            },
        )
    })
    .collect();
    dag.propagate_sizes(&meta).expect("probe shapes are valid");
    let h = dag.node(id);
    let inp = dag.node(chain);
    let mnemonic = h.op.mnemonic();
    Admissibility {
        op: mnemonic.clone(),
        open: ALL_TEMPLATES.map(|t| open(t, &dag, h, cfg)),
        fuse: ALL_TEMPLATES.map(|t| fuse(t, &dag, h, inp, cfg)),
        close: ALL_TEMPLATES.map(|t| close(t, &dag, h, cfg)),
        declared_non_fusible: NON_FUSIBLE.contains(&mnemonic.as_str()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hop::LeafMeta;
    use crate::parser::parse_script;
    use std::collections::BTreeMap;

    /// Totality over the vocabulary: every operation either opens some
    /// template under favorable shapes or is declared non-fusible.
    #[test]
    fn vocabulary_totality() {
        let cfg = Config::default();
        for row in admissibility_matrix(&cfg) {
            assert!(
                row.open.iter().any(|&b| b) || row.declared_non_fusible,
                "{} neither opens a template nor is declared non-fusible",
                row.op
            );
        }
    }

    fn dag_for(script: &str, meta: &[(&str, u64, u64, f64)]) -> HopDag {
        let mut dag = parse_script(script).unwrap();
        let meta: BTreeMap<String, LeafMeta> = meta
            .iter()
            .map(|(n, r, c, s)| {
                (
                    n.to_string(),
                    LeafMeta {
                        rows: *r,
                        cols: *c,
                        sparsity: *s,
                    },
                )
            })
            .collect();
        dag.propagate_sizes(&meta).unwrap();
        dag
    }

    fn find(dag: &HopDag, pred: impl Fn(&Hop) -> bool) -> HopId {
        dag.nodes().iter().find(|h| pred(h)).map(|h| h.id).unwrap()
    }

    #[test]
    fn outer_opens_on_outer_product_mm() {
        let cfg = Config::default();
        let dag = dag_for(
            "R = U %*% t(V)",
            &[("U", 2000, 100, 1.0), ("V", 3000, 100, 1.0)],
        );
        let mm = find(&dag, |h| h.op == Op::MatMul);
        assert!(open(TemplateKind::Outer, &dag, dag.node(mm), &cfg));
    }

    #[test]
    fn cell_does_not_open_on_transpose() {
        let cfg = Config::default();
        let dag = dag_for("R = t(X)", &[("X", 10, 10, 1.0)]);
        let t = find(&dag, |h| h.op == Op::Transpose);
        assert!(!open(TemplateKind::Cell, &dag, dag.node(t), &cfg));
    }

    #[test]
    fn row_opens_on_matrix_vector_mm() {
        let cfg = Config::default();
        let dag = dag_for("R = X %*% v", &[("X", 100_000, 10, 1.0), ("v", 10, 1, 1.0)]);
        let mm = find(&dag, |h| h.op == Op::MatMul);
        assert!(open(TemplateKind::Row, &dag, dag.node(mm), &cfg));
    }

    #[test]
    fn cell_fuses_aggregation() {
        let cfg = Config::default();
        let dag = dag_for("R = sum(X * Y)", &[("X", 10, 10, 1.0), ("Y", 10, 10, 1.0)]);
        let s = find(&dag, |h| is_full_agg(h));
        let m = find(&dag, |h| matches!(h.op, Op::Binary(BinaryOp::Mult)));
        assert!(fuse(TemplateKind::Cell, &dag, dag.node(s), dag.node(m), &cfg));
    }

    #[test]
    fn row_does_not_fuse_transpose_into_colsums() {
        let cfg = Config::default();
        let dag = dag_for("R = colSums(t(X))", &[("X", 10, 20, 1.0)]);
        let cs = find(&dag, |h| matches!(h.op, Op::Agg(_, AggDir::Col)));
        let t = find(&dag, |h| h.op == Op::Transpose);
        assert!(!fuse(TemplateKind::Row, &dag, dag.node(cs), dag.node(t), &cfg));
    }

    #[test]
    fn outer_fuses_log_over_chain() {
        let cfg = Config {
            outer_min_cells: 1,
            ..Config::default()
        };
        let dag = dag_for(
            "R = sum(X * log(U %*% t(V) + 1e-15))",
            &[("X", 100, 100, 0.01), ("U", 100, 10, 1.0), ("V", 100, 10, 1.0)],
        );
        let lg = find(&dag, |h| matches!(h.op, Op::Unary(UnaryOp::Log)));
        let add = find(&dag, |h| matches!(h.op, Op::Binary(BinaryOp::Add)));
        assert!(fuse(TemplateKind::Outer, &dag, dag.node(lg), dag.node(add), &cfg));
    }

    #[test]
    fn outer_rejects_matrix_additions() {
        let cfg = Config {
            outer_min_cells: 1,
            ..Config::default()
        };
        let dag = dag_for(
            "R = Y + X * (U %*% t(V))",
            &[
                ("Y", 100, 100, 1.0),
                ("X", 100, 100, 0.01),
                ("U", 100, 10, 1.0),
                ("V", 100, 10, 1.0),
            ],
        );
        let add = find(&dag, |h| matches!(h.op, Op::Binary(BinaryOp::Add)));
        let mult = find(&dag, |h| matches!(h.op, Op::Binary(BinaryOp::Mult)));
        assert!(!fuse(
            TemplateKind::Outer,
            &dag,
            dag.node(add),
            dag.node(mult),
            &cfg
        ));
    }

    #[test]
    fn row_does_not_merge_outer() {
        assert!(!TemplateKind::Row.compatible_child(TemplateKind::Outer));
    }

    #[test]
    fn close_statuses() {
        let cfg = Config::default();
        let dag = dag_for("R = rowSums(X * Y)", &[("X", 10, 10, 1.0), ("Y", 10, 10, 1.0)]);
        let rs = find(&dag, |h| matches!(h.op, Op::Agg(_, AggDir::Row)));
        assert_eq!(
            close(TemplateKind::Cell, &dag, dag.node(rs), &cfg),
            CloseStatus::ClosedValid
        );
        assert_eq!(
            close(TemplateKind::Row, &dag, dag.node(rs), &cfg),
            CloseStatus::OpenValid
        );
    }

    #[test]
    fn driver_validation() {
        let cfg = Config {
            outer_min_cells: 1,
            ..Config::default()
        };
        // with the element-wise multiply by sparse X, the chain has a driver
        let dag = dag_for(
            "R = sum(X * log(U %*% t(V) + 1e-15))",
            &[("X", 100, 100, 0.01), ("U", 100, 10, 1.0), ("V", 100, 10, 1.0)],
        );
        let region: BTreeSet<HopId> = dag
            .nodes()
            .iter()
            .filter(|h| !h.op.is_leaf() && h.op != Op::Transpose)
            .map(|h| h.id)
            .collect();
        let root = find(&dag, |h| is_full_agg(h));
        let x = find(&dag, |h| matches!(&h.op, Op::Read(n) if n == "X"));
        assert_eq!(find_sparse_driver(&dag, &region, root, &cfg), Some(x));

        // without it, no sparse-safe operation consumes a driver
        let dag2 = dag_for(
            "R = sum(log(U %*% t(V) + 1e-15))",
            &[("U", 100, 10, 1.0), ("V", 100, 10, 1.0)],
        );
        let region2: BTreeSet<HopId> = dag2
            .nodes()
            .iter()
            .filter(|h| !h.op.is_leaf() && h.op != Op::Transpose)
            .map(|h| h.id)
            .collect();
        let root2 = find(&dag2, |h| is_full_agg(h));
        assert_eq!(find_sparse_driver(&dag2, &region2, root2, &cfg), None);
    }
}

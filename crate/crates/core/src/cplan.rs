//! Code generation plans: the backend-independent representation of fused
//! operators. A CPlan is a template with bindings plus a DAG of basic
//! operation nodes; construction walks the selected memo table top down,
//! probing for fusion plans and resolving group references.

use crate::config::{Config, SelectionMode};
use crate::error::{Error, Result};
use crate::explore::{resolve_plan, MemoTable, RefFilter, ResolvedPlan};
use crate::hop::{AggDir, AggFn, BinaryOp, Dims, HopDag, HopId, Op, TernaryOp, UnaryOp};
use crate::reference::input_name;
use crate::side_input::SideAccess;
use crate::templates::{find_sparse_driver, is_outer_mm, is_vector_dot, TemplateKind};
use std::collections::{BTreeMap, BTreeSet};

pub type CNodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CShape {
    Scalar,
    Vec(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CNodeOp {
    /// Current cell of the main input (Cell/MultiAgg/Outer).
    MainCell,
    /// Current row of the main input (Row).
    MainRow,
    /// Cell read of a side input, broadcast-aware; `swap` exchanges the
    /// row/column index (vector inner products), `col_offset` shifts the
    /// column (column-range indexing).
    SideCell {
        side: usize,
        swap: bool,
        col_offset: u64,
    },
    /// Per-row scalar read of a column-vector side input.
    SideRowValue(usize),
    /// Row slice [from..to) of a side input as a vector (Row bodies).
    SideRowVec {
        side: usize,
        from: u64,
        to: u64,
        /// Fixed row 0 for row-vector sides constant across iteration.
        broadcast_row: bool,
    },
    Lit(f64),
    /// Out-of-region scalar intermediate bound at execution time.
    ScalarInput(usize),
    Unary(UnaryOp),
    Binary(BinaryOp),
    Ternary(TernaryOp),
    VecUnary(UnaryOp),
    /// Element-wise over (vector|scalar) operands, at least one vector.
    VecBinary(BinaryOp),
    /// Vector reduction to a scalar.
    VecAgg(AggFn),
    /// Row-vector times a full side-input block.
    VecMatMult { side: usize },
    /// Vector slice [from..to).
    VecSlice { from: u64, to: u64 },
    /// Inner product of the current U row and V row (Outer).
    OuterDot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CNode {
    pub op: CNodeOp,
    pub children: Vec<CNodeId>,
    pub shape: CShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MSource {
    U,
    V,
    Side(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    CellNoAgg,
    CellAgg(AggFn, AggDir),
    MultiAgg(Vec<AggFn>),
    RowNoAgg,
    RowAgg(AggFn, AggDir),
    /// Column aggregate of the transposed output: t(X) %*% chain.
    RowColTAgg,
    OuterNoAgg,
    OuterFullAgg(AggFn),
    OuterRightMm(MSource),
    OuterLeftMm(MSource),
}

impl Variant {
    pub fn name(&self, b1: bool) -> String {
        let base = match self {
            Variant::CellNoAgg | Variant::RowNoAgg | Variant::OuterNoAgg => "no_agg".to_string(),
            Variant::CellAgg(_, d) | Variant::RowAgg(_, d) => match d {
                AggDir::Row => "row_agg".to_string(),
                AggDir::Col => "col_agg".to_string(),
                AggDir::Full => "full_agg".to_string(),
            },
            Variant::MultiAgg(fs) => format!("full_agg_x{}", fs.len()),
            Variant::RowColTAgg => "col_t_agg".to_string(),
            Variant::OuterFullAgg(_) => "full_agg".to_string(),
            Variant::OuterRightMm(_) => "right_mm".to_string(),
            Variant::OuterLeftMm(_) => "left_mm".to_string(),
        };
        if b1 {
            format!("{base}_b1")
        } else {
            base
        }
    }
}

#[derive(Debug, Clone)]
pub struct MainBinding {
    pub hop: HopId,
    pub name: String,
    pub dims: Dims,
}

#[derive(Debug, Clone)]
pub struct SideBinding {
    pub hop: HopId,
    pub name: String,
    pub dims: Dims,
    pub access: SideAccess,
}

#[derive(Debug, Clone)]
pub struct OuterBindings {
    pub u_hop: HopId,
    pub u_name: String,
    pub v_hop: HopId,
    pub v_name: String,
    pub rank: u64,
}

#[derive(Debug, Clone)]
pub struct CPlan {
    pub template: TemplateKind,
    pub variant: Variant,
    pub main: MainBinding,
    pub sides: Vec<SideBinding>,
    pub scalars: Vec<(HopId, String)>,
    pub outer: Option<OuterBindings>,
    pub body: Vec<CNode>,
    /// Body roots: one per output aggregate (several for MultiAgg).
    pub roots: Vec<CNodeId>,
    /// Hops whose values this operator produces (one per root).
    pub out_hops: Vec<HopId>,
    pub out_dims: Dims,
    pub covered: BTreeSet<HopId>,
    /// Row template: preallocated per-worker row intermediates.
    pub ring_buffer_size: usize,
    /// Whether the plan may iterate nonzeros of the main input only.
    pub sparse_safe: bool,
    /// Full-block side binding present (B1 flavor).
    pub b1: bool,
    pub structural_hash: u64,
}

impl CPlan {
    pub fn variant_name(&self) -> String {
        self.variant.name(self.b1)
    }
}

struct Transcriber<'a> {
    dag: &'a HopDag,
    region: &'a BTreeSet<HopId>,
    main_hop: HopId,
    body: Vec<CNode>,
    memo: BTreeMap<(HopId, bool), CNodeId>,
    sides: Vec<SideBinding>,
    scalars: Vec<(HopId, String)>,
}

impl<'a> Transcriber<'a> {
    fn new(dag: &'a HopDag, region: &'a BTreeSet<HopId>, main_hop: HopId) -> Self {
        Transcriber {
            dag,
            region,
            main_hop,
            body: Vec::new(),
            memo: BTreeMap::new(),
            sides: Vec::new(),
            scalars: Vec::new(),
        }
    }

    fn push(&mut self, op: CNodeOp, children: Vec<CNodeId>, shape: CShape) -> CNodeId {
        // CSE on identical nodes keeps shared reads shared
        if let Some(id) = self
            .body
            .iter()
            .position(|n| n.op == op && n.children == children)
        {
            return id;
        }
        self.body.push(CNode {
            op,
            children,
            shape,
        });
        self.body.len() - 1
    }

    fn side_index(&mut self, hop: HopId, access: SideAccess) -> usize {
        if let Some(i) = self.sides.iter().position(|s| s.hop == hop) {
            // widen access if needed: cell access subsumes row access
            if access == SideAccess::CellIndexed {
                self.sides[i].access = SideAccess::CellIndexed;
            }
            return i;
        }
        self.sides.push(SideBinding {
            hop,
            name: input_name(self.dag, hop),
            dims: self.dag.node(hop).dims,
            access,
        });
        self.sides.len() - 1
    }

    fn scalar_index(&mut self, hop: HopId) -> usize {
        if let Some(i) = self.scalars.iter().position(|(h, _)| *h == hop) {
            return i;
        }
        self.scalars.push((hop, input_name(self.dag, hop)));
        self.scalars.len() - 1
    }

    fn vec_len(&self, dims: Dims) -> usize {
        // row-aligned values carry the column extent of their hop
        dims.cols as usize
    }

    /// Cell-style transcription: every node evaluates to a scalar at the
    /// current (rix, cix); `swap` transposes side reads under inner products.
    fn cell(&mut self, hop: HopId, swap: bool) -> Result<CNodeId> {
        if let Some(&id) = self.memo.get(&(hop, swap)) {
            return Ok(id);
        }
        let h = self.dag.node(hop);
        let id = if !self.region.contains(&hop) {
            match &h.op {
                Op::Literal(v) => self.push(CNodeOp::Lit(*v), vec![], CShape::Scalar),
                _ if h.dims.is_scalar() => {
                    let s = self.scalar_index(hop);
                    self.push(CNodeOp::ScalarInput(s), vec![], CShape::Scalar)
                }
                _ if hop == self.main_hop => self.push(CNodeOp::MainCell, vec![], CShape::Scalar),
                _ => {
                    let side = self.side_index(hop, SideAccess::CellIndexed);
                    self.push(
                        CNodeOp::SideCell {
                            side,
                            swap,
                            col_offset: 0,
                        },
                        vec![],
                        CShape::Scalar,
                    )
                }
            }
        } else {
            match &h.op {
                Op::Unary(u) => {
                    let c = self.cell(h.inputs[0], swap)?;
                    self.push(CNodeOp::Unary(*u), vec![c], CShape::Scalar)
                }
                Op::Binary(b) => {
                    let l = self.cell(h.inputs[0], swap)?;
                    let r = self.cell(h.inputs[1], swap)?;
                    self.push(CNodeOp::Binary(*b), vec![l, r], CShape::Scalar)
                }
                Op::Ternary(t) => {
                    let a = self.cell(h.inputs[0], swap)?;
                    let b = self.cell(h.inputs[1], swap)?;
                    let c = self.cell(h.inputs[2], swap)?;
                    self.push(CNodeOp::Ternary(*t), vec![a, b, c], CShape::Scalar)
                }
                Op::MatMul if is_vector_dot(self.dag, h) => {
                    // inner product folded into a multiply over the swapped frame
                    let l = self.cell(h.inputs[0], swap)?;
                    let r = self.cell(h.inputs[1], !swap)?;
                    self.push(CNodeOp::Binary(BinaryOp::Mult), vec![l, r], CShape::Scalar)
                }
                other => {
                    return Err(Error::Internal(format!(
                        "operation {other:?} not cell-transcribable"
                    )))
                }
            }
        };
        self.memo.insert((hop, swap), id);
        Ok(id)
    }

    /// Row-style transcription: values are row vectors or per-row scalars.
    fn row(&mut self, hop: HopId) -> Result<CNodeId> {
        if let Some(&id) = self.memo.get(&(hop, false)) {
            return Ok(id);
        }
        let h = self.dag.node(hop);
        let id = if !self.region.contains(&hop) {
            match &h.op {
                Op::Literal(v) => self.push(CNodeOp::Lit(*v), vec![], CShape::Scalar),
                _ if h.dims.is_scalar() => {
                    let s = self.scalar_index(hop);
                    self.push(CNodeOp::ScalarInput(s), vec![], CShape::Scalar)
                }
                _ if hop == self.main_hop => {
                    let len = self.vec_len(h.dims);
                    self.push(CNodeOp::MainRow, vec![], CShape::Vec(len))
                }
                _ if h.dims.is_col_vector() => {
                    let side = self.side_index(hop, SideAccess::RowIndexed);
                    self.push(CNodeOp::SideRowValue(side), vec![], CShape::Scalar)
                }
                _ => {
                    // matrix or row-vector side bound per row
                    let broadcast_row = h.dims.rows == 1;
                    let side = self.side_index(hop, SideAccess::CellIndexed);
                    let len = self.vec_len(h.dims);
                    self.push(
                        CNodeOp::SideRowVec {
                            side,
                            from: 0,
                            to: h.dims.cols,
                            broadcast_row,
                        },
                        vec![],
                        CShape::Vec(len),
                    )
                }
            }
        } else {
            match &h.op {
                Op::Unary(u) => {
                    let c = self.row(h.inputs[0])?;
                    let shape = self.body[c].shape;
                    match shape {
                        CShape::Scalar => self.push(CNodeOp::Unary(*u), vec![c], shape),
                        CShape::Vec(_) => self.push(CNodeOp::VecUnary(*u), vec![c], shape),
                    }
                }
                Op::Binary(b) => {
                    let l = self.row(h.inputs[0])?;
                    let r = self.row(h.inputs[1])?;
                    let shape = match (self.body[l].shape, self.body[r].shape) {
                        (CShape::Scalar, CShape::Scalar) => CShape::Scalar,
                        (CShape::Vec(n), _) | (_, CShape::Vec(n)) => CShape::Vec(n),
                    };
                    match shape {
                        CShape::Scalar => self.push(CNodeOp::Binary(*b), vec![l, r], shape),
                        CShape::Vec(_) => self.push(CNodeOp::VecBinary(*b), vec![l, r], shape),
                    }
                }
                Op::Ternary(t) => {
                    let a = self.row(h.inputs[0])?;
                    let b2 = self.row(h.inputs[1])?;
                    let c = self.row(h.inputs[2])?;
                    let vec = [a, b2, c]
                        .iter()
                        .find_map(|&n| match self.body[n].shape {
                            CShape::Vec(k) => Some(k),
                            _ => None,
                        });
                    match vec {
                        None => self.push(CNodeOp::Ternary(*t), vec![a, b2, c], CShape::Scalar),
                        Some(_) => {
                            return Err(Error::Internal(
                                "vector ternary not supported in row bodies".into(),
                            ))
                        }
                    }
                }
                Op::Agg(f, AggDir::Row) => {
                    let c = self.row(h.inputs[0])?;
                    self.push(CNodeOp::VecAgg(*f), vec![c], CShape::Scalar)
                }
                Op::MatMul => {
                    // in-region chain times a materialized narrow block
                    let left = self.row(h.inputs[0])?;
                    let right = h.inputs[1];
                    debug_assert!(!self.region.contains(&right), "row matmul right is a block");
                    let side = self.side_index(right, SideAccess::Full);
                    let len = self.dag.node(right).dims.cols as usize;
                    self.push(
                        CNodeOp::VecMatMult { side },
                        vec![left],
                        CShape::Vec(len),
                    )
                }
                Op::ColIndex { from, to } => {
                    let child = h.inputs[0];
                    if self.region.contains(&child) || child == self.main_hop {
                        let c = self.row(child)?;
                        let len = (*to - *from + 1) as usize;
                        match self.body[c].shape {
                            CShape::Vec(_) => self.push(
                                CNodeOp::VecSlice {
                                    from: *from - 1,
                                    to: *to,
                                },
                                vec![c],
                                CShape::Vec(len),
                            ),
                            CShape::Scalar => c,
                        }
                    } else {
                        let side = self.side_index(child, SideAccess::CellIndexed);
                        let len = (*to - *from + 1) as usize;
                        let broadcast_row = self.dag.node(child).dims.rows == 1;
                        self.push(
                            CNodeOp::SideRowVec {
                                side,
                                from: *from - 1,
                                to: *to,
                                broadcast_row,
                            },
                            vec![],
                            CShape::Vec(len),
                        )
                    }
                }
                other => {
                    return Err(Error::Internal(format!(
                        "operation {other:?} not row-transcribable"
                    )))
                }
            }
        };
        self.memo.insert((hop, false), id);
        Ok(id)
    }
}

fn count_vector_nodes(body: &[CNode]) -> usize {
    body.iter()
        .filter(|n| matches!(n.shape, CShape::Vec(_)) && n.op != CNodeOp::MainRow)
        .count()
}

/// Main-input pick for cell-style plans: the sparse driver when the plan is
/// sparse-safe, otherwise the largest frame-shaped input.
fn pick_cell_main(
    dag: &HopDag,
    cfg: &Config,
    region: &BTreeSet<HopId>,
    root: HopId,
    frame: Dims,
) -> (HopId, bool) {
    if let Some(d) = find_sparse_driver(dag, region, root, cfg) {
        return (d, true);
    }
    let mut best: Option<HopId> = None;
    for &n in region {
        for &i in &dag.node(n).inputs {
            if region.contains(&i) || dag.node(i).dims.is_scalar() {
                continue;
            }
            if dag.node(i).dims == frame && best.map_or(true, |b| i < b) {
                best = Some(i);
            }
        }
    }
    let main = best.unwrap_or_else(|| {
        // fall back to any non-scalar input
        region
            .iter()
            .flat_map(|&n| dag.node(n).inputs.iter().copied())
            .find(|&i| !region.contains(&i) && !dag.node(i).dims.is_scalar())
            .expect("cell plan has a non-scalar input")
    });
    (main, false)
}

/// The input whose rows a Row plan iterates: follow the row-flow from the
/// root down to the first out-of-region producer.
fn row_main(dag: &HopDag, region: &BTreeSet<HopId>, root: HopId) -> HopId {
    let mut cur = root;
    loop {
        let h = dag.node(cur);
        let next = match &h.op {
            Op::MatMul => {
                let left = dag.node(h.inputs[0]);
                if left.op == Op::Transpose {
                    if region.contains(&h.inputs[0]) {
                        left.inputs[0]
                    } else {
                        h.inputs[0]
                    }
                } else {
                    h.inputs[0]
                }
            }
            Op::Agg(..) | Op::ColIndex { .. } | Op::Unary(_) => h.inputs[0],
            Op::Binary(_) | Op::Ternary(_) => {
                // the first row-aligned operand
                *h.inputs
                    .iter()
                    .find(|&&i| dag.node(i).dims.rows == h.dims.rows)
                    .unwrap_or(&h.inputs[0])
            }
            Op::Transpose => h.inputs[0],
            _ => return cur,
        };
        if !region.contains(&next) {
            return next;
        }
        cur = next;
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Canonical structural hash over template, variant, body and binding shapes;
/// leaf names are binding positions, never part of the hash.
fn structural_hash(plan: &CPlan) -> u64 {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(format!("{:?}|{:?}|", plan.template, plan.variant).as_bytes());
    buf.extend_from_slice(format!("{}x{}|", plan.main.dims.rows, plan.main.dims.cols).as_bytes());
    for s in &plan.sides {
        buf.extend_from_slice(
            format!("s{}x{}:{:?}|", s.dims.rows, s.dims.cols, s.access).as_bytes(),
        );
    }
    buf.extend_from_slice(format!("k{}|", plan.scalars.len()).as_bytes());
    for n in &plan.body {
        buf.extend_from_slice(format!("{:?}{:?}{:?};", n.op, n.children, n.shape).as_bytes());
    }
    buf.extend_from_slice(format!("r{:?}", plan.roots).as_bytes());
    fnv1a(&buf)
}

fn finish(mut plan: CPlan) -> CPlan {
    plan.b1 = plan
        .sides
        .iter()
        .any(|s| s.access == SideAccess::Full || (s.dims.cols > 1 && s.dims.rows > 1));
    plan.structural_hash = structural_hash(&plan);
    plan
}

fn build_cell_like(dag: &HopDag, cfg: &Config, rp: &ResolvedPlan) -> Result<CPlan> {
    let root = dag.node(rp.root);
    let (frame, variant, agg_input, swap_frame) = match &root.op {
        Op::Agg(f, d) => (
            dag.node(root.inputs[0]).dims,
            Variant::CellAgg(*f, *d),
            Some(root.inputs[0]),
            false,
        ),
        Op::MatMul if is_vector_dot(dag, root) => (
            dag.node(root.inputs[0]).dims,
            Variant::CellAgg(AggFn::Sum, AggDir::Full),
            None,
            false,
        ),
        _ => (root.dims, Variant::CellNoAgg, None, false),
    };
    let (main_hop, sparse_safe) = pick_cell_main(dag, cfg, &rp.region, rp.root, frame);
    let mut tr = Transcriber::new(dag, &rp.region, main_hop);
    let body_root = match agg_input {
        Some(inp) => tr.cell(inp, swap_frame)?,
        None => tr.cell(rp.root, swap_frame)?,
    };
    let out_dims = root.dims;
    Ok(finish(CPlan {
        template: TemplateKind::Cell,
        variant,
        main: MainBinding {
            hop: main_hop,
            name: input_name(dag, main_hop),
            dims: dag.node(main_hop).dims,
        },
        sides: tr.sides,
        scalars: tr.scalars,
        outer: None,
        body: tr.body,
        roots: vec![body_root],
        out_hops: vec![rp.root],
        out_dims,
        covered: rp.region.clone(),
        ring_buffer_size: 0,
        sparse_safe,
        b1: false,
        structural_hash: 0,
    }))
}

/// Merges several selected full aggregates over shared inputs into one
/// multi-aggregate plan with a stacked k x 1 output.
pub fn build_multi_agg(dag: &HopDag, cfg: &Config, plans: &[ResolvedPlan]) -> Result<CPlan> {
    assert!(plans.len() >= 2);
    let frames: Vec<Dims> = plans
        .iter()
        .map(|p| dag.node(dag.node(p.root).inputs[0]).dims)
        .collect();
    if frames.iter().any(|f| *f != frames[0]) {
        return Err(Error::Internal("multi-agg frames differ".into()));
    }
    let frame = frames[0];
    let union: BTreeSet<HopId> = plans.iter().flat_map(|p| p.region.iter().copied()).collect();
    // the shared main: a driver valid for every body, else a shared input
    let mut main: Option<(HopId, bool)> = None;
    let drivers: Vec<Option<HopId>> = plans
        .iter()
        .map(|p| find_sparse_driver(dag, &p.region, p.root, cfg))
        .collect();
    if let Some(d) = drivers[0] {
        if drivers.iter().all(|x| *x == Some(d)) {
            main = Some((d, true));
        }
    }
    if main.is_none() {
        let shared = shared_inputs(dag, plans, frame);
        let pick = shared
            .first()
            .copied()
            .ok_or_else(|| Error::Internal("multi-agg without shared input".into()))?;
        main = Some((pick, false));
    }
    let (main_hop, sparse_safe) = main.unwrap();
    let covered = union.clone();
    let mut tr = Transcriber::new(dag, &union, main_hop);
    let mut roots = Vec::new();
    let mut fns = Vec::new();
    let mut out_hops = Vec::new();
    for p in plans {
        let r = dag.node(p.root);
        let (f, inp) = match &r.op {
            Op::Agg(f, AggDir::Full) => (*f, r.inputs[0]),
            _ => return Err(Error::Internal("multi-agg root is not a full agg".into())),
        };
        roots.push(tr.cell(inp, false)?);
        fns.push(f);
        out_hops.push(p.root);
    }
    Ok(finish(CPlan {
        template: TemplateKind::MultiAgg,
        variant: Variant::MultiAgg(fns),
        main: MainBinding {
            hop: main_hop,
            name: input_name(dag, main_hop),
            dims: dag.node(main_hop).dims,
        },
        sides: tr.sides,
        scalars: tr.scalars,
        outer: None,
        body: tr.body,
        roots,
        out_hops,
        out_dims: Dims::new(plans.len() as u64, 1),
        covered,
        ring_buffer_size: 0,
        sparse_safe,
        b1: false,
        structural_hash: 0,
    }))
}

fn shared_inputs(dag: &HopDag, plans: &[ResolvedPlan], frame: Dims) -> Vec<HopId> {
    let input_sets: Vec<BTreeSet<HopId>> = plans
        .iter()
        .map(|p| {
            p.region
                .iter()
                .flat_map(|&n| dag.node(n).inputs.iter().copied())
                .filter(|i| !p.region.contains(i) && !dag.node(*i).dims.is_scalar())
                .collect()
        })
        .collect();
    let mut shared: Vec<HopId> = input_sets[0]
        .iter()
        .copied()
        .filter(|i| input_sets.iter().all(|s| s.contains(i)) && dag.node(*i).dims == frame)
        .collect();
    shared.sort_unstable();
    shared
}

/// Inputs shared by at least two of the aggregate plans (multi-agg grouping).
pub fn plans_share_input(dag: &HopDag, a: &ResolvedPlan, b: &ResolvedPlan) -> bool {
    let inputs = |p: &ResolvedPlan| -> BTreeSet<HopId> {
        p.region
            .iter()
            .flat_map(|&n| dag.node(n).inputs.iter().copied())
            .filter(|i| !p.region.contains(i) && !dag.node(*i).dims.is_scalar())
            .collect()
    };
    inputs(a).intersection(&inputs(b)).next().is_some()
}

fn build_row(dag: &HopDag, rp: &ResolvedPlan) -> Result<CPlan> {
    let root = dag.node(rp.root);
    let main_hop = row_main(dag, &rp.region, rp.root);
    let frame = dag.node(main_hop).dims;
    let mut tr = Transcriber::new(dag, &rp.region, main_hop);
    let (variant, body_root) = match &root.op {
        Op::MatMul if dag.node(root.inputs[0]).op == Op::Transpose => {
            // t(X) %*% chain: accumulate main-row outer products
            let chain = tr.row(root.inputs[1])?;
            (Variant::RowColTAgg, chain)
        }
        Op::Agg(f, d @ (AggDir::Col | AggDir::Full | AggDir::Row)) => {
            let c = tr.row(root.inputs[0])?;
            (Variant::RowAgg(*f, *d), c)
        }
        _ => {
            let c = tr.row(rp.root)?;
            (Variant::RowNoAgg, c)
        }
    };
    let ring = count_vector_nodes(&tr.body);
    Ok(finish(CPlan {
        template: TemplateKind::Row,
        variant,
        main: MainBinding {
            hop: main_hop,
            name: input_name(dag, main_hop),
            dims: frame,
        },
        sides: tr.sides,
        scalars: tr.scalars,
        outer: None,
        body: tr.body,
        roots: vec![body_root],
        out_hops: vec![rp.root],
        out_dims: root.dims,
        covered: rp.region.clone(),
        ring_buffer_size: ring,
        sparse_safe: false,
        b1: false,
        structural_hash: 0,
    }))
}

fn build_outer(dag: &HopDag, cfg: &Config, rp: &ResolvedPlan) -> Result<CPlan> {
    // the unique outer-product multiply anchors the U/V bindings
    let anchor = rp
        .region
        .iter()
        .copied()
        .find(|&n| is_outer_mm(dag, dag.node(n), cfg))
        .ok_or_else(|| Error::Internal("outer plan without anchor multiply".into()))?;
    let u_hop = dag.node(anchor).inputs[0];
    let t_node = dag.node(anchor).inputs[1];
    let v_hop = dag.node(t_node).inputs[0];
    let driver = find_sparse_driver(dag, &rp.region, rp.root, cfg)
        .ok_or_else(|| Error::Internal("outer plan without sparse driver".into()))?;

    let root = dag.node(rp.root);
    let frame = dag.node(driver).dims;
    let mut tr = Transcriber::new(dag, &rp.region, driver);
    // pre-seed the anchor so cell transcription maps it to the inner product
    let dot = tr.push(CNodeOp::OuterDot, vec![], CShape::Scalar);
    tr.memo.insert((anchor, false), dot);

    let (variant, body_root) = match &root.op {
        Op::Agg(f, AggDir::Full) => {
            let c = tr.cell(root.inputs[0], false)?;
            (Variant::OuterFullAgg(*f), c)
        }
        Op::MatMul if rp.root != anchor => {
            let chain_is_left = rp.region.contains(&root.inputs[0]);
            let (chain, m_hop) = if chain_is_left {
                (root.inputs[0], root.inputs[1])
            } else {
                (root.inputs[1], root.inputs[0])
            };
            let m = if m_hop == v_hop {
                MSource::V
            } else if m_hop == u_hop {
                MSource::U
            } else {
                MSource::Side(tr.side_index(m_hop, SideAccess::Full))
            };
            let c = tr.cell(chain, false)?;
            let v = if chain_is_left {
                Variant::OuterRightMm(m)
            } else {
                Variant::OuterLeftMm(m)
            };
            (v, c)
        }
        _ => {
            let c = tr.cell(rp.root, false)?;
            (Variant::OuterNoAgg, c)
        }
    };
    Ok(finish(CPlan {
        template: TemplateKind::Outer,
        variant,
        main: MainBinding {
            hop: driver,
            name: input_name(dag, driver),
            dims: frame,
        },
        sides: tr.sides,
        scalars: tr.scalars,
        outer: Some(OuterBindings {
            u_hop,
            u_name: input_name(dag, u_hop),
            v_hop,
            v_name: input_name(dag, v_hop),
            rank: dag.node(u_hop).dims.cols,
        }),
        body: tr.body,
        roots: vec![body_root],
        out_hops: vec![rp.root],
        out_dims: root.dims,
        covered: rp.region.clone(),
        ring_buffer_size: 0,
        sparse_safe: true,
        b1: false,
        structural_hash: 0,
    }))
}

pub fn build_cplan(dag: &HopDag, cfg: &Config, rp: &ResolvedPlan) -> Result<CPlan> {
    match rp.template {
        TemplateKind::Cell | TemplateKind::MultiAgg => build_cell_like(dag, cfg, rp),
        TemplateKind::Row => build_row(dag, rp),
        TemplateKind::Outer => build_outer(dag, cfg, rp),
    }
}

/// Constructs CPlans for all selected fusion plans by traversing the DAG top
/// down; uncovered hops remain basic operators. In cost-based mode, selected
/// full aggregates over shared inputs consolidate into multi-aggregates.
pub fn construct_cplans(
    dag: &HopDag,
    memo: &MemoTable,
    cfg: &Config,
    filter: &RefFilter,
    mode: SelectionMode,
) -> Result<Vec<CPlan>> {
    let mut plans: Vec<ResolvedPlan> = Vec::new();
    let mut covered_roots: BTreeSet<HopId> = BTreeSet::new();
    let mut worklist: Vec<HopId> = dag.roots();
    let mut seen: BTreeSet<HopId> = BTreeSet::new();
    while let Some(h) = worklist.pop() {
        if !seen.insert(h) || dag.node(h).op.is_leaf() {
            continue;
        }
        match resolve_plan(memo, dag, cfg, h, filter) {
            Some(rp) if rp.region.len() > 1 || worth_single_node(dag, &rp) => {
                for &n in &rp.region {
                    for &i in &dag.node(n).inputs {
                        if !rp.region.contains(&i) {
                            worklist.push(i);
                        }
                    }
                }
                covered_roots.insert(h);
                plans.push(rp);
            }
            _ => {
                for &i in &dag.node(h).inputs {
                    worklist.push(i);
                }
            }
        }
    }

    let mut out: Vec<CPlan> = Vec::new();
    if mode == SelectionMode::CostBased {
        // group compatible full aggregates sharing inputs (up to 3 per op)
        let mut agg_idx: Vec<usize> = (0..plans.len())
            .filter(|&i| {
                let r = dag.node(plans[i].root);
                matches!(r.op, Op::Agg(_, AggDir::Full))
                    && matches!(plans[i].template, TemplateKind::Cell | TemplateKind::MultiAgg)
            })
            .collect();
        agg_idx.sort_by_key(|&i| plans[i].root);
        let mut grouped: Vec<Vec<usize>> = Vec::new();
        for &i in &agg_idx {
            let mut placed = false;
            for g in grouped.iter_mut() {
                if g.len() < 3
                    && g.iter().all(|&j| plans_share_input(dag, &plans[i], &plans[j]))
                    && dag.node(dag.node(plans[i].root).inputs[0]).dims
                        == dag.node(dag.node(plans[g[0]].root).inputs[0]).dims
                    && schedulable(dag, g.iter().chain([&i]).map(|&j| plans[j].root))
                {
                    g.push(i);
                    placed = true;
                    break;
                }
            }
            if !placed {
                grouped.push(vec![i]);
            }
        }
        let mut merged: BTreeSet<usize> = BTreeSet::new();
        for g in grouped.iter().filter(|g| g.len() >= 2) {
            let group: Vec<ResolvedPlan> = g.iter().map(|&i| plans[i].clone()).collect();
            out.push(build_multi_agg(dag, cfg, &group)?);
            merged.extend(g.iter().copied());
        }
        for (i, rp) in plans.iter().enumerate() {
            if !merged.contains(&i) {
                out.push(build_cplan(dag, cfg, rp)?);
            }
        }
    } else {
        for rp in &plans {
            out.push(build_cplan(dag, cfg, rp)?);
        }
    }
    // deterministic order by primary output hop
    out.sort_by_key(|p| p.out_hops[0]);
    Ok(out)
}

/// Single-node plans are only worth an operator when they do real per-cell
/// work; a bare slice or reorganization stays a basic operator.
fn worth_single_node(dag: &HopDag, rp: &ResolvedPlan) -> bool {
    let h = dag.node(rp.root);
    h.op.is_elementwise() || matches!(h.op, Op::Agg(..))
}

/// A merged multi-aggregate executes once all bodies' inputs exist; that is
/// only valid when no output aggregate is consumed before the last one.
fn schedulable<I: Iterator<Item = HopId>>(dag: &HopDag, roots: I) -> bool {
    let roots: Vec<HopId> = roots.collect();
    let trigger = *roots.iter().max().unwrap();
    roots
        .iter()
        .all(|&r| dag.consumers(r).iter().all(|&c| c > trigger))
}

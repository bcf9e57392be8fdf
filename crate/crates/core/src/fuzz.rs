//! Seeded random DAG generation for optimizer and runtime fuzzing.
//!
//! The generator biases toward shared subexpressions (materialization
//! points) and sparse leaves (half the leaves draw from {1, 0.1, 0.01,
//! 1e-4}) so that partitions, interesting points and sparsity-exploiting
//! templates all get exercised. Distribution is fixed so failures reproduce
//! from the seed alone.

use crate::hop::{AggDir, AggFn, BinaryOp, Dims, HopDag, HopId, LeafMeta, Op, UnaryOp};
use crate::matrix::Matrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub struct FuzzParams {
    pub min_ops: usize,
    pub max_ops: usize,
    /// Row/column extents are drawn up to this bound.
    pub max_dim: u64,
    /// Probability of reusing an existing node as an operand (CSE bias).
    pub reuse_prob: f64,
}

impl Default for FuzzParams {
    fn default() -> Self {
        FuzzParams {
            min_ops: 4,
            max_ops: 18,
            max_dim: 24,
            reuse_prob: 0.3,
        }
    }
}

pub struct FuzzDag {
    pub dag: HopDag,
    pub meta: BTreeMap<String, LeafMeta>,
}

const SPARSITIES: [f64; 4] = [1.0, 0.1, 0.01, 1e-4];

struct Gen {
    dag: HopDag,
    meta: BTreeMap<String, LeafMeta>,
    dims: Vec<Dims>,
    next_leaf: usize,
}

impl Gen {
    fn leaf(&mut self, dims: Dims, rng: &mut ChaCha8Rng) -> HopId {
        let name = format!("in{}", self.next_leaf);
        self.next_leaf += 1;
        let sparsity = if rng.gen_bool(0.5) {
            1.0
        } else {
            *SPARSITIES.choose(rng).unwrap()
        };
        self.meta.insert(
            name.clone(),
            LeafMeta {
                rows: dims.rows,
                cols: dims.cols,
                sparsity,
            },
        );
        let id = self.dag.add(Op::Read(name), vec![]);
        self.dims.push(dims);
        id
    }

    fn push(&mut self, op: Op, inputs: Vec<HopId>, dims: Dims) -> HopId {
        let id = self.dag.add(op, inputs);
        self.dims.push(dims);
        id
    }

    /// An operand with the given dims: an existing intermediate (reuse builds
    /// CSEs and materialization points), an existing leaf, or a fresh leaf.
    fn operand(&mut self, dims: Dims, reuse_prob: f64, rng: &mut ChaCha8Rng) -> HopId {
        let (inter, leaves): (Vec<HopId>, Vec<HopId>) = (0..self.dims.len())
            .filter(|&i| self.dims[i] == dims && !matches!(self.dag.node(i).op, Op::Literal(_)))
            .partition(|&i| !self.dag.node(i).op.is_leaf());
        if !inter.is_empty() && rng.gen_bool(reuse_prob) {
            return *inter.choose(rng).unwrap();
        }
        if !leaves.is_empty() && rng.gen_bool(0.5) {
            return *leaves.choose(rng).unwrap();
        }
        self.leaf(dims, rng)
    }
}

/// Generates a propagated, well-shaped random DAG.
pub fn random_dag(seed: u64, params: &FuzzParams) -> FuzzDag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Gen {
        dag: HopDag::new(),
        meta: BTreeMap::new(),
        dims: Vec::new(),
        next_leaf: 0,
    };
    let dims_pool: Vec<Dims> = {
        let r1 = rng.gen_range(4..=params.max_dim);
        let c1 = rng.gen_range(2..=params.max_dim);
        let c2 = rng.gen_range(2..=8);
        vec![
            Dims::new(r1, c1),
            Dims::new(r1, c2),
            Dims::new(c1, c2),
            Dims::new(r1, 1),
        ]
    };
    let base = dims_pool[0];
    g.leaf(base, &mut rng);

    let target = rng.gen_range(params.min_ops..=params.max_ops);
    for _ in 0..target {
        match rng.gen_range(0..100) {
            // element-wise binary over equal dims or a scalar
            0..=44 => {
                let d = *dims_pool.choose(&mut rng).unwrap();
                let a = g.operand(d, params.reuse_prob, &mut rng);
                let b = if rng.gen_bool(0.25) {
                    let v = (rng.gen_range(1..100) as f64) / 10.0;
                    g.push(Op::Literal(v), vec![], Dims::scalar())
                } else {
                    g.operand(d, params.reuse_prob, &mut rng)
                };
                let op = *[
                    BinaryOp::Add,
                    BinaryOp::Sub,
                    BinaryOp::Mult,
                    BinaryOp::Mult,
                    BinaryOp::Min,
                    BinaryOp::Max,
                ]
                .choose(&mut rng)
                .unwrap();
                g.push(Op::Binary(op), vec![a, b], d);
            }
            // comparison against zero (pseudo-sparse-safe)
            45..=49 => {
                let d = *dims_pool.choose(&mut rng).unwrap();
                let a = g.operand(d, params.reuse_prob, &mut rng);
                let z = g.push(Op::Literal(0.0), vec![], Dims::scalar());
                g.push(Op::Binary(BinaryOp::Neq), vec![a, z], d);
            }
            // unary element-wise
            50..=64 => {
                let d = *dims_pool.choose(&mut rng).unwrap();
                let a = g.operand(d, params.reuse_prob, &mut rng);
                let op = *[UnaryOp::Abs, UnaryOp::Round, UnaryOp::Sign, UnaryOp::Sq]
                    .choose(&mut rng)
                    .unwrap();
                g.push(Op::Unary(op), vec![a], d);
            }
            // aggregations
            65..=79 => {
                let d = *dims_pool[..3].choose(&mut rng).unwrap();
                let a = g.operand(d, params.reuse_prob, &mut rng);
                let (f, dir, out) = match rng.gen_range(0..4) {
                    0 => (AggFn::Sum, AggDir::Full, Dims::scalar()),
                    1 => (AggFn::SumSq, AggDir::Full, Dims::scalar()),
                    2 => (AggFn::Sum, AggDir::Row, Dims::new(d.rows, 1)),
                    _ => (AggFn::Sum, AggDir::Col, Dims::new(1, d.cols)),
                };
                g.push(Op::Agg(f, dir), vec![a], out);
            }
            // matrix multiply with a narrow right operand
            80..=89 => {
                let a_dims = *dims_pool[..2].choose(&mut rng).unwrap();
                let a = g.operand(a_dims, params.reuse_prob, &mut rng);
                let n = rng.gen_range(1..=4);
                let b = g.operand(Dims::new(a_dims.cols, n), params.reuse_prob, &mut rng);
                g.push(Op::MatMul, vec![a, b], Dims::new(a_dims.rows, n));
            }
            // transposed-left matrix multiply chain
            90..=93 => {
                let a_dims = dims_pool[0];
                let a = g.operand(a_dims, params.reuse_prob, &mut rng);
                let t = g.push(Op::Transpose, vec![a], Dims::new(a_dims.cols, a_dims.rows));
                let n = rng.gen_range(1..=3);
                let b = g.operand(Dims::new(a_dims.rows, n), params.reuse_prob, &mut rng);
                g.push(Op::MatMul, vec![t, b], Dims::new(a_dims.cols, n));
            }
            // column-range indexing
            _ => {
                let d = *dims_pool[..2].choose(&mut rng).unwrap();
                if d.cols < 2 {
                    continue;
                }
                let a = g.operand(d, params.reuse_prob, &mut rng);
                let from = rng.gen_range(1..=d.cols);
                let to = rng.gen_range(from..=d.cols);
                g.push(
                    Op::ColIndex { from, to },
                    vec![a],
                    Dims::new(d.rows, to - from + 1),
                );
            }
        }
    }
    let mut dag = g.dag;
    dag.outputs = dag
        .roots()
        .into_iter()
        .filter(|&r| !dag.node(r).op.is_leaf())
        .enumerate()
        .map(|(i, r)| (format!("out{i}"), r))
        .collect();
    dag.propagate_sizes(&g.meta).expect("generated DAG is well-shaped");
    FuzzDag { dag, meta: g.meta }
}

/// Random bindings matching the leaf metadata, stored per the threshold.
pub fn random_bindings(fd: &FuzzDag, seed: u64, threshold: f64) -> BTreeMap<String, Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = BTreeMap::new();
    for (name, m) in &fd.meta {
        let mat = if m.sparsity >= 1.0 {
            Matrix::rand_dense(m.rows as usize, m.cols as usize, &mut rng)
        } else {
            Matrix::rand_sparse(m.rows as usize, m.cols as usize, m.sparsity, &mut rng)
        };
        out.insert(name.clone(), mat.with_threshold(threshold));
    }
    out
}

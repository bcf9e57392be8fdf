//! Analytical cost model: per-operator write time plus the maximum of read
//! and compute time, with sparsity-exploiting operators scaled down by the
//! sparsity of their main input. Shared reads inside one operator are
//! deduplicated via cost vectors; materialized subplans reachable over
//! multiple paths are costed once.

use crate::config::Config;
use crate::explore::{resolve_plan, MemoTable, RefFilter, ResolvedPlan};
use crate::hop::{HopDag, HopId, Op};
use crate::partition::{InterestingPoint, PlanPartition};
use crate::templates::{find_sparse_driver, TemplateKind};
use serde::Serialize;
use std::collections::BTreeSet;

pub const DENSE_CELL_BYTES: f64 = 8.0;
/// Value plus column index per stored sparse entry.
pub const SPARSE_CELL_BYTES: f64 = 12.0;

/// Estimated stored bytes of a hop's output under the storage threshold.
pub fn hop_bytes(dag: &HopDag, cfg: &Config, id: HopId) -> f64 {
    let h = dag.node(id);
    let cells = h.dims.cells() as f64;
    if h.sparsity < cfg.sparse_threshold {
        cells * h.sparsity * SPARSE_CELL_BYTES
    } else {
        cells * DENSE_CELL_BYTES
    }
}

fn read_bw(dag: &HopDag, cfg: &Config, id: HopId) -> f64 {
    match &dag.node(id).op {
        Op::Read(name) => cfg.read_bw_for(Some(name)),
        _ => cfg.read_bw_for(None),
    }
}

/// Read-time estimate for one input.
pub fn read_time(dag: &HopDag, cfg: &Config, id: HopId) -> f64 {
    hop_bytes(dag, cfg, id) / read_bw(dag, cfg, id)
}

pub fn write_time(dag: &HopDag, cfg: &Config, id: HopId) -> f64 {
    hop_bytes(dag, cfg, id) / cfg.write_bw
}

/// Per-fused-operator cost vector: output size, compute workload and the
/// sizes of disjoint inputs.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CostVector {
    pub output_bytes: f64,
    pub compute_flops: f64,
    pub input_bytes: Vec<(HopId, f64)>,
    pub sparsity_scale: f64,
}

impl CostVector {
    fn time(&self, dag: &HopDag, cfg: &Config) -> f64 {
        let t_w = self.output_bytes / cfg.write_bw;
        let t_r: f64 = self
            .input_bytes
            .iter()
            .map(|(id, b)| b / read_bw(dag, cfg, *id))
            .sum();
        let t_c = self.compute_flops * self.sparsity_scale / cfg.compute_bw;
        t_w + t_r.max(t_c)
    }
}

/// Cost vector of the fused operator described by a resolved plan.
pub fn plan_cost_vector(dag: &HopDag, cfg: &Config, plan: &ResolvedPlan) -> CostVector {
    let mut inputs: BTreeSet<HopId> = BTreeSet::new();
    let mut flops = 0u64;
    for &n in &plan.region {
        flops += dag.flops(n);
        for &i in &dag.node(n).inputs {
            if !plan.region.contains(&i) && !dag.node(i).dims.is_scalar() {
                inputs.insert(i);
            }
        }
    }
    let scale = match plan.template {
        TemplateKind::Outer | TemplateKind::Cell | TemplateKind::MultiAgg => {
            find_sparse_driver(dag, &plan.region, plan.root, cfg)
                .map(|d| dag.node(d).sparsity)
                .unwrap_or(1.0)
        }
        TemplateKind::Row => 1.0,
    };
    CostVector {
        output_bytes: hop_bytes(dag, cfg, plan.root),
        compute_flops: flops as f64,
        input_bytes: inputs
            .into_iter()
            .map(|i| (i, hop_bytes(dag, cfg, i)))
            .collect(),
        sparsity_scale: scale,
    }
}

fn basic_cost_vector(dag: &HopDag, cfg: &Config, id: HopId) -> CostVector {
    let inputs: BTreeSet<HopId> = dag
        .node(id)
        .inputs
        .iter()
        .copied()
        .filter(|&i| !dag.node(i).dims.is_scalar())
        .collect();
    CostVector {
        output_bytes: hop_bytes(dag, cfg, id),
        compute_flops: dag.flops(id) as f64,
        input_bytes: inputs
            .into_iter()
            .map(|i| (i, hop_bytes(dag, cfg, i)))
            .collect(),
        sparsity_scale: 1.0,
    }
}

/// Modeled time of one uncovered basic operator.
pub fn basic_hop_cost(dag: &HopDag, cfg: &Config, id: HopId) -> f64 {
    basic_cost_vector(dag, cfg, id).time(dag, cfg)
}

/// Builds the reference-severing filter for a plan assignment.
pub fn filter_for_assignment(points: &[InterestingPoint], q: &[bool]) -> RefFilter {
    debug_assert_eq!(points.len(), q.len());
    let mut filter = RefFilter::default();
    for (p, &t) in points.iter().zip(q) {
        if t {
            filter.invalid_edges.insert((p.consumer, p.target));
        }
    }
    filter
}

/// Costs a partition under a reference filter, aborting with infinity once
/// the partial sum exceeds `upper`.
pub fn partition_cost(
    memo: &MemoTable,
    dag: &HopDag,
    cfg: &Config,
    part: &PlanPartition,
    filter: &RefFilter,
    upper: f64,
) -> f64 {
    let mut total = 0.0f64;
    let mut costed: BTreeSet<HopId> = BTreeSet::new();
    let mut extra_writes: BTreeSet<HopId> = BTreeSet::new();
    let mut worklist: Vec<HopId> = part.roots.iter().copied().collect();
    while let Some(r) = worklist.pop() {
        if !costed.insert(r) {
            continue;
        }
        let cv = match resolve_plan(memo, dag, cfg, r, filter) {
            Some(plan) => {
                for &n in &plan.region {
                    for &i in &dag.node(n).inputs {
                        if !plan.region.contains(&i) && part.members.contains(&i) {
                            worklist.push(i);
                        }
                    }
                    // covered intermediates with consumers outside the region
                    // must additionally be materialized
                    if n != plan.root
                        && dag
                            .consumers(n)
                            .iter()
                            .any(|c| !plan.region.contains(c) && !part.members.contains(c))
                    {
                        extra_writes.insert(n);
                    }
                }
                plan_cost_vector(dag, cfg, &plan)
            }
            None => {
                for &i in &dag.node(r).inputs {
                    if part.members.contains(&i) {
                        worklist.push(i);
                    }
                }
                basic_cost_vector(dag, cfg, r)
            }
        };
        total += cv.time(dag, cfg);
        if total > upper {
            return f64::INFINITY;
        }
    }
    for n in extra_writes {
        if !costed.contains(&n) {
            total += write_time(dag, cfg, n);
        }
    }
    total
}

/// Static components of the lower bound: reading partition inputs, minimal
/// compute (no redundancy, full sparsity exploitation) and writing partition
/// roots.
#[derive(Debug, Clone, Copy)]
pub struct StaticBound {
    pub reads: f64,
    pub compute: f64,
    pub writes: f64,
}

pub fn static_lower_bound(
    memo: &MemoTable,
    dag: &HopDag,
    cfg: &Config,
    part: &PlanPartition,
) -> StaticBound {
    let _ = memo;
    let mut opt_scale = 1.0f64;
    for &n in part.members.iter().chain(part.inputs.iter()) {
        let h = dag.node(n);
        if !h.dims.is_scalar() {
            opt_scale = opt_scale.min(h.sparsity);
        }
    }
    let reads: f64 = part
        .inputs
        .iter()
        .filter(|&&i| !dag.node(i).dims.is_scalar())
        .map(|&i| read_time(dag, cfg, i))
        .sum();
    let compute: f64 = part
        .members
        .iter()
        .map(|&m| dag.flops(m) as f64 * opt_scale / cfg.compute_bw)
        .sum();
    let writes: f64 = part.roots.iter().map(|&r| write_time(dag, cfg, r)).sum();
    StaticBound {
        reads,
        compute,
        writes,
    }
}

/// Minimum materialization cost of an assignment: each distinct true-assigned
/// target requires at least one write and one read, scaled by its estimated
/// stored size.
pub fn mp_cost(dag: &HopDag, cfg: &Config, points: &[InterestingPoint], q: &[bool]) -> (f64, f64) {
    let mut targets: BTreeSet<HopId> = BTreeSet::new();
    for (p, &t) in points.iter().zip(q) {
        if t {
            targets.insert(p.target);
        }
    }
    let writes = targets.iter().map(|&t| write_time(dag, cfg, t)).sum();
    let reads = targets.iter().map(|&t| read_time(dag, cfg, t)).sum();
    (writes, reads)
}

/// Full lower bound for a plan assignment prefix. Writes are additive in
/// every plan; reads and compute overlap per operator, so only their maximum
/// is a sound component.
pub fn lower_bound(
    stat: StaticBound,
    dag: &HopDag,
    cfg: &Config,
    points: &[InterestingPoint],
    q: &[bool],
) -> f64 {
    let (mp_writes, mp_reads) = mp_cost(dag, cfg, points, q);
    stat.writes + mp_writes + (stat.reads + mp_reads).max(stat.compute)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_time_anchor() {
        // dense 1e8 x 10 at 32 GB/s reads in exactly 0.25 s
        let cfg = Config::default();
        let mut dag = HopDag::new();
        dag.add(Op::Read("X".into()), vec![]);
        let meta = [(
            "X".to_string(),
            crate::hop::LeafMeta {
                rows: 100_000_000,
                cols: 10,
                sparsity: 1.0,
            },
        )]
        .into_iter()
        .collect();
        dag.propagate_sizes(&meta).unwrap();
        assert_eq!(read_time(&dag, &cfg, 0), 0.25);
    }

    #[test]
    fn remote_penalty_scales_reads() {
        let mut cfg = Config::default();
        cfg.remote_inputs.insert("X".into());
        let mut dag = HopDag::new();
        dag.add(Op::Read("X".into()), vec![]);
        let meta = [(
            "X".to_string(),
            crate::hop::LeafMeta {
                rows: 100_000_000,
                cols: 10,
                sparsity: 1.0,
            },
        )]
        .into_iter()
        .collect();
        dag.propagate_sizes(&meta).unwrap();
        assert_eq!(read_time(&dag, &cfg, 0), 0.25 * cfg.remote_penalty);
    }
}

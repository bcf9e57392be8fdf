//! Candidate selection: picks the cost-optimal non-conflicting subset of
//! partial fusion plans, or applies one of the baseline heuristics.

use crate::config::{Config, SelectionMode};
use crate::cost::{basic_hop_cost, partition_cost};
use crate::enumerate::{optimize_partition, EnumStats};
use crate::explore::{apply_selection, MemoTable, RefFilter};
use crate::hop::{HopDag, HopId};
use crate::partition::{find_partitions, interesting_points, InterestingPoint, PlanPartition};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct PartitionReport {
    pub members: usize,
    pub points: Vec<InterestingPoint>,
    pub q: Vec<bool>,
    pub cost: f64,
    pub stats: EnumStats,
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub mode: SelectionMode,
    pub filter: RefFilter,
    pub partitions: Vec<PlanPartition>,
    pub reports: Vec<PartitionReport>,
    /// Modeled cost of the whole DAG: optimized partitions plus uncovered
    /// basic operators.
    pub total_cost: f64,
}

/// Modeled cost of everything outside the partitions.
fn outside_cost(memo: &MemoTable, dag: &HopDag, cfg: &Config) -> f64 {
    dag.nodes()
        .iter()
        .filter(|h| !h.op.is_leaf() && !memo.contains(h.id))
        .map(|h| basic_hop_cost(dag, cfg, h.id))
        .sum()
}

/// Runs selection in the configured mode and removes invalidated plans from
/// the memo table. The remaining memo drives CPlan construction.
pub fn select_plans(memo: &mut MemoTable, dag: &HopDag, cfg: &Config) -> Selection {
    let partitions = find_partitions(memo, dag);
    let mut filter = RefFilter::default();
    let mut reports = Vec::new();

    match cfg.selection_mode {
        SelectionMode::None => {
            // no fusion at all: drop every plan
            let all: Vec<HopId> = memo.groups().map(|(id, _)| *id).collect();
            let mut sever = RefFilter::default();
            for id in all {
                for &c in dag.consumers(id) {
                    sever.invalid_edges.insert((c, id));
                }
            }
            // emptying the memo is simplest: no entries survive selection
            *memo = MemoTable::new();
            let total_cost = dag
                .nodes()
                .iter()
                .filter(|h| !h.op.is_leaf())
                .map(|h| basic_hop_cost(dag, cfg, h.id))
                .sum();
            return Selection {
                mode: cfg.selection_mode,
                filter: sever,
                partitions: Vec::new(),
                reports: Vec::new(),
                total_cost,
            };
        }
        SelectionMode::FuseAll => {
            // maximal fusion: keep every reference regardless of CSEs
        }
        SelectionMode::FuseNoRedundancy => {
            filter.sever_multi_consumer = true;
        }
        SelectionMode::CostBased => {
            for part in &partitions {
                let points = interesting_points(part, memo, dag);
                let (ordered, outcome) = optimize_partition(memo, dag, cfg, part, &points);
                for (p, &t) in ordered.iter().zip(outcome.q.iter()) {
                    if t {
                        filter.invalid_edges.insert((p.consumer, p.target));
                    }
                }
                reports.push(PartitionReport {
                    members: part.members.len(),
                    points: ordered,
                    q: outcome.q,
                    cost: outcome.cost,
                    stats: outcome.stats,
                    fallback: outcome.fallback,
                });
            }
        }
    }

    if reports.is_empty() {
        for part in &partitions {
            let points = interesting_points(part, memo, dag);
            let cost = partition_cost(memo, dag, cfg, part, &filter, f64::INFINITY);
            let q = points
                .iter()
                .map(|p| !filter.allows(dag, p.consumer, p.target))
                .collect();
            reports.push(PartitionReport {
                members: part.members.len(),
                points,
                q,
                cost,
                stats: EnumStats::default(),
                fallback: false,
            });
        }
    }

    let total_cost: f64 =
        reports.iter().map(|r| r.cost).sum::<f64>() + outside_cost(memo, dag, cfg);
    apply_selection(memo, dag, &filter);
    Selection {
        mode: cfg.selection_mode,
        filter,
        partitions,
        reports,
        total_cost,
    }
}

/// Plan dump mirroring the enumeration statistics.
pub fn selection_to_json(sel: &Selection, dag: &HopDag) -> serde_json::Value {
    let parts: Vec<serde_json::Value> = sel
        .reports
        .iter()
        .map(|r| {
            let points: Vec<serde_json::Value> = r
                .points
                .iter()
                .map(|p| {
                    serde_json::json!({
                        "kind": format!("{:?}", p.kind),
                        "consumer": format!("{} {}", p.consumer, dag.node(p.consumer).op.mnemonic()),
                        "target": format!("{} {}", p.target, dag.node(p.target).op.mnemonic()),
                    })
                })
                .collect();
            serde_json::json!({
                "members": r.members,
                "points": points,
                "q": r.q,
                "cost": r.cost,
                "plans-evaluated": r.stats.evaluated,
                "plans-skipped-cost": r.stats.skipped_cost,
                "plans-skipped-structural": r.stats.skipped_structural,
                "fallback": r.fallback,
            })
        })
        .collect();
    serde_json::json!({
        "mode": format!("{:?}", sel.mode),
        "partitions": parts,
        "total-cost": sel.total_cost,
    })
}

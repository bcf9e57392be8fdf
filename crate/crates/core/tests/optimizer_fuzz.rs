//! Randomized invariants: the skip-ahead enumeration against the exhaustive
//! oracle, pruning soundness, bound soundness, partition independence, and
//! fused/unfused equivalence on generated DAGs.

use fuseplan_core::config::{Config, PruningConfig};
use fuseplan_core::cost::{
    filter_for_assignment, lower_bound, partition_cost, static_lower_bound,
};
use fuseplan_core::enumerate::{exhaustive_min, optimize_partition};
use fuseplan_core::exec::{optimize_and_run, PlanCache};
use fuseplan_core::explore::ofmc_explore;
use fuseplan_core::fuzz::{random_bindings, random_dag, FuzzParams};
use fuseplan_core::partition::{find_partitions, interesting_points};
use fuseplan_core::reference::reference_eval;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn pruning_configs() -> [PruningConfig; 4] {
    [
        PruningConfig {
            cost_based: false,
            structural: false,
            dominated: false,
        },
        PruningConfig {
            cost_based: true,
            structural: false,
            dominated: false,
        },
        PruningConfig {
            cost_based: false,
            structural: true,
            dominated: false,
        },
        PruningConfig {
            cost_based: true,
            structural: true,
            dominated: false,
        },
    ]
}

/// The enumerated optimum equals the exhaustive minimum, and all four
/// pruning configurations agree, over a corpus of random DAGs.
#[test]
fn optimality_oracle_and_pruning_soundness() {
    let mut checked_partitions = 0;
    for seed in 0..120 {
        let fd = random_dag(seed, &FuzzParams::default());
        let cfg = Config::default();
        let memo = ofmc_explore(&fd.dag, &cfg);
        let partitions = find_partitions(&memo, &fd.dag);
        for part in &partitions {
            let points = interesting_points(part, &memo, &fd.dag);
            if points.len() > 12 {
                continue;
            }
            let (_, oracle_cost) = exhaustive_min(&memo, &fd.dag, &cfg, part, &points);
            for pruning in pruning_configs() {
                let cfg_p = Config {
                    pruning,
                    ..Config::default()
                };
                let (_, outcome) = optimize_partition(&memo, &fd.dag, &cfg_p, part, &points);
                assert_eq!(
                    outcome.cost, oracle_cost,
                    "seed {seed}: pruning {pruning:?} missed the optimum over {} points",
                    points.len()
                );
                let total = 1u64 << points.len();
                if points.is_empty() {
                    assert_eq!(outcome.stats.evaluated, 1);
                } else if pruning.structural {
                    // sub-problem evaluations add to the count; the skip
                    // identity is asserted inside the scan
                    assert!(outcome.stats.evaluated >= 1);
                } else {
                    assert_eq!(
                        outcome.stats.evaluated + outcome.stats.skipped_cost,
                        total,
                        "seed {seed}: accounting"
                    );
                }
            }
            checked_partitions += 1;
        }
    }
    assert!(
        checked_partitions >= 200,
        "corpus too small: {checked_partitions} partitions"
    );
}

/// The lower bound never exceeds the true plan cost.
#[test]
fn lower_bound_is_sound() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb0);
    let mut cases = 0;
    for seed in 0..80 {
        let fd = random_dag(seed, &FuzzParams::default());
        let cfg = Config::default();
        let memo = ofmc_explore(&fd.dag, &cfg);
        for part in find_partitions(&memo, &fd.dag) {
            let points = interesting_points(part_ref(&part), &memo, &fd.dag);
            let stat = static_lower_bound(&memo, &fd.dag, &cfg, &part);
            for _ in 0..15 {
                let q: Vec<bool> = (0..points.len()).map(|_| rng.gen_bool(0.4)).collect();
                let lb = lower_bound(stat, &fd.dag, &cfg, &points, &q);
                let cost = partition_cost(
                    &memo,
                    &fd.dag,
                    &cfg,
                    &part,
                    &filter_for_assignment(&points, &q),
                    f64::INFINITY,
                );
                assert!(
                    lb <= cost + 1e-12,
                    "seed {seed}: lower bound {lb} exceeds cost {cost} for q {q:?}"
                );
                cases += 1;
            }
        }
    }
    assert!(cases >= 1000, "need at least 1000 fuzz cases, got {cases}");
}

fn part_ref(p: &fuseplan_core::partition::PlanPartition) -> &fuseplan_core::partition::PlanPartition {
    p
}

/// Adjacent partitions optimized jointly cost the same as the sum of the
/// independently optimized partitions.
#[test]
fn partition_independence() {
    let mut checked = 0;
    for seed in 0..80 {
        let fd = random_dag(seed, &FuzzParams::default());
        let cfg = Config::default();
        let memo = ofmc_explore(&fd.dag, &cfg);
        let partitions = find_partitions(&memo, &fd.dag);
        if partitions.len() < 2 {
            continue;
        }
        let mut sum = 0.0;
        let mut fine = true;
        for part in &partitions {
            let points = interesting_points(part, &memo, &fd.dag);
            if points.len() > 10 {
                fine = false;
                break;
            }
            let (_, o) = optimize_partition(&memo, &fd.dag, &cfg, part, &points);
            sum += o.cost;
        }
        if !fine {
            continue;
        }
        // joint enumeration over the concatenated point space
        let all_points: Vec<_> = partitions
            .iter()
            .flat_map(|p| interesting_points(p, &memo, &fd.dag))
            .collect();
        if all_points.len() > 16 {
            continue;
        }
        let mut best = f64::INFINITY;
        for mask in 0..(1u64 << all_points.len()) {
            let q: Vec<bool> = (0..all_points.len()).map(|i| (mask >> i) & 1 == 1).collect();
            let filter = filter_for_assignment(&all_points, &q);
            let total: f64 = partitions
                .iter()
                .map(|p| partition_cost(&memo, &fd.dag, &cfg, p, &filter, f64::INFINITY))
                .sum();
            best = best.min(total);
        }
        assert!(
            (best - sum).abs() < 1e-12,
            "seed {seed}: joint {best} vs independent {sum}"
        );
        checked += 1;
    }
    assert!(checked >= 5, "too few multi-partition DAGs: {checked}");
}

/// Fused execution matches the reference interpreter on the fuzz corpus.
#[test]
fn fused_matches_reference_on_random_dags() {
    let cfg = Config {
        outer_min_cells: 64,
        ..Config::default()
    };
    for seed in 0..60 {
        let fd = random_dag(seed, &FuzzParams::default());
        let bindings = random_bindings(&fd, seed, cfg.sparse_threshold);
        let reference = match reference_eval(&fd.dag, &bindings) {
            Ok(r) => r,
            Err(e) => panic!("seed {seed}: reference failed: {e}"),
        };
        let mut cache = PlanCache::new();
        let (_, _, fused) = optimize_and_run(&fd.dag, &cfg, &bindings, &mut cache)
            .unwrap_or_else(|e| panic!("seed {seed}: fused failed: {e}"));
        for (name, want) in &reference.outputs {
            let got = &fused.outputs[name];
            let err = want.max_rel_error(got);
            assert!(
                err <= 1e-9,
                "seed {seed}: output '{name}' deviates by {err:e}"
            );
        }
    }
}

/// Group sizes never exceed the 2^inputs * templates bound.
#[test]
fn entry_bound_over_corpus() {
    let mut max_entries = 0;
    for seed in 0..200 {
        let fd = random_dag(seed, &FuzzParams::default());
        let memo = ofmc_explore(&fd.dag, &Config::default());
        for (_, entries) in memo.groups() {
            max_entries = max_entries.max(entries.len());
            assert!(entries.len() <= 32);
        }
    }
    assert!(max_entries >= 2, "corpus exercises non-trivial groups");
}

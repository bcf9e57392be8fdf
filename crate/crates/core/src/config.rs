//! Tunable constants for the optimizer and runtime.
//!
//! Cost ordering, not absolute seconds, is the contract: the defaults model a
//! single node with 32 GB/s read, 16 GB/s write and 115.2 GFLOP/s peak compute.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    /// Full cost-based enumeration (default).
    CostBased,
    /// Maximal fusion, duplicating compute on CSEs.
    FuseAll,
    /// Materialize every multi-consumer intermediate.
    FuseNoRedundancy,
    /// No fusion at all, execute basic operators only.
    None,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PruningConfig {
    pub cost_based: bool,
    pub structural: bool,
    pub dominated: bool,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            cost_based: true,
            structural: true,
            dominated: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub selection_mode: SelectionMode,
    pub pruning: PruningConfig,

    /// Peak read bandwidth in bytes/s.
    pub read_bw: f64,
    /// Peak write bandwidth in bytes/s.
    pub write_bw: f64,
    /// Peak compute in flop/s.
    pub compute_bw: f64,
    /// Read-bandwidth divisor for inputs flagged remote.
    pub remote_penalty: f64,
    /// Leaf inputs whose reads pay the remote penalty.
    pub remote_inputs: BTreeSet<String>,

    /// Matrices with sparsity below this threshold are stored sparse.
    pub sparse_threshold: f64,
    /// Maximum inner dimension for an outer-product-like matrix multiply.
    pub outer_max_rank: u64,
    /// Minimum output cells for an outer-product-like matrix multiply.
    pub outer_min_cells: u64,
    /// Maximum sparsity of the main input of an Outer operator (1.0 = no cap).
    pub outer_max_driver_sparsity: f64,
    /// Maximum width of the non-row operand in Row-template matrix multiplies.
    pub row_block_width: u64,

    /// Hard cap on interesting points per partition; beyond it the partition
    /// falls back to fuse-all with a warning.
    pub max_interesting_points: usize,
    /// Cut-set pair candidates are formed from the top-k scored singletons.
    pub cut_set_pair_candidates: usize,

    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            selection_mode: SelectionMode::CostBased,
            pruning: PruningConfig::default(),
            read_bw: 32e9,
            write_bw: 16e9,
            compute_bw: 115.2e9,
            remote_penalty: 8.0,
            remote_inputs: BTreeSet::new(),
            sparse_threshold: 0.4,
            outer_max_rank: 512,
            outer_min_cells: 1_000_000,
            outer_max_driver_sparsity: 1.0,
            row_block_width: 1024,
            max_interesting_points: 28,
            cut_set_pair_candidates: 8,
            seed: 42,
        }
    }
}

impl Config {
    /// Dominated-plan pruning is only sound for the selection heuristics.
    pub fn effective_dominated_pruning(&self) -> bool {
        self.pruning.dominated && self.selection_mode != SelectionMode::CostBased
    }

    pub fn read_bw_for(&self, input_name: Option<&str>) -> f64 {
        match input_name {
            Some(n) if self.remote_inputs.contains(n) => self.read_bw / self.remote_penalty,
            _ => self.read_bw,
        }
    }
}

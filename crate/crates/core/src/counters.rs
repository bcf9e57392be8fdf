//! Execution counters used to verify single-pass and sparsity claims.

use serde::Serialize;
use std::collections::BTreeMap;

/// Monotone counters for one operator execution; reset only between runs.
#[derive(Debug, Default, Clone, Serialize)]
pub struct KernelCounters {
    pub cells_visited: u64,
    pub genexec_calls: u64,
    /// Full passes over each named input.
    pub matrix_reads: BTreeMap<String, u64>,
    pub flops: u64,
}

impl KernelCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_read(&mut self, name: &str) {
        *self.matrix_reads.entry(name.to_string()).or_insert(0) += 1;
    }

    pub fn reads_of(&self, name: &str) -> u64 {
        self.matrix_reads.get(name).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &KernelCounters) {
        self.cells_visited += other.cells_visited;
        self.genexec_calls += other.genexec_calls;
        self.flops += other.flops;
        for (k, v) in &other.matrix_reads {
            *self.matrix_reads.entry(k.clone()).or_insert(0) += v;
        }
    }
}

//! Cost-based operator fusion for linear algebra DAGs.
//!
//! The pipeline: parse a script into a HOP DAG, propagate sizes, explore all
//! valid partial fusion plans into a memo table, select the cost-optimal
//! non-conflicting subset, construct fused-operator plans, and execute them
//! against dense or sparse matrices. An unfused reference interpreter serves
//! as the numeric oracle.

pub mod config;
pub mod cost;
pub mod counters;
pub mod cplan;
pub mod emit;
pub mod enumerate;
pub mod error;
pub mod exec;
pub mod explore;
pub mod fuzz;
pub mod hop;
pub mod kernels;
pub mod matrix;
pub mod parser;
pub mod partition;
pub mod reference;
pub mod select;
pub mod side_input;
pub mod templates;

pub use config::{Config, SelectionMode};
pub use error::{Error, Result};
pub use matrix::Matrix;

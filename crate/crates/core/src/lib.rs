//! Auditing binary classifiers for multi-differential fairness: certificate
//! search over a rebalanced sample and the worst-violation loop.

pub mod audit;
pub mod certify;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
mod optim;
pub mod rebalance;
pub mod types;
pub mod wva;

pub use error::{MdfaError, Result};
pub use types::{
    AuditConfig, AuditDataset, AuditSample, Bandwidth, Certificate, GridPoint, LossKind, Sign,
    TraceRow, ViolationReport, WeightVector,
};

//! Deterministic simulation: a virtual disk with crash injection, an
//! independent reference model, and a workload driver.

pub mod disk;
pub mod harness;
pub mod oracle;

//! Pseudodifferential symbol calculus on the flat torus with trace-expansion
//! predictions and exact spectral oracles.

pub mod quad;
pub mod symcore;
pub mod calculus;
pub mod jet;
pub mod parametrix;
pub mod funcalc;
pub mod traces;
pub mod expand;
pub mod oracle;
pub mod selftest;
pub mod text;

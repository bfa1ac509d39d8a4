//! Decentralized LQR toolkit for networked linear systems with sparsity and
//! delay constraints: topology analysis, gain synthesis over the information
//! graph, per-agent controller runtimes, single-trajectory identification,
//! suboptimality bound calculators and experiment harnesses.

pub mod bounds;
pub mod controllers;
pub mod experiments;
pub mod lti;
pub mod riccati;
pub mod sysid;
pub mod topology;

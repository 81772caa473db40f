//! End-to-end runs: configuration, phases, run artifacts and diagnostics.

pub mod artifacts;
pub mod config;
pub mod diag;
pub mod phases;
pub mod report;

pub use artifacts::{RunLock, RunManifest};
pub use config::RunConfig;
pub use phases::{
    load_classifier, load_critic, load_eps, run_classifier, run_critic, run_eval, run_full, run_pretrain,
    run_unlearn, Method,
};
pub use report::{emit_report, Report};

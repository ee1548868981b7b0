//! Evaluation, reporting and the staged pipeline behind the CLI.

pub mod config;
pub mod eval;
pub mod pipeline;
pub mod plot;

pub use config::PipelineConfig;
pub use eval::{attack_success, compare_dynamic_static, decision_rule, AttackReport, DecisionOutcome, Method, Split};
pub use pipeline::{Pipeline, RunManifest, Stage};

//! Deterministic discrete-event simulation of the protocols under crashes,
//! lossy channels and transient state corruption.

pub mod campaign;
pub mod config;
pub mod faults;
pub mod nodes;
pub mod report;
pub mod scenario;
pub mod trace;
pub mod world;

pub use config::{ConfigError, FaultConfig, ScenarioKind, SimConfig, TransientSpec, Workload};
pub use faults::Recipe;
pub use report::RunReport;
pub use scenario::{run, Outcome};
pub use world::{Metrics, World};

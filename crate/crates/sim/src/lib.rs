//! Deterministic simulation of a complete shuffle processor: built-in test
//! pipelines with brute-force oracles, a discrete-event harness with fault
//! injection, commit checkers and scenario reports.

pub mod checker;
pub mod harness;
pub mod pipeline;
pub mod report;
pub mod spec;

pub use harness::{HarnessError, Simulation, Status};
pub use report::{run_scenario, verify_exactly_once, ScenarioReport, Verdict};
pub use spec::{FaultPlan, PipelineId, ProcessorSpec};

//! Simulated robot cell: kinematics, a scripted human, a channel bus and a
//! fixed-rate scenario runner.

mod actions;
mod cell;
mod invariance;
mod runner;
mod scenario;

pub use actions::{build_action, SIM_ACTIONS};
pub use cell::{human_position, step_plant, CellState, Waypoint};
pub use invariance::{check_invariance, InvarianceConfig, InvarianceError, InvarianceReport, PlantKind, TrialReport};
pub use runner::{
    run_scenario, run_scenario_with, BarrierStats, RunError, ScenarioTrace, Simulation, TraceFault, TraceRecord,
    TraceSummary,
};
pub use scenario::{
    Channels, InputBarrierConfig, RateConfig, SafetyConfig, Scenario, ScenarioError, StateBarrierConfig, MAX_TICKS,
};

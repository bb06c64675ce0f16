//! Deterministic synchronous-round simulator and protocol library for
//! repeated multi-valued Byzantine agreement with discrete interval validity,
//! and a replicated state machine that tolerates Byzantine processes plus
//! recurring transient faults.
//!
//! Layers, bottom-up:
//! - [`model`]: values, process ids, fault bounds, round budgets;
//! - [`engine`]: lockstep four-phase rounds and the trace;
//! - [`phase_king`], [`weak_mvba`], [`median`]: the agreement stack;
//! - [`smr`]: the pulse-driven replica;
//! - [`faults`]: Byzantine strategies and transient injection;
//! - [`sim`], [`campaign`], [`benign`]: runs, invariant checks, experiments.

pub mod benign;
pub mod campaign;
pub mod engine;
pub mod error;
pub mod faults;
pub mod median;
pub mod model;
pub mod phase_king;
pub mod scenario;
pub mod sim;
pub mod smr;
pub mod weak_mvba;
pub mod wire;

pub use error::{ConfigError, EngineError, ScenarioError};
pub use model::{round_budget, validate_config, FaultBounds, ProcessId, ValidatedConfig, Value};
pub use scenario::{parse_scenario, ScenarioConfig};
pub use sim::run_simulation;

//! Scenario documents: strict JSON with defaults.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Verbosity;
use crate::error::{ConfigError, ScenarioError};
use crate::faults::{ByzantineStrategy, TransientModel};
use crate::median::ThresholdBase;
use crate::model::{validate_config, FaultBounds, ValidatedConfig, Value};
use crate::smr::{InputRule, StateMachineSpec};

/// External inputs fed to replicas at each Pulse.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    Constant { value: i64 },
    /// `values[pulse][process]`; rows repeat cyclically past the last one.
    Explicit { values: Vec<Vec<i64>> },
    /// Independent draws from `lo..=hi` per pulse and process.
    Uniform { lo: i64, hi: i64 },
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec::Constant { value: 0 }
    }
}

impl InputSpec {
    pub fn check(&self, n: usize, _pulses: u64) -> Result<(), ConfigError> {
        match self {
            InputSpec::Constant { .. } => Ok(()),
            InputSpec::Explicit { values } => {
                if values.is_empty() {
                    return Err(ConfigError::Inputs("explicit inputs need at least one row".into()));
                }
                match values.iter().position(|row| row.len() != n) {
                    Some(i) => Err(ConfigError::Inputs(format!("row {i} does not have {n} entries"))),
                    None => Ok(()),
                }
            }
            InputSpec::Uniform { lo, hi } if lo > hi => Err(ConfigError::Inputs(format!("empty range {lo}..={hi}"))),
            InputSpec::Uniform { .. } => Ok(()),
        }
    }
}

/// Produces the per-pulse external inputs of a run.
pub struct InputSource {
    spec: InputSpec,
    rng: ChaCha8Rng,
}

impl InputSource {
    pub fn new(spec: &InputSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        InputSource { spec: spec.clone(), rng }
    }

    /// Inputs for a 1-based pulse.
    pub fn next_pulse(&mut self, pulse: u64, n: usize) -> Vec<Value> {
        match &self.spec {
            InputSpec::Constant { value } => vec![Value::Int(*value); n],
            InputSpec::Explicit { values } => {
                let row = &values[((pulse - 1) % values.len() as u64) as usize];
                row.iter().map(|&v| Value::Int(v)).collect()
            }
            InputSpec::Uniform { lo, hi } => (0..n).map(|_| Value::Int(self.rng.gen_range(*lo..=*hi))).collect(),
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub f_max: usize,
    pub r_max: usize,
    pub alpha: usize,
    pub pulses: u64,
    pub seed: u64,
    pub byzantine: ByzantineStrategy,
    pub transients: TransientModel,
    pub machine: StateMachineSpec,
    pub inputs: InputSpec,
    pub initial_state: i64,
    pub input_rule: InputRule,
    pub threshold_base: ThresholdBase,
    /// Start from arbitrary replica states and a mid-pulse round.
    pub self_stabilizing: bool,
    pub trace: Verbosity,
}

/// The document as written, before defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    n: usize,
    f_max: Option<usize>,
    r_max: Option<usize>,
    alpha: Option<usize>,
    pulses: Option<u64>,
    seed: Option<u64>,
    byzantine: Option<ByzantineStrategy>,
    transients: Option<TransientModel>,
    machine: StateMachineSpec,
    inputs: Option<InputSpec>,
    initial_state: Option<i64>,
    input_rule: Option<InputRule>,
    threshold_base: Option<ThresholdBase>,
    self_stabilizing: Option<bool>,
    trace: Option<Verbosity>,
}

impl From<RawScenario> for ScenarioConfig {
    fn from(raw: RawScenario) -> Self {
        let n = raw.n;
        ScenarioConfig {
            n,
            f_max: raw.f_max.unwrap_or(n.saturating_sub(1) / 3),
            r_max: raw.r_max.unwrap_or(n.div_ceil(6).saturating_sub(1)),
            alpha: raw.alpha.unwrap_or(0),
            pulses: raw.pulses.unwrap_or(1),
            seed: raw.seed.unwrap_or(0),
            byzantine: raw.byzantine.unwrap_or_default(),
            transients: raw.transients.unwrap_or_default(),
            machine: raw.machine,
            inputs: raw.inputs.unwrap_or_default(),
            initial_state: raw.initial_state.unwrap_or(0),
            input_rule: raw.input_rule.unwrap_or_default(),
            threshold_base: raw.threshold_base.unwrap_or_default(),
            self_stabilizing: raw.self_stabilizing.unwrap_or(false),
            trace: raw.trace.unwrap_or_default(),
        }
    }
}

impl ScenarioConfig {
    /// Parses a scenario document, filling defaults. Does not validate.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str::<RawScenario>(text).map(Into::into)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn bounds(&self) -> FaultBounds {
        FaultBounds { n: self.n, f_max: self.f_max, r_max: self.r_max, alpha: self.alpha }
    }

    /// A fault-free scenario over a counter machine.
    pub fn basic(n: usize, f_max: usize) -> Self {
        ScenarioConfig {
            n,
            f_max,
            r_max: n.div_ceil(6).saturating_sub(1),
            alpha: 0,
            pulses: 1,
            seed: 0,
            byzantine: ByzantineStrategy::default(),
            transients: TransientModel::None,
            machine: StateMachineSpec::Counter { m: 10 },
            inputs: InputSpec::default(),
            initial_state: 0,
            input_rule: InputRule::Nearest,
            threshold_base: ThresholdBase::K,
            self_stabilizing: false,
            trace: Verbosity::Summary,
        }
    }
}

/// Reads, defaults and validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<ValidatedConfig, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<ValidatedConfig, ScenarioError> {
    let cfg = ScenarioConfig::from_json(text)?;
    Ok(validate_config(&cfg)?)
}

//! Shared domain types, fault-bound validation and round-budget arithmetic.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::scenario::ScenarioConfig;

/// Smallest system size the protocols are defined for.
pub const MIN_PROCESSES: usize = 4;

/// An element of the agreement domain, or the out-of-band default `⊥`.
///
/// `⊥` is never ordered against domain values; ordering helpers operate on
/// [`Value::as_int`] and skip it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<i64>", into = "Option<i64>")]
pub enum Value {
    Bottom,
    Int(i64),
}

impl Value {
    pub fn as_int(self) -> Option<i64> {
        match self {
            Value::Bottom => None,
            Value::Int(v) => Some(v),
        }
    }

    pub fn is_bottom(self) -> bool {
        matches!(self, Value::Bottom)
    }

    /// Deterministic key for tie-breaking tallies that may contain `⊥`
    /// (`⊥` sorts first). Not a domain ordering.
    pub(crate) fn tally_key(self) -> (u8, i64) {
        match self {
            Value::Bottom => (0, 0),
            Value::Int(v) => (1, v),
        }
    }
}

impl From<Option<i64>> for Value {
    fn from(v: Option<i64>) -> Self {
        v.map_or(Value::Bottom, Value::Int)
    }
}

impl From<Value> for Option<i64> {
    fn from(v: Value) -> Self {
        v.as_int()
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bottom => f.write_str("⊥"),
            Value::Int(v) => write!(f, "{v}"),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// 1-based process identity. Senders are known to receivers by channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl ProcessId {
    pub fn from_index(idx: usize) -> Self {
        ProcessId(idx as u32 + 1)
    }

    /// 0-based slot in per-process arrays.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// System size and the fault thresholds the protocols are parameterized with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultBounds {
    pub n: usize,
    pub f_max: usize,
    pub r_max: usize,
    pub alpha: usize,
}

/// A default bound that the configuration exceeds. Experiments are allowed
/// to run past the bounds, so these never reject a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundWarning {
    /// 3·f_max ≥ n
    ByzantineBound,
    /// r_max > ⌈n/6⌉−1
    TransientBound,
    /// α ≥ ⌈n/6⌉−1
    AlphaBound,
    /// more Byzantine members configured than f_max
    TooManyByzantine,
    /// transient count per pulse exceeds r_max
    TooManyTransients,
}

impl fmt::Display for BoundWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BoundWarning::ByzantineBound => "3f ≥ n violated",
            BoundWarning::TransientBound => "r_max > ⌈n/6⌉−1",
            BoundWarning::AlphaBound => "α ≥ ⌈n/6⌉−1",
            BoundWarning::TooManyByzantine => "more Byzantine members than f_max",
            BoundWarning::TooManyTransients => "transient count exceeds r_max",
        };
        f.write_str(s)
    }
}

impl FaultBounds {
    /// ⌈n/6⌉−1, saturating at zero.
    pub fn transient_limit(&self) -> usize {
        self.n.div_ceil(6).saturating_sub(1)
    }

    pub fn warnings(&self) -> Vec<BoundWarning> {
        let mut out = Vec::new();
        if 3 * self.f_max >= self.n {
            out.push(BoundWarning::ByzantineBound);
        }
        let limit = self.transient_limit();
        if self.r_max > limit {
            out.push(BoundWarning::TransientBound);
        }
        // α < ⌈n/6⌉−1; with limit == 0 no α satisfies it, and α = 0 is the
        // only sensible choice, so only flag a positive α there.
        if self.alpha >= limit && !(limit == 0 && self.alpha == 0) {
            out.push(BoundWarning::AlphaBound);
        }
        out
    }
}

/// Position in the externally driven pulse schedule. Round 0 of each pulse
/// is the Pulse itself; rounds `1..b` are IPulses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub b: usize,
    pub pulse_index: u64,
    pub round_in_pulse: usize,
}

impl PulseSchedule {
    pub fn new(b: usize) -> Self {
        assert!(b > 0, "a pulse needs at least one round");
        PulseSchedule { b, pulse_index: 1, round_in_pulse: 0 }
    }

    pub fn is_pulse_boundary(&self) -> bool {
        self.round_in_pulse == 0
    }

    pub fn advance(&mut self) {
        self.round_in_pulse += 1;
        if self.round_in_pulse == self.b {
            self.round_in_pulse = 0;
            self.pulse_index += 1;
        }
    }
}

/// Rounds used by one phase-king binary agreement.
pub fn phase_king_rounds(f_max: usize) -> usize {
    3 * (f_max + 1)
}

/// Rounds used by one weak-validity agreement (two exchange rounds plus the
/// binary agreement on `alert`).
pub fn weak_mvba_rounds(f_max: usize) -> usize {
    2 + phase_king_rounds(f_max)
}

/// Rounds used by one median-based agreement (broadcast round plus the
/// parallel weak-validity instances).
pub fn median_mvba_rounds(f_max: usize) -> usize {
    1 + weak_mvba_rounds(f_max)
}

/// Rounds per pulse: input agreement, state agreement, transition round.
pub fn round_budget(_n: usize, f_max: usize) -> usize {
    2 * median_mvba_rounds(f_max) + 1
}

/// A config that passed structural validation, with the default-bound
/// violations it carries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidatedConfig {
    pub config: ScenarioConfig,
    pub warnings: Vec<BoundWarning>,
}

impl ValidatedConfig {
    pub fn bounds(&self) -> FaultBounds {
        self.config.bounds()
    }

    pub fn round_budget(&self) -> usize {
        round_budget(self.config.n, self.config.f_max)
    }
}

/// Checks structure (hard errors) and default fault bounds (warnings).
/// Thresholds are never altered.
pub fn validate_config(cfg: &ScenarioConfig) -> Result<ValidatedConfig, ConfigError> {
    let n = cfg.n;
    if n < MIN_PROCESSES {
        return Err(ConfigError::TooFewProcesses(n));
    }
    for member in &cfg.byzantine.members {
        if member.0 == 0 || member.0 as usize > n {
            return Err(ConfigError::ByzantineOutOfRange { member: member.0, n });
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for member in &cfg.byzantine.members {
        if !seen.insert(*member) {
            return Err(ConfigError::DuplicateByzantine(member.0));
        }
    }
    if cfg.byzantine.members.len() == n {
        return Err(ConfigError::NoHonestProcess);
    }
    cfg.machine.check()?;
    cfg.inputs.check(n, cfg.pulses)?;
    cfg.transients.check()?;

    let mut warnings = cfg.bounds().warnings();
    if cfg.byzantine.members.len() > cfg.f_max {
        warnings.push(BoundWarning::TooManyByzantine);
    }
    if cfg.transients.count() > cfg.r_max {
        warnings.push(BoundWarning::TooManyTransients);
    }
    warnings.sort();
    Ok(ValidatedConfig { config: cfg.clone(), warnings })
}

impl ValidatedConfig {
    /// Re-validating is a no-op.
    pub fn revalidate(&self) -> Result<ValidatedConfig, ConfigError> {
        validate_config(&self.config)
    }
}

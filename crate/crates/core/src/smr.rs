//! Replicated state machine driven by the global pulse.
//!
//! Each pulse a replica agrees on the next input, then on the current state,
//! then applies the transition. States are embedded in the agreement domain
//! by their index.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Delivery, EventSink, Handler, Outbox, RoundCtx};
use crate::error::{ConfigError, TransitionError};
use crate::median::{AgreementParams, MedianSession};
use crate::model::{median_mvba_rounds, Value};
use crate::wire;

/// A deterministic state machine with states `0..m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateMachineSpec {
    /// `δ(q, in) = (q + in) mod m`, Σ = all integers.
    Counter { m: usize },
    /// `δ(q, in) = in`, Σ = `0..m`.
    Register { m: usize },
    /// `δ(q, in) = q`, Σ = all integers.
    Identity { m: usize },
    /// Last agreed price, Σ = `0..m`.
    PriceOracle { m: usize },
    /// Explicit total transition table over `0..states` × `alphabet`.
    Table { states: usize, alphabet: Vec<i64>, table: Vec<(usize, i64, usize)> },
}

/// What to do with an agreed input outside Σ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRule {
    /// Use the nearest element of Σ (ties to the smaller one).
    #[default]
    Nearest,
    /// Skip the transition for this pulse.
    Hold,
}

impl StateMachineSpec {
    pub fn states(&self) -> usize {
        match *self {
            StateMachineSpec::Counter { m }
            | StateMachineSpec::Register { m }
            | StateMachineSpec::Identity { m }
            | StateMachineSpec::PriceOracle { m } => m,
            StateMachineSpec::Table { states, .. } => states,
        }
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let m = self.states();
        if m == 0 {
            return Err(ConfigError::EmptyMachine);
        }
        if let StateMachineSpec::Table { alphabet, table, .. } = self {
            if alphabet.is_empty() {
                return Err(ConfigError::Machine("empty alphabet".into()));
            }
            let mut sorted = alphabet.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != alphabet.len() {
                return Err(ConfigError::Machine("duplicate alphabet symbol".into()));
            }
            let mut seen = vec![false; m * alphabet.len()];
            for &(s, input, next) in table {
                let Some(col) = alphabet.iter().position(|&a| a == input) else {
                    return Err(ConfigError::Machine(format!("row input {input} not in alphabet")));
                };
                if s >= m || next >= m {
                    return Err(ConfigError::Machine(format!("row ({s}, {input}, {next}) leaves Q")));
                }
                let cell = &mut seen[s * alphabet.len() + col];
                if *cell {
                    return Err(ConfigError::Machine(format!("duplicate row for ({s}, {input})")));
                }
                *cell = true;
            }
            if seen.iter().any(|c| !c) {
                return Err(ConfigError::Machine("transition table is not total".into()));
            }
        }
        Ok(())
    }

    pub fn in_alphabet(&self, input: i64) -> bool {
        match self {
            StateMachineSpec::Counter { .. } | StateMachineSpec::Identity { .. } => true,
            StateMachineSpec::Register { m } | StateMachineSpec::PriceOracle { m } => {
                (0..*m as i64).contains(&input)
            }
            StateMachineSpec::Table { alphabet, .. } => alphabet.contains(&input),
        }
    }

    /// Nearest element of Σ, ties to the smaller.
    pub fn nearest_symbol(&self, input: i64) -> i64 {
        match self {
            StateMachineSpec::Counter { .. } | StateMachineSpec::Identity { .. } => input,
            StateMachineSpec::Register { m } | StateMachineSpec::PriceOracle { m } => input.clamp(0, *m as i64 - 1),
            StateMachineSpec::Table { alphabet, .. } => *alphabet
                .iter()
                .min_by_key(|&&a| ((a as i128 - input as i128).abs(), a))
                .expect("checked non-empty"),
        }
    }

    pub fn clamp_state(&self, state: i64) -> i64 {
        state.clamp(0, self.states() as i64 - 1)
    }
}

/// `δ(s, in)`.
pub fn apply_transition(spec: &StateMachineSpec, s: i64, input: Value) -> Result<i64, TransitionError> {
    let m = spec.states() as i64;
    if !(0..m).contains(&s) {
        return Err(TransitionError::StateOutOfRange(s));
    }
    let input = input.as_int().ok_or(TransitionError::BottomInput)?;
    if !spec.in_alphabet(input) {
        return Err(TransitionError::InputOutsideAlphabet(input));
    }
    Ok(match spec {
        StateMachineSpec::Counter { .. } => ((s as i128 + input as i128).rem_euclid(m as i128)) as i64,
        StateMachineSpec::Register { .. } | StateMachineSpec::PriceOracle { .. } => input,
        StateMachineSpec::Identity { .. } => s,
        StateMachineSpec::Table { table, .. } => {
            table.iter().find(|&&(q, a, _)| q as i64 == s && a == input).map(|&(_, _, next)| next as i64).expect("checked total")
        }
    })
}

/// The two variables a replica carries across pulses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaState {
    pub input_value: Value,
    pub current_state: i64,
}

/// What one replica decided during one pulse.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PulseOutcome {
    pub agreed_input: Option<Value>,
    pub agreed_state: Option<i64>,
    pub input_rounds: usize,
    pub state_rounds: usize,
    pub next_state: Option<i64>,
    pub anomalies: Vec<String>,
}

/// Rounds `0..L` agree on the input, `L..2L` on the state, `2L` applies δ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PulseStep {
    Input(usize),
    State(usize),
    Transition,
}

pub fn locate(round_in_pulse: usize, f_max: usize) -> PulseStep {
    let l = median_mvba_rounds(f_max);
    if round_in_pulse < l {
        PulseStep::Input(round_in_pulse)
    } else if round_in_pulse < 2 * l {
        PulseStep::State(round_in_pulse - l)
    } else {
        PulseStep::Transition
    }
}

pub struct Replica {
    params: AgreementParams,
    machine: Rc<StateMachineSpec>,
    input_rule: InputRule,
    pub state: ReplicaState,
    session: Option<MedianSession>,
    pub outcome: PulseOutcome,
}

impl Replica {
    pub fn new(params: AgreementParams, machine: Rc<StateMachineSpec>, input_rule: InputRule, state: ReplicaState) -> Self {
        Replica { params, machine, input_rule, state, session: None, outcome: PulseOutcome::default() }
    }

    /// A replica whose variables, including any in-flight agreement, hold
    /// arbitrary values, positioned at `round_in_pulse`.
    pub fn arbitrary(
        params: AgreementParams,
        machine: Rc<StateMachineSpec>,
        input_rule: InputRule,
        round_in_pulse: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let m = machine.states() as i64;
        let state = ReplicaState {
            input_value: Value::Int(rng.gen_range(-m..2 * m)),
            current_state: rng.gen_range(-m..2 * m),
        };
        let mut r = Replica::new(params, machine, input_rule, state);
        r.session = match locate(round_in_pulse, params.f) {
            PulseStep::Input(s) | PulseStep::State(s) => Some(MedianSession::arbitrary(params, s, rng)),
            PulseStep::Transition => None,
        };
        r
    }

    pub fn machine(&self) -> &StateMachineSpec {
        &self.machine
    }

    fn session_for(&mut self, step: PulseStep) -> &mut MedianSession {
        let fresh = match step {
            PulseStep::Input(_) => self.state.input_value,
            _ => Value::Int(self.state.current_state),
        };
        let params = self.params;
        match step {
            PulseStep::Input(0) | PulseStep::State(0) => self.session.insert(MedianSession::new(params, fresh)),
            _ => self.session.get_or_insert_with(|| MedianSession::new(params, fresh)),
        }
    }

    fn finish_input(&mut self, sink: &mut EventSink<'_>) {
        let Some(session) = self.session.take() else { return };
        self.outcome.input_rounds = session.rounds_seen();
        match session.decision() {
            Some(Ok(v)) => {
                self.state.input_value = Value::Int(*v);
                self.outcome.agreed_input = Some(Value::Int(*v));
                sink.emit("decide_input", json!({ "value": v, "rounds": session.rounds_seen() }));
            }
            Some(Err(e)) => self.anomaly(sink, format!("input agreement: {e}")),
            None => self.anomaly(sink, "input agreement did not finish".into()),
        }
    }

    fn finish_state(&mut self, sink: &mut EventSink<'_>) {
        let Some(session) = self.session.take() else { return };
        self.outcome.state_rounds = session.rounds_seen();
        match session.decision() {
            Some(Ok(v)) => {
                let clamped = self.machine.clamp_state(*v);
                self.outcome.agreed_state = Some(*v);
                self.state.current_state = clamped;
                sink.emit("decide_state", json!({ "value": v, "rounds": session.rounds_seen() }));
                if clamped != *v {
                    self.anomaly(sink, format!("agreed state {v} outside Q, clamped to {clamped}"));
                }
            }
            Some(Err(e)) => self.anomaly(sink, format!("state agreement: {e}")),
            None => self.anomaly(sink, "state agreement did not finish".into()),
        }
    }

    fn transition(&mut self, sink: &mut EventSink<'_>) {
        let machine = Rc::clone(&self.machine);
        let s = machine.clamp_state(self.state.current_state);
        if s != self.state.current_state {
            self.anomaly(sink, format!("state {} outside Q at transition", self.state.current_state));
        }
        let input = match self.state.input_value {
            Value::Int(v) if machine.in_alphabet(v) => Some(v),
            Value::Int(v) => match self.input_rule {
                InputRule::Nearest => Some(machine.nearest_symbol(v)),
                InputRule::Hold => None,
            },
            Value::Bottom => None,
        };
        let next = match input {
            Some(v) => apply_transition(&machine, s, Value::Int(v)).expect("sanitized input and state"),
            None => s,
        };
        self.state.current_state = next;
        self.outcome.next_state = Some(next);
        sink.emit("transition", json!({ "from": s, "input": input, "to": next }));
    }

    fn anomaly(&mut self, sink: &mut EventSink<'_>, what: String) {
        sink.emit("anomaly", json!({ "what": what }));
        self.outcome.anomalies.push(what);
    }
}

impl Handler for Replica {
    fn send(&mut self, ctx: &RoundCtx) -> Outbox {
        let step = locate(ctx.schedule.round_in_pulse, self.params.f);
        if ctx.schedule.round_in_pulse == 0 {
            self.outcome = PulseOutcome::default();
        }
        let mut out = Vec::new();
        match step {
            PulseStep::Input(s) | PulseStep::State(s) => self.session_for(step).outgoing(s, ctx.me, &mut out),
            PulseStep::Transition => {}
        }
        if out.is_empty() {
            Outbox::Silent
        } else {
            Outbox::Uniform(wire::encode(&out))
        }
    }

    fn compute(&mut self, ctx: &RoundCtx, inbox: &[Delivery], sink: &mut EventSink<'_>) {
        let step = locate(ctx.schedule.round_in_pulse, self.params.f);
        let last = median_mvba_rounds(self.params.f) - 1;
        match step {
            PulseStep::Input(s) => {
                self.session_for(step).incoming(s, inbox);
                if s == last {
                    self.finish_input(sink);
                }
            }
            PulseStep::State(s) => {
                self.session_for(step).incoming(s, inbox);
                if s == last {
                    self.finish_state(sink);
                }
            }
            PulseStep::Transition => self.transition(sink),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_examples() {
        let identity = StateMachineSpec::Identity { m: 5 };
        assert_eq!(apply_transition(&identity, 3, Value::Int(-77)), Ok(3));
        let counter = StateMachineSpec::Counter { m: 10 };
        assert_eq!(apply_transition(&counter, 7, Value::Int(5)), Ok(2));
        assert_eq!(apply_transition(&counter, 7, Value::Int(-8)), Ok(9));
        let register = StateMachineSpec::Register { m: 100 };
        assert_eq!(apply_transition(&register, 0, Value::Int(42)), Ok(42));
    }

    #[test]
    fn transition_errors() {
        let register = StateMachineSpec::Register { m: 10 };
        assert_eq!(apply_transition(&register, 0, Value::Int(42)), Err(TransitionError::InputOutsideAlphabet(42)));
        assert_eq!(apply_transition(&register, 10, Value::Int(1)), Err(TransitionError::StateOutOfRange(10)));
        assert_eq!(apply_transition(&register, 1, Value::Bottom), Err(TransitionError::BottomInput));
    }

    #[test]
    fn table_machine() {
        let spec = StateMachineSpec::Table {
            states: 2,
            alphabet: vec![0, 1],
            table: vec![(0, 0, 0), (0, 1, 1), (1, 0, 1), (1, 1, 0)],
        };
        spec.check().unwrap();
        assert_eq!(apply_transition(&spec, 1, Value::Int(1)), Ok(0));
        assert_eq!(spec.nearest_symbol(7), 1);
        assert_eq!(spec.nearest_symbol(-7), 0);
    }

    #[test]
    fn table_must_be_total() {
        let spec = StateMachineSpec::Table { states: 2, alphabet: vec![0], table: vec![(0, 0, 1)] };
        assert!(matches!(spec.check(), Err(ConfigError::Machine(_))));
        assert_eq!(StateMachineSpec::Counter { m: 0 }.check(), Err(ConfigError::EmptyMachine));
    }

    #[test]
    fn nearest_symbol_ties_to_smaller() {
        let spec = StateMachineSpec::Table {
            states: 1,
            alphabet: vec![10, 0],
            table: vec![(0, 0, 0), (0, 10, 0)],
        };
        assert_eq!(spec.nearest_symbol(5), 0);
        assert_eq!(StateMachineSpec::Register { m: 10 }.nearest_symbol(42), 9);
    }

    #[test]
    fn pulse_layout() {
        // f = 1: L = 9, b = 19
        assert_eq!(locate(0, 1), PulseStep::Input(0));
        assert_eq!(locate(8, 1), PulseStep::Input(8));
        assert_eq!(locate(9, 1), PulseStep::State(0));
        assert_eq!(locate(17, 1), PulseStep::State(8));
        assert_eq!(locate(18, 1), PulseStep::Transition);
    }

    #[test]
    fn machine_json_shape() {
        let spec: StateMachineSpec = serde_json::from_str(r#"{"kind":"counter","m":10}"#).unwrap();
        assert_eq!(spec, StateMachineSpec::Counter { m: 10 });
        assert!(serde_json::from_str::<StateMachineSpec>(r#"{"kind":"counter","m":10,"x":1}"#).is_err());
        let t: StateMachineSpec =
            serde_json::from_str(r#"{"kind":"table","states":1,"alphabet":[3],"table":[[0,3,0]]}"#).unwrap();
        assert_eq!(t.states(), 1);
    }
}

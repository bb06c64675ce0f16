//! Whole-run drivers: the replicated state machine over many pulses, and
//! single standalone agreements used by tests and searches.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::engine::{step_round, Adversary, Handler, Phase, RoundWorld, Trace, Verbosity};
use crate::error::{EngineError, SelectError};
use crate::faults::{inject_transients, most_popular, ByzantineAdversary, Layout, ScriptSpace, StrategyKind, TransientField};
use crate::median::{AgreementParams, MedianNode};
use crate::model::{
    median_mvba_rounds, phase_king_rounds, round_budget, weak_mvba_rounds, ProcessId, ValidatedConfig, Value,
};
use crate::phase_king::BinaryAgreementNode;
use crate::scenario::InputSource;
use crate::smr::{InputRule, PulseOutcome, Replica, ReplicaState, StateMachineSpec};
use crate::weak_mvba::WeakMvbaNode;

/// Everything observed about one pulse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PulseRecord {
    pub pulse: u64,
    /// The pulse ran from its first round (false only for a self-stabilizing
    /// run that starts mid-pulse).
    pub full: bool,
    pub rounds: usize,
    pub byzantine: Vec<bool>,
    /// Struck by a transient fault at the start of this pulse.
    pub corrupted: Vec<bool>,
    /// Replica variables entering the pulse, before transient faults.
    pub entering: Vec<ReplicaState>,
    /// Replica variables proposed to the agreements, after transient faults.
    pub proposed: Vec<ReplicaState>,
    pub outcomes: Vec<PulseOutcome>,
    /// Most popular harmful corrupted value `y` and its multiplicity `w`.
    pub popular: Option<(i64, usize)>,
}

impl PulseRecord {
    pub fn honest(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.byzantine.len()).filter(|&i| !self.byzantine[i])
    }

    /// Non-Byzantine and not struck by a transient fault this pulse.
    pub fn clean(&self) -> impl Iterator<Item = usize> + '_ {
        self.honest().filter(|&i| !self.corrupted[i])
    }

    pub fn corrupted_count(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }

    /// The state all clean replicas entered the pulse with, if they agree.
    pub fn common_state(&self) -> Option<i64> {
        let mut states = self.clean().map(|i| self.entering[i].current_state);
        let first = states.next()?;
        states.all(|s| s == first).then_some(first)
    }
}

#[derive(Debug)]
pub struct SimOutcome {
    pub trace: Trace,
    pub final_states: Vec<ReplicaState>,
    pub pulses: Vec<PulseRecord>,
    pub error: Option<EngineError>,
    pub rounds_run: u64,
}

impl SimOutcome {
    pub fn honest_final_states(&self) -> Vec<ReplicaState> {
        let byz = self.pulses.last().map(|p| p.byzantine.clone()).unwrap_or_default();
        self.final_states.iter().enumerate().filter(|(i, _)| !byz.get(*i).copied().unwrap_or(false)).map(|(_, s)| *s).collect()
    }
}

fn value_range(values: impl IntoIterator<Item = i64>) -> Option<(i64, i64)> {
    values.into_iter().fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

struct PulseStart {
    pulse: u64,
    full: bool,
    corrupted: Vec<bool>,
    entering: Vec<ReplicaState>,
    proposed: Vec<ReplicaState>,
    popular: Option<(i64, usize)>,
    round_started: u64,
}

/// Runs the replicated state machine for the configured number of pulses.
pub fn run_simulation(cfg: &ValidatedConfig) -> SimOutcome {
    let c = &cfg.config;
    let n = c.n;
    let b = round_budget(n, c.f_max);
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let params = AgreementParams { n, f: c.f_max, alpha: c.alpha, base: c.threshold_base };
    let machine = Rc::new(c.machine.clone());
    let start_round = if c.self_stabilizing { rng.gen_range(0..b) } else { 0 };

    let locals: Vec<Replica> = (0..n)
        .map(|_| {
            if c.self_stabilizing {
                Replica::arbitrary(params, Rc::clone(&machine), c.input_rule, start_round, &mut rng)
            } else {
                let state = ReplicaState { input_value: Value::Int(0), current_state: c.initial_state };
                Replica::new(params, Rc::clone(&machine), c.input_rule, state)
            }
        })
        .collect();

    let mut adversary = ByzantineAdversary::new(c.byzantine.kind.clone(), Layout::Smr);
    if let StrategyKind::Exhaustive { bound } = c.byzantine.kind {
        let space = ScriptSpace::new(n, &c.byzantine.members);
        let len = if bound == 0 { space.len() } else { space.len().min(bound) };
        adversary.set_script(space.script(c.seed % len.max(1)));
    }

    let mut world = RoundWorld::new(locals, &c.byzantine.members, c.f_max, b, rng);
    world.schedule.round_in_pulse = start_round;
    let mut trace = Trace::new(c.trace);
    trace.global_sink(world.schedule, Phase::Input).emit(
        "scenario",
        json!({ "config": c, "warnings": cfg.warnings, "round_budget": b, "start_round": start_round }),
    );

    let mut inputs = InputSource::new(&c.inputs, c.seed);
    let mut pulses: Vec<PulseRecord> = Vec::new();
    let mut current: Option<PulseStart> = if start_round > 0 {
        let snapshot: Vec<ReplicaState> = world.locals.iter().map(|r| r.state).collect();
        Some(PulseStart {
            pulse: 1,
            full: false,
            corrupted: vec![false; n],
            entering: snapshot.clone(),
            proposed: snapshot,
            popular: None,
            round_started: 0,
        })
    } else {
        None
    };
    let mut error = None;

    let finish = |start: PulseStart, world: &RoundWorld<Replica>, pulses: &mut Vec<PulseRecord>| {
        pulses.push(PulseRecord {
            pulse: start.pulse,
            full: start.full,
            rounds: (world.rounds_run - start.round_started) as usize,
            byzantine: world.byzantine.clone(),
            corrupted: start.corrupted,
            entering: start.entering,
            proposed: start.proposed,
            outcomes: world.locals.iter().map(|r| r.outcome.clone()).collect(),
            popular: start.popular,
        });
    };

    while world.schedule.pulse_index <= c.pulses {
        let result = step_round(
            &mut world,
            &mut adversary,
            |world, adversary, trace| {
                if let Some(start) = current.take() {
                    finish(start, world, &mut pulses);
                }
                let pulse = world.schedule.pulse_index;
                let external = inputs.next_pulse(pulse, n);
                let entering: Vec<ReplicaState> = world
                    .locals
                    .iter_mut()
                    .zip(&external)
                    .map(|(r, &input)| {
                        r.state.input_value = input;
                        r.state
                    })
                    .collect();
                for (i, r) in world.locals.iter().enumerate() {
                    if !world.byzantine[i] {
                        trace.sink(world.schedule, Phase::Input, ProcessId::from_index(i)).emit(
                            "input",
                            json!({ "input": r.state.input_value, "state": r.state.current_state }),
                        );
                    }
                }

                let mut states = entering.clone();
                let corruption = inject_transients(&c.transients, &mut states, &world.byzantine, &mut world.rng);
                let mut corrupted = vec![false; n];
                for (p, s) in &corruption.struck {
                    corrupted[p.index()] = true;
                    world.locals[p.index()].state = *s;
                    trace.sink(world.schedule, Phase::Input, *p).emit(
                        "transient",
                        json!({ "input": s.input_value, "state": s.current_state }),
                    );
                }
                if corruption.saturated {
                    trace.global_sink(world.schedule, Phase::Input).emit(
                        "anomaly",
                        json!({ "what": "more transient faults requested than non-byzantine replicas" }),
                    );
                }

                let clean: Vec<usize> = (0..n).filter(|&i| !world.byzantine[i] && !corrupted[i]).collect();
                let clean_states: Vec<i64> = clean.iter().map(|&i| entering[i].current_state).collect();
                let common = clean_states.first().copied().filter(|s| clean_states.iter().all(|t| t == s));
                let struck_values = corruption.struck.iter().map(|(_, s)| match c.transients.field() {
                    TransientField::Input => s.input_value.as_int().unwrap_or(0),
                    _ => s.current_state,
                });
                let popular = most_popular(struck_values, common);

                adversary.set_join_target(popular.map(|(y, _)| y));
                let honest_or_clean = |f: &dyn Fn(&ReplicaState) -> Option<i64>| {
                    let from_clean = value_range(clean.iter().filter_map(|&i| f(&states[i])));
                    from_clean.or_else(|| value_range((0..n).filter(|&i| !world.byzantine[i]).filter_map(|i| f(&states[i]))))
                };
                adversary.set_honest_range(0, honest_or_clean(&|s| s.input_value.as_int()));
                adversary.set_honest_range(1, honest_or_clean(&|s| Some(s.current_state)));

                current = Some(PulseStart {
                    pulse,
                    full: true,
                    corrupted,
                    entering,
                    proposed: states,
                    popular,
                    round_started: world.rounds_run,
                });
            },
            &mut trace,
        );
        if let Err(e) = result {
            trace.global_sink(world.schedule, Phase::Compute).emit("anomaly", json!({ "what": e.to_string() }));
            error = Some(e);
            break;
        }
    }
    if let Some(start) = current.take() {
        finish(start, &world, &mut pulses);
    }

    SimOutcome {
        trace,
        final_states: world.locals.iter().map(|r| r.state).collect(),
        pulses,
        error,
        rounds_run: world.rounds_run,
    }
}

/// One pulse of the replicated state machine from given replica variables
/// and external inputs; no transient faults are injected.
#[allow(clippy::too_many_arguments)]
pub fn smr_pulse(
    machine: &StateMachineSpec,
    params: AgreementParams,
    replicas: &[ReplicaState],
    external_inputs: &[Value],
    byzantine: &[ProcessId],
    strategy: StrategyKind,
    seed: u64,
) -> Result<(Vec<ReplicaState>, Vec<PulseOutcome>), EngineError> {
    let n = params.n;
    let machine = Rc::new(machine.clone());
    let locals: Vec<Replica> = replicas
        .iter()
        .zip(external_inputs)
        .map(|(s, &input)| {
            let state = ReplicaState { input_value: input, current_state: s.current_state };
            Replica::new(params, Rc::clone(&machine), InputRule::Nearest, state)
        })
        .collect();
    let b = round_budget(n, params.f);
    let mut world = RoundWorld::new(locals, byzantine, params.f, b, ChaCha8Rng::seed_from_u64(seed));
    let mut adversary = ByzantineAdversary::new(strategy, Layout::Smr);
    let honest: Vec<usize> = world.honest().map(|p| p.index()).collect();
    adversary.set_honest_range(0, value_range(honest.iter().filter_map(|&i| external_inputs[i].as_int())));
    adversary.set_honest_range(1, value_range(honest.iter().map(|&i| replicas[i].current_state)));
    let mut trace = Trace::new(Verbosity::Summary);
    for _ in 0..b {
        step_round(&mut world, &mut adversary, |_, _, _| {}, &mut trace)?;
    }
    Ok((world.locals.iter().map(|r| r.state).collect(), world.locals.into_iter().map(|r| r.outcome).collect()))
}

/// Runs `rounds` rounds of standalone handlers (pulse length = `rounds`).
pub fn run_rounds<H: Handler, A: Adversary + ?Sized>(
    locals: Vec<H>,
    byzantine: &[ProcessId],
    f_max: usize,
    rounds: usize,
    adversary: &mut A,
    seed: u64,
) -> Result<Vec<H>, EngineError> {
    let mut world = RoundWorld::new(locals, byzantine, f_max, rounds, ChaCha8Rng::seed_from_u64(seed));
    let mut trace = Trace::new(Verbosity::Summary);
    for _ in 0..rounds {
        step_round(&mut world, adversary, |_, _, _| {}, &mut trace)?;
    }
    Ok(world.locals)
}

/// Outcome of one standalone median-based agreement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MedianRun {
    /// Per process; `None` for Byzantine members.
    pub decisions: Vec<Option<Result<i64, SelectError>>>,
    pub agreed: Vec<Option<Vec<Value>>>,
    pub rounds: Vec<usize>,
}

impl MedianRun {
    pub fn honest_decisions(&self) -> Vec<Result<i64, SelectError>> {
        self.decisions.iter().flatten().cloned().collect()
    }
}

/// One median-based agreement among `inputs.len()` processes.
pub fn run_median(
    params: AgreementParams,
    inputs: &[Value],
    byzantine: &[ProcessId],
    adversary: &mut ByzantineAdversary,
    seed: u64,
) -> Result<MedianRun, EngineError> {
    let locals: Vec<MedianNode> = inputs.iter().map(|&v| MedianNode::new(params, v)).collect();
    let honest: Vec<usize> = (0..inputs.len()).filter(|i| !byzantine.iter().any(|b| b.index() == *i)).collect();
    adversary.set_honest_range(0, value_range(honest.iter().filter_map(|&i| inputs[i].as_int())));
    let done = run_rounds(locals, byzantine, params.f, median_mvba_rounds(params.f), adversary, seed)?;
    let is_honest = |i: usize| honest.contains(&i);
    Ok(MedianRun {
        decisions: done.iter().enumerate().map(|(i, p)| if is_honest(i) { p.decision() } else { None }).collect(),
        agreed: done
            .iter()
            .enumerate()
            .map(|(i, p)| if is_honest(i) { p.session.agreed().map(<[Value]>::to_vec) } else { None })
            .collect(),
        rounds: done.iter().map(|p| p.session.rounds_seen()).collect(),
    })
}

/// One standalone weak-validity agreement; `None` for Byzantine members.
pub fn run_weak(
    n: usize,
    f: usize,
    inputs: &[Value],
    byzantine: &[ProcessId],
    adversary: &mut ByzantineAdversary,
    seed: u64,
) -> Result<Vec<Option<Value>>, EngineError> {
    let locals: Vec<WeakMvbaNode> = inputs.iter().map(|&v| WeakMvbaNode::new(n, f, v)).collect();
    let honest_range = value_range(
        (0..n).filter(|i| !byzantine.iter().any(|b| b.index() == *i)).filter_map(|i| inputs[i].as_int()),
    );
    adversary.set_honest_range(0, honest_range);
    let done = run_rounds(locals, byzantine, f, weak_mvba_rounds(f), adversary, seed)?;
    Ok(done
        .iter()
        .enumerate()
        .map(|(i, p)| if byzantine.iter().any(|b| b.index() == i) { None } else { p.decision() })
        .collect())
}

/// One standalone binary agreement; `None` for Byzantine members.
pub fn run_binary<A: Adversary + ?Sized>(
    n: usize,
    f: usize,
    inputs: &[bool],
    byzantine: &[ProcessId],
    adversary: &mut A,
    seed: u64,
) -> Result<Vec<Option<bool>>, EngineError> {
    let locals: Vec<BinaryAgreementNode> = inputs.iter().map(|&b| BinaryAgreementNode::new(n, f, b)).collect();
    let done = run_rounds(locals, byzantine, f, phase_king_rounds(f), adversary, seed)?;
    Ok(done
        .iter()
        .enumerate()
        .map(|(i, p)| if byzantine.iter().any(|b| b.index() == i) { None } else { p.decision() })
        .collect())
}

//! Lockstep synchronous-round engine.
//!
//! Every round runs four phases in order: input (only on a Pulse boundary),
//! send, receive and computation. All messages sent in a round are delivered
//! in that round, tagged with the true sender, and inboxes are empty again
//! when the round ends.

use std::panic::{self, AssertUnwindSafe};
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::EngineError;
use crate::model::{ProcessId, PulseSchedule};

pub type Payload = Rc<[u8]>;

#[derive(Clone, Debug)]
pub struct Delivery {
    pub from: ProcessId,
    pub payload: Payload,
}

/// What a process hands to the network in the send phase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outbox {
    Silent,
    /// Same bytes to every process, self included.
    Uniform(Vec<u8>),
    /// One optional payload per recipient, indexed by `ProcessId::index`.
    PerRecipient(Vec<Option<Vec<u8>>>),
}

/// What a handler knows about the current round.
#[derive(Clone, Copy, Debug)]
pub struct RoundCtx {
    pub n: usize,
    pub f_max: usize,
    pub me: ProcessId,
    pub schedule: PulseSchedule,
}

/// Protocol logic of one process.
pub trait Handler {
    fn send(&mut self, ctx: &RoundCtx) -> Outbox;
    fn compute(&mut self, ctx: &RoundCtx, inbox: &[Delivery], sink: &mut EventSink<'_>);
}

/// Message source for Byzantine members. Whatever a Byzantine member's own
/// handler would send is discarded and replaced by this.
pub trait Adversary {
    fn outbox(&mut self, ctx: &RoundCtx, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<u8>>>;
}

/// Adversary that never sends anything.
pub struct Mute;

impl Adversary for Mute {
    fn outbox(&mut self, ctx: &RoundCtx, _rng: &mut ChaCha8Rng) -> Vec<Option<Vec<u8>>> {
        vec![None; ctx.n]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Input,
    Send,
    Receive,
    Compute,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    /// Inputs, transients, decisions and anomalies only.
    #[default]
    Summary,
    /// Additionally one event per process per phase.
    Full,
}

/// One trace line. Field order is the serialization order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub pulse: u64,
    pub round: usize,
    pub phase: Phase,
    /// 0 for engine-wide events.
    pub proc: u32,
    pub kind: String,
    pub data: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub verbosity: Verbosity,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(verbosity: Verbosity) -> Self {
        Trace { verbosity, events: Vec::new() }
    }

    pub fn push(&mut self, event: TraceEvent) {
        self.events.push(event);
    }

    pub fn sink(&mut self, schedule: PulseSchedule, phase: Phase, proc: ProcessId) -> EventSink<'_> {
        EventSink { trace: self, schedule, phase, proc: proc.0 }
    }

    pub fn global_sink(&mut self, schedule: PulseSchedule, phase: Phase) -> EventSink<'_> {
        EventSink { trace: self, schedule, phase, proc: 0 }
    }

    /// JSON-lines rendering; byte-identical for identical traces.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, serde_json::Error> {
        let mut events = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            events.push(serde_json::from_str(line)?);
        }
        Ok(Trace { verbosity: Verbosity::Summary, events })
    }
}

/// Trace writer positioned at a (pulse, round, phase, process).
pub struct EventSink<'a> {
    trace: &'a mut Trace,
    schedule: PulseSchedule,
    phase: Phase,
    proc: u32,
}

impl EventSink<'_> {
    pub fn emit(&mut self, kind: &str, data: serde_json::Value) {
        self.trace.push(TraceEvent {
            pulse: self.schedule.pulse_index,
            round: self.schedule.round_in_pulse,
            phase: self.phase,
            proc: self.proc,
            kind: kind.to_string(),
            data,
        });
    }

    /// Emitted only at full verbosity.
    pub fn detail(&mut self, kind: &str, data: impl FnOnce() -> serde_json::Value) {
        if self.trace.verbosity == Verbosity::Full {
            self.emit(kind, data());
        }
    }

    pub fn is_full(&self) -> bool {
        self.trace.verbosity == Verbosity::Full
    }
}

/// The global configuration: every process's local state plus the network.
pub struct RoundWorld<H> {
    pub schedule: PulseSchedule,
    pub f_max: usize,
    pub locals: Vec<H>,
    pub byzantine: Vec<bool>,
    pub inbox: Vec<Vec<Delivery>>,
    pub rng: ChaCha8Rng,
    pub rounds_run: u64,
}

impl<H> RoundWorld<H> {
    pub fn new(locals: Vec<H>, byzantine: &[ProcessId], f_max: usize, b: usize, rng: ChaCha8Rng) -> Self {
        let n = locals.len();
        let mut flags = vec![false; n];
        for p in byzantine {
            flags[p.index()] = true;
        }
        RoundWorld {
            schedule: PulseSchedule::new(b),
            f_max,
            locals,
            byzantine: flags,
            inbox: vec![Vec::new(); n],
            rng,
            rounds_run: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.locals.len()
    }

    pub fn is_byzantine(&self, p: ProcessId) -> bool {
        self.byzantine[p.index()]
    }

    pub fn honest(&self) -> impl Iterator<Item = ProcessId> + '_ {
        (0..self.n()).filter(|&i| !self.byzantine[i]).map(ProcessId::from_index)
    }

    fn ctx(&self, me: ProcessId) -> RoundCtx {
        RoundCtx { n: self.n(), f_max: self.f_max, me, schedule: self.schedule }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoundStats {
    pub sent: usize,
    pub delivered: usize,
}

fn panic_message(err: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = err.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = err.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic".to_string()
    }
}

/// Runs one round. `on_pulse` is the input phase; it runs only when the
/// round is a Pulse boundary and may rewrite local states (external inputs,
/// transient corruption) and brief the adversary.
pub fn step_round<H, A, F>(
    world: &mut RoundWorld<H>,
    adversary: &mut A,
    mut on_pulse: F,
    trace: &mut Trace,
) -> Result<RoundStats, EngineError>
where
    H: Handler,
    A: Adversary + ?Sized,
    F: FnMut(&mut RoundWorld<H>, &mut A, &mut Trace),
{
    debug_assert!(world.inbox.iter().all(Vec::is_empty), "inboxes must be empty between rounds");
    let n = world.n();
    let schedule = world.schedule;

    if schedule.is_pulse_boundary() {
        on_pulse(world, adversary, trace);
    }

    // send
    let mut outgoing: Vec<Vec<Option<Payload>>> = Vec::with_capacity(n);
    let mut stats = RoundStats::default();
    for i in 0..n {
        let me = ProcessId::from_index(i);
        let ctx = world.ctx(me);
        let per_recipient: Vec<Option<Payload>> = if world.byzantine[i] {
            let raw = adversary.outbox(&ctx, &mut world.rng);
            if raw.len() != n {
                return Err(EngineError::OutboxShape { proc: me.0, got: raw.len(), expected: n });
            }
            raw.into_iter().map(|m| m.map(Payload::from)).collect()
        } else {
            let handler = &mut world.locals[i];
            let out = panic::catch_unwind(AssertUnwindSafe(|| handler.send(&ctx))).map_err(|e| {
                EngineError::HandlerPanic {
                    proc: me.0,
                    pulse: schedule.pulse_index,
                    round: schedule.round_in_pulse,
                    message: panic_message(e),
                }
            })?;
            honest_payloads(out, n, me, &schedule)?
        };
        let count = per_recipient.iter().filter(|m| m.is_some()).count();
        stats.sent += count;
        if trace.verbosity == Verbosity::Full {
            let bytes: usize = per_recipient.iter().flatten().map(|p| p.len()).sum();
            trace.sink(schedule, Phase::Send, me).emit(
                "send",
                json!({ "messages": count, "bytes": bytes, "byzantine": world.byzantine[i] }),
            );
        }
        outgoing.push(per_recipient);
    }

    // receive: sender order is ascending ProcessId in every inbox
    for (s, per_recipient) in outgoing.into_iter().enumerate() {
        let from = ProcessId::from_index(s);
        for (r, payload) in per_recipient.into_iter().enumerate() {
            if let Some(payload) = payload {
                world.inbox[r].push(Delivery { from, payload });
                stats.delivered += 1;
            }
        }
    }
    if trace.verbosity == Verbosity::Full {
        for (i, inbox) in world.inbox.iter().enumerate() {
            let senders: Vec<u32> = inbox.iter().map(|d| d.from.0).collect();
            trace.sink(schedule, Phase::Receive, ProcessId::from_index(i)).emit("receive", json!({ "from": senders }));
        }
    }

    // compute
    for i in 0..n {
        let me = ProcessId::from_index(i);
        let ctx = world.ctx(me);
        let inbox = std::mem::take(&mut world.inbox[i]);
        let handler = &mut world.locals[i];
        let mut sink = trace.sink(schedule, Phase::Compute, me);
        sink.detail("compute", || json!({ "inbox": inbox.len() }));
        panic::catch_unwind(AssertUnwindSafe(|| handler.compute(&ctx, &inbox, &mut sink))).map_err(|e| {
            EngineError::HandlerPanic {
                proc: me.0,
                pulse: schedule.pulse_index,
                round: schedule.round_in_pulse,
                message: panic_message(e),
            }
        })?;
    }

    world.schedule.advance();
    world.rounds_run += 1;
    Ok(stats)
}

fn honest_payloads(
    out: Outbox,
    n: usize,
    me: ProcessId,
    schedule: &PulseSchedule,
) -> Result<Vec<Option<Payload>>, EngineError> {
    match out {
        Outbox::Silent => Ok(vec![None; n]),
        Outbox::Uniform(bytes) => {
            let shared: Payload = bytes.into();
            Ok(vec![Some(shared); n])
        }
        Outbox::PerRecipient(msgs) => {
            if msgs.len() != n {
                return Err(EngineError::OutboxShape { proc: me.0, got: msgs.len(), expected: n });
            }
            // Non-Byzantine processes broadcast the same value to all.
            if msgs.windows(2).any(|w| w[0] != w[1]) {
                return Err(EngineError::HonestEquivocation {
                    proc: me.0,
                    pulse: schedule.pulse_index,
                    round: schedule.round_in_pulse,
                });
            }
            Ok(msgs.into_iter().map(|m| m.map(Payload::from)).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Broadcasts its own id every round and remembers what arrived.
    struct Echo {
        seen: Vec<Vec<(u32, Vec<u8>)>>,
        split: bool,
    }

    impl Handler for Echo {
        fn send(&mut self, ctx: &RoundCtx) -> Outbox {
            if self.split {
                let mut v = vec![Some(vec![ctx.me.0 as u8]); ctx.n];
                v[0] = Some(vec![0xff]);
                Outbox::PerRecipient(v)
            } else {
                Outbox::Uniform(vec![ctx.me.0 as u8])
            }
        }

        fn compute(&mut self, _ctx: &RoundCtx, inbox: &[Delivery], _sink: &mut EventSink<'_>) {
            self.seen.push(inbox.iter().map(|d| (d.from.0, d.payload.to_vec())).collect());
        }
    }

    struct Idle;

    impl Handler for Idle {
        fn send(&mut self, _ctx: &RoundCtx) -> Outbox {
            Outbox::Silent
        }
        fn compute(&mut self, _ctx: &RoundCtx, inbox: &[Delivery], _sink: &mut EventSink<'_>) {
            assert!(inbox.is_empty());
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn idle_round_only_advances_the_counter() {
        let mut world = RoundWorld::new(vec![Idle, Idle, Idle, Idle], &[], 1, 5, rng());
        let mut trace = Trace::new(Verbosity::Summary);
        let stats = step_round(&mut world, &mut Mute, |_, _, _| {}, &mut trace).unwrap();
        assert_eq!(stats, RoundStats::default());
        assert_eq!(world.schedule.round_in_pulse, 1);
        assert_eq!(world.rounds_run, 1);
        assert!(trace.events.is_empty());
    }

    #[test]
    fn broadcast_reaches_everyone_with_sender_tags() {
        let locals = (0..4).map(|_| Echo { seen: vec![], split: false }).collect();
        let mut world = RoundWorld::new(locals, &[], 1, 5, rng());
        let mut trace = Trace::new(Verbosity::Summary);
        let stats = step_round(&mut world, &mut Mute, |_, _, _| {}, &mut trace).unwrap();
        assert_eq!(stats.sent, 16);
        assert_eq!(stats.delivered, 16);
        let expected: Vec<(u32, Vec<u8>)> = (1..=4).map(|i| (i, vec![i as u8])).collect();
        for p in &world.locals {
            assert_eq!(p.seen, vec![expected.clone()]);
        }
        assert!(world.inbox.iter().all(Vec::is_empty));
    }

    #[test]
    fn last_round_wraps_into_next_pulse() {
        let mut world = RoundWorld::new(vec![Idle, Idle, Idle, Idle], &[], 0, 3, rng());
        world.schedule.round_in_pulse = 2;
        let mut pulses = 0;
        let mut trace = Trace::new(Verbosity::Summary);
        step_round(&mut world, &mut Mute, |_, _, _| pulses += 1, &mut trace).unwrap();
        assert_eq!(pulses, 0);
        assert_eq!(world.schedule.round_in_pulse, 0);
        assert_eq!(world.schedule.pulse_index, 2);
        step_round(&mut world, &mut Mute, |_, _, _| pulses += 1, &mut trace).unwrap();
        assert_eq!(pulses, 1);
    }

    #[test]
    fn honest_equivocation_is_rejected() {
        let mut locals: Vec<Echo> = (0..4).map(|_| Echo { seen: vec![], split: false }).collect();
        locals[2].split = true;
        let mut world = RoundWorld::new(locals, &[], 1, 5, rng());
        let mut trace = Trace::new(Verbosity::Summary);
        let err = step_round(&mut world, &mut Mute, |_, _, _| {}, &mut trace).unwrap_err();
        assert_eq!(err, EngineError::HonestEquivocation { proc: 3, pulse: 1, round: 0 });
    }

    #[test]
    fn byzantine_may_equivocate() {
        struct Split;
        impl Adversary for Split {
            fn outbox(&mut self, ctx: &RoundCtx, _rng: &mut ChaCha8Rng) -> Vec<Option<Vec<u8>>> {
                (0..ctx.n).map(|r| Some(vec![r as u8])).collect()
            }
        }
        let mut locals: Vec<Echo> = (0..4).map(|_| Echo { seen: vec![], split: false }).collect();
        locals[3].split = true; // ignored: p4 is byzantine
        let mut world = RoundWorld::new(locals, &[ProcessId(4)], 1, 5, rng());
        let mut trace = Trace::new(Verbosity::Summary);
        step_round(&mut world, &mut Split, |_, _, _| {}, &mut trace).unwrap();
        for (r, p) in world.locals.iter().enumerate() {
            assert_eq!(p.seen[0][3], (4, vec![r as u8]));
        }
    }

    #[test]
    fn full_trace_orders_phases() {
        let locals = (0..4).map(|_| Echo { seen: vec![], split: false }).collect();
        let mut world = RoundWorld::new(locals, &[], 1, 5, rng());
        let mut trace = Trace::new(Verbosity::Full);
        step_round(
            &mut world,
            &mut Mute,
            |w, _, t| {
                for p in 0..w.n() {
                    t.sink(w.schedule, Phase::Input, ProcessId::from_index(p)).emit("input", json!(null));
                }
            },
            &mut trace,
        )
        .unwrap();
        for p in 1..=4 {
            let phases: Vec<Phase> = trace.events.iter().filter(|e| e.proc == p).map(|e| e.phase).collect();
            assert_eq!(phases, vec![Phase::Input, Phase::Send, Phase::Receive, Phase::Compute]);
        }
        let text = trace.to_jsonl();
        assert!(text.starts_with("{\"pulse\":1,\"round\":0,\"phase\":\"input\",\"proc\":1,\"kind\":\"input\",\"data\":null}"));
        assert_eq!(Trace::from_jsonl(&text).unwrap().events, trace.events);
    }

    #[test]
    fn handler_panic_becomes_an_error() {
        struct Boom;
        impl Handler for Boom {
            fn send(&mut self, _ctx: &RoundCtx) -> Outbox {
                Outbox::Silent
            }
            fn compute(&mut self, _ctx: &RoundCtx, _inbox: &[Delivery], _sink: &mut EventSink<'_>) {
                panic!("diverged");
            }
        }
        let mut world = RoundWorld::new(vec![Boom, Boom, Boom, Boom], &[], 0, 3, rng());
        let mut trace = Trace::new(Verbosity::Summary);
        let prev = panic::take_hook();
        panic::set_hook(Box::new(|_| {}));
        let err = step_round(&mut world, &mut Mute, |_, _, _| {}, &mut trace).unwrap_err();
        panic::set_hook(prev);
        assert!(matches!(err, EngineError::HandlerPanic { proc: 1, ref message, .. } if message == "diverged"));
    }
}

//! Turpin–Coan reduction from multi-valued to binary agreement, giving
//! agreement with weak validity.
//!
//! Round 1: every process sends its value. A process is *perplexed* when at
//! least `(n − f)/2` of the values it received differ from its own (missing
//! or unreadable values count as `⊥`, which differs). Round 2: perplexed
//! processes say so. A process raises `alert` when at least `n − 2f`
//! perplexity claims arrived. The processes then run binary agreement on
//! `alert`. An agreed `true` yields `⊥`; an agreed `false` yields the most
//! common value among the senders that did not claim perplexity.
//!
//! The protocol is always run to completion: `⊥` is only returned once the
//! alert bit has been agreed, never on a local count.

use crate::engine::{Delivery, EventSink, Handler, Outbox, RoundCtx};
use crate::model::{weak_mvba_rounds, ProcessId, Value};
use crate::phase_king::PhaseKing;
use crate::wire::{self, Message};

/// `2·c ≥ n − f`, where `c` counts entries of `received` that differ from
/// `own` (`⊥` entries included).
pub fn perplexity_flag(own: Value, received: &[Value], n: usize, f: usize) -> bool {
    let differing = received.iter().filter(|&&v| v != own).count();
    2 * differing >= n.saturating_sub(f)
}

/// At least `n − 2f` claims.
pub fn alert_flag(claims: &[bool], n: usize, f: usize) -> bool {
    claims.iter().filter(|&&c| c).count() >= n.saturating_sub(2 * f)
}

/// Most common value among senders that did not claim perplexity; ties go
/// to the smaller value. `⊥` when no sender is content.
pub fn content_majority(received: &[Value], claims: &[bool]) -> Value {
    let mut tally: Vec<(Value, usize)> = Vec::new();
    for (v, _) in received.iter().zip(claims).filter(|(_, &c)| !c) {
        match tally.iter_mut().find(|(u, _)| u == v) {
            Some((_, count)) => *count += 1,
            None => tally.push((*v, 1)),
        }
    }
    tally
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.tally_key().cmp(&a.0.tally_key())))
        .map_or(Value::Bottom, |(v, _)| v)
}

/// A bank of parallel Turpin–Coan instances numbered
/// `first_instance..first_instance + k`.
#[derive(Clone, Debug)]
pub struct TurpinCoan {
    n: usize,
    f: usize,
    first_instance: u32,
    inputs: Vec<Value>,
    received: Vec<Vec<Value>>,
    perplexed: Vec<bool>,
    claims: Vec<Vec<bool>>,
    alert: Vec<bool>,
    binary: PhaseKing,
    outputs: Option<Vec<Value>>,
    rounds_seen: usize,
}

impl TurpinCoan {
    pub fn new(n: usize, f: usize, first_instance: u32, inputs: Vec<Value>) -> Self {
        let k = inputs.len();
        TurpinCoan {
            n,
            f,
            first_instance,
            inputs,
            received: vec![vec![Value::Bottom; n]; k],
            perplexed: vec![false; k],
            claims: vec![vec![false; n]; k],
            alert: vec![false; k],
            binary: PhaseKing::new(n, f, first_instance, vec![false; k]),
            outputs: None,
            rounds_seen: 0,
        }
    }

    pub fn rounds(&self) -> usize {
        weak_mvba_rounds(self.f)
    }

    pub fn rounds_seen(&self) -> usize {
        self.rounds_seen
    }

    pub fn outputs(&self) -> Option<&[Value]> {
        self.outputs.as_deref()
    }

    pub fn perplexed(&self) -> &[bool] {
        &self.perplexed
    }

    pub fn alert(&self) -> &[bool] {
        &self.alert
    }

    pub fn scramble(&mut self, rng: &mut impl rand::Rng) {
        let junk = |rng: &mut dyn rand::RngCore| {
            if rng.next_u32().is_multiple_of(8) {
                Value::Bottom
            } else {
                Value::Int(rng.next_u64() as i64 % 1000)
            }
        };
        for i in 0..self.inputs.len() {
            self.inputs[i] = junk(rng);
            for s in 0..self.n {
                self.received[i][s] = junk(rng);
                self.claims[i][s] = rng.gen();
            }
            self.perplexed[i] = rng.gen();
            self.alert[i] = rng.gen();
        }
        self.binary.scramble(rng);
    }

    pub fn outgoing(&self, step: usize, me: ProcessId, out: &mut Vec<Message>) {
        match step {
            0 => {
                for (i, &value) in self.inputs.iter().enumerate() {
                    out.push(Message::Initial { instance: self.first_instance + i as u32, value });
                }
            }
            1 => {
                for (i, _) in self.perplexed.iter().enumerate().filter(|(_, &p)| p) {
                    out.push(Message::Perplexed { instance: self.first_instance + i as u32 });
                }
            }
            s => self.binary.outgoing(s - 2, me, out),
        }
    }

    pub fn incoming(&mut self, step: usize, inbox: &[Delivery]) {
        let k = self.inputs.len();
        match step {
            0 => {
                for row in &mut self.received {
                    row.iter_mut().for_each(|v| *v = Value::Bottom);
                }
                let mut filled = vec![false; k];
                for d in inbox {
                    filled.iter_mut().for_each(|x| *x = false);
                    for msg in wire::decode_lossy(&d.payload) {
                        if let Message::Initial { instance, value } = msg {
                            if let Some(slot) = self.slot(instance) {
                                if !filled[slot] {
                                    filled[slot] = true;
                                    self.received[slot][d.from.index()] = value;
                                }
                            }
                        }
                    }
                }
                for i in 0..k {
                    self.perplexed[i] = perplexity_flag(self.inputs[i], &self.received[i], self.n, self.f);
                }
            }
            1 => {
                for row in &mut self.claims {
                    row.iter_mut().for_each(|c| *c = false);
                }
                for d in inbox {
                    for msg in wire::decode_lossy(&d.payload) {
                        if let Message::Perplexed { instance } = msg {
                            if let Some(slot) = self.slot(instance) {
                                self.claims[slot][d.from.index()] = true;
                            }
                        }
                    }
                }
                for i in 0..k {
                    self.alert[i] = alert_flag(&self.claims[i], self.n, self.f);
                }
                self.binary = PhaseKing::new(self.n, self.f, self.first_instance, self.alert.clone());
            }
            s => {
                self.binary.incoming(s - 2, inbox);
                if s + 1 == self.rounds() {
                    let outputs = (0..k)
                        .map(|i| {
                            if self.binary.bits()[i] {
                                Value::Bottom
                            } else {
                                content_majority(&self.received[i], &self.claims[i])
                            }
                        })
                        .collect();
                    self.outputs = Some(outputs);
                }
            }
        }
        self.rounds_seen += 1;
    }

    fn slot(&self, instance: u32) -> Option<usize> {
        let slot = instance.checked_sub(self.first_instance)? as usize;
        (slot < self.inputs.len()).then_some(slot)
    }
}

/// One process running a single standalone weak-validity agreement
/// (instance 1). The schedule's `b` must equal the round count.
pub struct WeakMvbaNode {
    pub session: TurpinCoan,
}

impl WeakMvbaNode {
    pub fn new(n: usize, f: usize, input: Value) -> Self {
        WeakMvbaNode { session: TurpinCoan::new(n, f, 1, vec![input]) }
    }

    pub fn decision(&self) -> Option<Value> {
        self.session.outputs().map(|o| o[0])
    }
}

impl Handler for WeakMvbaNode {
    fn send(&mut self, ctx: &RoundCtx) -> Outbox {
        let mut out = Vec::new();
        self.session.outgoing(ctx.schedule.round_in_pulse, ctx.me, &mut out);
        if out.is_empty() {
            Outbox::Silent
        } else {
            Outbox::Uniform(wire::encode(&out))
        }
    }

    fn compute(&mut self, ctx: &RoundCtx, inbox: &[Delivery], _sink: &mut EventSink<'_>) {
        self.session.incoming(ctx.schedule.round_in_pulse, inbox);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vals(xs: &[Option<i64>]) -> Vec<Value> {
        xs.iter().map(|&x| Value::from(x)).collect()
    }

    #[test]
    fn perplexity_examples() {
        assert!(!perplexity_flag(Value::Int(5), &vals(&[Some(5); 4]), 4, 1));
        assert!(perplexity_flag(Value::Int(5), &vals(&[Some(5), Some(9), Some(9), None]), 4, 1));
        assert!(!perplexity_flag(Value::Int(5), &vals(&[Some(5), Some(5), Some(9), Some(5)]), 4, 1));
    }

    #[test]
    fn perplexity_threshold_is_exact() {
        // n − f = 5: 2c ≥ 5 needs c = 3
        let own = Value::Int(0);
        let two = vals(&[Some(0), Some(0), Some(0), Some(0), Some(1), Some(1)]);
        let three = vals(&[Some(0), Some(0), Some(0), Some(1), Some(1), Some(1)]);
        assert!(!perplexity_flag(own, &two, 6, 1));
        assert!(perplexity_flag(own, &three, 6, 1));
    }

    #[test]
    fn alert_examples() {
        assert!(!alert_flag(&[false; 4], 4, 1));
        assert!(alert_flag(&[true, true, false, false], 4, 1));
        assert!(!alert_flag(&[true, false, false, false], 4, 1));
    }

    #[test]
    fn content_majority_ties_to_smaller() {
        let received = vals(&[Some(7), Some(3), Some(7), Some(3), Some(9)]);
        assert_eq!(content_majority(&received, &[false; 5]), Value::Int(3));
        let claims = [false, true, false, false, false];
        assert_eq!(content_majority(&received, &claims), Value::Int(7));
        assert_eq!(content_majority(&received, &[true; 5]), Value::Bottom);
    }
}

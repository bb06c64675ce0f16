//! Median-based multi-valued agreement with discrete interval validity.
//!
//! Every process broadcasts its value, then the `n` received values are
//! each agreed with a weak-validity instance running in parallel. The
//! resulting vector is identical at all non-faulty processes, and
//! [`select_value`] turns it into the decision: the most common value if it
//! is frequent enough, the lower median otherwise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Delivery, EventSink, Handler, Outbox, RoundCtx};
use crate::error::SelectError;
use crate::model::{median_mvba_rounds, ProcessId, Value};
use crate::weak_mvba::TurpinCoan;
use crate::wire::{self, Message};

/// Base `B` of the most-common threshold `⌊B/3⌋ + 1 + α`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ThresholdBase {
    /// Number of non-`⊥` entries.
    #[default]
    #[serde(rename = "k")]
    K,
    /// Number of processes.
    #[serde(rename = "n")]
    N,
}

impl std::str::FromStr for ThresholdBase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "k" => Ok(ThresholdBase::K),
            "n" => Ok(ThresholdBase::N),
            other => Err(format!("threshold base must be k or n, got {other}")),
        }
    }
}

pub fn remove_bottom(a: &[Value]) -> Vec<i64> {
    a.iter().filter_map(|v| v.as_int()).collect()
}

/// Decision rule over an agreed vector. Never returns `⊥`.
pub fn select_value(a: &[Value], alpha: usize, base: ThresholdBase) -> Result<i64, SelectError> {
    let mut kept = remove_bottom(a);
    let k = kept.len();
    if k == 0 {
        return Err(SelectError::AllBottom);
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in &kept {
        *counts.entry(v).or_default() += 1;
    }
    // first maximum in ascending key order: ties go to the smallest value
    let (most_common, count) = counts.iter().fold((kept[0], 0), |best, (&v, &c)| if c > best.1 { (v, c) } else { best });
    let b = match base {
        ThresholdBase::K => k,
        ThresholdBase::N => a.len(),
    };
    if count >= b / 3 + 1 + alpha {
        return Ok(most_common);
    }
    kept.sort_unstable();
    Ok(kept[k.div_ceil(2) - 1])
}

/// Parameters shared by every agreement a process runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgreementParams {
    pub n: usize,
    pub f: usize,
    pub alpha: usize,
    pub base: ThresholdBase,
}

/// One process's run of the median-based agreement.
#[derive(Clone, Debug)]
pub struct MedianSession {
    params: AgreementParams,
    own: Value,
    received: Vec<Value>,
    bank: Option<TurpinCoan>,
    agreed: Option<Vec<Value>>,
    decision: Option<Result<i64, SelectError>>,
    rounds_seen: usize,
}

impl MedianSession {
    pub fn new(params: AgreementParams, own: Value) -> Self {
        MedianSession {
            params,
            own,
            received: vec![Value::Bottom; params.n],
            bank: None,
            agreed: None,
            decision: None,
            rounds_seen: 0,
        }
    }

    pub fn rounds(&self) -> usize {
        median_mvba_rounds(self.params.f)
    }

    pub fn rounds_seen(&self) -> usize {
        self.rounds_seen
    }

    pub fn own(&self) -> Value {
        self.own
    }

    /// The vector after the broadcast round.
    pub fn received(&self) -> &[Value] {
        &self.received
    }

    /// The vector after the weak-validity instances.
    pub fn agreed(&self) -> Option<&[Value]> {
        self.agreed.as_deref()
    }

    pub fn decision(&self) -> Option<&Result<i64, SelectError>> {
        self.decision.as_ref()
    }

    /// Session for a process whose local variables are arbitrary, positioned
    /// as if `step` rounds had already run.
    pub fn arbitrary(params: AgreementParams, step: usize, rng: &mut impl rand::Rng) -> Self {
        let own = Value::Int(rng.gen_range(-1000..1000));
        let mut s = MedianSession::new(params, own);
        for v in &mut s.received {
            *v = Value::Int(rng.gen_range(-1000..1000));
        }
        if step >= 1 {
            let mut bank = TurpinCoan::new(params.n, params.f, 1, s.received.clone());
            bank.scramble(rng);
            s.bank = Some(bank);
        }
        s
    }

    pub fn outgoing(&self, step: usize, me: ProcessId, out: &mut Vec<Message>) {
        if step == 0 {
            out.push(Message::Initial { instance: 0, value: self.own });
        } else if let Some(bank) = &self.bank {
            bank.outgoing(step - 1, me, out);
        }
    }

    pub fn incoming(&mut self, step: usize, inbox: &[Delivery]) {
        self.rounds_seen += 1;
        if step == 0 {
            self.received.iter_mut().for_each(|v| *v = Value::Bottom);
            for d in inbox {
                let first = wire::decode_lossy(&d.payload).find_map(|m| match m {
                    Message::Initial { instance: 0, value } => Some(value),
                    _ => None,
                });
                if let Some(value) = first {
                    self.received[d.from.index()] = value;
                }
            }
            self.bank = Some(TurpinCoan::new(self.params.n, self.params.f, 1, self.received.clone()));
            return;
        }
        let rounds = self.rounds();
        let (n, f) = (self.params.n, self.params.f);
        let received = &self.received;
        let bank = self.bank.get_or_insert_with(|| TurpinCoan::new(n, f, 1, received.clone()));
        bank.incoming(step - 1, inbox);
        if step + 1 == rounds {
            if let Some(agreed) = bank.outputs() {
                self.decision = Some(select_value(agreed, self.params.alpha, self.params.base));
                self.agreed = Some(agreed.to_vec());
            }
        }
    }
}

/// One process running a single standalone median-based agreement. The
/// schedule's `b` must equal the round count.
pub struct MedianNode {
    pub session: MedianSession,
}

impl MedianNode {
    pub fn new(params: AgreementParams, input: Value) -> Self {
        MedianNode { session: MedianSession::new(params, input) }
    }

    pub fn decision(&self) -> Option<Result<i64, SelectError>> {
        self.session.decision().cloned()
    }
}

impl Handler for MedianNode {
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
    fn remove_bottom_examples() {
        assert!(remove_bottom(&vals(&[None, None, None])).is_empty());
        assert_eq!(remove_bottom(&vals(&[Some(1), None, Some(3)])), vec![1, 3]);
        assert_eq!(remove_bottom(&vals(&[Some(5), Some(5), None, Some(9)])), vec![5, 5, 9]);
    }

    #[test]
    fn select_value_examples() {
        let k = ThresholdBase::K;
        assert_eq!(select_value(&vals(&[Some(7); 5]), 0, k), Ok(7));
        let a = vals(&[None, Some(1), Some(9), Some(5), Some(5), Some(5), Some(2)]);
        assert_eq!(select_value(&a, 0, k), Ok(5));
        let a: Vec<Value> = (1..=7).map(Value::Int).collect();
        assert_eq!(select_value(&a, 0, k), Ok(4));
        let a: Vec<Value> = (1..=4).map(Value::Int).collect();
        assert_eq!(select_value(&a, 0, k), Ok(2));
    }

    #[test]
    fn select_value_rejects_all_bottom() {
        assert_eq!(select_value(&[Value::Bottom; 4], 0, ThresholdBase::K), Err(SelectError::AllBottom));
    }

    #[test]
    fn threshold_base_changes_outcome() {
        // k = 3: ⌊3/3⌋+1 = 2 copies suffice; n = 6: ⌊6/3⌋+1 = 3 needed.
        let a = vals(&[Some(9), Some(9), Some(1), None, None, None]);
        assert_eq!(select_value(&a, 0, ThresholdBase::K), Ok(9));
        assert_eq!(select_value(&a, 0, ThresholdBase::N), Ok(9));
        let a = vals(&[Some(9), Some(9), Some(1), Some(0), None, None]);
        // k = 4: threshold 2 → 9; n = 6: threshold 3 → lower median of [0,1,9,9] = 1
        assert_eq!(select_value(&a, 0, ThresholdBase::K), Ok(9));
        assert_eq!(select_value(&a, 0, ThresholdBase::N), Ok(1));
    }

    #[test]
    fn alpha_raises_the_bar() {
        let a = vals(&[Some(3), Some(3), Some(1), Some(8)]);
        assert_eq!(select_value(&a, 0, ThresholdBase::K), Ok(3));
        // threshold 3: fall back to lower median of [1,3,3,8] = 3
        assert_eq!(select_value(&a, 1, ThresholdBase::K), Ok(3));
        let a = vals(&[Some(8), Some(8), Some(1), Some(2)]);
        assert_eq!(select_value(&a, 1, ThresholdBase::K), Ok(2));
    }

    #[test]
    fn threshold_base_parses() {
        assert_eq!("k".parse::<ThresholdBase>(), Ok(ThresholdBase::K));
        assert_eq!(serde_json::to_string(&ThresholdBase::N).unwrap(), "\"n\"");
        assert!("x".parse::<ThresholdBase>().is_err());
    }
}

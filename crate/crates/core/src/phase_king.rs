//! Phase-king binary agreement, `f_max + 1` phases of three rounds each,
//! for `3·f_max < n`.
//!
//! Per phase `k` (king = process `k`):
//! 1. everyone sends its bit; a bit seen at least `n − f` times becomes the
//!    proposal, otherwise there is none;
//! 2. everyone sends its proposal; a bit proposed more than `f` times is
//!    adopted, and a process that saw it `n − f` times is *strong*;
//! 3. the king sends its bit; processes that are not strong adopt it.
//!
//! Several independent instances run side by side in the same rounds; each
//! frame carries its instance number.

use crate::engine::{Delivery, EventSink, Handler, Outbox, RoundCtx};
use crate::model::{phase_king_rounds, ProcessId};
use crate::wire::{self, Message, NO_PROPOSAL};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseKing {
    n: usize,
    f: usize,
    first_instance: u32,
    bits: Vec<bool>,
    proposals: Vec<u8>,
    strong: Vec<bool>,
    rounds_seen: usize,
}

/// Which of the three sub-rounds a step falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubRound {
    Vote,
    Propose,
    King,
}

/// `(phase, sub-round)` for a 0-based step; phases are 1-based.
pub fn locate(step: usize) -> (u32, SubRound) {
    let phase = (step / 3) as u32 + 1;
    let sub = match step % 3 {
        0 => SubRound::Vote,
        1 => SubRound::Propose,
        _ => SubRound::King,
    };
    (phase, sub)
}

pub fn king_of(phase: u32) -> ProcessId {
    ProcessId(phase)
}

/// Picks the bit whose count passes `pass`; larger count wins, ties go to 0.
fn pick(counts: [usize; 2], pass: impl Fn(usize) -> bool) -> Option<bool> {
    match (pass(counts[0]), pass(counts[1])) {
        (false, false) => None,
        (true, false) => Some(false),
        (false, true) => Some(true),
        (true, true) => Some(counts[1] > counts[0]),
    }
}

impl PhaseKing {
    pub fn new(n: usize, f: usize, first_instance: u32, inputs: Vec<bool>) -> Self {
        let k = inputs.len();
        PhaseKing {
            n,
            f,
            first_instance,
            bits: inputs,
            proposals: vec![NO_PROPOSAL; k],
            strong: vec![false; k],
            rounds_seen: 0,
        }
    }

    pub fn rounds(&self) -> usize {
        phase_king_rounds(self.f)
    }

    pub fn instances(&self) -> usize {
        self.bits.len()
    }

    /// Current bits; the decisions once all rounds have run.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn rounds_seen(&self) -> usize {
        self.rounds_seen
    }

    pub fn is_done(&self) -> bool {
        self.rounds_seen >= self.rounds()
    }

    /// Overwrites all local variables; used to start from an arbitrary state.
    pub fn scramble(&mut self, rng: &mut impl rand::Rng) {
        for i in 0..self.bits.len() {
            self.bits[i] = rng.gen();
            self.proposals[i] = rng.gen_range(0..=NO_PROPOSAL);
            self.strong[i] = rng.gen();
        }
    }

    pub fn outgoing(&self, step: usize, me: ProcessId, out: &mut Vec<Message>) {
        let (phase, sub) = locate(step);
        for (i, &bit) in self.bits.iter().enumerate() {
            let instance = self.first_instance + i as u32;
            match sub {
                SubRound::Vote => out.push(Message::Vote { instance, phase, bit: bit as u8 }),
                SubRound::Propose => out.push(Message::Vote { instance, phase, bit: self.proposals[i] }),
                SubRound::King if me == king_of(phase) => {
                    out.push(Message::King { instance, phase, bit: bit as u8 })
                }
                SubRound::King => {}
            }
        }
    }

    pub fn incoming(&mut self, step: usize, inbox: &[Delivery]) {
        let (phase, sub) = locate(step);
        let k = self.bits.len();
        let mut counts = vec![[0usize; 2]; k];
        let mut king_bit: Vec<Option<bool>> = vec![None; k];
        let mut seen = vec![false; k];
        for d in inbox {
            seen.iter_mut().for_each(|s| *s = false);
            for msg in wire::decode_lossy(&d.payload) {
                let (instance, msg_phase, bit, is_king) = match msg {
                    Message::Vote { instance, phase, bit } => (instance, phase, bit, false),
                    Message::King { instance, phase, bit } => (instance, phase, bit, true),
                    _ => continue,
                };
                if msg_phase != phase || is_king != (sub == SubRound::King) {
                    continue;
                }
                let Some(slot) = instance.checked_sub(self.first_instance).map(|s| s as usize) else {
                    continue;
                };
                if slot >= k || seen[slot] {
                    continue;
                }
                seen[slot] = true;
                if is_king {
                    if d.from == king_of(phase) && bit < 2 {
                        king_bit[slot] = Some(bit == 1);
                    }
                } else if bit < 2 {
                    counts[slot][bit as usize] += 1;
                }
            }
        }

        let quorum = self.n.saturating_sub(self.f);
        for i in 0..k {
            match sub {
                SubRound::Vote => {
                    self.proposals[i] = match pick(counts[i], |c| c >= quorum) {
                        Some(b) => b as u8,
                        None => NO_PROPOSAL,
                    };
                }
                SubRound::Propose => {
                    if let Some(b) = pick(counts[i], |c| c > self.f) {
                        self.bits[i] = b;
                    }
                    self.strong[i] = counts[i][self.bits[i] as usize] >= quorum;
                }
                SubRound::King => {
                    if !self.strong[i] {
                        if let Some(b) = king_bit[i] {
                            self.bits[i] = b;
                        }
                    }
                }
            }
        }
        self.rounds_seen += 1;
    }
}

/// One process running a single standalone binary agreement, for tests and
/// exhaustive searches. The schedule's `b` must equal the round count.
pub struct BinaryAgreementNode {
    pub session: PhaseKing,
}

impl BinaryAgreementNode {
    pub fn new(n: usize, f: usize, input: bool) -> Self {
        BinaryAgreementNode { session: PhaseKing::new(n, f, 1, vec![input]) }
    }

    pub fn decision(&self) -> Option<bool> {
        self.session.is_done().then(|| self.session.bits()[0])
    }
}

impl Handler for BinaryAgreementNode {
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

    #[test]
    fn locate_steps() {
        assert_eq!(locate(0), (1, SubRound::Vote));
        assert_eq!(locate(4), (2, SubRound::Propose));
        assert_eq!(locate(8), (3, SubRound::King));
    }

    #[test]
    fn pick_prefers_larger_then_zero() {
        assert_eq!(pick([3, 1], |c| c >= 3), Some(false));
        assert_eq!(pick([1, 3], |c| c >= 3), Some(true));
        assert_eq!(pick([2, 2], |c| c >= 2), Some(false));
        assert_eq!(pick([1, 1], |c| c >= 2), None);
    }

    #[test]
    fn rounds_are_three_per_phase() {
        assert_eq!(PhaseKing::new(4, 0, 1, vec![true]).rounds(), 3);
        assert_eq!(PhaseKing::new(7, 2, 1, vec![true]).rounds(), 9);
    }
}

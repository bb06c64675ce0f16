//! Byzantine adversaries and recurring transient-fault injection.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Adversary, RoundCtx};
use crate::error::ConfigError;
use crate::model::{ProcessId, Value};
use crate::phase_king::{self, king_of, SubRound};
use crate::smr::{self, PulseStep, ReplicaState};
use crate::wire::{self, Message, NO_PROPOSAL};

/// Byzantine behaviour shared by all members.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    /// Sends nothing (crash from the start).
    Silent,
    /// Seeded random well-formed messages, occasionally garbage bytes.
    Random,
    /// Value `a` (and bit 0) to the lower half of the ids, `b` (and bit 1)
    /// to the upper half; claims perplexity only towards the lower half.
    EquivocateSplit { a: i64, b: i64 },
    /// Pushes `target` wherever a value is expected. Without a target the
    /// members join the most popular transient-corrupted value of the pulse.
    Collude { target: Option<i64> },
    /// One scripted strategy per run out of a finite grid; the run seed
    /// picks the script. `bound` caps the enumeration (0 = no cap).
    Exhaustive { bound: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StrategyRepr", into = "StrategyRepr")]
pub struct ByzantineStrategy {
    pub kind: StrategyKind,
    pub members: Vec<ProcessId>,
}

impl Default for ByzantineStrategy {
    fn default() -> Self {
        ByzantineStrategy { kind: StrategyKind::Silent, members: Vec::new() }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum StrategyRepr {
    Silent {
        #[serde(default)]
        members: Vec<ProcessId>,
    },
    Random {
        #[serde(default)]
        members: Vec<ProcessId>,
    },
    EquivocateSplit {
        a: i64,
        b: i64,
        #[serde(default)]
        members: Vec<ProcessId>,
    },
    Collude {
        #[serde(default)]
        target: Option<i64>,
        #[serde(default)]
        members: Vec<ProcessId>,
    },
    Exhaustive {
        #[serde(default)]
        bound: u64,
        #[serde(default)]
        members: Vec<ProcessId>,
    },
}

impl From<StrategyRepr> for ByzantineStrategy {
    fn from(r: StrategyRepr) -> Self {
        let (kind, members) = match r {
            StrategyRepr::Silent { members } => (StrategyKind::Silent, members),
            StrategyRepr::Random { members } => (StrategyKind::Random, members),
            StrategyRepr::EquivocateSplit { a, b, members } => (StrategyKind::EquivocateSplit { a, b }, members),
            StrategyRepr::Collude { target, members } => (StrategyKind::Collude { target }, members),
            StrategyRepr::Exhaustive { bound, members } => (StrategyKind::Exhaustive { bound }, members),
        };
        ByzantineStrategy { kind, members }
    }
}

impl From<ByzantineStrategy> for StrategyRepr {
    fn from(s: ByzantineStrategy) -> Self {
        let members = s.members;
        match s.kind {
            StrategyKind::Silent => StrategyRepr::Silent { members },
            StrategyKind::Random => StrategyRepr::Random { members },
            StrategyKind::EquivocateSplit { a, b } => StrategyRepr::EquivocateSplit { a, b, members },
            StrategyKind::Collude { target } => StrategyRepr::Collude { target, members },
            StrategyKind::Exhaustive { bound } => StrategyRepr::Exhaustive { bound, members },
        }
    }
}

/// How the adversary may answer bit-valued rounds in a scripted strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitPlan {
    Zero,
    One,
    /// 0 to the lower half, 1 to the upper half.
    Split,
    /// By recipient parity.
    Alternate,
}

const BIT_PLANS: [BitPlan; 4] = [BitPlan::Zero, BitPlan::One, BitPlan::Split, BitPlan::Alternate];

/// Size of the restricted value grid `{⊥, min−1, min, mid, max, max+1}`.
pub const GRID_SIZE: usize = 6;

/// The restricted value grid around the honest range.
pub fn value_grid(lo: i64, hi: i64) -> [Value; GRID_SIZE] {
    let mid = lo + (hi - lo) / 2;
    [
        Value::Bottom,
        Value::Int(lo - 1),
        Value::Int(lo),
        Value::Int(mid),
        Value::Int(hi),
        Value::Int(hi + 1),
    ]
}

/// A fully determined adversary: per-recipient grid choices for the two
/// value rounds, per-recipient perplexity claims and a bit plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Script {
    pub broadcast: Vec<u8>,
    pub initial: Vec<u8>,
    pub perplexed: Vec<bool>,
    pub bits: BitPlan,
}

/// Enumerates every [`Script`] in which the choices towards honest
/// recipients range over the whole grid. Choices towards Byzantine
/// recipients are fixed, since their inbox is irrelevant.
#[derive(Clone, Debug)]
pub struct ScriptSpace {
    n: usize,
    honest: Vec<usize>,
}

impl ScriptSpace {
    pub fn new(n: usize, members: &[ProcessId]) -> Self {
        let honest = (0..n).filter(|i| !members.iter().any(|m| m.index() == *i)).collect();
        ScriptSpace { n, honest }
    }

    pub fn len(&self) -> u64 {
        let h = self.honest.len() as u32;
        (GRID_SIZE as u64).pow(2 * h) * 2u64.pow(h) * BIT_PLANS.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn script(&self, mut idx: u64) -> Script {
        let mut take = |radix: u64| {
            let d = idx % radix;
            idx /= radix;
            d
        };
        let mut s = Script {
            broadcast: vec![0; self.n],
            initial: vec![0; self.n],
            perplexed: vec![false; self.n],
            bits: BitPlan::Zero,
        };
        s.bits = BIT_PLANS[take(BIT_PLANS.len() as u64) as usize];
        for &r in &self.honest {
            s.perplexed[r] = take(2) == 1;
        }
        for &r in &self.honest {
            s.initial[r] = take(GRID_SIZE as u64) as u8;
        }
        for &r in &self.honest {
            s.broadcast[r] = take(GRID_SIZE as u64) as u8;
        }
        s
    }

    pub fn iter(&self) -> impl Iterator<Item = Script> + '_ {
        (0..self.len()).map(|i| self.script(i))
    }
}

/// What protocol the simulated processes run, so the adversary knows what
/// each round carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Full pulses: input agreement, state agreement, transition.
    Smr,
    Median,
    Weak,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Idle,
    MedianBroadcast,
    Initial { first: u32, count: u32 },
    Perplexed { first: u32, count: u32 },
    Bits { first: u32, count: u32, phase: u32, sub: SubRound },
}

fn weak_role(step: usize, first: u32, count: u32) -> Role {
    match step {
        0 => Role::Initial { first, count },
        1 => Role::Perplexed { first, count },
        s => binary_role(s - 2, first, count),
    }
}

fn binary_role(step: usize, first: u32, count: u32) -> Role {
    let (phase, sub) = phase_king::locate(step);
    Role::Bits { first, count, phase, sub }
}

fn median_role(step: usize, n: usize) -> Role {
    if step == 0 {
        Role::MedianBroadcast
    } else {
        weak_role(step - 1, 1, n as u32)
    }
}

/// Segment of the pulse a round belongs to (0 = input agreement, 1 = state
/// agreement), used to pick the honest value range.
fn role_of(layout: Layout, round: usize, n: usize, f: usize) -> (Role, usize) {
    match layout {
        Layout::Smr => match smr::locate(round, f) {
            PulseStep::Input(s) => (median_role(s, n), 0),
            PulseStep::State(s) => (median_role(s, n), 1),
            PulseStep::Transition => (Role::Idle, 0),
        },
        Layout::Median => (median_role(round, n), 0),
        Layout::Weak => (weak_role(round, 1, 1), 0),
        Layout::Binary => (binary_role(round, 1, 1), 0),
    }
}

/// The adversary controlling every Byzantine member.
pub struct ByzantineAdversary {
    kind: StrategyKind,
    layout: Layout,
    script: Option<Script>,
    ranges: [Option<(i64, i64)>; 2],
    join_target: Option<i64>,
}

impl ByzantineAdversary {
    pub fn new(kind: StrategyKind, layout: Layout) -> Self {
        ByzantineAdversary { kind, layout, script: None, ranges: [None; 2], join_target: None }
    }

    pub fn scripted(script: Script, layout: Layout) -> Self {
        let mut a = ByzantineAdversary::new(StrategyKind::Exhaustive { bound: 0 }, layout);
        a.script = Some(script);
        a
    }

    pub fn set_script(&mut self, script: Script) {
        self.script = Some(script);
    }

    /// Range of the values honest processes propose in a segment (0 = input
    /// agreement, 1 = state agreement). The adversary is omniscient.
    pub fn set_honest_range(&mut self, segment: usize, range: Option<(i64, i64)>) {
        self.ranges[segment] = range;
    }

    pub fn set_join_target(&mut self, target: Option<i64>) {
        self.join_target = target;
    }

    fn value_for(&self, recipient: usize, n: usize, segment: usize, broadcast: bool, rng: &mut ChaCha8Rng) -> Value {
        let (lo, hi) = self.ranges[segment].unwrap_or((0, 0));
        match &self.kind {
            StrategyKind::Silent => Value::Bottom,
            StrategyKind::Random => {
                if rng.gen_ratio(1, 8) {
                    Value::Bottom
                } else {
                    Value::Int(rng.gen_range(lo.saturating_sub(2)..=hi.saturating_add(2)))
                }
            }
            StrategyKind::EquivocateSplit { a, b } => Value::Int(if recipient < n / 2 { *a } else { *b }),
            StrategyKind::Collude { target } => {
                Value::Int(target.or(self.join_target).unwrap_or_else(|| hi.saturating_add(1)))
            }
            StrategyKind::Exhaustive { .. } => match &self.script {
                Some(s) => {
                    let choice = if broadcast { s.broadcast[recipient] } else { s.initial[recipient] };
                    value_grid(lo, hi)[choice as usize]
                }
                None => Value::Bottom,
            },
        }
    }

    fn perplexed_for(&self, recipient: usize, n: usize, rng: &mut ChaCha8Rng) -> bool {
        match &self.kind {
            StrategyKind::Silent | StrategyKind::Collude { .. } => false,
            StrategyKind::Random => rng.gen(),
            StrategyKind::EquivocateSplit { .. } => recipient < n / 2,
            StrategyKind::Exhaustive { .. } => self.script.as_ref().is_some_and(|s| s.perplexed[recipient]),
        }
    }

    fn bit_for(&self, recipient: usize, n: usize, allow_none: bool, rng: &mut ChaCha8Rng) -> u8 {
        let split = (recipient >= n / 2) as u8;
        match &self.kind {
            StrategyKind::Silent | StrategyKind::Collude { .. } => 0,
            StrategyKind::Random => rng.gen_range(0..=if allow_none { NO_PROPOSAL } else { 1 }),
            StrategyKind::EquivocateSplit { .. } => split,
            StrategyKind::Exhaustive { .. } => match self.script.as_ref().map(|s| s.bits) {
                Some(BitPlan::One) => 1,
                Some(BitPlan::Split) => split,
                Some(BitPlan::Alternate) => (recipient % 2) as u8,
                Some(BitPlan::Zero) | None => 0,
            },
        }
    }

    fn frames_for(&self, role: Role, segment: usize, me: ProcessId, recipient: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Message> {
        let mut out = Vec::new();
        match role {
            Role::Idle => {}
            Role::MedianBroadcast => {
                let value = self.value_for(recipient, n, segment, true, rng);
                if !value.is_bottom() {
                    out.push(Message::Initial { instance: 0, value });
                }
            }
            Role::Initial { first, count } => {
                for instance in first..first + count {
                    let value = self.value_for(recipient, n, segment, false, rng);
                    if !value.is_bottom() {
                        out.push(Message::Initial { instance, value });
                    }
                }
            }
            Role::Perplexed { first, count } => {
                for instance in first..first + count {
                    if self.perplexed_for(recipient, n, rng) {
                        out.push(Message::Perplexed { instance });
                    }
                }
            }
            Role::Bits { first, count, phase, sub } => {
                for instance in first..first + count {
                    match sub {
                        SubRound::Vote => {
                            out.push(Message::Vote { instance, phase, bit: self.bit_for(recipient, n, false, rng) })
                        }
                        SubRound::Propose => {
                            out.push(Message::Vote { instance, phase, bit: self.bit_for(recipient, n, true, rng) })
                        }
                        SubRound::King if king_of(phase) == me => {
                            out.push(Message::King { instance, phase, bit: self.bit_for(recipient, n, false, rng) })
                        }
                        SubRound::King => {}
                    }
                }
            }
        }
        out
    }
}

impl Adversary for ByzantineAdversary {
    fn outbox(&mut self, ctx: &RoundCtx, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<u8>>> {
        let n = ctx.n;
        if self.kind == StrategyKind::Silent {
            return vec![None; n];
        }
        let (role, segment) = role_of(self.layout, ctx.schedule.round_in_pulse, n, ctx.f_max);
        (0..n)
            .map(|r| {
                if self.kind == StrategyKind::Random && rng.gen_ratio(1, 16) {
                    let len = rng.gen_range(1..24);
                    return Some((0..len).map(|_| rng.gen()).collect());
                }
                let frames = self.frames_for(role, segment, ctx.me, r, n, rng);
                (!frames.is_empty()).then(|| wire::encode(&frames))
            })
            .collect()
    }
}

/// Which replica variable a transient fault overwrites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransientField {
    Input,
    State,
    #[default]
    Both,
}

fn default_z() -> u64 {
    1 << 16
}

/// Recurring transient faults, striking `count` non-Byzantine replicas at
/// the start of every pulse.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransientModel {
    #[default]
    None,
    Malicious {
        target: i64,
        count: usize,
        #[serde(default)]
        field: TransientField,
    },
    /// Values drawn uniformly from `0..z`.
    Uniform {
        #[serde(default = "default_z")]
        z: u64,
        count: usize,
        #[serde(default)]
        field: TransientField,
    },
}

impl TransientModel {
    pub fn count(&self) -> usize {
        match self {
            TransientModel::None => 0,
            TransientModel::Malicious { count, .. } | TransientModel::Uniform { count, .. } => *count,
        }
    }

    pub fn field(&self) -> TransientField {
        match self {
            TransientModel::None => TransientField::Both,
            TransientModel::Malicious { field, .. } | TransientModel::Uniform { field, .. } => *field,
        }
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if let TransientModel::Uniform { z: 0, .. } = self {
            return Err(ConfigError::Transients("uniform domain size z must be positive".into()));
        }
        Ok(())
    }
}

/// Replicas struck in one pulse, with their corrupted variables.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corruption {
    pub struck: Vec<(ProcessId, ReplicaState)>,
    /// More faults were requested than there are non-Byzantine replicas.
    pub saturated: bool,
}

/// Overwrites local state of up to `count` non-Byzantine replicas, chosen
/// uniformly without replacement. Struck replicas are listed by id.
pub fn inject_transients(
    model: &TransientModel,
    replicas: &mut [ReplicaState],
    byzantine: &[bool],
    rng: &mut impl Rng,
) -> Corruption {
    let wanted = model.count();
    if wanted == 0 {
        return Corruption::default();
    }
    let candidates: Vec<usize> = (0..replicas.len()).filter(|&i| !byzantine[i]).collect();
    let saturated = wanted > candidates.len();
    let amount = wanted.min(candidates.len());
    let mut chosen: Vec<usize> = index::sample(rng, candidates.len(), amount).into_iter().map(|j| candidates[j]).collect();
    chosen.sort_unstable();
    let field = model.field();
    let mut struck = Vec::with_capacity(amount);
    for i in chosen {
        let mut draw = || match model {
            TransientModel::Malicious { target, .. } => *target,
            TransientModel::Uniform { z, .. } => rng.gen_range(0..*z) as i64,
            TransientModel::None => unreachable!(),
        };
        let r = &mut replicas[i];
        if matches!(field, TransientField::Input | TransientField::Both) {
            r.input_value = Value::Int(draw());
        }
        if matches!(field, TransientField::State | TransientField::Both) {
            r.current_state = draw();
        }
        struck.push((ProcessId::from_index(i), *r));
    }
    Corruption { struck, saturated }
}

/// Most popular value and its multiplicity, skipping `exclude`; ties go to
/// the smaller value.
pub fn most_popular(values: impl IntoIterator<Item = i64>, exclude: Option<i64>) -> Option<(i64, usize)> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in values.into_iter().filter(|v| Some(*v) != exclude) {
        *counts.entry(v).or_default() += 1;
    }
    counts.into_iter().fold(None, |best, (v, c)| match best {
        Some((_, bc)) if bc >= c => best,
        _ => Some((v, c)),
    })
}

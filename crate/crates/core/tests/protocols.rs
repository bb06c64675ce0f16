mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pulse_bft::engine::{Adversary, RoundCtx};
use pulse_bft::faults::{ByzantineAdversary, Layout, StrategyKind};
use pulse_bft::median::{AgreementParams, ThresholdBase};
use pulse_bft::model::{median_mvba_rounds, validate_config};
use pulse_bft::phase_king::{king_of, locate, SubRound};
use pulse_bft::scenario::ScenarioConfig;
use pulse_bft::sim::{run_binary, run_median, run_simulation, run_weak, smr_pulse};
use pulse_bft::smr::{ReplicaState, StateMachineSpec};
use pulse_bft::wire::{encode, Message};
use pulse_bft::{ProcessId, Value};

/// Sends a fixed bit to each recipient in each round of a binary agreement.
struct BitScript {
    /// `bits[round][recipient]`
    bits: Vec<Vec<u8>>,
}

impl Adversary for BitScript {
    fn outbox(&mut self, ctx: &RoundCtx, _rng: &mut ChaCha8Rng) -> Vec<Option<Vec<u8>>> {
        let round = ctx.schedule.round_in_pulse;
        let (phase, sub) = locate(round);
        (0..ctx.n)
            .map(|r| {
                let bit = self.bits[round][r];
                let msg = match sub {
                    SubRound::Vote | SubRound::Propose => Message::Vote { instance: 1, phase, bit },
                    SubRound::King if king_of(phase) == ctx.me => Message::King { instance: 1, phase, bit },
                    SubRound::King => return None,
                };
                Some(encode(&[msg]))
            })
            .collect()
    }
}

fn digits(mut idx: usize, radix: usize, len: usize) -> Vec<u8> {
    (0..len)
        .map(|_| {
            let d = idx % radix;
            idx /= radix;
            d as u8
        })
        .collect()
}

#[test]
fn phase_king_survives_every_first_phase_script() {
    let (n, f) = (4, 1);
    let plans: [fn(usize) -> u8; 4] = [|_| 0, |_| 1, |r| (r >= 2) as u8, |r| (r % 2) as u8];
    let mut runs = 0u64;
    for byz in 0..n {
        let members = [ProcessId::from_index(byz)];
        let radix = [2usize, 3, if byz == 0 { 2 } else { 1 }];
        let first_phase = radix.iter().map(|r| r.pow(n as u32)).product::<usize>();
        for inputs in 0..(1 << n) {
            let input: Vec<bool> = (0..n).map(|i| inputs >> i & 1 == 1).collect();
            for script in 0..first_phase {
                let mut idx = script;
                let bits: Vec<Vec<u8>> = radix
                    .iter()
                    .map(|&r| {
                        let d = digits(idx % r.pow(n as u32), r, n);
                        idx /= r.pow(n as u32);
                        d
                    })
                    .collect();
                for plan in plans {
                    let mut rounds = bits.clone();
                    rounds.extend((0..3).map(|_| (0..n).map(plan).collect::<Vec<u8>>()));
                    let out = run_binary(n, f, &input, &members, &mut BitScript { bits: rounds }, 0).unwrap();
                    let decided: Vec<bool> = out.iter().flatten().copied().collect();
                    assert_eq!(decided.len(), n - 1);
                    assert!(decided.iter().all(|&d| d == decided[0]), "byz {byz} inputs {input:?} script {script}");
                    let honest: Vec<bool> = (0..n).filter(|&i| i != byz).map(|i| input[i]).collect();
                    if honest.iter().all(|&b| b == honest[0]) {
                        assert_eq!(decided[0], honest[0]);
                    }
                    runs += 1;
                }
            }
        }
    }
    assert_eq!(runs, 16 * 4 * (2usize.pow(4) * 3usize.pow(4) * 2usize.pow(4) + 3 * 16 * 81) as u64);
}

fn strategy() -> impl Strategy<Value = StrategyKind> {
    prop_oneof![
        Just(StrategyKind::Silent),
        Just(StrategyKind::Random),
        (-3i64..15, -3i64..15).prop_map(|(a, b)| StrategyKind::EquivocateSplit { a, b }),
        proptest::option::of(-3i64..15).prop_map(|target| StrategyKind::Collude { target }),
        Just(StrategyKind::Exhaustive { bound: 0 }),
    ]
}

fn setup(n: usize, f: usize, seed: u64, kind: &StrategyKind, layout: Layout) -> (Vec<ProcessId>, ByzantineAdversary) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members = common::random_members(n, f, &mut rng);
    let adv = common::adversary(kind, n, &members, layout, &mut rng);
    (members, adv)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn binary_agreement_under_random_bits(n in 4usize..11, seed: u64, inputs: u16) {
        let f = (n - 1) / 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members = common::random_members(n, f, &mut rng);
        let bits = (0..3 * (f + 1)).map(|_| (0..n).map(|_| rng.gen_range(0..=2)).collect()).collect();
        let input: Vec<bool> = (0..n).map(|i| inputs >> i & 1 == 1).collect();
        let out = run_binary(n, f, &input, &members, &mut BitScript { bits }, seed).unwrap();
        let decided: Vec<bool> = out.iter().flatten().copied().collect();
        prop_assert_eq!(decided.len(), n - f);
        prop_assert!(decided.iter().all(|&d| d == decided[0]));
        let honest: Vec<bool> = (0..n).filter(|&i| out[i].is_some()).map(|i| input[i]).collect();
        if honest.iter().all(|&b| b == honest[0]) {
            prop_assert_eq!(decided[0], honest[0]);
        }
    }

    #[test]
    fn weak_agreement_is_consistent_and_unanimity_preserving(
        n in 4usize..11,
        seed: u64,
        kind in strategy(),
        values in proptest::collection::vec(0i64..4, 11),
    ) {
        let f = (n - 1) / 3;
        let (members, mut adv) = setup(n, f, seed, &kind, Layout::Weak);
        let inputs: Vec<Value> = values[..n].iter().map(|&v| Value::Int(v)).collect();
        let out = run_weak(n, f, &inputs, &members, &mut adv, seed).unwrap();
        let decided: Vec<Value> = out.iter().flatten().copied().collect();
        prop_assert_eq!(decided.len(), n - f);
        prop_assert!(decided.iter().all(|&d| d == decided[0]), "{:?}", decided);
        let honest: Vec<Value> = (0..n).filter(|&i| out[i].is_some()).map(|i| inputs[i]).collect();
        if honest.iter().all(|&v| v == honest[0]) {
            prop_assert_eq!(decided[0], honest[0]);
        }
    }

    #[test]
    fn median_agreement_is_consistent_and_interval_valid(
        n in 4usize..14,
        seed: u64,
        kind in strategy(),
        values in proptest::collection::vec(0i64..12, 14),
        alpha in 0usize..2,
        by_n: bool,
    ) {
        let f = (n - 1) / 3;
        let base = if by_n { ThresholdBase::N } else { ThresholdBase::K };
        let (members, mut adv) = setup(n, f, seed, &kind, Layout::Median);
        let inputs: Vec<Value> = values[..n].iter().map(|&v| Value::Int(v)).collect();
        let run = run_median(AgreementParams { n, f, alpha, base }, &inputs, &members, &mut adv, seed).unwrap();
        let decided: Vec<i64> = run.honest_decisions().into_iter().map(|d| d.unwrap()).collect();
        prop_assert_eq!(decided.len(), n - f);
        prop_assert!(decided.iter().all(|&d| d == decided[0]));
        let honest: Vec<i64> = (0..n).filter(|&i| run.decisions[i].is_some()).map(|i| values[i]).collect();
        let (lo, hi) = (*honest.iter().min().unwrap(), *honest.iter().max().unwrap());
        prop_assert!((lo..=hi).contains(&decided[0]), "{} outside {}..={}", decided[0], lo, hi);
        prop_assert!(run.rounds.iter().all(|&r| r == median_mvba_rounds(f)));
    }

    #[test]
    fn scenario_documents_round_trip(n in 4usize..20, pulses in 1u64..50, seed: u64, alpha in 0usize..3, ss: bool) {
        let mut c = ScenarioConfig::basic(n, (n - 1) / 3);
        c.pulses = pulses;
        c.seed = seed;
        c.alpha = alpha;
        c.self_stabilizing = ss;
        c.byzantine.kind = StrategyKind::Collude { target: Some(3) };
        c.byzantine.members = vec![ProcessId(1)];
        let text = c.to_json();
        let back = ScenarioConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_json(), text);
    }
}

#[test]
fn median_examples_without_faults() {
    let params = AgreementParams { n: 7, f: 2, alpha: 0, base: ThresholdBase::K };
    let run = |vals: &[i64]| {
        let inputs: Vec<Value> = vals.iter().map(|&v| Value::Int(v)).collect();
        let mut adv = ByzantineAdversary::new(StrategyKind::Silent, Layout::Median);
        run_median(params, &inputs, &[], &mut adv, 0).unwrap().honest_decisions()
    };
    assert!(run(&[7; 7]).iter().all(|d| *d == Ok(7)));
    assert!(run(&[1, 2, 3, 4, 5, 6, 7]).iter().all(|d| *d == Ok(4)));
    assert!(run(&[1, 9, 5, 5, 5, 2, 3]).iter().all(|d| *d == Ok(5)));
}

#[test]
fn smr_pulse_examples() {
    let params = AgreementParams { n: 4, f: 1, alpha: 0, base: ThresholdBase::K };
    let check = |machine: StateMachineSpec, state: i64, input: i64, expected: i64| {
        let replicas = vec![ReplicaState { input_value: Value::Int(input), current_state: state }; 4];
        let (after, outcomes) =
            smr_pulse(&machine, params, &replicas, &[Value::Int(input); 4], &[ProcessId(2)], StrategyKind::Random, 3).unwrap();
        for i in [0, 2, 3] {
            assert_eq!(after[i].current_state, expected, "{machine:?}");
            assert_eq!(outcomes[i].agreed_state, Some(state));
        }
    };
    check(StateMachineSpec::Identity { m: 10 }, 3, 8, 3);
    check(StateMachineSpec::Counter { m: 10 }, 7, 5, 2);
    check(StateMachineSpec::Register { m: 100 }, 0, 42, 42);
}

#[test]
fn simulation_is_deterministic() {
    let mut c = ScenarioConfig::basic(7, 2);
    c.pulses = 4;
    c.seed = 11;
    c.trace = pulse_bft::engine::Verbosity::Full;
    c.byzantine.kind = StrategyKind::Random;
    c.byzantine.members = vec![ProcessId(1), ProcessId(5)];
    c.inputs = pulse_bft::scenario::InputSpec::Uniform { lo: 0, hi: 9 };
    let cfg = validate_config(&c).unwrap();
    let a = run_simulation(&cfg).trace.to_jsonl();
    let b = run_simulation(&cfg).trace.to_jsonl();
    assert_eq!(a, b);
    assert!(a.lines().count() > 1000);
    c.seed = 12;
    let other = run_simulation(&validate_config(&c).unwrap()).trace.to_jsonl();
    assert_ne!(a, other);
}

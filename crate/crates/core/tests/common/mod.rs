#![allow(dead_code)]

use pulse_bft::faults::{ByzantineAdversary, Layout, ScriptSpace, StrategyKind};
use pulse_bft::ProcessId;
use rand::seq::index;
use rand::Rng;

/// Every adversary the simulator ships, with a label for reports.
pub fn catalog() -> Vec<(&'static str, StrategyKind)> {
    vec![
        ("silent", StrategyKind::Silent),
        ("random", StrategyKind::Random),
        ("equivocate", StrategyKind::EquivocateSplit { a: -5, b: 1000 }),
        ("collude-high", StrategyKind::Collude { target: Some(1_000_000) }),
        ("collude-low", StrategyKind::Collude { target: Some(-1_000_000) }),
        ("collude-edge", StrategyKind::Collude { target: None }),
        ("scripted", StrategyKind::Exhaustive { bound: 0 }),
    ]
}

/// `f` distinct members drawn uniformly.
pub fn random_members(n: usize, f: usize, rng: &mut impl Rng) -> Vec<ProcessId> {
    let mut ids: Vec<usize> = index::sample(rng, n, f).into_vec();
    ids.sort_unstable();
    ids.into_iter().map(ProcessId::from_index).collect()
}

/// An adversary for `kind`; scripted kinds get a uniformly drawn script.
pub fn adversary(kind: &StrategyKind, n: usize, members: &[ProcessId], layout: Layout, rng: &mut impl Rng) -> ByzantineAdversary {
    match kind {
        StrategyKind::Exhaustive { .. } => {
            let space = ScriptSpace::new(n, members);
            ByzantineAdversary::scripted(space.script(rng.gen_range(0..space.len())), layout)
        }
        k => ByzantineAdversary::new(k.clone(), layout),
    }
}

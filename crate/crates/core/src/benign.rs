//! Monte Carlo estimate of how often strong validity on the state survives
//! more uniformly random transient faults than the worst-case bound allows.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::campaign::benign_inequality;
use crate::faults::{StrategyKind, TransientField, TransientModel};
use crate::model::{validate_config, ProcessId};
use crate::scenario::ScenarioConfig;
use crate::sim::run_simulation;
use crate::smr::StateMachineSpec;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenignEstimate {
    pub n: usize,
    pub f: usize,
    pub alpha: usize,
    pub x: usize,
    pub z: u64,
    pub trials: u64,
    pub preserved: u64,
    pub rate: f64,
    /// 95% Wilson score interval for the rate.
    pub ci: (f64, f64),
    /// Multiplicity `w` of the most popular corrupted value, over trials.
    pub w_histogram: BTreeMap<usize, u64>,
    /// Trials in which the threshold inequality held.
    pub predicted: u64,
}

/// Wilson score interval for `successes` out of `trials` at normal quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// One-pulse scenario: the last `f` processes collude on the most popular
/// corrupted value, `x` others get a state drawn uniformly from `0..z`.
pub fn benign_scenario(n: usize, f: usize, alpha: usize, x: usize, z: u64, common: i64, seed: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig::basic(n, f);
    c.alpha = alpha;
    c.seed = seed;
    c.machine = StateMachineSpec::Identity { m: z.max(common as u64 + 1) as usize };
    c.initial_state = common;
    c.byzantine.kind = StrategyKind::Collude { target: None };
    c.byzantine.members = (n - f + 1..=n).map(|i| ProcessId(i as u32)).collect();
    c.transients = if x == 0 { TransientModel::None } else { TransientModel::Uniform { z, count: x, field: TransientField::State } };
    c
}

/// Runs `trials` independent pulses and reports how often every non-faulty
/// replica agreed on the state the clean replicas shared.
pub fn benign_monte_carlo(n: usize, f: usize, alpha: usize, x: usize, z: u64, trials: u64, seed: u64) -> BenignEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jobs: Vec<(u64, i64)> = (0..trials).map(|_| (rng.gen(), rng.gen_range(0..z.max(1)) as i64)).collect();
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get());
    let chunk = jobs.len().div_ceil(workers).max(1);
    let results: Vec<(bool, usize, bool)> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&(trial_seed, common)| {
                            let cfg = validate_config(&benign_scenario(n, f, alpha, x, z, common, trial_seed))
                                .expect("benign scenario is structurally valid");
                            let out = run_simulation(&cfg);
                            let rec = &out.pulses[0];
                            let w = rec.popular.map_or(0, |(_, w)| w);
                            let held = out.error.is_none()
                                && rec.honest().all(|i| rec.outcomes[i].agreed_state == Some(common));
                            (held, w, benign_inequality(n, alpha, rec.corrupted_count(), w))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("benign worker panicked")).collect()
    });

    let preserved = results.iter().filter(|r| r.0).count() as u64;
    let mut w_histogram = BTreeMap::new();
    for r in &results {
        *w_histogram.entry(r.1).or_default() += 1;
    }
    BenignEstimate {
        n,
        f,
        alpha,
        x,
        z,
        trials,
        preserved,
        rate: if trials == 0 { 1.0 } else { preserved as f64 / trials as f64 },
        ci: wilson_interval(preserved, trials, 1.96),
        w_histogram,
        predicted: results.iter().filter(|r| r.2).count() as u64,
    }
}

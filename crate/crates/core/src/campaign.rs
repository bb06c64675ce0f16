//! Seed campaigns: run many simulations, check every pulse, aggregate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::model::{median_mvba_rounds, round_budget, FaultBounds, ValidatedConfig, Value};
use crate::scenario::ScenarioConfig;
use crate::sim::{run_simulation, PulseRecord, SimOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    /// Non-faulty replicas agree on input, state and next state.
    Consistency,
    /// The agreed input lies within the range of non-Byzantine inputs.
    IntervalValidity,
    /// The agreed state equals the state all clean replicas share.
    StrongStateValidity,
    /// Each agreement and each pulse take exactly their round budget.
    RoundExactness,
    /// The engine refused to continue.
    EngineError,
}

impl Property {
    pub const ALL: [Property; 5] = [
        Property::Consistency,
        Property::IntervalValidity,
        Property::StrongStateValidity,
        Property::RoundExactness,
        Property::EngineError,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub property: Property,
    pub seed: u64,
    pub pulse: u64,
    /// The faults in this pulse were within the tolerated bounds.
    pub in_bounds: bool,
    pub detail: String,
}

/// Outcome of one pulse against the strong-validity threshold inequality
/// `⌈n/3⌉−1+w < ⌊n/3⌋+1+α < ⌊2n/3⌋+1−x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct BenignKey {
    pub x: usize,
    pub w: usize,
    pub predicted: bool,
    pub observed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BenignRow {
    #[serde(flatten)]
    pub key: BenignKey,
    pub pulses: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CampaignReport {
    pub config: ScenarioConfig,
    pub seeds: (u64, u64),
    pub runs: u64,
    pub pulses_checked: u64,
    pub violation_counts: BTreeMap<Property, u64>,
    pub violations: Vec<Violation>,
    pub benign: Vec<BenignRow>,
    /// Not serialized: reports must be byte-identical across executions.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl CampaignReport {
    pub fn total_violations(&self) -> u64 {
        self.violation_counts.values().sum()
    }

    pub fn count(&self, p: Property) -> u64 {
        self.violation_counts.get(&p).copied().unwrap_or(0)
    }
}

/// `⌈n/3⌉−1+w < ⌊n/3⌋+1+α < ⌊2n/3⌋+1−x`
pub fn benign_inequality(n: usize, alpha: usize, x: usize, w: usize) -> bool {
    let threshold = n / 3 + 1 + alpha;
    n.div_ceil(3) - 1 + w < threshold && threshold + x < 2 * n / 3 + 1
}

/// Whether a pulse's faults are within the bounds the guarantees assume.
pub fn pulse_in_bounds(bounds: FaultBounds, record: &PulseRecord) -> bool {
    let byz = record.byzantine.iter().filter(|&&b| b).count();
    let x = record.corrupted_count();
    3 * bounds.f_max < bounds.n && byz <= bounds.f_max && x <= bounds.r_max && bounds.r_max <= bounds.transient_limit()
}

/// What one run contributed to a campaign.
#[derive(Clone, Debug, Default)]
pub struct RunFindings {
    pub pulses_checked: u64,
    pub violations: Vec<Violation>,
    pub benign: Vec<BenignKey>,
}

/// Checks every pulse of a finished run.
pub fn check_run(cfg: &ValidatedConfig, outcome: &SimOutcome) -> RunFindings {
    let c = &cfg.config;
    let bounds = cfg.bounds();
    let mut out = RunFindings::default();
    let flag = |out: &mut RunFindings, property, pulse, in_bounds, detail: String| {
        out.violations.push(Violation { property, seed: c.seed, pulse, in_bounds, detail });
    };
    if let Some(e) = &outcome.error {
        let pulse = outcome.pulses.last().map_or(1, |p| p.pulse);
        flag(&mut out, Property::EngineError, pulse, true, e.to_string());
    }
    let l = median_mvba_rounds(c.f_max);
    let b = round_budget(c.n, c.f_max);
    for rec in &outcome.pulses {
        // a run that starts mid-pulse has no defined first pulse
        if !rec.full {
            continue;
        }
        let complete = rec.rounds == b;
        out.pulses_checked += 1;
        let ib = pulse_in_bounds(bounds, rec);
        let honest: Vec<usize> = rec.honest().collect();
        if !complete {
            if outcome.error.is_none() {
                flag(&mut out, Property::RoundExactness, rec.pulse, ib, format!("pulse took {} rounds, budget {b}", rec.rounds));
            }
            continue;
        }

        for &i in &honest {
            let o = &rec.outcomes[i];
            if o.input_rounds != l || o.state_rounds != l {
                let detail = format!("process {} agreed in {}+{} rounds, expected {l} each", i + 1, o.input_rounds, o.state_rounds);
                flag(&mut out, Property::RoundExactness, rec.pulse, ib, detail);
                break;
            }
        }

        let first = &rec.outcomes[honest[0]];
        let fields = |i: usize| {
            let o = &rec.outcomes[i];
            (o.agreed_input, o.agreed_state, o.next_state)
        };
        if let Some(&i) = honest.iter().find(|&&i| fields(i) != fields(honest[0])) {
            let detail = format!(
                "process {} has {:?}, process {} has {:?}",
                honest[0] + 1,
                fields(honest[0]),
                i + 1,
                fields(i)
            );
            flag(&mut out, Property::Consistency, rec.pulse, ib, detail);
        }

        let inputs = honest.iter().filter_map(|&i| rec.proposed[i].input_value.as_int());
        let range = inputs.fold(None, |acc: Option<(i64, i64)>, v| Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v)))));
        for &i in &honest {
            let agreed = rec.outcomes[i].agreed_input;
            let ok = match (agreed, range) {
                (Some(Value::Int(v)), Some((lo, hi))) => (lo..=hi).contains(&v),
                _ => false,
            };
            if let (false, Some(range)) = (ok, range) {
                let detail = format!("process {} agreed on input {:?}, honest range {:?}", i + 1, agreed, range);
                flag(&mut out, Property::IntervalValidity, rec.pulse, ib, detail);
                break;
            }
        }

        if let Some(s) = rec.common_state() {
            let x = rec.corrupted_count();
            let w = rec.popular.map_or(0, |(_, w)| w);
            let held = honest.iter().all(|&i| rec.outcomes[i].agreed_state == Some(s));
            out.benign.push(BenignKey { x, w, predicted: benign_inequality(c.n, c.alpha, x, w), observed: held });
            if !held {
                let detail = format!("common state {s}, agreed {:?}", first.agreed_state);
                flag(&mut out, Property::StrongStateValidity, rec.pulse, ib, detail);
            }
        }
    }
    out
}

/// Runs `base` once per seed in the range, checking every pulse.
pub fn run_campaign(base: &ValidatedConfig, seeds: Range<u64>) -> CampaignReport {
    let started = Instant::now();
    let seed_list: Vec<u64> = seeds.clone().collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seed_list.len().max(1));
    let chunk = seed_list.len().div_ceil(workers).max(1);
    let findings: Vec<RunFindings> = std::thread::scope(|scope| {
        let handles: Vec<_> = seed_list
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&seed| {
                            let mut cfg = base.clone();
                            cfg.config.seed = seed;
                            check_run(&cfg, &run_simulation(&cfg))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("campaign worker panicked")).collect()
    });

    let mut report = CampaignReport {
        config: base.config.clone(),
        seeds: (seeds.start, seeds.end),
        runs: seed_list.len() as u64,
        pulses_checked: 0,
        violation_counts: Property::ALL.iter().map(|&p| (p, 0)).collect(),
        violations: Vec::new(),
        benign: Vec::new(),
        wall_clock: Duration::ZERO,
    };
    let mut benign: BTreeMap<BenignKey, u64> = BTreeMap::new();
    for f in findings {
        report.pulses_checked += f.pulses_checked;
        for v in f.violations {
            *report.violation_counts.entry(v.property).or_default() += 1;
            report.violations.push(v);
        }
        for k in f.benign {
            *benign.entry(k).or_default() += 1;
        }
    }
    report.benign = benign.into_iter().map(|(key, pulses)| BenignRow { key, pulses }).collect();
    report.wall_clock = started.elapsed();
    report
}

/// Report for one already finished run.
pub fn single_run_report(cfg: &ValidatedConfig, outcome: &SimOutcome) -> CampaignReport {
    let findings = check_run(cfg, outcome);
    let seed = cfg.config.seed;
    let mut report = CampaignReport {
        config: cfg.config.clone(),
        seeds: (seed, seed + 1),
        runs: 1,
        pulses_checked: findings.pulses_checked,
        violation_counts: Property::ALL.iter().map(|&p| (p, 0)).collect(),
        violations: Vec::new(),
        benign: Vec::new(),
        wall_clock: Duration::ZERO,
    };
    let mut benign: BTreeMap<BenignKey, u64> = BTreeMap::new();
    for k in findings.benign {
        *benign.entry(k).or_default() += 1;
    }
    report.benign = benign.into_iter().map(|(key, pulses)| BenignRow { key, pulses }).collect();
    for v in findings.violations {
        *report.violation_counts.entry(v.property).or_default() += 1;
        report.violations.push(v);
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
}

/// Stable serialization of a report.
pub fn emit_report(report: &CampaignReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).expect("report serializes");
            out.push(b'\n');
            out
        }
        ReportFormat::Text => {
            let c = &report.config;
            let mut s = String::new();
            let _ = writeln!(
                s,
                "campaign n={} f_max={} r_max={} alpha={} pulses={} seeds={}..{}",
                c.n, c.f_max, c.r_max, c.alpha, c.pulses, report.seeds.0, report.seeds.1
            );
            let _ = writeln!(s, "runs {} pulses checked {}", report.runs, report.pulses_checked);
            for (p, count) in &report.violation_counts {
                let _ = writeln!(s, "{:<24} {count}", serde_json::to_value(p).unwrap().as_str().unwrap());
            }
            if !report.benign.is_empty() {
                let _ = writeln!(s, "benign ledger: x w predicted observed pulses");
                for row in &report.benign {
                    let k = row.key;
                    let _ = writeln!(s, "  {} {} {} {} {}", k.x, k.w, k.predicted, k.observed, row.pulses);
                }
            }
            for v in &report.violations {
                let bounds = if v.in_bounds { "in-bounds" } else { "out-of-bounds" };
                let _ = writeln!(
                    s,
                    "violation {} seed={} pulse={} {bounds}: {}",
                    serde_json::to_value(v.property).unwrap().as_str().unwrap(),
                    v.seed,
                    v.pulse,
                    v.detail
                );
            }
            s.into_bytes()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faults::{StrategyKind, TransientModel};
    use crate::model::{validate_config, ProcessId};

    fn cfg(c: ScenarioConfig) -> ValidatedConfig {
        validate_config(&c).unwrap()
    }

    #[test]
    fn benign_inequality_table() {
        assert!(benign_inequality(12, 1, 1, 0));
        assert!(benign_inequality(12, 1, 1, 2));
        assert!(!benign_inequality(12, 1, 1, 3));
        // x = 4 breaks the right-hand side regardless of w
        assert!(!benign_inequality(12, 1, 4, 0));
        assert!(benign_inequality(12, 1, 2, 0));
        assert!(!benign_inequality(12, 1, 3, 0));
    }

    #[test]
    fn fault_free_campaign_is_clean() {
        let mut c = ScenarioConfig::basic(4, 1);
        c.pulses = 3;
        let r = run_campaign(&cfg(c), 0..20);
        assert_eq!(r.runs, 20);
        assert_eq!(r.pulses_checked, 60);
        assert_eq!(r.total_violations(), 0, "{:?}", r.violations);
    }

    #[test]
    fn empty_campaign_is_header_only() {
        let r = run_campaign(&cfg(ScenarioConfig::basic(4, 1)), 5..5);
        assert_eq!(r.runs, 0);
        let text = String::from_utf8(emit_report(&r, ReportFormat::Text)).unwrap();
        assert!(!text.contains("violation "));
        assert!(text.starts_with("campaign n=4"));
    }

    #[test]
    fn violations_carry_their_seed() {
        let mut c = ScenarioConfig::basic(12, 3);
        c.alpha = 1;
        c.pulses = 2;
        c.machine = crate::smr::StateMachineSpec::Identity { m: 100 };
        c.initial_state = 70;
        c.byzantine.kind = StrategyKind::Collude { target: Some(5) };
        c.byzantine.members = (10..=12).map(ProcessId).collect();
        c.transients = TransientModel::Malicious { target: 5, count: 3, field: Default::default() };
        let r = run_campaign(&cfg(c), 0..4);
        assert!(r.count(Property::StrongStateValidity) > 0);
        let v = &r.violations[0];
        assert!(!v.in_bounds);
        let text = String::from_utf8(emit_report(&r, ReportFormat::Text)).unwrap();
        assert!(text.contains(&format!("seed={}", v.seed)));
    }

    #[test]
    fn reports_are_byte_identical() {
        let mut c = ScenarioConfig::basic(7, 2);
        c.byzantine.kind = StrategyKind::Random;
        c.byzantine.members = vec![ProcessId(2), ProcessId(6)];
        c.pulses = 2;
        let a = run_campaign(&cfg(c.clone()), 0..6);
        let b = run_campaign(&cfg(c), 0..6);
        assert_eq!(emit_report(&a, ReportFormat::Json), emit_report(&b, ReportFormat::Json));
        assert_eq!(emit_report(&a, ReportFormat::Text), emit_report(&b, ReportFormat::Text));
    }
}

use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pulse_bft::benign::benign_monte_carlo;
use pulse_bft::campaign::{emit_report, run_campaign, single_run_report, ReportFormat};
use pulse_bft::engine::Trace;
use pulse_bft::median::ThresholdBase;
use pulse_bft::{parse_scenario, run_simulation, validate_config, ScenarioConfig, ValidatedConfig};

#[derive(Parser)]
#[command(name = "pulse-bft", about = "Synchronous Byzantine agreement and replicated state machine simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
    /// Override the scenario's decision threshold base.
    #[arg(long, global = true)]
    threshold_base: Option<ThresholdBase>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and check it.
    Run {
        scenario: PathBuf,
        /// Write the JSON-lines trace here.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Run a scenario once per seed.
    Campaign {
        scenario: PathBuf,
        /// Half-open seed range, e.g. 0..100.
        #[arg(long, value_parser = parse_range)]
        seeds: Range<u64>,
    },
    /// Estimate strong-validity preservation under random transient faults.
    Benign {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        f: usize,
        #[arg(long, default_value_t = 0)]
        alpha: usize,
        #[arg(long)]
        x: usize,
        #[arg(long, default_value_t = 1 << 16)]
        z: u64,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replay a trace, compare it byte for byte, and check its invariants.
    Check { trace: PathBuf },
}

fn parse_range(s: &str) -> Result<Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got {s}"))?;
    let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
    if b < a {
        return Err(format!("empty range {s}"));
    }
    Ok(a..b)
}

fn load(path: &Path, base: Option<ThresholdBase>) -> Result<ValidatedConfig> {
    let mut cfg = parse_scenario(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(base) = base {
        cfg.config.threshold_base = base;
        cfg = cfg.revalidate()?;
    }
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u64> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Run { scenario, trace_out } => {
            let cfg = load(&scenario, cli.threshold_base)?;
            let outcome = run_simulation(&cfg);
            if let Some(path) = trace_out {
                std::fs::write(&path, outcome.trace.to_jsonl()).with_context(|| format!("writing {}", path.display()))?;
            }
            let report = single_run_report(&cfg, &outcome);
            stdout.write_all(&emit_report(&report, cli.format))?;
            Ok(report.total_violations())
        }
        Command::Campaign { scenario, seeds } => {
            let cfg = load(&scenario, cli.threshold_base)?;
            let report = run_campaign(&cfg, seeds);
            stdout.write_all(&emit_report(&report, cli.format))?;
            eprintln!("wall clock {:.3}s", report.wall_clock.as_secs_f64());
            Ok(report.total_violations())
        }
        Command::Benign { n, f, alpha, x, z, trials, seed } => {
            if trials == 0 {
                bail!("--trials must be at least 1");
            }
            let est = benign_monte_carlo(n, f, alpha, x, z, trials, seed);
            match cli.format {
                ReportFormat::Json => writeln!(stdout, "{}", serde_json::to_string_pretty(&est)?)?,
                ReportFormat::Text => {
                    writeln!(stdout, "benign n={n} f={f} alpha={alpha} x={x} z={z} trials={trials} seed={seed}")?;
                    writeln!(stdout, "preserved {} rate {:.4} ci95 [{:.4}, {:.4}]", est.preserved, est.rate, est.ci.0, est.ci.1)?;
                    writeln!(stdout, "inequality held in {} trials", est.predicted)?;
                    for (w, count) in &est.w_histogram {
                        writeln!(stdout, "  w={w} {count}")?;
                    }
                }
            }
            // an estimate has no invariants to violate
            Ok(0)
        }
        Command::Check { trace } => {
            let text = std::fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let recorded = Trace::from_jsonl(&text).context("parsing trace")?;
            let header = recorded
                .events
                .iter()
                .find(|e| e.kind == "scenario")
                .context("trace has no scenario header")?;
            let config: ScenarioConfig =
                serde_json::from_value(header.data["config"].clone()).context("scenario header")?;
            let cfg = validate_config(&config)?;
            let outcome = run_simulation(&cfg);
            if outcome.trace.to_jsonl() != text {
                bail!("replay diverges from the recorded trace");
            }
            let report = single_run_report(&cfg, &outcome);
            stdout.write_all(&emit_report(&report, cli.format))?;
            Ok(report.total_violations())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

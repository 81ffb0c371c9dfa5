//! `meshserve` command-line runner.
//!
//! Exit codes: 0 on success, 1 when a run or validation fails, 2 when a
//! configuration file cannot be read, parsed or validated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use meshserve::config::{parse_scenario, parse_theory, ConfigError};
use meshserve::sim::{metrics, run_with, write_outputs, LedgerMode, MetricsReport, Mode, RunOptions, Scenario, Summary};
use meshserve::theory::{cross_validate, detect_equilibrium, integrate, trajectory_csv};
use meshserve::validate::{report_json, run_criterion, ValidateOptions, CRITERIA};

#[derive(Parser)]
#[command(name = "meshserve", version, about = "Decentralized LLM serving simulator and stake dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario in one or more modes and seeds.
    Sim(SimArgs),
    /// Integrate the stake dynamics for a parameter file.
    Theory(TheoryArgs),
    /// Run all three scheduling modes per seed and tabulate.
    Compare(CompareArgs),
    /// Run the acceptance checks and print a JSON report.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file, or `bundled:<name>`.
    #[arg(long, env = "MESHSERVE_CONFIG")]
    config: PathBuf,
    /// Seeds to run; defaults to the scenario seed.
    #[arg(long = "seed", env = "MESHSERVE_SEED", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, env = "MESHSERVE_OUT")]
    out: Option<PathBuf>,
    #[arg(long = "ledger-mode", env = "MESHSERVE_LEDGER_MODE", default_value = "shared")]
    ledger_mode: LedgerMode,
    /// Width of the windowed metrics in seconds; defaults to the scenario value.
    #[arg(long, env = "MESHSERVE_WINDOW")]
    window: Option<f64>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long = "mode", env = "MESHSERVE_MODE", value_delimiter = ',', default_value = "decentralized")]
    modes: Vec<Mode>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct TheoryArgs {
    /// Theory parameter file, or `bundled:<name>`.
    #[arg(long, env = "MESHSERVE_CONFIG")]
    config: PathBuf,
    #[arg(long, env = "MESHSERVE_OUT")]
    out: Option<PathBuf>,
    /// Also run the matched agent scenario and report the share gap.
    #[arg(long)]
    cross_validate: bool,
    /// Seeds for cross-validation; defaults to the file value.
    #[arg(long, env = "MESHSERVE_SEEDS")]
    seeds: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Criteria to run, e.g. `--only 2,8`.
    #[arg(long, value_delimiter = ',')]
    only: Vec<u32>,
    /// Corrupt a block the ledger check expects to verify.
    #[arg(long)]
    inject_tamper: bool,
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

fn config_failure(path: &Path, e: ConfigError) -> Failure {
    Failure::Config(anyhow::Error::new(e).context(format!("config {}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sim(a) => cmd_sim(a),
        Command::Theory(a) => cmd_theory(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load(run: &RunArgs) -> Result<(Scenario, Vec<u64>, f64), Failure> {
    let scenario = parse_scenario(&run.config).map_err(|e| config_failure(&run.config, e))?;
    let seeds = if run.seeds.is_empty() {
        vec![scenario.seed]
    } else {
        run.seeds.clone()
    };
    let window = run.window.unwrap_or(scenario.window);
    if !(window.is_finite() && window > 0.0) {
        return Err(Failure::Config(anyhow::anyhow!("--window must be positive")));
    }
    Ok((scenario, seeds, window))
}

fn cmd_sim(args: SimArgs) -> Result<ExitCode, Failure> {
    let (scenario, seeds, window) = load(&args.run)?;
    let jobs: Vec<(Mode, u64)> = args
        .modes
        .iter()
        .flat_map(|m| seeds.iter().map(move |s| (*m, *s)))
        .collect();
    let summaries: Vec<Summary> = jobs
        .par_iter()
        .map(|&(mode, seed)| -> anyhow::Result<Summary> {
            let opts = RunOptions::new(mode).seed(seed).ledger(args.run.ledger_mode);
            let out = run_with(&scenario, opts)?;
            let report = match &args.run.out {
                Some(dir) => {
                    let dir = dir.join(format!("{mode}-seed{seed}"));
                    write_outputs(&dir, &scenario, opts, &out, window)
                        .with_context(|| format!("writing {}", dir.display()))?
                }
                None => metrics(&out.trace, scenario.slo_threshold, window),
            };
            Ok(Summary::new(&scenario, opts, &report, &out))
        })
        .collect::<anyhow::Result<_>>()?;
    let table = runs_csv(&summaries);
    if let Some(dir) = &args.run.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("runs.csv"), &table).context("writing runs.csv")?;
    }
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

/// Reduces per-run summaries to one CSV row each.
fn runs_csv(summaries: &[Summary]) -> String {
    let mut out = String::from(
        "scenario,mode,ledger,seed,user_requests,completed,open,slo_attainment,mean_latency,p99_latency,alpha,duels,supply_identity\n",
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            s.scenario,
            s.mode,
            s.ledger,
            s.seed,
            s.user_requests,
            s.completed,
            s.open_at_horizon,
            s.slo_attainment,
            s.mean_latency,
            s.p99_latency,
            s.alpha,
            s.duels_settled,
            s.supply_identity
        );
    }
    out
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Row {
    mode: Mode,
    slo: (f64, f64),
    latency: (f64, f64),
    p99: (f64, f64),
}

fn compare_rows(scenario: &Scenario, seeds: &[u64], ledger: LedgerMode, window: f64) -> anyhow::Result<Vec<Row>> {
    let jobs: Vec<(Mode, u64)> = Mode::ALL
        .into_iter()
        .flat_map(|m| seeds.iter().map(move |s| (m, *s)))
        .collect();
    let reports: Vec<(Mode, MetricsReport)> = jobs
        .par_iter()
        .map(|&(mode, seed)| -> anyhow::Result<_> {
            let out = run_with(scenario, RunOptions::new(mode).seed(seed).ledger(ledger))?;
            Ok((mode, metrics(&out.trace, scenario.slo_threshold, window)))
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(Mode::ALL
        .into_iter()
        .map(|mode| {
            let rs: Vec<&MetricsReport> = reports.iter().filter(|(m, _)| *m == mode).map(|(_, r)| r).collect();
            let col = |f: fn(&MetricsReport) -> f64| mean_sd(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            Row {
                mode,
                slo: col(|r| r.slo_attainment),
                latency: col(|r| r.latency.mean),
                p99: col(|r| r.latency.p99),
            }
        })
        .collect())
}

fn compare_text(scenario: &Scenario, seeds: &[u64], rows: &[Row]) -> String {
    let mut out = format!(
        "scenario {} ({} seed{}, SLO {} s)\n",
        scenario.name,
        seeds.len(),
        if seeds.len() == 1 { "" } else { "s" },
        scenario.slo_threshold
    );
    let _ = writeln!(out, "{:<14} {:>17} {:>20} {:>20}", "mode", "SLO attainment", "mean latency (s)", "p99 latency (s)");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>17} {:>20} {:>20}",
            r.mode.as_str(),
            format!("{:.4} ± {:.4}", r.slo.0, r.slo.1),
            format!("{:.2} ± {:.2}", r.latency.0, r.latency.1),
            format!("{:.2} ± {:.2}", r.p99.0, r.p99.1),
        );
    }
    out
}

fn compare_csv(seeds: &[u64], rows: &[Row]) -> String {
    let mut out = String::from("mode,seeds,slo_mean,slo_sd,latency_mean,latency_sd,p99_mean,p99_sd\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.mode,
            seeds.len(),
            r.slo.0,
            r.slo.1,
            r.latency.0,
            r.latency.1,
            r.p99.0,
            r.p99.1
        );
    }
    out
}

fn cmd_compare(args: CompareArgs) -> Result<ExitCode, Failure> {
    let (scenario, seeds, window) = load(&args.run)?;
    let rows = compare_rows(&scenario, &seeds, args.run.ledger_mode, window)?;
    let text = compare_text(&scenario, &seeds, &rows);
    if let Some(dir) = &args.run.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("compare.txt"), &text).context("writing compare.txt")?;
        std::fs::write(dir.join("compare.csv"), compare_csv(&seeds, &rows)).context("writing compare.csv")?;
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_theory(args: TheoryArgs) -> Result<ExitCode, Failure> {
    let cfg = parse_theory(&args.config).map_err(|e| config_failure(&args.config, e))?;
    let traj = integrate(&cfg.params, cfg.horizon, cfg.dt).context("integrating stake dynamics")?;
    let last = traj.last().expect("trajectory has a start point");
    let mut summary = serde_json::json!({
        "version": meshserve::VERSION,
        "horizon": cfg.horizon,
        "dt": cfg.dt,
        "terminal_stake": last.s,
        "terminal_share": last.p,
        "terminal_q_bar": last.q_bar,
        "terminal_delta": last.delta,
    });
    println!("t = {}: shares {:?}, Q̄ = {:.4}", last.t, last.p, last.q_bar);
    if !cfg.group.is_empty() {
        let eq = detect_equilibrium(&traj, &cfg.group);
        println!(
            "group {:?}: share {:.4} -> {:.4}, non-decreasing after {}",
            cfg.group,
            eq.initial_p_h,
            eq.terminal_p_h,
            eq.monotone_after.map_or("never".to_string(), |t| format!("t = {t}"))
        );
        summary["equilibrium"] = serde_json::to_value(&eq).context("serializing report")?;
    }
    if args.cross_validate {
        let seeds = args.seeds.unwrap_or(cfg.seeds).max(1);
        let x = cross_validate(&cfg.params, &cfg.bridge, cfg.horizon, cfg.dt, seeds).context("cross-validation")?;
        println!(
            "simulation over {} seeds: max share gap {:.4} at t = {}, ordering {}",
            x.seeds,
            x.gap,
            x.gap_at,
            if x.ordering_agrees { "agrees" } else { "differs" }
        );
        summary["cross_validation"] = serde_json::to_value(&x).context("serializing report")?;
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("trajectory.csv"), trajectory_csv(&traj)).context("writing trajectory.csv")?;
        let json = serde_json::to_string_pretty(&summary).context("serializing summary")?;
        std::fs::write(dir.join("summary.json"), json + "\n").context("writing summary.json")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode, Failure> {
    if let Some(bad) = args.only.iter().find(|id| !CRITERIA.iter().any(|(i, _)| i == *id)) {
        return Err(Failure::Config(anyhow::anyhow!("no criterion {bad}")));
    }
    let opts = ValidateOptions {
        inject_tamper: args.inject_tamper,
    };
    let results: Vec<_> = CRITERIA
        .iter()
        .filter(|(id, _)| args.only.is_empty() || args.only.contains(id))
        .filter_map(|(id, _)| run_criterion(*id, opts))
        .collect();
    let report = report_json(&results);
    println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
    Ok(if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

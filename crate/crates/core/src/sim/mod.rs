//! Deterministic discrete-event simulator with single-node, centralized and
//! decentralized scheduling modes.

mod engine;
pub mod metrics;
pub mod scenario;
pub mod trace;
pub mod workload;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use engine::RunArtifacts;
pub use metrics::{metrics, MetricsReport};
pub use scenario::{ChurnAction, ChurnEvent, NodeSpec, Phase, Scenario, ValidationError};
pub use trace::{Trace, TraceEvent, TraceRecord};
pub use workload::{generate_workload, Arrival};

use crate::ids::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every node serves only its own arrivals.
    Single,
    /// An omniscient dispatcher sends each arrival to the node with the
    /// earliest predicted completion.
    Centralized,
    /// Stake-weighted delegation with probes, payments and duels.
    Decentralized,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Single, Mode::Centralized, Mode::Decentralized];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Centralized => "centralized",
            Mode::Decentralized => "decentralized",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected single, centralized or decentralized)"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    /// One serialized chain validated once per block.
    #[default]
    Shared,
    /// A replica per node; blocks need a majority of online peers.
    Chain,
}

impl FromStr for LedgerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shared" => Ok(LedgerMode::Shared),
            "chain" => Ok(LedgerMode::Chain),
            _ => Err(format!("unknown ledger mode `{s}` (expected shared or chain)")),
        }
    }
}

impl fmt::Display for LedgerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LedgerMode::Shared => "shared",
            LedgerMode::Chain => "chain",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: Mode,
    pub ledger: LedgerMode,
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
}

impl RunOptions {
    pub fn new(mode: Mode) -> Self {
        RunOptions {
            mode,
            ledger: LedgerMode::Shared,
            seed: None,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn ledger(mut self, ledger: LedgerMode) -> Self {
        self.ledger = ledger;
        self
    }
}

/// Runs a scenario and returns the full artifacts.
pub fn run_with(scenario: &Scenario, opts: RunOptions) -> Result<RunArtifacts, ValidationError> {
    scenario.validate()?;
    let seed = opts.seed.unwrap_or(scenario.seed);
    Ok(engine::Engine::new(scenario, opts.mode, opts.ledger, seed).run())
}

/// Runs a scenario with its own seed and the shared ledger.
pub fn run(scenario: &Scenario, mode: Mode) -> Result<(MetricsReport, Trace), ValidationError> {
    let out = run_with(scenario, RunOptions::new(mode))?;
    let report = metrics(&out.trace, scenario.slo_threshold, scenario.window);
    Ok((report, out.trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: String,
    pub scenario: String,
    pub mode: Mode,
    pub ledger: LedgerMode,
    pub seed: u64,
    pub user_requests: u64,
    pub completed: u64,
    pub open_at_horizon: u64,
    pub slo_threshold: f64,
    pub slo_attainment: f64,
    pub mean_latency: f64,
    pub p50_latency: f64,
    pub p90_latency: f64,
    pub p99_latency: f64,
    pub alpha: f64,
    pub delegations: u64,
    pub duels_settled: u64,
    pub extra_duel_requests: u64,
    pub supply_identity: bool,
    pub ledger_height: u64,
    pub terminal_credit: Vec<(NodeId, String)>,
}

impl Summary {
    pub fn new(scenario: &Scenario, opts: RunOptions, report: &MetricsReport, out: &RunArtifacts) -> Self {
        Summary {
            version: crate::VERSION.to_string(),
            scenario: scenario.name.clone(),
            mode: opts.mode,
            ledger: opts.ledger,
            seed: opts.seed.unwrap_or(scenario.seed),
            user_requests: report.user_requests,
            completed: report.completed,
            open_at_horizon: report.open_at_horizon,
            slo_threshold: scenario.slo_threshold,
            slo_attainment: report.slo_attainment,
            mean_latency: report.latency.mean,
            p50_latency: report.latency.p50,
            p90_latency: report.latency.p90,
            p99_latency: report.latency.p99,
            alpha: report.alpha,
            delegations: report.delegations,
            duels_settled: report.duels_settled,
            extra_duel_requests: report.extra_duel_requests,
            supply_identity: out.ledger.supply_identity_holds(),
            ledger_height: out.ledger.height,
            terminal_credit: out
                .ledger
                .balances
                .iter()
                .map(|(n, a)| (n.clone(), a.total().to_string()))
                .collect(),
        }
    }
}

/// Writes `events.jsonl`, `metrics.csv`, `summary.json` and `credits.csv`
/// into `dir`, creating it if needed.
pub fn write_outputs(
    dir: &Path,
    scenario: &Scenario,
    opts: RunOptions,
    out: &RunArtifacts,
    window: f64,
) -> std::io::Result<MetricsReport> {
    std::fs::create_dir_all(dir)?;
    let report = metrics(&out.trace, scenario.slo_threshold, window);
    std::fs::write(dir.join("events.jsonl"), out.trace.to_jsonl())?;
    std::fs::write(dir.join("metrics.csv"), metrics::windows_csv(&report))?;
    std::fs::write(dir.join("credits.csv"), metrics::credits_csv(&report))?;
    let summary = Summary::new(scenario, opts, &report, out);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(report)
}

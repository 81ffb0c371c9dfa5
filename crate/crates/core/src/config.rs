//! TOML configuration files and the bundled scenario library.
//!
//! A scenario file has top-level run settings, `[economics]`, `[duel]`,
//! `[network]`, `[gossip]` and `[tokens]` tables, and one `[[nodes]]` entry
//! per node with `[nodes.server]` (user-level policy), `[nodes.model]`
//! (mock backend) and `[[nodes.schedule]]` arrival phases. Unknown keys are
//! rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::sim::{Scenario, ValidationError};
use crate::theory::{TheoryConfig, TheoryError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid {0}")]
    Validation(#[from] ValidationError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unknown bundled scenario `{0}`")]
    UnknownBundled(String),
    #[error("invalid theory parameters: {0}")]
    Theory(#[from] TheoryError),
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Deserializes TOML, mapping errors to the line they occur on.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    if text.trim().is_empty() {
        return Err(ConfigError::Parse {
            line: 1,
            reason: "empty file".into(),
        });
    }
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        reason: e.message().trim().to_string(),
    })
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario, ConfigError> {
    let scenario: Scenario = parse_toml(text)?;
    scenario.validate()?;
    Ok(scenario)
}

/// Reads a scenario from disk, or from the bundled library when `path` is
/// `bundled:<name>` or a bare bundled name that does not exist on disk.
pub fn parse_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let s = path.to_string_lossy();
    if let Some(name) = s.strip_prefix("bundled:") {
        return bundled_scenario(name);
    }
    if !path.exists() && bundled(&s).is_some() {
        return bundled_scenario(&s);
    }
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: s.to_string(),
        source,
    })?;
    parse_scenario_str(&text)
}

macro_rules! library {
    ($($name:literal),* $(,)?) => {
        /// Scenario files shipped with the crate, by name.
        pub const BUNDLED: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../scenarios/", $name, ".toml")))),*
        ];
    };
}

library!(
    "setting1",
    "setting2",
    "setting3",
    "setting4",
    "churn_join",
    "churn_leave",
    "stake_routing",
    "accept_ablation",
    "offload_ablation",
    "duel_overhead",
    "duel_pd_005",
    "duel_pd_010",
    "duel_pd_025",
    "quality",
    "bridge",
);

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn bundled_scenario(name: &str) -> Result<Scenario, ConfigError> {
    let text = bundled(name).ok_or_else(|| ConfigError::UnknownBundled(name.to_string()))?;
    parse_scenario_str(text)
}

/// Theory parameter files shipped with the crate, by name.
pub const THEORY_BUNDLED: &[(&str, &str)] = &[
    ("bridge", include_str!("../theory/bridge.toml")),
    ("two_node", include_str!("../theory/two_node.toml")),
];

pub fn parse_theory_str(text: &str) -> Result<TheoryConfig, ConfigError> {
    let config: TheoryConfig = parse_toml(text)?;
    config.validate()?;
    Ok(config)
}

/// Reads a theory parameter file, with the same `bundled:` lookup as
/// [`parse_scenario`].
pub fn parse_theory(path: &Path) -> Result<TheoryConfig, ConfigError> {
    let s = path.to_string_lossy();
    let lookup = |name: &str| THEORY_BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t);
    let name = s.strip_prefix("bundled:").map(str::to_string).or_else(|| {
        (!path.exists() && lookup(&s).is_some()).then(|| s.to_string())
    });
    if let Some(name) = name {
        let text = lookup(&name).ok_or(ConfigError::UnknownBundled(name))?;
        return parse_theory_str(text);
    }
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: s.to_string(),
        source,
    })?;
    parse_theory_str(&text)
}

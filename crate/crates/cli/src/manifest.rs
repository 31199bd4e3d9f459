//! Files that travel between runs: the run manifest and the solution file.

use std::fs;
use std::path::Path;

use agv_codesign::codesign::{CodesignSolution, SolverOptions};
use agv_codesign::simloop::SimConfig;
use agv_codesign::TOOL_VERSION;
use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigFile, ResolvedConfig, ResolvedParams};
use crate::error::CliError;

/// Sweep axis recorded in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: String,
    pub values: Vec<f64>,
}

/// Everything needed to repeat a run. Written before any computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_path: String,
    pub seed: u64,
    pub out_dir: String,
    pub params: ResolvedParams,
    pub solver: SolverOptions,
    pub sim: SimConfig,
    pub solution_path: Option<String>,
    pub sweep: Option<SweepSpec>,
}

impl RunManifest {
    pub fn config(&self) -> ResolvedConfig {
        let mut sim = self.sim.clone();
        sim.seed = self.seed;
        ResolvedConfig {
            params: self.params.clone(),
            solver: self.solver.clone(),
            sim,
        }
    }
}

/// Solver output plus the inputs it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionFile {
    pub tool_version: String,
    pub params: ResolvedParams,
    pub solver: SolverOptions,
    pub solution: CodesignSolution,
}

fn read(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read {what} {}: {e}", path.display())))
}

/// Loads a TOML config, or a JSON run manifest written by an earlier run.
pub fn load_config(path: &Path) -> Result<(ResolvedConfig, Option<RunManifest>), CliError> {
    let text = read(path, "config")?;
    if text.trim_start().starts_with('{') {
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("manifest {}: {e}", path.display())))?;
        if m.tool_version != TOOL_VERSION {
            return Err(CliError::Validation(format!(
                "manifest {} was written by version {}, this is {TOOL_VERSION}",
                path.display(),
                m.tool_version
            )));
        }
        Ok((m.config(), Some(m)))
    } else {
        Ok((ConfigFile::parse(&text)?.resolve()?, None))
    }
}

/// Reads a solution file, refusing files from another tool version before
/// looking at the rest of the schema.
pub fn load_solution(path: &Path) -> Result<SolutionFile, CliError> {
    let text = read(path, "solution file")?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("solution file {} is not valid JSON: {e}", path.display())))?;
    match value.get("tool_version").and_then(|v| v.as_str()) {
        Some(v) if v == TOOL_VERSION => {}
        Some(v) => {
            return Err(CliError::Validation(format!(
                "solution file {} was written by version {v}, this is {TOOL_VERSION}; re-run `solve`",
                path.display()
            )))
        }
        None => {
            return Err(CliError::Validation(format!(
                "solution file {} has no `tool_version` field",
                path.display()
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::Validation(format!("solution file {}: {e}", path.display())))
}

/// Names of the top-level parameters on which two resolutions differ.
pub fn param_diff(a: &ResolvedParams, b: &ResolvedParams) -> Vec<String> {
    let (Ok(serde_json::Value::Object(x)), Ok(serde_json::Value::Object(y))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return vec!["<unserializable>".into()];
    };
    x.iter().filter(|(k, v)| y.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

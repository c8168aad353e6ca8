use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Tabular series written as CSV next to the summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Series {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Series {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push<I, T>(&mut self, row: I)
    where
        I: IntoIterator<Item = T>,
        T: ToString,
    {
        self.rows.push(row.into_iter().map(|v| v.to_string()).collect());
    }
}

/// Result of one experiment before it is wrapped in a [`RunReport`].
#[derive(Debug)]
pub struct Outcome {
    pub payload: Value,
    pub checks: BTreeMap<String, bool>,
    pub series: Series,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub experiment: String,
    pub config: ExperimentConfig,
    pub payload: Value,
    pub checks: BTreeMap<String, bool>,
    pub passed: bool,
    pub wall_time_s: f64,
}

/// Hex digest of the canonical JSON of the configuration, output paths excluded.
pub fn run_id(config: &ExperimentConfig) -> String {
    let mut canonical = config.clone();
    canonical.output = Default::default();
    let bytes = serde_json::to_vec(&canonical).expect("configuration serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl RunReport {
    pub fn new(config: ExperimentConfig, outcome: &Outcome, wall_time_s: f64) -> Self {
        Self {
            run_id: run_id(&config),
            experiment: config.experiment.name().to_string(),
            payload: outcome.payload.clone(),
            checks: outcome.checks.clone(),
            passed: outcome.checks.values().all(|&ok| ok),
            config,
            wall_time_s,
        }
    }
}

/// Writes `summary.json` and the CSV series into `dir`; returns their paths.
pub fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    report: &RunReport,
    series: &Series,
) -> Result<(PathBuf, PathBuf), CliError> {
    fs::create_dir_all(dir)?;
    let summary = dir.join(&config.output.summary);
    let mut text = serde_json::to_string_pretty(report).map_err(|e| CliError::Output(e.into()))?;
    text.push('\n');
    fs::write(&summary, text)?;
    let csv_path = dir.join(&config.output.series);
    let mut writer = csv::Writer::from_path(&csv_path)?;
    writer.write_record(&series.header)?;
    for row in &series.rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok((summary, csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn run_id_ignores_output_location() {
        let a = parse_config(r#"{"experiment": "classify", "matrix": [[1,0]]}"#).unwrap();
        let mut b = a.clone();
        b.output.dir = PathBuf::from("elsewhere");
        assert_eq!(run_id(&a), run_id(&b));
        assert_eq!(run_id(&a).len(), 16);
        let c = a.clone().with_seed_offset(1);
        assert_ne!(run_id(&a), run_id(&c));
    }
}

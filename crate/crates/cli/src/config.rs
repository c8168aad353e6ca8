//! Experiment configuration: schema, defaults and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ries_core::io::{matrix_from_json, ComplexPair, EnsembleJson, ModelJson};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Classify,
    Ideal,
    Ergodic,
    Decay,
    Reverse,
    Lyapunov,
    Instant,
    Fluxes,
    OracleCheck,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Classify => "classify",
            Experiment::Ideal => "ideal",
            Experiment::Ergodic => "ergodic",
            Experiment::Decay => "decay",
            Experiment::Reverse => "reverse",
            Experiment::Lyapunov => "lyapunov",
            Experiment::Instant => "instant",
            Experiment::Fluxes => "fluxes",
            Experiment::OracleCheck => "oracle-check",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Radius of the eigenvalue cluster treated as 1.
    pub tol_one: f64,
    /// Minimal spectral gap for the ergodic class.
    pub gap_min: f64,
    /// Oracle residual bound.
    pub oracle: f64,
    /// `C` in `D(N) ≤ C / √N`.
    pub ergodic_constant: f64,
    /// Checkpoints below this `N` are reported but not checked.
    pub ergodic_min_n: usize,
    /// Relative tolerance between the fitted ideal rate and `−log spr(M_Q)`.
    pub ideal_rate: f64,
    /// Relative tolerance between the singular value ratio rate and `α`.
    pub reverse_rate: f64,
    /// Absolute tolerance on `γ₁` and on `γ₂ + α`.
    pub lyapunov: f64,
    /// Bound on `|dS₊ − β dE₊|` for deterministic probe temperatures.
    pub second_law: f64,
    /// Monte Carlo agreement in standard errors.
    pub sigmas: f64,
    /// Absolute slack added to Monte Carlo comparisons for roundoff.
    pub mc_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tol_one: 1e-8,
            gap_min: 1e-6,
            oracle: 1e-10,
            ergodic_constant: 5.0,
            ergodic_min_n: 1000,
            ideal_rate: 0.1,
            reverse_rate: 0.2,
            lyapunov: 2e-3,
            second_law: 1e-8,
            sigmas: 3.0,
            mc_floor: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub summary: String,
    pub series: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("ries-out"), summary: "summary.json".into(), series: "series.csv".into() }
    }
}

/// Observable family for the `instant` experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservableSpec {
    Identity,
    System { a_s: Vec<ComplexPair> },
    Window { a_s: Vec<ComplexPair>, b_list: Vec<Vec<ComplexPair>>, l: usize, r: usize },
    EnergyJump,
    ProbeHeat { #[serde(default)] beta_weighted: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleJson>,
    /// Bare matrix for `classify` and `ideal`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<ComplexPair>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_s: Option<Vec<ComplexPair>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_n_total")]
    pub n_total: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Steps of the truncated chain in `oracle-check`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_reorth_every")]
    pub reorth_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<ObservableSpec>,
    /// Additional initial system states for `fluxes`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho_init: Vec<Vec<ComplexPair>>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_n_total() -> usize {
    1000
}

fn default_checkpoint_every() -> usize {
    100
}

fn default_steps() -> usize {
    6
}

fn default_reorth_every() -> usize {
    10
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    /// Semantic checks beyond the JSON schema.
    pub fn check(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds must not be empty"));
        }
        if self.n_total == 0 || self.checkpoint_every == 0 || self.steps == 0 || self.reorth_every == 0 {
            return Err(invalid("n_total, checkpoint_every, steps and reorth_every must be at least 1"));
        }
        if let Some(ens) = &self.ensemble {
            let total: f64 = ens.atoms.iter().map(|a| a.p).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(invalid(format!("atom probabilities sum to {total}")));
            }
            if ens.atoms.iter().any(|a| !(0.0..=1.0).contains(&a.p)) {
                return Err(invalid("atom probabilities must lie in [0, 1]"));
            }
        }
        if let Some(m) = &self.matrix {
            let dim = match &self.psi_s {
                Some(psi) => Some(psi.len()),
                None => None,
            };
            matrix_from_json(m, dim).map_err(|e| invalid(e.to_string()))?;
        }
        if let Some(model) = &self.model {
            model.to_specs().map_err(|e| invalid(e.to_string()))?;
        }
        let has_model = self.model.is_some();
        let has_ensemble = self.ensemble.is_some() || has_model;
        let needs = |ok: bool, what: &str| if ok { Ok(()) } else { Err(invalid(format!("{} needs {what}", self.experiment.name()))) };
        match self.experiment {
            Experiment::Classify => needs(has_model || self.matrix.is_some(), "a model or a matrix"),
            Experiment::Ideal => needs(has_model || (self.matrix.is_some() && self.psi_s.is_some()), "a model or a matrix with psi_s"),
            Experiment::Ergodic | Experiment::Decay | Experiment::Reverse | Experiment::Lyapunov | Experiment::Fluxes => {
                needs(has_ensemble, "an ensemble or a model")
            }
            Experiment::Instant => {
                needs(has_ensemble, "an ensemble or a model")?;
                needs(self.observable.is_some(), "an observable")
            }
            Experiment::OracleCheck => needs(has_model, "a model"),
        }
    }

    /// Ensemble spec, wrapping a single model when no ensemble is given.
    pub fn ensemble_spec(&self) -> Option<EnsembleJson> {
        if let Some(e) = &self.ensemble {
            return Some(e.clone());
        }
        let model = self.model.as_ref()?;
        let (sys, probe) = model.to_specs().ok()?;
        Some(EnsembleJson::from_models(&sys, &[(1.0, probe)]))
    }

    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(offset);
        }
        self
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
    config.check()?;
    Ok(config)
}

/// Reads, parses and checks a configuration file; defaults are filled in.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CLASSIFY: &str = r#"{"experiment": "classify", "matrix": [[1,0],[0,0],[0,0],[0.5,0]]}"#;

    #[test]
    fn defaults_are_filled() {
        let config = parse_config(CLASSIFY).unwrap();
        assert_eq!(config.tolerances.tol_one, 1e-8);
        assert_eq!(config.seeds, vec![0]);
        assert_eq!(config.n_total, 1000);
    }

    #[test]
    fn resolved_config_round_trips() {
        let config = parse_config(CLASSIFY).unwrap();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let again = parse_config(&text).unwrap();
        assert_eq!(again, config);
        assert_eq!(serde_json::to_string_pretty(&again).unwrap(), text);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_inputs() {
        assert!(parse_config(r#"{"experiment": "classify", "matrix": [[1,0]], "colour": 1}"#).is_err());
        assert!(parse_config(r#"{"experiment": "ergodic"}"#).is_err());
        assert!(parse_config(r#"{"experiment": "sideways"}"#).is_err());
        assert!(parse_config(r#"{"experiment": "classify", "matrix": [[1,0],[0,0],[0,0]]}"#).is_err());
        assert!(parse_config(r#"{"experiment": "classify", "matrix": [[1,0]], "seeds": []}"#).is_err());
        assert!(parse_config(r#"{"experiment": "classify", "matrix": [[1,0]], "tolerances": {"tol_two": 1}}"#).is_err());
    }

    #[test]
    fn rejects_unnormalized_ensembles() {
        let text = r#"{"experiment": "decay", "ensemble": {"atoms": [
            {"p": 0.5, "matrix": [[1,0]]}, {"p": 0.4, "matrix": [[1,0]]}], "psi_s": [[1,0]]}}"#;
        assert!(matches!(parse_config(text), Err(CliError::Config(_))));
    }

    #[test]
    fn seed_offset_shifts_every_seed() {
        let mut config = parse_config(CLASSIFY).unwrap();
        config.seeds = vec![1, 5];
        assert_eq!(config.with_seed_offset(10).seeds, vec![11, 15]);
    }
}

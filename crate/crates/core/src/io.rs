//! JSON wire formats.
//!
//! Complex numbers travel as `[re, im]` pairs. Matrices are flat row-major
//! lists of such pairs; their dimension is either given alongside or inferred
//! as the square root of the list length.

use serde::{Deserialize, Serialize};

use crate::ensemble::{ParameterRanges, RrdoEnsemble};
use crate::error::{Result, RiesError};
use crate::linalg::{c, CMat, CVec};
use crate::model::{rdo_from_model, ProbeSpec, SystemSpec};
use crate::rdo::{validate, ValidateOptions};

pub type ComplexPair = [f64; 2];

pub fn matrix_to_json(m: &CMat) -> Vec<ComplexPair> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            out.push([z.re, z.im]);
        }
    }
    out
}

pub fn matrix_from_json(entries: &[ComplexPair], dim: Option<usize>) -> Result<CMat> {
    let dim = match dim {
        Some(d) => d,
        None => {
            let d = (entries.len() as f64).sqrt().round() as usize;
            if d * d != entries.len() {
                return Err(RiesError::Validation(format!(
                    "matrix with {} entries is not square",
                    entries.len()
                )));
            }
            d
        }
    };
    if entries.len() != dim * dim {
        return Err(RiesError::Dimension(format!(
            "expected {} entries for a {dim}x{dim} matrix, got {}",
            dim * dim,
            entries.len()
        )));
    }
    Ok(CMat::from_fn(dim, dim, |i, j| {
        let [re, im] = entries[i * dim + j];
        c(re, im)
    }))
}

pub fn vector_to_json(v: &CVec) -> Vec<ComplexPair> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

pub fn vector_from_json(entries: &[ComplexPair]) -> CVec {
    CVec::from_iterator(entries.len(), entries.iter().map(|[re, im]| c(*re, *im)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemJson {
    pub dim: usize,
    pub h: Vec<ComplexPair>,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeJson {
    pub dim: usize,
    pub h: Vec<ComplexPair>,
    pub beta: f64,
    pub v: Vec<ComplexPair>,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelJson {
    pub system: SystemJson,
    pub probe: ProbeJson,
}

impl SystemJson {
    pub fn to_spec(&self) -> Result<SystemSpec> {
        SystemSpec::new(matrix_from_json(&self.h, Some(self.dim))?, self.beta)
    }

    pub fn from_spec(spec: &SystemSpec) -> Self {
        Self { dim: spec.dim(), h: matrix_to_json(spec.h()), beta: spec.beta() }
    }
}

impl ProbeJson {
    pub fn to_spec(&self, dim_s: usize) -> Result<ProbeSpec> {
        let h = matrix_from_json(&self.h, Some(self.dim))?;
        let v = matrix_from_json(&self.v, Some(dim_s * self.dim))?;
        ProbeSpec::new(h, self.beta, v, self.tau)
    }

    pub fn from_spec(spec: &ProbeSpec) -> Self {
        Self {
            dim: spec.dim(),
            h: matrix_to_json(spec.h()),
            beta: spec.beta(),
            v: matrix_to_json(spec.v()),
            tau: spec.tau(),
        }
    }
}

impl ModelJson {
    pub fn to_specs(&self) -> Result<(SystemSpec, ProbeSpec)> {
        let sys = self.system.to_spec()?;
        let probe = self.probe.to_spec(sys.dim())?;
        Ok((sys, probe))
    }

    pub fn from_specs(sys: &SystemSpec, probe: &ProbeSpec) -> Self {
        Self { system: SystemJson::from_spec(sys), probe: ProbeJson::from_spec(probe) }
    }
}

/// One ensemble atom: a model or a bare matrix, never both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomJson {
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<ComplexPair>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleJson {
    pub atoms: Vec<AtomJson>,
    /// Invariant vector for matrix atoms; model atoms derive it from the system.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_s: Option<Vec<ComplexPair>>,
    /// Number of parameter draws replacing each model atom.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<ParameterRanges>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presample_seed: Option<u64>,
}

impl EnsembleJson {
    pub fn from_models(sys: &SystemSpec, atoms: &[(f64, ProbeSpec)]) -> Self {
        Self {
            atoms: atoms
                .iter()
                .map(|(p, probe)| AtomJson { p: *p, model: Some(ModelJson::from_specs(sys, probe)), matrix: None })
                .collect(),
            psi_s: None,
            presample: None,
            ranges: None,
            presample_seed: None,
        }
    }

    pub fn to_ensemble(&self) -> Result<RrdoEnsemble> {
        let mut models = Vec::new();
        let mut matrices = Vec::new();
        for atom in &self.atoms {
            match (&atom.model, &atom.matrix) {
                (Some(m), None) => models.push((atom.p, m)),
                (None, Some(m)) => matrices.push((atom.p, m)),
                _ => return Err(RiesError::Validation("each atom needs exactly one of model or matrix".into())),
            }
        }
        if self.presample.is_some() && self.ranges.is_none() {
            return Err(RiesError::Validation("presample needs parameter ranges".into()));
        }
        if matrices.is_empty() {
            let system = &models.first().ok_or_else(|| RiesError::Validation("ensemble has no atoms".into()))?.1.system;
            if models.iter().any(|(_, m)| &m.system != system) {
                return Err(RiesError::Validation("model atoms must share one system".into()));
            }
            let sys = system.to_spec()?;
            let probes = models
                .iter()
                .map(|(p, m)| Ok((*p, m.probe.to_spec(sys.dim())?)))
                .collect::<Result<Vec<_>>>()?;
            return match (self.presample, &self.ranges) {
                (Some(k), Some(ranges)) => {
                    RrdoEnsemble::presampled(&sys, probes, ranges, k, self.presample_seed.unwrap_or(0))
                }
                _ => RrdoEnsemble::from_models(&sys, probes),
            };
        }
        if self.presample.is_some() {
            return Err(RiesError::Validation("presampling applies to model atoms only".into()));
        }
        let mut atoms = Vec::with_capacity(self.atoms.len());
        let mut psi_s = self.psi_s.as_deref().map(vector_from_json);
        for (p, m) in &models {
            let (sys, probe) = m.to_specs()?;
            let rdo = rdo_from_model(&sys, &probe)?;
            psi_s.get_or_insert_with(|| rdo.psi_s().clone());
            atoms.push((*p, rdo));
        }
        let psi_s = psi_s.ok_or_else(|| RiesError::Validation("matrix atoms need psi_s".into()))?;
        let dim = psi_s.len();
        for (p, m) in matrices {
            let matrix = matrix_from_json(m, Some(dim))?;
            atoms.push((p, validate(matrix, psi_s.clone(), None, &ValidateOptions::default())?));
        }
        RrdoEnsemble::new(atoms)
    }
}

//! Random reduced dynamics: finite ensembles of RDOs, iid products and their
//! asymptotics.
//!
//! Forward products `Ψ_n = M(ω₁) ⋯ M(ω_n)` converge in the Cesàro sense to
//! `|ψ_S⟩⟨θ|`; reverse products `Φ_n = M(ω_n) ⋯ M(ω₁)` converge pointwise
//! to a random rank-one matrix `|ψ_S⟩⟨η_∞|`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RiesError};
use crate::linalg::{
    linear_fit, outer, singular_values, spectral_norm, spectral_radius, CMat, CVec,
    CompensatedSum, C64, ONE,
};
use crate::model::{rdo_from_model, ProbeSpec, SystemSpec};
use crate::rdo::{
    classify, decompose, decompose_matrix, dual_norm, transported_norm_estimate,
    validate, BoundSummary, NormCertificate, Rdo, RdoDecomposition, SpectralReport,
    ValidateOptions, DEFAULT_GAP_MIN, DEFAULT_TOL_ONE,
};
use crate::seed::trajectory_seed;

pub const DEFAULT_PRESAMPLE: usize = 32;
pub const NEUMANN_TERM_TOL: f64 = 1e-14;
pub const NEUMANN_MAX_TERMS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct Atom {
    pub p: f64,
    pub rdo: Rdo,
    pub dec: RdoDecomposition,
    /// Model the atom was built from, when known.
    pub probe: Option<ProbeSpec>,
    pub in_class: bool,
}

/// Uniform ranges used to pre-sample model atoms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterRanges {
    #[serde(default)]
    pub tau: Option<[f64; 2]>,
    #[serde(default)]
    pub coupling_scale: Option<[f64; 2]>,
    #[serde(default)]
    pub beta_e: Option<[f64; 2]>,
}

impl ParameterRanges {
    fn draw<R: Rng + ?Sized>(range: Option<[f64; 2]>, base: f64, rng: &mut R) -> Result<f64> {
        match range {
            None => Ok(base),
            Some([lo, hi]) if lo <= hi && lo.is_finite() && hi.is_finite() => {
                Ok(if lo == hi { lo } else { rng.gen_range(lo..hi) })
            }
            Some([lo, hi]) => Err(RiesError::Validation(format!("invalid range [{lo}, {hi}]"))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, base: &ProbeSpec, rng: &mut R) -> Result<ProbeSpec> {
        let tau = Self::draw(self.tau, base.tau(), rng)?;
        let scale = Self::draw(self.coupling_scale, 1.0, rng)?;
        let beta = Self::draw(self.beta_e, base.beta(), rng)?;
        ProbeSpec::new(base.h().clone(), beta, base.v().scale(scale), tau)
    }
}

#[derive(Clone, Debug)]
pub struct RrdoEnsemble {
    psi_s: Arc<CVec>,
    system: Option<SystemSpec>,
    atoms: Vec<Atom>,
    cumulative: Vec<f64>,
}

impl RrdoEnsemble {
    pub fn new(atoms: Vec<(f64, Rdo)>) -> Result<Self> {
        Self::build(None, atoms.into_iter().map(|(p, r)| (p, r, None)).collect())
    }

    /// Ensemble of model-built atoms sharing one system.
    pub fn from_models(sys: &SystemSpec, atoms: Vec<(f64, ProbeSpec)>) -> Result<Self> {
        let built = atoms
            .into_iter()
            .map(|(p, probe)| Ok((p, rdo_from_model(sys, &probe)?, Some(probe))))
            .collect::<Result<Vec<_>>>()?;
        Self::build(Some(sys.clone()), built)
    }

    /// Replaces every model atom by `k` equally weighted atoms whose
    /// parameters are drawn from `ranges`.
    pub fn presampled(
        sys: &SystemSpec,
        atoms: Vec<(f64, ProbeSpec)>,
        ranges: &ParameterRanges,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(RiesError::Validation("presample count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut expanded = Vec::with_capacity(atoms.len() * k);
        for (p, base) in atoms {
            for _ in 0..k {
                expanded.push((p / k as f64, ranges.sample(&base, &mut rng)?));
            }
        }
        Self::from_models(sys, expanded)
    }

    fn build(system: Option<SystemSpec>, atoms: Vec<(f64, Rdo, Option<ProbeSpec>)>) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| RiesError::Validation("ensemble has no atoms".into()))?;
        let psi_s = Arc::clone(first.1.shared_psi_s());
        let total: f64 = atoms.iter().map(|a| a.0).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(RiesError::Validation(format!("probabilities sum to {total}")));
        }
        let mut out = Vec::with_capacity(atoms.len());
        let mut cumulative = Vec::with_capacity(atoms.len());
        let mut acc = 0.0;
        for (p, rdo, probe) in atoms {
            if !(0.0..=1.0).contains(&p) {
                return Err(RiesError::Validation(format!("probability {p} outside [0, 1]")));
            }
            if rdo.psi_s() != &*psi_s {
                return Err(RiesError::Validation("atoms do not share ψ_S".into()));
            }
            let rdo = rdo.share_psi_s(&psi_s);
            let dec = decompose(&rdo)?;
            let in_class = classify(&rdo, DEFAULT_TOL_ONE, DEFAULT_GAP_MIN)?.in_class_e;
            acc += p;
            cumulative.push(acc);
            out.push(Atom { p, rdo, dec, probe, in_class });
        }
        Ok(Self { psi_s, system, atoms: out, cumulative })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn psi_s(&self) -> &CVec {
        &self.psi_s
    }

    pub fn system(&self) -> Option<&SystemSpec> {
        self.system.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.psi_s.len()
    }

    /// Largest Euclidean product bound among the atom certificates.
    pub fn c0(&self) -> f64 {
        self.atoms.iter().map(|a| a.rdo.certificate().c0()).fold(1.0, f64::max)
    }

    /// Common exact certificate, when every atom carries the same one.
    pub fn shared_gns(&self) -> Option<&crate::rdo::GnsCertificate> {
        let first = self.atoms[0].rdo.certificate().gns()?;
        self.atoms
            .iter()
            .all(|a| a.rdo.certificate().gns() == Some(first))
            .then_some(first)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen::<f64>() * self.cumulative[self.cumulative.len() - 1];
        self.cumulative.partition_point(|&c| c <= u).min(self.atoms.len() - 1)
    }

    pub fn has_in_class_atom(&self) -> bool {
        self.atoms.iter().any(|a| a.in_class && a.p > 0.0)
    }

    fn expectation<F: Fn(&Atom) -> CMat>(&self, f: F) -> CMat {
        let n = self.dim();
        self.atoms.iter().fold(CMat::zeros(n, n), |acc, a| acc + f(a).scale(a.p))
    }

    pub fn mean_psi(&self) -> CVec {
        self.atoms.iter().fold(CVec::zeros(self.dim()), |acc, a| acc + a.dec.psi.scale(a.p))
    }

    pub fn mean_mq(&self) -> CMat {
        self.expectation(|a| a.dec.m_q.clone())
    }

    fn require_in_class_atom(&self) -> Result<()> {
        if self.has_in_class_atom() {
            Ok(())
        } else {
            Err(RiesError::Precondition("no atom of positive weight lies in the ergodic class".into()))
        }
    }
}

/// `E[M] = Σ p_i M_i`.
pub fn mean_rdo(ens: &RrdoEnsemble) -> Result<Rdo> {
    let m = ens.expectation(|a| a.rdo.matrix().clone());
    let cert = ens.shared_gns().cloned().map(NormCertificate::Gns);
    Ok(validate(m, (*ens.psi_s).clone(), cert, &ValidateOptions::default())?.share_psi_s(&ens.psi_s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCheck {
    pub report: SpectralReport,
    pub any_atom_in_class: bool,
    /// If some atom is in the ergodic class, so is the mean.
    pub holds: bool,
}

pub fn mean_rdo_check(ens: &RrdoEnsemble, tol_one: f64, gap_min: f64) -> Result<(Rdo, MeanCheck)> {
    let mean = mean_rdo(ens)?;
    let report = classify(&mean, tol_one, gap_min)?;
    let any = ens.has_in_class_atom();
    let holds = !any || report.in_class_e;
    Ok((mean, MeanCheck { report, any_atom_in_class: any, holds }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaClosedForm {
    pub projector: Vec<C64>,
    pub series: Vec<C64>,
    pub terms: usize,
    pub spr_mean_mq: f64,
    /// Geometric tail estimate of the truncated series.
    pub tail_bound: f64,
    pub agreement: f64,
    pub overlap: C64,
}

impl ThetaClosedForm {
    pub fn theta(&self) -> CVec {
        CVec::from_column_slice(&self.projector)
    }
}

/// `θ = P₁(E[M])* ψ_S`, cross-checked against `Σ_k (E[M_Q]*)^k E[ψ]`.
pub fn theta_closed_form(ens: &RrdoEnsemble) -> Result<ThetaClosedForm> {
    let mean = mean_rdo(ens)?;
    let report = classify(&mean, DEFAULT_TOL_ONE, DEFAULT_GAP_MIN)?;
    if !report.in_class_e {
        return Err(RiesError::Precondition("E[M] is not in the ergodic class".into()));
    }
    let projector = decompose_matrix(mean.matrix(), &ens.psi_s, DEFAULT_TOL_ONE)?.psi;
    let mean_mq = ens.mean_mq();
    let spr = spectral_radius(&mean_mq)?;
    if spr >= 1.0 {
        return Err(RiesError::Precondition(format!("spr(E[M_Q]) = {spr} >= 1, series diverges")));
    }
    let adjoint = mean_mq.adjoint();
    let mut term = ens.mean_psi();
    let mut series = term.clone();
    let mut terms = 1;
    while term.norm() >= NEUMANN_TERM_TOL && terms < NEUMANN_MAX_TERMS {
        term = &adjoint * term;
        series += &term;
        terms += 1;
    }
    let tail_bound = term.norm() * spr / (1.0 - spr);
    Ok(ThetaClosedForm {
        agreement: (&projector - &series).norm(),
        overlap: ens.psi_s.dotc(&projector),
        projector: projector.iter().copied().collect(),
        series: series.iter().copied().collect(),
        terms,
        spr_mean_mq: spr,
        tail_bound,
    })
}

/// Running maxima of the uniform product bounds along one trajectory.
#[derive(Clone, Debug)]
struct BoundTracker {
    c0: f64,
    summary: BoundSummary,
}

impl BoundTracker {
    const TOL: f64 = 1e-9;

    fn new(c0: f64) -> Self {
        Self { c0, summary: BoundSummary { c0, ..Default::default() } }
    }

    fn exceeds(x: &CMat, bound: f64) -> (bool, Option<f64>) {
        // ‖X‖₂ ≤ ‖X‖_F, so the SVD is only needed when Frobenius is inconclusive
        if x.norm() <= bound {
            (false, None)
        } else {
            let s = spectral_norm(x);
            (s > bound, Some(s))
        }
    }

    fn check(&mut self, product: &CMat, theta: &CVec, mq: &CMat, exact: bool) {
        let c0 = self.c0 * (1.0 + Self::TOL);
        let (bad_p, sp) = Self::exceeds(product, c0);
        let (bad_m, sm) = Self::exceeds(mq, self.c0 * (1.0 + self.c0) * (1.0 + Self::TOL));
        let theta_norm = theta.norm();
        let bad_t = theta_norm > self.c0 * c0;
        let s = &mut self.summary;
        s.violations += (bad_p || bad_m || bad_t) as usize;
        s.max_theta_norm = s.max_theta_norm.max(theta_norm);
        let sp = if exact { Some(sp.unwrap_or_else(|| spectral_norm(product))) } else { sp };
        let sm = if exact { Some(sm.unwrap_or_else(|| spectral_norm(mq))) } else { sm };
        if let Some(v) = sp {
            s.max_product_norm = s.max_product_norm.max(v);
        }
        if let Some(v) = sm {
            s.max_mq_norm = s.max_mq_norm.max(v);
        }
    }

    fn check_transported(&mut self, theta_dual: f64, product: Option<f64>, mq: Option<f64>) {
        let s = &mut self.summary;
        let tol = Self::TOL;
        s.transported_max_theta = Some(s.transported_max_theta.unwrap_or(0.0).max(theta_dual));
        let mut bad = theta_dual > 1.0 + tol;
        if let Some(p) = product {
            s.transported_max_product = Some(s.transported_max_product.unwrap_or(0.0).max(p));
            bad |= p > 1.0 + tol;
        }
        if let Some(m) = mq {
            s.transported_max_mq = Some(s.transported_max_mq.unwrap_or(0.0).max(m));
            bad |= m > 2.0 + tol;
        }
        s.violations += bad as usize;
    }

    fn finish(mut self, ens: &RrdoEnsemble) -> BoundSummary {
        for a in &ens.atoms {
            self.summary.max_psi_norm = self.summary.max_psi_norm.max(a.dec.psi.norm());
            let q = spectral_norm(&a.dec.q);
            self.summary.max_q_norm = self.summary.max_q_norm.max(q);
            if a.dec.psi.norm() > self.c0 * (1.0 + Self::TOL) || q > (1.0 + self.c0) * (1.0 + Self::TOL) {
                self.summary.violations += 1;
            }
        }
        self.summary
    }
}

/// State of one forward trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub seed: u64,
    pub omega: Vec<u32>,
    /// `Ψ_n = M(ω₁) ⋯ M(ω_n)`.
    pub psi_n: CMat,
    /// `θ_n = M(ω_n)* ⋯ M(ω₂)* ψ(ω₁)`.
    pub theta_n: CVec,
    pub mq_product: CMat,
    pub cesaro: CompensatedSum,
    pub theta_cesaro: CompensatedSum,
    pub n: usize,
}

impl Trajectory {
    pub fn new(ens: &RrdoEnsemble, seed: u64) -> Self {
        let d = ens.dim();
        Self {
            seed,
            omega: Vec::new(),
            psi_n: CMat::identity(d, d),
            theta_n: CVec::zeros(d),
            mq_product: CMat::identity(d, d),
            cesaro: CompensatedSum::new(d, d),
            theta_cesaro: CompensatedSum::new(d, 1),
            n: 0,
        }
    }

    pub fn step(&mut self, ens: &RrdoEnsemble, index: usize) {
        let atom = &ens.atoms[index];
        self.psi_n = &self.psi_n * atom.rdo.matrix();
        self.mq_product = &self.mq_product * &atom.dec.m_q;
        self.theta_n = if self.n == 0 {
            atom.dec.psi.clone()
        } else {
            atom.rdo.matrix().adjoint() * &self.theta_n
        };
        self.cesaro.add(&self.psi_n);
        self.theta_cesaro.add(&CMat::from_column_slice(self.theta_n.len(), 1, self.theta_n.as_slice()));
        self.omega.push(index as u32);
        self.n += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicCheckpoint {
    pub n: usize,
    /// `‖(1/N) Σ Ψ_n − P₁(E[M])‖_F`.
    pub distance: f64,
    /// `‖(1/N) Σ θ_n − θ‖`.
    pub theta_distance: f64,
    pub mq_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForwardRun {
    pub seed: u64,
    pub n_total: usize,
    pub checkpoints: Vec<ErgodicCheckpoint>,
    pub max_invariance_defect: f64,
    pub cesaro_invariance_defect: f64,
    pub bounds: BoundSummary,
    #[serde(skip)]
    pub cesaro: Option<CompensatedSum>,
    #[serde(skip)]
    pub theta_cesaro: Option<CompensatedSum>,
}

/// Simulates `Ψ_n` for `n_total` steps and records the Cesàro distance to
/// `P₁(E[M]) = |ψ_S⟩⟨θ|` every `checkpoint_every` steps.
pub fn simulate_forward(
    ens: &RrdoEnsemble,
    seed: u64,
    n_total: usize,
    checkpoint_every: usize,
) -> Result<ForwardRun> {
    let closed = theta_closed_form(ens)?;
    let theta = closed.theta();
    let target = outer(&ens.psi_s, &theta);
    let gns = ens.shared_gns().cloned();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a2f);
    let mut traj = Trajectory::new(ens, seed);
    let mut tracker = BoundTracker::new(ens.c0());
    let mut checkpoints = Vec::new();
    let mut max_defect = 0.0_f64;
    let every = checkpoint_every.max(1);
    for n in 1..=n_total {
        traj.step(ens, ens.sample(&mut rng));
        max_defect = max_defect.max((&traj.psi_n * &*ens.psi_s - &*ens.psi_s).norm());
        let at_checkpoint = n % every == 0 || n == n_total;
        tracker.check(&traj.psi_n, &traj.theta_n, &traj.mq_product, at_checkpoint || n <= 64 || n % 97 == 0);
        if let Some(g) = &gns {
            let (p, m) = if at_checkpoint {
                (
                    Some(transported_norm_estimate(&traj.psi_n, g, 16, &mut probe_rng)),
                    Some(transported_norm_estimate(&traj.mq_product, g, 16, &mut probe_rng)),
                )
            } else {
                (None, None)
            };
            tracker.check_transported(dual_norm(&traj.theta_n, g), p, m);
        }
        if at_checkpoint {
            let theta_mean = traj.theta_cesaro.mean().column(0).into_owned();
            checkpoints.push(ErgodicCheckpoint {
                n,
                distance: (traj.cesaro.mean() - &target).norm(),
                theta_distance: (theta_mean - &theta).norm(),
                mq_norm: spectral_norm(&traj.mq_product),
            });
        }
    }
    let cesaro_defect = (traj.cesaro.mean() * &*ens.psi_s - &*ens.psi_s).norm();
    Ok(ForwardRun {
        seed,
        n_total,
        checkpoints,
        max_invariance_defect: max_defect,
        cesaro_invariance_defect: cesaro_defect,
        bounds: tracker.finish(ens),
        cesaro: Some(traj.cesaro),
        theta_cesaro: Some(traj.theta_cesaro),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaRun {
    pub seed: u64,
    pub n_total: usize,
    pub mean: Vec<C64>,
    pub max_overlap_defect: f64,
}

impl ThetaRun {
    pub fn mean_vector(&self) -> CVec {
        CVec::from_column_slice(&self.mean)
    }
}

/// Cesàro mean of the Markov process `θ_n = M(ω_n)* θ_{n−1}`, `θ₁ = ψ(ω₁)`.
pub fn simulate_theta(ens: &RrdoEnsemble, seed: u64, n_total: usize) -> Result<ThetaRun> {
    if n_total == 0 {
        return Err(RiesError::Validation("n_total must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ens.dim();
    let mut acc = CompensatedSum::new(d, 1);
    let first = &ens.atoms[ens.sample(&mut rng)];
    let mut theta = first.dec.psi.clone();
    let mut worst = 0.0_f64;
    for n in 1..=n_total {
        if n > 1 {
            theta = ens.atoms[ens.sample(&mut rng)].rdo.matrix().adjoint() * theta;
        }
        worst = worst.max((ens.psi_s.dotc(&theta) - ONE).norm());
        acc.add(&CMat::from_column_slice(d, 1, theta.as_slice()));
    }
    Ok(ThetaRun {
        seed,
        n_total,
        mean: acc.mean().column(0).iter().copied().collect(),
        max_overlap_defect: worst,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRun {
    pub seed: u64,
    /// `ln ‖M_Q(ω₁) ⋯ M_Q(ω_n)‖` for `n = 1..=n_total`.
    pub log_norms: Vec<f64>,
    pub alpha: f64,
    /// First step after which `‖·‖ ≤ e^{−α n / 2}` holds for the rest of the run.
    pub n0: Option<usize>,
}

/// First `n` such that `log_norms[k−1] ≤ log_c − alpha k` for all `k ≥ n`.
pub fn envelope_start(log_norms: &[f64], log_c: f64, alpha: f64) -> Option<usize> {
    let mut start = None;
    for (i, &y) in log_norms.iter().enumerate().rev() {
        if y <= log_c - alpha * (i + 1) as f64 {
            start = Some(i + 1);
        } else {
            break;
        }
    }
    start
}

/// Decay of `M_Q` products along one trajectory. The product is renormalized
/// every step so that arbitrarily long runs do not underflow.
pub fn decay_estimator(ens: &RrdoEnsemble, seed: u64, n_total: usize) -> Result<DecayRun> {
    ens.require_in_class_atom()?;
    if n_total < 2 {
        return Err(RiesError::Validation("n_total must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ens.dim();
    let mut x = CMat::identity(d, d);
    let mut log_scale = 0.0_f64;
    let mut log_norms = Vec::with_capacity(n_total);
    for _ in 0..n_total {
        x = &x * &ens.atoms[ens.sample(&mut rng)].dec.m_q;
        let s = spectral_norm(&x);
        if s == 0.0 {
            log_norms.push(f64::NEG_INFINITY);
            continue;
        }
        log_scale += s.ln();
        x.unscale_mut(s);
        log_norms.push(log_scale);
    }
    let last = log_norms[n_total - 1];
    let alpha = if last == f64::NEG_INFINITY { f64::INFINITY } else { -last / n_total as f64 };
    let n0 = (alpha > 0.0).then(|| envelope_start(&log_norms, 0.0, alpha / 2.0)).flatten();
    Ok(DecayRun { seed, log_norms, alpha, n0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayBatch {
    pub alphas: Vec<f64>,
    pub alpha_mean: f64,
    pub alpha_min: f64,
    /// Common envelope rate `min α / 2`.
    pub alpha_common: f64,
    /// `n₀` per seed for the envelope `e^{−α_common n}`.
    pub n0: Vec<Option<usize>>,
    pub n0_max: Option<usize>,
    pub n0_mean: f64,
    /// Empirical `E[e^{α_common n₀}]`.
    pub exp_moment: f64,
    pub all_positive: bool,
}

pub fn decay_batch(ens: &RrdoEnsemble, master: u64, seeds: usize, n_total: usize) -> Result<DecayBatch> {
    let runs = (0..seeds as u64)
        .map(|i| decay_estimator(ens, trajectory_seed(master, i), n_total))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_decay(&runs))
}

pub fn summarize_decay(runs: &[DecayRun]) -> DecayBatch {
    let alphas: Vec<f64> = runs.iter().map(|r| r.alpha).collect();
    let alpha_min = alphas.iter().copied().fold(f64::INFINITY, f64::min);
    let alpha_mean = alphas.iter().sum::<f64>() / alphas.len().max(1) as f64;
    let alpha_common = 0.5 * alpha_min;
    let n0: Vec<Option<usize>> = runs
        .iter()
        .map(|r| (alpha_common > 0.0).then(|| envelope_start(&r.log_norms, 0.0, alpha_common)).flatten())
        .collect();
    let found: Vec<usize> = n0.iter().flatten().copied().collect();
    let exp_moment = if found.is_empty() {
        f64::NAN
    } else {
        found.iter().map(|&k| (alpha_common * k as f64).exp()).sum::<f64>() / found.len() as f64
    };
    DecayBatch {
        all_positive: alphas.iter().all(|&a| a > 0.0),
        alpha_mean,
        alpha_min,
        alpha_common,
        n0_max: found.iter().copied().max(),
        n0_mean: found.iter().sum::<usize>() as f64 / found.len().max(1) as f64,
        n0,
        exp_moment,
        alphas,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReverseRun {
    pub seed: u64,
    pub eta: Vec<C64>,
    /// `‖Φ_n − |ψ_S⟩⟨η_n|‖`.
    pub residuals: Vec<f64>,
    /// `σ₂/σ₁` of `Φ_n`.
    pub sigma_ratio: Vec<f64>,
    /// Log-slope of `σ₂/σ₁` over the points above [`SIGMA_FLOOR`].
    pub sigma_ratio_slope: Option<f64>,
    #[serde(skip)]
    pub cesaro: Option<CompensatedSum>,
}

impl ReverseRun {
    pub fn eta_vector(&self) -> CVec {
        CVec::from_column_slice(&self.eta)
    }
}

pub const SIGMA_FLOOR: f64 = 1e-10;

/// Reverse products `Φ_n = M(ω_n) ⋯ M(ω₁)` with the incremental limit
/// `η_n = Σ_{k≤n} M_Q(ω₁)* ⋯ M_Q(ω_{k−1})* ψ(ω_k)`.
pub fn simulate_reverse(ens: &RrdoEnsemble, seed: u64, n_total: usize) -> Result<ReverseRun> {
    ens.require_in_class_atom()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ens.dim();
    let mut phi = CMat::identity(d, d);
    let mut s = CMat::identity(d, d);
    let mut eta = CVec::zeros(d);
    let mut cesaro = CompensatedSum::new(d, d);
    let mut residuals = Vec::with_capacity(n_total);
    let mut sigma_ratio = Vec::with_capacity(n_total);
    for _ in 0..n_total {
        let atom = &ens.atoms[ens.sample(&mut rng)];
        phi = atom.rdo.matrix() * &phi;
        eta += &s * &atom.dec.psi;
        s = &s * atom.dec.m_q.adjoint();
        cesaro.add(&phi);
        residuals.push(spectral_norm(&(&phi - outer(&ens.psi_s, &eta))));
        let sv = singular_values(&phi);
        sigma_ratio.push(if sv.len() > 1 { sv[1] / sv[0] } else { 0.0 });
    }
    let sigma_ratio_slope = log_slope_above(&sigma_ratio, SIGMA_FLOOR);
    Ok(ReverseRun {
        seed,
        eta: eta.iter().copied().collect(),
        residuals,
        sigma_ratio,
        sigma_ratio_slope,
        cesaro: Some(cesaro),
    })
}

/// Log-linear slope over the initial run of points above `floor`.
pub fn log_slope_above(series: &[f64], floor: f64) -> Option<f64> {
    let end = series.iter().position(|&y| y <= floor).unwrap_or(series.len());
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        (0..end).map(|i| ((i + 1) as f64, series[i].ln())).unzip();
    linear_fit(&xs, &ys).map(|(slope, _)| slope)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub gamma_1: f64,
    pub gamma_2: f64,
    pub gap: f64,
    /// Every exponent of the full frame, in decreasing order.
    pub exponents: Vec<f64>,
    /// `σ₂/σ₁` of `Φ_n` reconstructed from the frame, at each
    /// re-orthonormalization.
    pub sigma_ratio_series: Vec<f64>,
}

/// Lyapunov exponents of `Φ_n` by the QR (Benettin) method with a full
/// frame re-orthonormalized every `reorth_every` steps.
pub fn lyapunov(
    ens: &RrdoEnsemble,
    seed: u64,
    n_total: usize,
    reorth_every: usize,
) -> Result<LyapunovEstimate> {
    if n_total == 0 || reorth_every == 0 {
        return Err(RiesError::Validation("n_total and reorth_every must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ens.dim();
    let mut frame = CMat::identity(d, d);
    let mut sums = vec![0.0_f64; d];
    let mut series = Vec::new();
    for n in 1..=n_total {
        frame = ens.atoms[ens.sample(&mut rng)].rdo.matrix() * frame;
        if n % reorth_every == 0 || n == n_total {
            let qr = frame.clone().qr();
            let r = qr.r();
            for (k, sum) in sums.iter_mut().enumerate() {
                *sum += r[(k, k)].norm().max(f64::MIN_POSITIVE).ln();
            }
            frame = qr.q();
            if d > 1 {
                series.push((sums[1] - sums[0]).exp());
            }
        }
    }
    let mut exponents: Vec<f64> = sums.iter().map(|s| s / n_total as f64).collect();
    exponents.sort_by(|a, b| b.total_cmp(a));
    let gamma_1 = exponents[0];
    let gamma_2 = exponents.get(1).copied().unwrap_or(f64::NEG_INFINITY);
    Ok(LyapunovEstimate { gamma_1, gamma_2, gap: gamma_1 - gamma_2, exponents, sigma_ratio_series: series })
}

/// Reference ensembles used by tests, the CLI and the acceptance suite.
pub mod reference {
    use super::*;
    use crate::model::library::{qubit_exchange, ExchangeParams};

    /// Two qubit atoms with probability 1/2 each on one system: a decoupled
    /// probe (`V = 0`, not in the ergodic class) and a gapped exchange probe.
    pub fn two_atom_qubit() -> Result<RrdoEnsemble> {
        let params = ExchangeParams {
            omega_s: 1.0,
            omega_e: 1.0,
            coupling: 0.9,
            zz: 0.15,
            tau: 1.1,
            beta_s: 1.0,
            beta_e: 0.5,
        };
        let (sys, coupled) = qubit_exchange(&params)?;
        let free = coupled.with_v(CMat::zeros(4, 4))?.with_tau(0.7)?;
        RrdoEnsemble::from_models(&sys, vec![(0.5, free), (0.5, coupled)])
    }

    /// Two random exchange atoms on a common system, sharing the probe
    /// temperature but differing in coupling, probe frequency and duration.
    pub fn random_shared_beta<R: rand::Rng + ?Sized>(rng: &mut R) -> Result<RrdoEnsemble> {
        let a = ExchangeParams::random(rng);
        let b = ExchangeParams { beta_s: a.beta_s, beta_e: a.beta_e, omega_s: a.omega_s, ..ExchangeParams::random(rng) };
        let (sys, pa) = qubit_exchange(&a)?;
        let (_, pb) = qubit_exchange(&b)?;
        let p = rng.gen_range(0.2..0.8);
        RrdoEnsemble::from_models(&sys, vec![(p, pa), (1.0 - p, pb)])
    }

    /// Two gapped exchange atoms with different probe temperatures.
    pub fn two_gapped_qubit() -> Result<RrdoEnsemble> {
        let a = ExchangeParams { omega_e: 1.0, beta_e: 0.4, ..ExchangeParams::default() };
        let b = ExchangeParams { omega_e: 1.3, coupling: 0.6, tau: 0.9, beta_e: 1.7, ..a };
        let (sys, pa) = qubit_exchange(&a)?;
        let (_, pb) = qubit_exchange(&b)?;
        RrdoEnsemble::from_models(&sys, vec![(0.3, pa), (0.7, pb)])
    }
}

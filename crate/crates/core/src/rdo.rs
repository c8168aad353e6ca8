//! Reduced dynamics operators: validation, contraction norm, spectral
//! classification, the rank-one decomposition `M = P + M_Q`, and
//! diagnostics of deterministic products.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RiesError};
use crate::linalg::{
    eigh, linear_fit, outer, schur, spectral_norm, spectral_projection, trace_norm, unvec,
    vec_of, CMat, CVec, C64, ONE,
};
use crate::model::library::random_unitary;

pub const DEFAULT_TOL_ONE: f64 = 1e-8;
pub const DEFAULT_GAP_MIN: f64 = 1e-6;

/// Exact contraction certificate: the system reference state is known, so
/// the norm `|||A ρ^{1/2}||| = ‖A‖` can be evaluated directly.
#[derive(Clone, Debug, PartialEq)]
pub struct GnsCertificate {
    sqrt_rho: CMat,
    inv_sqrt_rho: CMat,
    euclidean_c0: f64,
}

impl GnsCertificate {
    pub(crate) fn new(sqrt_rho: CMat, inv_sqrt_rho: CMat) -> Self {
        let euclidean_c0 = spectral_norm(&inv_sqrt_rho);
        Self { sqrt_rho, inv_sqrt_rho, euclidean_c0 }
    }

    /// Builds the certificate from `ρ^{1/2}`; fails when it is singular.
    pub fn from_sqrt_rho(sqrt_rho: CMat) -> Result<Self> {
        crate::linalg::check_hermitian(&sqrt_rho, "square root of the reference state", 1e-12)?;
        let (values, _) = eigh(&sqrt_rho);
        if values[0] <= 1e-150 {
            return Err(RiesError::Precondition("reference state is singular".into()));
        }
        let inv = crate::linalg::hermitian_function(&sqrt_rho, |s| C64::new(1.0 / s, 0.0));
        Ok(Self::new(sqrt_rho, inv))
    }

    pub fn dim(&self) -> usize {
        self.sqrt_rho.nrows()
    }

    pub fn sqrt_rho(&self) -> &CMat {
        &self.sqrt_rho
    }

    pub fn inv_sqrt_rho(&self) -> &CMat {
        &self.inv_sqrt_rho
    }

    pub fn psi_s(&self) -> CVec {
        vec_of(&self.sqrt_rho)
    }

    /// `1 / sqrt(λ_min(ρ))`: bounds the Euclidean operator norm of every
    /// matrix that contracts the certified norm.
    pub fn euclidean_c0(&self) -> f64 {
        self.euclidean_c0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerBoundCertificate {
    /// Largest Euclidean norm seen over the sampled words.
    pub c0: f64,
    pub words: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NormCertificate {
    Gns(GnsCertificate),
    PowerBound(PowerBoundCertificate),
}

impl NormCertificate {
    /// Uniform bound on Euclidean norms of products.
    pub fn c0(&self) -> f64 {
        match self {
            NormCertificate::Gns(g) => g.euclidean_c0(),
            NormCertificate::PowerBound(p) => p.c0,
        }
    }

    pub fn gns(&self) -> Option<&GnsCertificate> {
        match self {
            NormCertificate::Gns(g) => Some(g),
            NormCertificate::PowerBound(_) => None,
        }
    }
}

/// `|||v||| = ‖unvec(v) ρ^{-1/2}‖`.
pub fn gns_norm(v: &CVec, cert: &GnsCertificate) -> f64 {
    spectral_norm(&(unvec(v, cert.dim()) * cert.inv_sqrt_rho()))
}

/// Norm of the functional `⟨θ, ·⟩` dual to [`gns_norm`]: the trace norm of
/// `unvec(θ) ρ^{1/2}`.
pub fn dual_norm(theta: &CVec, cert: &GnsCertificate) -> f64 {
    trace_norm(&(unvec(theta, cert.dim()) * cert.sqrt_rho()))
}

/// Sampled estimate (a lower bound) of the operator norm of `x` for
/// [`gns_norm`]. The unit ball of observables is the convex hull of the
/// unitaries, so the supremum is taken over Haar samples and the identity.
pub fn transported_norm_estimate<R: Rng + ?Sized>(
    x: &CMat,
    cert: &GnsCertificate,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let d = cert.dim();
    let probe = |u: &CMat| gns_norm(&(x * vec_of(&(u * cert.sqrt_rho()))), cert);
    let mut best = probe(&CMat::identity(d, d));
    for _ in 0..samples {
        best = best.max(probe(&random_unitary(rng, d)));
    }
    best
}

#[derive(Clone, Debug)]
pub struct ValidateOptions {
    pub invariance_tol: f64,
    pub spectral_tol: f64,
    pub contraction_probes: usize,
    pub words: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            invariance_tol: 1e-11,
            spectral_tol: 1e-10,
            contraction_probes: 64,
            words: 200,
            max_len: 50,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rdo {
    m: CMat,
    psi_s: Arc<CVec>,
    cert: NormCertificate,
}

impl Rdo {
    pub fn matrix(&self) -> &CMat {
        &self.m
    }

    pub fn psi_s(&self) -> &CVec {
        &self.psi_s
    }

    pub fn certificate(&self) -> &NormCertificate {
        &self.cert
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn shared_psi_s(&self) -> &Arc<CVec> {
        &self.psi_s
    }

    /// Points this operator at an equal, shared copy of its invariant vector.
    pub(crate) fn share_psi_s(mut self, psi_s: &Arc<CVec>) -> Self {
        debug_assert_eq!(*self.psi_s, **psi_s);
        self.psi_s = Arc::clone(psi_s);
        self
    }
}

/// Empirical power bound for a family of matrices: the sup of Euclidean
/// norms over all powers up to `max_len` of each member, plus `words`
/// random words of length at most `max_len` over the family and the identity.
///
/// Returns `None` when the norms keep growing (the late half of word lengths
/// exceeds 1.5 times the early half), which flags non-semisimple peripheral
/// spectrum.
pub fn power_bound<R: Rng + ?Sized>(
    family: &[&CMat],
    words: usize,
    max_len: usize,
    rng: &mut R,
) -> Option<PowerBoundCertificate> {
    let n = family.first()?.nrows();
    let half = max_len / 2;
    let mut early = 1.0_f64;
    let mut late = 0.0_f64;
    let mut record = |len: usize, norm: f64| {
        if len <= half {
            early = early.max(norm);
        } else {
            late = late.max(norm);
        }
    };
    for m in family {
        let mut power = CMat::identity(n, n);
        for k in 1..=max_len {
            power = &power * *m;
            record(k, spectral_norm(&power));
        }
    }
    for _ in 0..words {
        let len = rng.gen_range(1..=max_len);
        let mut word = CMat::identity(n, n);
        let mut effective = 0;
        for _ in 0..len {
            let pick = rng.gen_range(0..=family.len());
            if pick < family.len() {
                word = &word * family[pick];
                effective += 1;
            }
        }
        record(effective.max(1), spectral_norm(&word));
    }
    let c0 = early.max(late);
    if !c0.is_finite() || late > 1.5 * early {
        return None;
    }
    Some(PowerBoundCertificate { c0, words, max_len })
}

/// Accepts `m` as a reduced dynamics operator with invariant vector `psi_s`.
///
/// With a [`GnsCertificate`] the contraction property is probed on random
/// vectors; without one an empirical [`PowerBoundCertificate`] is built.
pub fn validate(
    m: CMat,
    psi_s: CVec,
    cert: Option<NormCertificate>,
    opts: &ValidateOptions,
) -> Result<Rdo> {
    let n = m.nrows();
    if !m.is_square() || psi_s.len() != n || n == 0 {
        return Err(RiesError::Dimension(format!(
            "matrix is {}x{}, invariant vector has length {}",
            m.nrows(),
            m.ncols(),
            psi_s.len()
        )));
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(RiesError::Validation("matrix has non-finite entries".into()));
    }
    if (psi_s.norm() - 1.0).abs() > 1e-12 {
        return Err(RiesError::Validation(format!("invariant vector has norm {}", psi_s.norm())));
    }
    let defect = (&m * &psi_s - &psi_s).norm();
    if defect > opts.invariance_tol {
        return Err(RiesError::Validation(format!("‖Mψ_S − ψ_S‖ = {defect:.3e}")));
    }
    let radius = crate::linalg::spectral_radius(&m)?;
    if radius > 1.0 + opts.spectral_tol {
        return Err(RiesError::Validation(format!("spectral radius {radius} exceeds 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cert = match cert {
        Some(NormCertificate::Gns(g)) => {
            if g.dim() * g.dim() != n || (g.psi_s() - &psi_s).norm() > 1e-12 {
                return Err(RiesError::Validation("certificate does not match ψ_S".into()));
            }
            for _ in 0..opts.contraction_probes {
                let v = crate::model::library::random_matrix(&mut rng, n, 1).column(0).into_owned();
                let before = gns_norm(&v, &g);
                let after = gns_norm(&(&m * &v), &g);
                if after > before * (1.0 + 1e-10) {
                    return Err(RiesError::Validation(format!(
                        "not a contraction: |||Mv||| = {after}, |||v||| = {before}"
                    )));
                }
            }
            NormCertificate::Gns(g)
        }
        Some(NormCertificate::PowerBound(p)) => NormCertificate::PowerBound(p),
        None => {
            let bound = power_bound(&[&m], opts.words, opts.max_len, &mut rng)
                .ok_or_else(|| RiesError::Validation("powers are not uniformly bounded".into()))?;
            NormCertificate::PowerBound(bound)
        }
    };
    Ok(Rdo { m, psi_s: Arc::new(psi_s), cert })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub eigenvalues: Vec<C64>,
    pub gap: f64,
    pub one_multiplicity: usize,
    pub in_class_e: bool,
    pub tol_one: f64,
    pub gap_min: f64,
}

pub fn classify(rdo: &Rdo, tol_one: f64, gap_min: f64) -> Result<SpectralReport> {
    classify_matrix(rdo.matrix(), tol_one, gap_min)
}

pub fn classify_matrix(m: &CMat, tol_one: f64, gap_min: f64) -> Result<SpectralReport> {
    let (_, t) = schur(m)?;
    let eigenvalues: Vec<C64> = (0..t.nrows()).map(|i| t[(i, i)]).collect();
    let one_multiplicity = eigenvalues.iter().filter(|z| (*z - ONE).norm() <= tol_one).count();
    let outer_modulus = eigenvalues
        .iter()
        .filter(|z| (*z - ONE).norm() > tol_one)
        .map(|z| z.norm())
        .fold(0.0_f64, f64::max);
    let gap = 1.0 - outer_modulus;
    Ok(SpectralReport {
        in_class_e: one_multiplicity == 1 && gap >= gap_min,
        eigenvalues,
        gap,
        one_multiplicity,
        tol_one,
        gap_min,
    })
}

#[derive(Clone, Debug)]
pub struct RdoDecomposition {
    /// `P₁* ψ_S`, the left fixed vector normalized by `⟨ψ, ψ_S⟩ = 1`.
    pub psi: CVec,
    /// `|ψ_S⟩⟨ψ|`.
    pub p: CMat,
    pub q: CMat,
    pub m_q: CMat,
    /// Number of eigenvalues in the cluster at 1 (1 for the ergodic class).
    pub one_multiplicity: usize,
}

pub fn decompose(rdo: &Rdo) -> Result<RdoDecomposition> {
    decompose_matrix(rdo.matrix(), rdo.psi_s(), DEFAULT_TOL_ONE)
}

pub fn decompose_matrix(m: &CMat, psi_s: &CVec, tol_one: f64) -> Result<RdoDecomposition> {
    let (p1, k) = spectral_projection(m, |z| (z - ONE).norm() <= tol_one)?;
    if k == 0 {
        return Err(RiesError::Precondition("eigenvalue 1 is missing".into()));
    }
    let psi = p1.adjoint() * psi_s;
    let n = m.nrows();
    let p = outer(psi_s, &psi);
    let q = CMat::identity(n, n) - &p;
    let m_q = &q * m * &q;
    Ok(RdoDecomposition { psi, p, q, m_q, one_multiplicity: k })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdealAsymptotics {
    /// `‖Mⁿ − P₁‖` for `n = 1..=n_max`.
    pub errors: Vec<f64>,
    /// Fitted log-rate; `None` when the error vanishes after finitely many steps.
    pub slope: Option<f64>,
    pub spr_mq: f64,
}

/// Errors below this are treated as converged when fitting rates; it sits
/// well above the roundoff floor of `‖Mⁿ − P₁‖`.
pub const FIT_FLOOR: f64 = 1e-11;

pub fn ideal_asymptotics(rdo: &Rdo, n_max: usize) -> Result<IdealAsymptotics> {
    let report = classify(rdo, DEFAULT_TOL_ONE, DEFAULT_GAP_MIN)?;
    if !report.in_class_e {
        return Err(RiesError::Precondition(format!(
            "not in the ergodic class (multiplicity {}, gap {:.3e})",
            report.one_multiplicity, report.gap
        )));
    }
    let dec = decompose(rdo)?;
    let spr_mq = crate::linalg::spectral_radius(&dec.m_q)?;
    let mut power = CMat::identity(rdo.dim(), rdo.dim());
    let mut errors = Vec::with_capacity(n_max);
    for _ in 0..n_max {
        power = &power * rdo.matrix();
        errors.push(spectral_norm(&(&power - &dec.p)));
    }
    Ok(IdealAsymptotics { slope: tail_log_slope(&errors, FIT_FLOOR), errors, spr_mq })
}

/// Slope of `log y_n` against `n` over the second half of the leading run of
/// points above `floor`. Returns `None` if that run has fewer than two points.
pub fn tail_log_slope(series: &[f64], floor: f64) -> Option<f64> {
    let run = series.iter().position(|&y| y <= floor).unwrap_or(series.len());
    if run < 2 {
        return None;
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        (run / 2..run).map(|i| ((i + 1) as f64, series[i].ln())).unzip();
    linear_fit(&xs, &ys).map(|(slope, _)| slope)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrackFlags {
    /// Also estimate operator norms transported to the certified norm (sampled).
    pub transported_norms: bool,
    /// Keep θ_n and ψ_n vectors in every row.
    pub keep_vectors: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub n: usize,
    pub theta: Option<Vec<C64>>,
    pub psi: Option<Vec<C64>>,
    /// Euclidean norm of `M_{Q_1} ⋯ M_{Q_n}`.
    pub mq_norm: f64,
    /// `‖M_{Q_n}‖` of the n-th factor alone.
    pub mq_factor_norm: f64,
    pub psi_overlap: C64,
    /// `‖θ_n − ψ_n‖`.
    pub theta_psi_distance: f64,
    /// Disagreement of the two θ recursions.
    pub theta_agreement: f64,
    /// `‖Ψ_n − (|ψ_S⟩⟨θ_n| + M_Q product)‖`.
    pub reconstruction: f64,
    pub product_norm: f64,
    pub theta_norm: f64,
    pub transported: Option<TransportedNorms>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportedNorms {
    pub product: f64,
    pub theta_dual: f64,
    pub mq_product: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub c0: f64,
    pub max_product_norm: f64,
    pub max_theta_norm: f64,
    pub max_mq_norm: f64,
    pub max_psi_norm: f64,
    pub max_q_norm: f64,
    pub transported_max_product: Option<f64>,
    pub transported_max_theta: Option<f64>,
    pub transported_max_mq: Option<f64>,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductTrace {
    pub rows: Vec<TraceRow>,
    pub bounds: BoundSummary,
    pub max_theta_agreement: f64,
    pub max_reconstruction: f64,
    pub max_overlap_defect: f64,
    /// Final product and θ, kept for the convergence check.
    #[serde(skip)]
    pub final_product: Option<CMat>,
    #[serde(skip)]
    pub final_theta: Option<CVec>,
    #[serde(skip)]
    pub psi_s: Option<CVec>,
}

impl ProductTrace {
    pub fn csv_header(&self) -> Vec<String> {
        let mut header = vec!["n".to_string()];
        if let Some(theta) = self.rows.first().and_then(|r| r.theta.as_ref()) {
            for k in 0..theta.len() {
                header.push(format!("theta_re_{k}"));
                header.push(format!("theta_im_{k}"));
            }
        }
        header.extend(["mq_norm", "psi_overlap"].map(String::from));
        header
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|row| {
                let mut out = vec![row.n.to_string()];
                if let Some(theta) = &row.theta {
                    for z in theta {
                        out.push(format!("{:.17e}", z.re));
                        out.push(format!("{:.17e}", z.im));
                    }
                }
                out.push(format!("{:.17e}", row.mq_norm));
                out.push(format!("{:.17e}", row.psi_overlap.re));
                out
            })
            .collect()
    }
}

/// Runs the product `M₁ ⋯ M_n` and both θ recursions, recording the
/// decomposition identity and uniform-bound diagnostics at every step.
pub fn product_diagnostics(rdos: &[Rdo], flags: TrackFlags) -> Result<ProductTrace> {
    let decs = rdos.iter().map(decompose).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&Rdo, &RdoDecomposition)> = rdos.iter().zip(&decs).collect();
    product_diagnostics_decomposed(&pairs, flags)
}

pub fn product_diagnostics_decomposed(
    factors: &[(&Rdo, &RdoDecomposition)],
    flags: TrackFlags,
) -> Result<ProductTrace> {
    let first = factors
        .first()
        .ok_or_else(|| RiesError::Validation("empty product".into()))?
        .0;
    let psi_s = first.psi_s().clone();
    let n = first.dim();
    for (rdo, _) in factors {
        if rdo.psi_s() != &psi_s {
            return Err(RiesError::Validation("factors do not share ψ_S".into()));
        }
    }
    let c0 = factors.iter().map(|(r, _)| r.certificate().c0()).fold(1.0_f64, f64::max);
    let gns = first.certificate().gns().cloned();
    let mut rng = ChaCha8Rng::seed_from_u64(0xb0b);

    let mut product = CMat::identity(n, n);
    let mut mq_product = CMat::identity(n, n);
    let mut theta_sum = CVec::zeros(n);
    let mut theta_adj = CVec::zeros(n);
    let mut rows = Vec::with_capacity(factors.len());
    let mut bounds = BoundSummary { c0, ..Default::default() };
    let (mut max_agree, mut max_recon, mut max_overlap) = (0.0_f64, 0.0_f64, 0.0_f64);
    let tol = 1e-9;

    for (k, (rdo, dec)) in factors.iter().enumerate() {
        product = &product * rdo.matrix();
        mq_product = &mq_product * &dec.m_q;
        if k == 0 {
            theta_sum = dec.psi.clone();
            theta_adj = dec.psi.clone();
        } else {
            theta_sum = &dec.psi + dec.m_q.adjoint() * &theta_sum;
            theta_adj = rdo.matrix().adjoint() * &theta_adj;
        }
        let agreement = (&theta_sum - &theta_adj).norm();
        let reconstruction = (&product - outer(&psi_s, &theta_sum) - &mq_product).norm();
        let overlap = psi_s.dotc(&theta_sum);
        let product_norm = spectral_norm(&product);
        let theta_norm = theta_sum.norm();
        let mq_norm = spectral_norm(&mq_product);
        let psi_norm = dec.psi.norm();
        let q_norm = spectral_norm(&dec.q);

        let mut violated = product_norm > c0 * (1.0 + tol)
            || theta_norm > c0 * c0 * (1.0 + tol)
            || mq_norm > c0 * (1.0 + c0) * (1.0 + tol)
            || psi_norm > c0 * (1.0 + tol)
            || q_norm > (1.0 + c0) * (1.0 + tol);

        let transported = match (&gns, flags.transported_norms) {
            (Some(g), true) => {
                let t = TransportedNorms {
                    product: transported_norm_estimate(&product, g, 32, &mut rng),
                    theta_dual: dual_norm(&theta_sum, g),
                    mq_product: transported_norm_estimate(&mq_product, g, 32, &mut rng),
                };
                violated |= t.product > 1.0 + tol || t.theta_dual > 1.0 + tol || t.mq_product > 2.0 + tol;
                bounds.transported_max_product =
                    Some(bounds.transported_max_product.unwrap_or(0.0).max(t.product));
                bounds.transported_max_theta =
                    Some(bounds.transported_max_theta.unwrap_or(0.0).max(t.theta_dual));
                bounds.transported_max_mq =
                    Some(bounds.transported_max_mq.unwrap_or(0.0).max(t.mq_product));
                Some(t)
            }
            _ => None,
        };

        bounds.max_product_norm = bounds.max_product_norm.max(product_norm);
        bounds.max_theta_norm = bounds.max_theta_norm.max(theta_norm);
        bounds.max_mq_norm = bounds.max_mq_norm.max(mq_norm);
        bounds.max_psi_norm = bounds.max_psi_norm.max(psi_norm);
        bounds.max_q_norm = bounds.max_q_norm.max(q_norm);
        bounds.violations += violated as usize;
        max_agree = max_agree.max(agreement);
        max_recon = max_recon.max(reconstruction);
        max_overlap = max_overlap.max((overlap - ONE).norm());

        rows.push(TraceRow {
            n: k + 1,
            theta: flags.keep_vectors.then(|| theta_sum.iter().copied().collect()),
            psi: flags.keep_vectors.then(|| dec.psi.iter().copied().collect()),
            mq_norm,
            mq_factor_norm: spectral_norm(&dec.m_q),
            psi_overlap: overlap,
            theta_psi_distance: (&theta_sum - &dec.psi).norm(),
            theta_agreement: agreement,
            reconstruction,
            product_norm,
            theta_norm,
            transported,
        });
    }
    Ok(ProductTrace {
        rows,
        bounds,
        max_theta_agreement: max_agree,
        max_reconstruction: max_recon,
        max_overlap_defect: max_overlap,
        final_product: Some(product),
        final_theta: Some(theta_sum),
        psi_s: Some(psi_s),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    /// ψ_n and θ_n both settle on the same limit.
    Converged,
    /// ψ_n keeps moving, and θ_n does too.
    BothDiverge,
    /// The M_Q products have not decayed enough to decide.
    Inconclusive,
    /// One sequence settles and the other does not.
    Mismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub status: ConvergenceStatus,
    pub tail_distance: f64,
    pub tail_mq_norm: f64,
    pub psi_tail_variation: f64,
    pub theta_tail_variation: f64,
    /// Largest `‖θ_n − ψ_n‖ / (‖M_{Q_n}‖ ‖θ_{n−1}‖)` over the trace.
    pub step_bound_ratio: f64,
    /// `‖Π² − Π‖` for the limiting `Π = |ψ_S⟩⟨ψ_∞|` (converged case only).
    pub projection_defect: Option<f64>,
}

const SETTLED: f64 = 1e-8;

/// Checks that θ_n converges exactly when ψ_n does, with equal limits.
/// Needs a trace recorded with `keep_vectors`.
pub fn convergence_equivalence_check(trace: &ProductTrace) -> Result<ConvergenceReport> {
    let rows = &trace.rows;
    let last = rows.last().ok_or_else(|| RiesError::Validation("empty trace".into()))?;
    let vec_of_row = |v: &Option<Vec<C64>>| -> Result<CVec> {
        v.as_ref()
            .map(|x| CVec::from_column_slice(x))
            .ok_or_else(|| RiesError::Validation("trace was recorded without vectors".into()))
    };
    let psi_last = vec_of_row(&last.psi)?;
    let theta_last = vec_of_row(&last.theta)?;
    let start = rows.len() - rows.len() / 4 - 1;
    let mut psi_var = 0.0_f64;
    let mut theta_var = 0.0_f64;
    for row in &rows[start..] {
        psi_var = psi_var.max((vec_of_row(&row.psi)? - &psi_last).norm());
        theta_var = theta_var.max((vec_of_row(&row.theta)? - &theta_last).norm());
    }
    let mut ratio = 0.0_f64;
    for pair in rows.windows(2) {
        let denom = pair[1].mq_factor_norm * pair[0].theta_norm;
        if denom > 0.0 {
            ratio = ratio.max(pair[1].theta_psi_distance / denom);
        } else if pair[1].theta_psi_distance > 1e-12 {
            ratio = f64::INFINITY;
        }
    }
    let tail_distance = last.theta_psi_distance;
    let mut report = ConvergenceReport {
        status: ConvergenceStatus::Inconclusive,
        tail_distance,
        tail_mq_norm: last.mq_norm,
        psi_tail_variation: psi_var,
        theta_tail_variation: theta_var,
        step_bound_ratio: ratio,
        projection_defect: None,
    };
    if last.mq_norm > 1e-8 {
        return Ok(report);
    }
    let psi_settled = psi_var <= SETTLED;
    let theta_settled = theta_var <= SETTLED;
    report.status = match (psi_settled, theta_settled) {
        (true, true) if tail_distance <= SETTLED => ConvergenceStatus::Converged,
        (false, false) => ConvergenceStatus::BothDiverge,
        _ => ConvergenceStatus::Mismatch,
    };
    if report.status == ConvergenceStatus::Converged {
        let psi_s = trace.psi_s.clone().unwrap_or_else(|| CVec::zeros(psi_last.len()));
        let pi = outer(&psi_s, &psi_last);
        report.projection_defect = Some((&pi * &pi - &pi).norm());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, ZERO};
    use crate::model::library::*;
    use crate::model::rdo_from_model;

    fn diag(values: &[C64]) -> CMat {
        CMat::from_diagonal(&CVec::from_column_slice(values))
    }

    fn e1(n: usize) -> CVec {
        let mut v = CVec::zeros(n);
        v[0] = ONE;
        v
    }

    fn model_rdo(seed: u64) -> Rdo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sys, probe) = qubit_exchange(&ExchangeParams::random(&mut rng)).unwrap();
        rdo_from_model(&sys, &probe).unwrap()
    }

    #[test]
    fn gns_norm_of_reference_vector() {
        let rdo = model_rdo(1);
        let cert = rdo.certificate().gns().unwrap();
        assert!((gns_norm(rdo.psi_s(), cert) - 1.0).abs() < 1e-13);
        assert!((gns_norm(&rdo.psi_s().scale(2.0), cert) - 2.0).abs() < 1e-13);
        assert!((dual_norm(rdo.psi_s(), cert) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn gns_norm_triangle_inequality() {
        let rdo = model_rdo(2);
        let cert = rdo.certificate().gns().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let u = random_matrix(&mut rng, 4, 1).column(0).into_owned();
            let v = random_matrix(&mut rng, 4, 1).column(0).into_owned();
            assert!(gns_norm(&(&u + &v), cert) <= gns_norm(&u, cert) + gns_norm(&v, cert) + 1e-12);
        }
    }

    #[test]
    fn model_rdo_contracts_gns_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..5 {
            let rdo = model_rdo(100 + seed);
            let cert = rdo.certificate().gns().unwrap();
            for _ in 0..1000 {
                let v = random_matrix(&mut rng, 4, 1).column(0).into_owned();
                assert!(gns_norm(&(rdo.matrix() * &v), cert) <= gns_norm(&v, cert) * (1.0 + 1e-10));
            }
        }
    }

    #[test]
    fn singular_certificate_rejected() {
        let sqrt = diag(&[ONE, ZERO]);
        assert!(matches!(GnsCertificate::from_sqrt_rho(sqrt), Err(RiesError::Precondition(_))));
    }

    #[test]
    fn validate_examples() {
        let opts = ValidateOptions::default();
        assert!(validate(CMat::identity(3, 3), e1(3), None, &opts).is_ok());
        let bad = diag(&[ONE, c(2.0, 0.0)]);
        assert!(validate(bad, e1(2), None, &opts).is_err());
        let not_invariant = diag(&[c(0.5, 0.0), ONE]);
        assert!(validate(not_invariant, e1(2), None, &opts).is_err());
        let mut jordan = CMat::identity(3, 3);
        jordan[(1, 2)] = ONE;
        assert!(validate(jordan, e1(3), None, &opts).is_err());
        let rdo = model_rdo(5);
        assert!(matches!(rdo.certificate(), NormCertificate::Gns(_)));
    }

    #[test]
    fn power_bound_records_sup() {
        let m = diag(&[ONE, c(0.5, 0.0)]);
        let rdo = validate(m, e1(2), None, &ValidateOptions::default()).unwrap();
        match rdo.certificate() {
            NormCertificate::PowerBound(p) => {
                assert!((p.c0 - 1.0).abs() < 1e-15);
                assert_eq!((p.words, p.max_len), (200, 50));
            }
            _ => panic!("expected power bound"),
        }
    }

    #[test]
    fn classify_examples() {
        let opts = ValidateOptions::default();
        let rdo = validate(diag(&[ONE, c(0.5, 0.0), c(0.3, 0.0)]), e1(3), None, &opts).unwrap();
        let report = classify(&rdo, DEFAULT_TOL_ONE, DEFAULT_GAP_MIN).unwrap();
        assert!(report.in_class_e);
        assert!((report.gap - 0.5).abs() < 1e-14);
        assert_eq!(report.eigenvalues.len(), 3);

        let rdo = validate(diag(&[ONE, c(0.0, 0.7).exp()]), e1(2), None, &opts).unwrap();
        assert!(!classify(&rdo, DEFAULT_TOL_ONE, DEFAULT_GAP_MIN).unwrap().in_class_e);

        let (sys, probe) = qubit_exchange(&ExchangeParams::default()).unwrap();
        let free = rdo_from_model(&sys, &probe.with_v(CMat::zeros(4, 4)).unwrap()).unwrap();
        let report = classify(&free, DEFAULT_TOL_ONE, DEFAULT_GAP_MIN).unwrap();
        assert!(!report.in_class_e);
        assert!(report.one_multiplicity >= 2);
    }

    #[test]
    fn decompose_rank_one_idempotent() {
        let psi_s = CVec::from_vec(vec![c(0.6, 0.0), c(0.8, 0.0)]);
        let psi = CVec::from_vec(vec![c(1.0, 0.3), c(0.5, -0.225)]);
        assert!((psi.dotc(&psi_s) - ONE).norm() < 1e-14);
        let m = outer(&psi_s, &psi);
        let dec = decompose_matrix(&m, &psi_s, DEFAULT_TOL_ONE).unwrap();
        assert!((&dec.p - &m).norm() < 1e-12);
        assert!(dec.m_q.norm() < 1e-12);
    }

    #[test]
    fn decompose_diagonal() {
        let a = c(0.4, 0.2);
        let dec = decompose_matrix(&diag(&[ONE, a]), &e1(2), DEFAULT_TOL_ONE).unwrap();
        assert!((&dec.psi - e1(2)).norm() < 1e-14);
        assert!((&dec.m_q - diag(&[ZERO, a])).norm() < 1e-14);
    }

    #[test]
    fn decompose_upper_triangular_matches_bordered_solve() {
        let (cc, a) = (c(0.3, -0.4), c(0.5, 0.1));
        let m = CMat::from_row_slice(2, 2, &[ONE, cc, ZERO, a]);
        let dec = decompose_matrix(&m, &e1(2), DEFAULT_TOL_ONE).unwrap();
        let expected = CVec::from_vec(vec![ONE, cc.conj() / (ONE - a.conj())]);
        assert!((&dec.psi - &expected).norm() < 1e-13);
        assert!((m.adjoint() * &dec.psi - &dec.psi).norm() < 1e-13);
        // independent route: bordered system [[M* − 1, ψ_S], [ψ_S*, 0]] [ψ; μ] = [0; 1]
        let n = 2;
        let mut bordered = CMat::zeros(n + 1, n + 1);
        let shifted = m.adjoint() - CMat::identity(n, n);
        bordered.view_mut((0, 0), (n, n)).copy_from(&shifted);
        bordered[(0, n)] = ONE;
        bordered[(n, 0)] = ONE;
        let mut rhs = CVec::zeros(n + 1);
        rhs[n] = ONE;
        let sol = bordered.lu().solve(&rhs).unwrap();
        assert!((sol.rows(0, n).into_owned() - &dec.psi).norm() < 1e-13);
    }

    #[test]
    fn decomposition_algebra_for_models() {
        let decs: Vec<RdoDecomposition> = (0..6).map(|s| decompose(&model_rdo(200 + s)).unwrap()).collect();
        let psi_s = model_rdo(200).psi_s().clone();
        for (s, dec) in decs.iter().enumerate() {
            let rdo = model_rdo(200 + s as u64);
            let m = rdo.matrix();
            // all models in this loop share ψ_S only if the systems agree; check single-atom algebra
            assert!((dec.psi.dotc(rdo.psi_s()) - ONE).norm() < 1e-10);
            assert!((&dec.p * &dec.p - &dec.p).norm() < 1e-10);
            assert!((&dec.m_q * rdo.psi_s()).norm() < 1e-10);
            assert!((&dec.p * &dec.m_q).norm() < 1e-10);
            assert!((m - &dec.p - &dec.m_q).norm() < 1e-10);
        }
        let _ = psi_s;
    }

    #[test]
    fn composed_projection_relations() {
        let sys = qubit_system(1.0, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let decs: Vec<RdoDecomposition> = (0..4)
            .map(|_| {
                let mut p = ExchangeParams::random(&mut rng);
                p.omega_s = 1.0;
                decompose(&rdo_from_model(&sys, &qubit_probe(&p).unwrap()).unwrap()).unwrap()
            })
            .collect();
        for a in &decs {
            for b in &decs {
                assert!((&a.p * &b.p - &b.p).norm() < 1e-10);
                assert!((&a.q * &b.q - &a.q).norm() < 1e-10);
                assert!((&a.q * &b.p).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn decompose_handles_degenerate_one() {
        let (sys, probe) = qubit_exchange(&ExchangeParams::default()).unwrap();
        let free = rdo_from_model(&sys, &probe.with_v(CMat::zeros(4, 4)).unwrap()).unwrap();
        let dec = decompose(&free).unwrap();
        assert!(dec.one_multiplicity >= 2);
        assert!((free.matrix().adjoint() * &dec.psi - &dec.psi).norm() < 1e-10);
        assert!((dec.psi.dotc(free.psi_s()) - ONE).norm() < 1e-10);
    }

    #[test]
    fn decompose_without_one_fails() {
        let m = diag(&[c(0.5, 0.0), c(0.2, 0.0)]);
        assert!(matches!(decompose_matrix(&m, &e1(2), DEFAULT_TOL_ONE), Err(RiesError::Precondition(_))));
    }

    #[test]
    fn ideal_asymptotics_examples() {
        let opts = ValidateOptions::default();
        let rdo = validate(diag(&[ONE, c(0.5, 0.0)]), e1(2), None, &opts).unwrap();
        let ideal = ideal_asymptotics(&rdo, 60).unwrap();
        for (k, err) in ideal.errors.iter().enumerate() {
            assert!((err - 0.5_f64.powi(k as i32 + 1)).abs() < 1e-15);
        }
        assert!((ideal.slope.unwrap() - 0.5_f64.ln()).abs() < 1e-9);
        assert!((ideal.spr_mq - 0.5).abs() < 1e-14);

        let psi_s = CVec::from_vec(vec![c(0.6, 0.0), c(0.8, 0.0)]);
        let psi = CVec::from_vec(vec![c(1.0, 0.3), c(0.5, -0.225)]);
        let rank_one = validate(outer(&psi_s, &psi), psi_s, None, &opts).unwrap();
        let ideal = ideal_asymptotics(&rank_one, 10).unwrap();
        assert!(ideal.errors.iter().all(|e| *e < 1e-13));
        assert!(ideal.slope.is_none());

        let not_ergodic = validate(CMat::identity(2, 2), e1(2), None, &opts).unwrap();
        assert!(matches!(ideal_asymptotics(&not_ergodic, 10), Err(RiesError::Precondition(_))));
    }

    #[test]
    fn ideal_rate_matches_spectral_radius_for_models() {
        for seed in 0..5 {
            let rdo = model_rdo(300 + seed);
            let ideal = ideal_asymptotics(&rdo, 200).unwrap();
            let slope = ideal.slope.unwrap();
            let target = ideal.spr_mq.ln();
            assert!(((slope - target) / target).abs() < 0.1, "{slope} vs {target}");
            assert!(slope.exp() <= ideal.spr_mq + 0.05);
        }
    }

    #[test]
    fn product_diagnostics_trivial_cases() {
        let opts = ValidateOptions::default();
        let psi_s = CVec::from_vec(vec![c(0.6, 0.0), c(0.8, 0.0)]);
        let psi = CVec::from_vec(vec![c(1.0, 0.3), c(0.5, -0.225)]);
        let rank_one = validate(outer(&psi_s, &psi), psi_s, None, &opts).unwrap();
        let trace = product_diagnostics(&vec![rank_one; 5], TrackFlags { keep_vectors: true, ..Default::default() }).unwrap();
        for row in &trace.rows {
            let theta = CVec::from_column_slice(row.theta.as_ref().unwrap());
            assert!((theta - &psi).norm() < 1e-12);
        }

        let a = validate(diag(&[ONE, c(0.5, 0.0)]), e1(2), None, &opts).unwrap();
        let b = validate(diag(&[ONE, c(-0.3, 0.2)]), e1(2), None, &opts).unwrap();
        let trace = product_diagnostics(&[a.clone(), b, a], TrackFlags { keep_vectors: true, ..Default::default() }).unwrap();
        for row in &trace.rows {
            let theta = CVec::from_column_slice(row.theta.as_ref().unwrap());
            assert!((theta - e1(2)).norm() < 1e-14);
        }
    }

    #[test]
    fn product_diagnostics_mixed_models() {
        let sys = qubit_system(1.0, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let atoms: Vec<Rdo> = (0..2)
            .map(|_| {
                let mut p = ExchangeParams::random(&mut rng);
                p.omega_s = 1.0;
                rdo_from_model(&sys, &qubit_probe(&p).unwrap()).unwrap()
            })
            .collect();
        let word: Vec<Rdo> = (0..100).map(|_| atoms[rng.gen_range(0..2)].clone()).collect();
        let trace = product_diagnostics(&word, TrackFlags { transported_norms: true, keep_vectors: false }).unwrap();
        assert!(trace.max_reconstruction < 1e-10);
        assert!(trace.max_theta_agreement < 1e-10);
        assert!(trace.max_overlap_defect < 1e-9);
        assert_eq!(trace.bounds.violations, 0);
        assert!(trace.bounds.transported_max_theta.unwrap() <= 1.0 + 1e-9);
    }

    #[test]
    fn product_diagnostics_rejects_mismatched_psi() {
        let a = model_rdo(8);
        let opts = ValidateOptions::default();
        let b = validate(CMat::identity(4, 4), e1(4), None, &opts).unwrap();
        assert!(product_diagnostics(&[a, b], TrackFlags::default()).is_err());
    }

    #[test]
    fn convergence_check_cases() {
        let flags = TrackFlags { keep_vectors: true, ..Default::default() };
        let rdo = model_rdo(9);
        let trace = product_diagnostics(&vec![rdo; 300], flags).unwrap();
        let report = convergence_equivalence_check(&trace).unwrap();
        assert_eq!(report.status, ConvergenceStatus::Converged);
        assert!(report.projection_defect.unwrap() < 1e-9);

        let sys = qubit_system(1.0, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let atoms: Vec<Rdo> = (0..2)
            .map(|_| {
                let mut p = ExchangeParams::random(&mut rng);
                p.omega_s = 1.0;
                rdo_from_model(&sys, &qubit_probe(&p).unwrap()).unwrap()
            })
            .collect();
        let alternating: Vec<Rdo> = (0..300).map(|k| atoms[k % 2].clone()).collect();
        let trace = product_diagnostics(&alternating, flags).unwrap();
        let report = convergence_equivalence_check(&trace).unwrap();
        assert_eq!(report.status, ConvergenceStatus::BothDiverge);
        assert!(report.step_bound_ratio <= 1.0 + 1e-9);

        let short = product_diagnostics(&alternating[..3], flags).unwrap();
        assert_eq!(convergence_equivalence_check(&short).unwrap().status, ConvergenceStatus::Inconclusive);
    }
}

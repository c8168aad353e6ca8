//! Finite-dimensional system–probe models.
//!
//! A model fixes the system Hamiltonian and inverse temperature, and for each
//! interaction step a probe Hamiltonian, probe temperature, coupling `V` on
//! `S ⊗ E` and interaction time. From these we build the one-step reduced
//! Heisenberg map, the reduced dynamics operator in the vectorized picture,
//! window reductions of instantaneous observables, and an exact dense
//! simulation of a truncated chain that serves as the reference oracle.
//!
//! The vectorized picture identifies a `d x d` observable `A` with the vector
//! `A ρ_S^{1/2}`; the reference vector is `ψ_S = vec(ρ_S^{1/2})`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, RiesError};
use crate::linalg::{
    self, c, check_hermitian, eigh, embed, hermitian_function, unitary_exp, vec_of,
    weighted_partial_trace, CMat, CVec, C64, ONE, ZERO,
};
use crate::rdo::{validate, GnsCertificate, NormCertificate, Rdo, ValidateOptions};

pub const HERMITIAN_TOL: f64 = 1e-12;
/// Largest total Hilbert space dimension the chain oracle will build.
pub const ORACLE_DIM_LIMIT: usize = 4096;
/// Largest `l + r` accepted for window reductions.
pub const WINDOW_LIMIT: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix(CMat);

impl DensityMatrix {
    pub fn new(rho: CMat) -> Result<Self> {
        check_hermitian(&rho, "density matrix", 1e-12)?;
        let trace = rho.trace();
        if (trace - ONE).norm() > 1e-12 {
            return Err(RiesError::Validation(format!("density matrix trace is {trace}")));
        }
        let (values, _) = eigh(&rho);
        if values[0] < -1e-12 {
            return Err(RiesError::Validation(format!(
                "density matrix has negative eigenvalue {:.3e}",
                values[0]
            )));
        }
        Ok(Self(rho))
    }

    pub fn matrix(&self) -> &CMat {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn into_inner(self) -> CMat {
        self.0
    }
}

/// Gibbs state `exp(-beta h) / Tr exp(-beta h)`.
pub fn gibbs(h: &CMat, beta: f64) -> Result<DensityMatrix> {
    check_hermitian(h, "Hamiltonian", HERMITIAN_TOL)?;
    if !beta.is_finite() || beta < 0.0 {
        return Err(RiesError::Validation(format!("inverse temperature {beta} must be finite and >= 0")));
    }
    let (values, _) = eigh(h);
    let ground = values[0];
    let spread = beta * (values[values.len() - 1] - ground);
    if spread > 700.0 {
        return Err(RiesError::Range(format!(
            "beta * spectral range = {spread:.1} underflows the Gibbs weights"
        )));
    }
    let mut rho = hermitian_function(h, |e| C64::new((-beta * (e - ground)).exp(), 0.0));
    let z = rho.trace();
    rho.unscale_mut(z.re);
    Ok(DensityMatrix(linalg::symmetrize(&rho)))
}

#[derive(Clone, Debug)]
pub struct SystemSpec {
    h: CMat,
    beta: f64,
    rho: DensityMatrix,
    sqrt_rho: CMat,
    inv_sqrt_rho: CMat,
}

impl SystemSpec {
    pub fn new(h: CMat, beta: f64) -> Result<Self> {
        if h.nrows() == 0 {
            return Err(RiesError::Validation("system dimension must be positive".into()));
        }
        let rho = gibbs(&h, beta)?;
        let (values, _) = eigh(rho.matrix());
        if values[0] <= 0.0 {
            return Err(RiesError::Precondition("system Gibbs state is singular".into()));
        }
        let sqrt_rho = hermitian_function(rho.matrix(), |p| C64::new(p.max(0.0).sqrt(), 0.0));
        let inv_sqrt_rho = hermitian_function(rho.matrix(), |p| C64::new(1.0 / p.sqrt(), 0.0));
        Ok(Self { h, beta, rho, sqrt_rho, inv_sqrt_rho })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn h(&self) -> &CMat {
        &self.h
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gibbs_state(&self) -> &DensityMatrix {
        &self.rho
    }

    pub fn psi_s(&self) -> CVec {
        vec_of(&self.sqrt_rho)
    }

    pub fn certificate(&self) -> GnsCertificate {
        GnsCertificate::new(self.sqrt_rho.clone(), self.inv_sqrt_rho.clone())
    }

    /// Vector `φ` with `<φ, ι(A)> = Tr[rho A]` for every observable `A`.
    pub fn state_vector(&self, rho: &DensityMatrix) -> Result<CVec> {
        if rho.dim() != self.dim() {
            return Err(RiesError::Dimension(format!(
                "initial state has dimension {}, system has {}",
                rho.dim(),
                self.dim()
            )));
        }
        Ok(vec_of(&(rho.matrix() * &self.inv_sqrt_rho)))
    }

    /// `ι(A) = A ρ^{1/2}`, vectorized.
    pub fn embed_observable(&self, a: &CMat) -> CVec {
        vec_of(&(a * &self.sqrt_rho))
    }
}

#[derive(Clone, Debug)]
pub struct ProbeSpec {
    h: CMat,
    beta: f64,
    v: CMat,
    tau: f64,
    rho: DensityMatrix,
}

impl ProbeSpec {
    /// `tau = 0` is accepted as a degenerate (identity) step.
    pub fn new(h: CMat, beta: f64, v: CMat, tau: f64) -> Result<Self> {
        if h.nrows() == 0 {
            return Err(RiesError::Validation("probe dimension must be positive".into()));
        }
        check_hermitian(&v, "interaction", HERMITIAN_TOL)?;
        if v.nrows() % h.nrows() != 0 {
            return Err(RiesError::Dimension(format!(
                "interaction of size {} is not a multiple of probe dimension {}",
                v.nrows(),
                h.nrows()
            )));
        }
        if !tau.is_finite() || tau < 0.0 {
            return Err(RiesError::Validation(format!("interaction time {tau} must be finite and >= 0")));
        }
        let rho = gibbs(&h, beta)?;
        Ok(Self { h, beta, v, tau, rho })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn h(&self) -> &CMat {
        &self.h
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn v(&self) -> &CMat {
        &self.v
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn gibbs_state(&self) -> &DensityMatrix {
        &self.rho
    }

    pub fn with_v(&self, v: CMat) -> Result<Self> {
        Self::new(self.h.clone(), self.beta, v, self.tau)
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        Self::new(self.h.clone(), self.beta, self.v.clone(), tau)
    }

    fn check_against(&self, sys: &SystemSpec) -> Result<()> {
        if self.v.nrows() != sys.dim() * self.dim() {
            return Err(RiesError::Dimension(format!(
                "interaction acts on dimension {}, expected {} x {}",
                self.v.nrows(),
                sys.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `H_S ⊗ 1 + 1 ⊗ H_E + V`.
    pub fn coupled_hamiltonian(&self, sys: &SystemSpec) -> Result<CMat> {
        self.check_against(sys)?;
        let ds = sys.dim();
        let de = self.dim();
        Ok(sys.h().kronecker(&CMat::identity(de, de)) + CMat::identity(ds, ds).kronecker(&self.h) + &self.v)
    }
}

/// `exp(-i tau (H_S ⊗ 1 + 1 ⊗ H_E + V))`.
pub fn step_unitary(sys: &SystemSpec, probe: &ProbeSpec) -> Result<CMat> {
    Ok(unitary_exp(&probe.coupled_hamiltonian(sys)?, probe.tau()))
}

/// One-step reduced Heisenberg map `A -> Tr_E[(1 ⊗ ρ_E) U^* (A ⊗ 1) U]`,
/// as a `d² x d²` matrix on column-major vectorized observables.
pub fn reduced_heisenberg_map(sys: &SystemSpec, probe: &ProbeSpec) -> Result<CMat> {
    let u = step_unitary(sys, probe)?;
    let d = sys.dim();
    let de = probe.dim();
    let id_e = CMat::identity(de, de);
    let mut phi = CMat::zeros(d * d, d * d);
    for j in 0..d {
        for i in 0..d {
            let mut basis = CMat::zeros(d, d);
            basis[(i, j)] = ONE;
            let evolved = u.adjoint() * basis.kronecker(&id_e) * &u;
            let image = weighted_partial_trace(&evolved, d, probe.gibbs_state().matrix());
            phi.set_column(i + j * d, &vec_of(&image));
        }
    }
    Ok(phi)
}

/// Applies a vectorized map to a matrix.
pub fn apply_map(map: &CMat, a: &CMat) -> CMat {
    linalg::unvec(&(map * vec_of(a)), a.nrows())
}

/// Choi matrix `Σ_ij E_ij ⊗ Φ(E_ij)`.
pub fn choi_matrix(map: &CMat, d: usize) -> CMat {
    let mut choi = CMat::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            let mut basis = CMat::zeros(d, d);
            basis[(i, j)] = ONE;
            let image = apply_map(map, &basis);
            choi += basis.kronecker(&image);
        }
    }
    choi
}

/// Reduced dynamics operator `M = ι ∘ Φ ∘ ι⁻¹` of one interaction step.
pub fn rdo_from_model(sys: &SystemSpec, probe: &ProbeSpec) -> Result<Rdo> {
    let phi = reduced_heisenberg_map(sys, probe)?;
    let cert = sys.certificate();
    let m = linalg::right_mul(cert.sqrt_rho()) * phi * linalg::right_mul(cert.inv_sqrt_rho());
    validate(
        m,
        sys.psi_s(),
        Some(NormCertificate::Gns(cert)),
        &ValidateOptions::default(),
    )
}

/// Instantaneous observable in product form `A_S ⊗ B^{(-l)} ⊗ ... ⊗ B^{(r)}`.
#[derive(Clone, Debug)]
pub struct ObservableWindow {
    pub a_s: CMat,
    pub b_list: Vec<CMat>,
    pub l: usize,
    pub r: usize,
}

impl ObservableWindow {
    pub fn new(a_s: CMat, b_list: Vec<CMat>, l: usize, r: usize) -> Result<Self> {
        if b_list.len() != l + r + 1 {
            return Err(RiesError::Validation(format!(
                "window with l={l}, r={r} needs {} probe observables, got {}",
                l + r + 1,
                b_list.len()
            )));
        }
        Ok(Self { a_s, b_list, l, r })
    }

    pub fn to_operator(&self) -> WindowOperator {
        let op = self.b_list.iter().fold(self.a_s.clone(), |acc, b| acc.kronecker(b));
        let mut dims = vec![self.a_s.nrows()];
        dims.extend(self.b_list.iter().map(|b| b.nrows()));
        WindowOperator { l: self.l, r: self.r, dims, op }
    }
}

/// General operator on `S ⊗ E_{m-l} ⊗ ... ⊗ E_{m+r}`.
#[derive(Clone, Debug)]
pub struct WindowOperator {
    pub l: usize,
    pub r: usize,
    /// `[dim_s, dim_e(-l), ..., dim_e(r)]`.
    pub dims: Vec<usize>,
    pub op: CMat,
}

impl WindowOperator {
    pub fn new(l: usize, r: usize, dims: Vec<usize>, op: CMat) -> Result<Self> {
        if dims.len() != l + r + 2 {
            return Err(RiesError::Validation(format!(
                "window with l={l}, r={r} needs {} factor dimensions",
                l + r + 2
            )));
        }
        let total: usize = dims.iter().product();
        if op.nrows() != total || op.ncols() != total {
            return Err(RiesError::Dimension(format!(
                "window operator is {}x{}, factors give {total}",
                op.nrows(),
                op.ncols()
            )));
        }
        Ok(Self { l, r, dims, op })
    }

    /// Operator acting on `S` and the probe at window slot `slot` (in `-l..=r`).
    pub fn from_local(
        l: usize,
        r: usize,
        dims: Vec<usize>,
        local: &CMat,
        slot: isize,
    ) -> Result<Self> {
        let site = (slot + l as isize + 1) as usize;
        if slot < -(l as isize) || slot > r as isize {
            return Err(RiesError::Validation(format!("slot {slot} outside window")));
        }
        if local.nrows() != dims[0] * dims[site] {
            return Err(RiesError::Dimension("local operator does not match slot dimensions".into()));
        }
        let op = embed(local, &dims, &[0, site]);
        Self::new(l, r, dims, op)
    }

    pub fn len(&self) -> usize {
        self.l + self.r + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<&ObservableWindow> for WindowOperator {
    fn from(w: &ObservableWindow) -> Self {
        w.to_operator()
    }
}

/// Observable evaluated by the chain oracle at time step `m`.
#[derive(Clone, Debug)]
pub enum ChainObservable {
    /// Acts on the system only.
    System(CMat),
    /// Instantaneous observable riding with the interaction window.
    Window(WindowOperator),
}

impl ChainObservable {
    fn reach(&self) -> usize {
        match self {
            ChainObservable::System(_) => 0,
            ChainObservable::Window(w) => w.r,
        }
    }
}

/// Unitary of one time step on `S ⊗ (listed probes)`; probe `active` couples
/// to `S`, every listed probe evolves freely.
fn chain_step_unitary(
    sys: &SystemSpec,
    probes: &[&ProbeSpec],
    active: usize,
    tau: f64,
) -> Result<CMat> {
    let mut dims = vec![sys.dim()];
    dims.extend(probes.iter().map(|p| p.dim()));
    let mut h = embed(sys.h(), &dims, &[0]);
    for (j, p) in probes.iter().enumerate() {
        h += embed(p.h(), &dims, &[j + 1]);
    }
    probes[active].check_against(sys)?;
    h += embed(probes[active].v(), &dims, &[0, active + 1]);
    Ok(unitary_exp(&h, tau))
}

fn product_state(factors: &[&CMat]) -> CMat {
    factors.iter().skip(1).fold(factors[0].clone(), |acc, f| acc.kronecker(f))
}

/// Dense Schrödinger-picture simulation of `S` plus a truncated chain.
///
/// Each step applies the exponential of the full Hamiltonian of the
/// truncated chain (system, coupling to the active probe, and free terms of
/// every probe), as a product of its commuting local factors.
pub struct FullChain<'a> {
    sys: &'a SystemSpec,
    probes: Vec<&'a ProbeSpec>,
    dims: Vec<usize>,
    state: CMat,
    steps_done: usize,
}

impl<'a> FullChain<'a> {
    pub fn new(sys: &'a SystemSpec, probes: &'a [ProbeSpec], rho_init: &DensityMatrix) -> Result<Self> {
        if rho_init.dim() != sys.dim() {
            return Err(RiesError::Dimension("initial state does not match system".into()));
        }
        let mut dims = vec![sys.dim()];
        dims.extend(probes.iter().map(|p| p.dim()));
        let total = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).unwrap_or(usize::MAX);
        if total > ORACLE_DIM_LIMIT {
            return Err(RiesError::Capacity {
                what: "truncated chain".into(),
                needed: total,
                limit: ORACLE_DIM_LIMIT,
            });
        }
        let mut factors = vec![rho_init.matrix()];
        factors.extend(probes.iter().map(|p| p.gibbs_state().matrix()));
        let state = product_state(&factors);
        Ok(Self { sys, probes: probes.iter().collect(), dims, state, steps_done: 0 })
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn advance(&mut self) -> Result<()> {
        let k = self.steps_done;
        if k >= self.probes.len() {
            return Err(RiesError::Capacity {
                what: "chain steps".into(),
                needed: k + 1,
                limit: self.probes.len(),
            });
        }
        let active = self.probes[k];
        active.check_against(self.sys)?;
        let tau = active.tau();
        let mut factors = vec![(unitary_exp(&active.coupled_hamiltonian(self.sys)?, tau), vec![0, k + 1])];
        for (j, p) in self.probes.iter().enumerate().filter(|(j, _)| *j != k) {
            factors.push((unitary_exp(p.h(), tau), vec![j + 1]));
        }
        for (u, sites) in &factors {
            let half = linalg::apply_local(u, &self.state, &self.dims, sites);
            self.state = linalg::apply_local(u, &half.adjoint(), &self.dims, sites);
        }
        self.steps_done += 1;
        Ok(())
    }

    /// `Tr[ρ(m) X]` for an operator on the whole truncated chain.
    pub fn expectation_full(&self, x: &CMat) -> C64 {
        self.state.iter().zip(x.transpose().iter()).map(|(a, b)| a * b).sum()
    }

    /// Full-chain Hamiltonian during step `k` (1-based):
    /// `H_S + V_k + Σ_j H_{E_j}`.
    pub fn hamiltonian(&self, k: usize) -> Result<CMat> {
        if k == 0 || k > self.probes.len() {
            return Err(RiesError::Validation(format!("step {k} outside the chain")));
        }
        let mut h = embed(self.sys.h(), &self.dims, &[0]);
        for (j, p) in self.probes.iter().enumerate() {
            h += embed(p.h(), &self.dims, &[j + 1]);
        }
        h += embed(self.probes[k - 1].v(), &self.dims, &[0, k]);
        Ok(h)
    }

    /// Expectation of `obs` anchored at the current step.
    pub fn expectation(&self, obs: &ChainObservable) -> Result<C64> {
        let m = self.steps_done;
        match obs {
            ChainObservable::System(a) => {
                if a.nrows() != self.sys.dim() {
                    return Err(RiesError::Dimension("observable does not match system".into()));
                }
                Ok(self.expectation_full(&embed(a, &self.dims, &[0])))
            }
            ChainObservable::Window(w) => {
                if m < w.l + 1 {
                    return Err(RiesError::Validation(format!(
                        "window with l={} needs m >= {}, got {m}",
                        w.l,
                        w.l + 1
                    )));
                }
                if m + w.r > self.probes.len() {
                    return Err(RiesError::Capacity {
                        what: "chain length".into(),
                        needed: m + w.r,
                        limit: self.probes.len(),
                    });
                }
                let mut sites = vec![0];
                sites.extend((m - w.l)..=(m + w.r));
                for (q, &s) in sites.iter().enumerate() {
                    if w.dims[q] != self.dims[s] {
                        return Err(RiesError::Dimension("window dimensions do not match chain".into()));
                    }
                }
                Ok(self.expectation_full(&embed(&w.op, &self.dims, &sites)))
            }
        }
    }
}

/// Exact value of `ρ(α^m(O))` with initial state `rho_init ⊗ (probe Gibbs states)`.
pub fn full_chain_oracle(
    sys: &SystemSpec,
    steps: &[ProbeSpec],
    obs: &ChainObservable,
    m: usize,
    rho_init: &DensityMatrix,
) -> Result<C64> {
    let needed = m + obs.reach();
    if needed > steps.len() {
        return Err(RiesError::Validation(format!(
            "oracle needs {needed} probe specifications, got {}",
            steps.len()
        )));
    }
    let mut chain = FullChain::new(sys, &steps[..needed.max(m)], rho_init)?;
    for _ in 0..m {
        chain.advance()?;
    }
    chain.expectation(obs)
}

/// System operator `N_op` of a window observable: the exact contraction of
/// the `l + r + 1` window probes, with the interaction steps of slots
/// `-l..=0` applied in the Heisenberg picture.
pub fn reduce_instant_operator(
    sys: &SystemSpec,
    window_steps: &[&ProbeSpec],
    obs: &WindowOperator,
) -> Result<CMat> {
    if obs.l + obs.r > WINDOW_LIMIT {
        return Err(RiesError::Capacity {
            what: "window extent l + r".into(),
            needed: obs.l + obs.r,
            limit: WINDOW_LIMIT,
        });
    }
    if window_steps.len() != obs.len() {
        return Err(RiesError::Validation(format!(
            "window needs {} probe specifications, got {}",
            obs.len(),
            window_steps.len()
        )));
    }
    if obs.dims[0] != sys.dim()
        || window_steps.iter().zip(&obs.dims[1..]).any(|(p, &d)| p.dim() != d)
    {
        return Err(RiesError::Dimension("window operator does not match probes".into()));
    }
    let total: usize = obs.dims.iter().product();
    let mut w = CMat::identity(total, total);
    for slot in 0..=obs.l {
        let u = chain_step_unitary(sys, window_steps, slot, window_steps[slot].tau())?;
        w = u * w;
    }
    let heisenberg = w.adjoint() * &obs.op * &w;
    let sigma = product_state(
        &window_steps.iter().map(|p| p.gibbs_state().matrix()).collect::<Vec<_>>(),
    );
    Ok(weighted_partial_trace(&heisenberg, sys.dim(), &sigma))
}

/// Vectorized-picture matrix `N` of a window observable: left
/// multiplication by [`reduce_instant_operator`], so that
/// `ρ_0(α^m(O)) = <ψ_S, M_1 ⋯ M_{m-l-1} N ψ_S>`.
pub fn reduce_instant(
    sys: &SystemSpec,
    window_steps: &[&ProbeSpec],
    obs: &WindowOperator,
) -> Result<CMat> {
    Ok(linalg::left_mul(&reduce_instant_operator(sys, window_steps, obs)?))
}

/// Concrete models used by tests, examples and the CLI.
pub mod library {
    use super::*;

    /// Parameters of the qubit–qubit exchange model
    /// `H_S = ω_S |1><1|`, `H_E = ω_E |1><1|`,
    /// `V = λ (σ⁺ ⊗ σ⁻ + σ⁻ ⊗ σ⁺) + μ σ_z ⊗ σ_z`.
    #[derive(Clone, Copy, Debug, PartialEq)]
    pub struct ExchangeParams {
        pub omega_s: f64,
        pub omega_e: f64,
        pub coupling: f64,
        pub zz: f64,
        pub tau: f64,
        pub beta_s: f64,
        pub beta_e: f64,
    }

    impl Default for ExchangeParams {
        fn default() -> Self {
            Self { omega_s: 1.0, omega_e: 1.2, coupling: 0.8, zz: 0.0, tau: 1.3, beta_s: 1.0, beta_e: 0.6 }
        }
    }

    impl ExchangeParams {
        pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
            Self {
                omega_s: rng.gen_range(0.5..1.5),
                omega_e: rng.gen_range(0.5..1.5),
                coupling: rng.gen_range(0.3..1.0),
                zz: rng.gen_range(-0.3..0.3),
                tau: rng.gen_range(0.5..2.0),
                beta_s: rng.gen_range(0.2..2.0),
                beta_e: rng.gen_range(0.2..2.0),
            }
        }
    }

    pub fn sigma_plus() -> CMat {
        let mut m = CMat::zeros(2, 2);
        m[(1, 0)] = ONE;
        m
    }

    pub fn sigma_z() -> CMat {
        CMat::from_diagonal(&CVec::from_vec(vec![ONE, -ONE]))
    }

    pub fn exchange_coupling(coupling: f64, zz: f64) -> CMat {
        let sp = sigma_plus();
        let sm = sp.adjoint();
        let hop = sp.kronecker(&sm) + sm.kronecker(&sp);
        hop.scale(coupling) + sigma_z().kronecker(&sigma_z()).scale(zz)
    }

    pub fn qubit_system(omega_s: f64, beta_s: f64) -> Result<SystemSpec> {
        SystemSpec::new(CMat::from_diagonal(&CVec::from_vec(vec![ZERO, c(omega_s, 0.0)])), beta_s)
    }

    pub fn qubit_probe(p: &ExchangeParams) -> Result<ProbeSpec> {
        ProbeSpec::new(
            CMat::from_diagonal(&CVec::from_vec(vec![ZERO, c(p.omega_e, 0.0)])),
            p.beta_e,
            exchange_coupling(p.coupling, p.zz),
            p.tau,
        )
    }

    pub fn qubit_exchange(p: &ExchangeParams) -> Result<(SystemSpec, ProbeSpec)> {
        Ok((qubit_system(p.omega_s, p.beta_s)?, qubit_probe(p)?))
    }

    /// Gaussian Hermitian matrix with entries of standard deviation `scale`.
    pub fn random_hermitian<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> CMat {
        let raw = CMat::from_fn(n, n, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            c(re * scale, im * scale)
        });
        linalg::symmetrize(&raw)
    }

    /// Random complex matrix with standard Gaussian entries.
    pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat {
        CMat::from_fn(rows, cols, |_, _| {
            c(rng.sample(StandardNormal), rng.sample(StandardNormal))
        })
    }

    pub fn random_density<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DensityMatrix {
        let g = random_matrix(rng, n, n);
        let mut rho = &g * g.adjoint();
        let t = rho.trace().re;
        rho.unscale_mut(t);
        DensityMatrix::new(linalg::symmetrize(&rho)).expect("Wishart sample is a state")
    }

    /// Haar-distributed unitary via QR of a Gaussian matrix.
    pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMat {
        let qr = random_matrix(rng, n, n).qr();
        let (q, r) = (qr.q(), qr.r());
        let mut q = q;
        for j in 0..n {
            let d = r[(j, j)];
            let phase = if d.norm() > 0.0 { d / d.norm() } else { ONE };
            for i in 0..n {
                q[(i, j)] *= phase;
            }
        }
        q
    }

    /// Generic model with random Hermitian `H_S`, `H_E` and `V`.
    pub fn random_model<R: Rng + ?Sized>(
        rng: &mut R,
        dim_s: usize,
        dim_e: usize,
    ) -> Result<(SystemSpec, ProbeSpec)> {
        let sys = SystemSpec::new(random_hermitian(rng, dim_s, 0.7), rng.gen_range(0.2..1.5))?;
        let probe = ProbeSpec::new(
            random_hermitian(rng, dim_e, 0.7),
            rng.gen_range(0.2..1.5),
            random_hermitian(rng, dim_s * dim_e, 0.5),
            rng.gen_range(0.4..1.6),
        )?;
        Ok((sys, probe))
    }
}

#[cfg(test)]
mod tests {
    use super::library::*;
    use super::*;
    use crate::linalg::{spectral_norm, unvec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gibbs_infinite_temperature_is_maximally_mixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_hermitian(&mut rng, 3, 1.0);
        let rho = gibbs(&h, 0.0).unwrap();
        assert!((rho.matrix() - CMat::identity(3, 3).scale(1.0 / 3.0)).norm() < 1e-14);
    }

    #[test]
    fn gibbs_two_level() {
        let (w, beta) = (0.7, 1.9);
        let h = CMat::from_diagonal(&CVec::from_vec(vec![ZERO, c(w, 0.0)]));
        let rho = gibbs(&h, beta).unwrap();
        let z = 1.0 + (-beta * w).exp();
        assert!((rho.matrix()[(0, 0)].re - 1.0 / z).abs() < 1e-15);
        assert!((rho.matrix()[(1, 1)].re - (-beta * w).exp() / z).abs() < 1e-15);
        assert!(rho.matrix()[(0, 1)].norm() < 1e-15);
    }

    #[test]
    fn gibbs_spectrum_is_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_hermitian(&mut rng, 4, 1.0);
        let rho = gibbs(&h, 1.0).unwrap();
        assert!((rho.matrix() * &h - &h * rho.matrix()).norm() < 1e-13);
        assert!((rho.matrix().trace() - ONE).norm() < 1e-14);
        // oracle: eigen-decomposition of h, softmax of -spectrum, then compare
        // in the eigenbasis of h
        let eig = h.clone().symmetric_eigen();
        let weights: Vec<f64> = eig.eigenvalues.iter().map(|e| (-e).exp()).collect();
        let z: f64 = weights.iter().sum();
        for (k, w) in weights.iter().enumerate() {
            let v = eig.eigenvectors.column(k).into_owned();
            let pk = (v.adjoint() * rho.matrix() * &v)[(0, 0)].re;
            assert!((pk - w / z).abs() < 1e-13);
        }
    }

    #[test]
    fn gibbs_rejects_bad_input() {
        let mut h = CMat::zeros(2, 2);
        h[(0, 1)] = ONE;
        assert!(matches!(gibbs(&h, 1.0), Err(RiesError::Validation(_))));
        let h = CMat::from_diagonal(&CVec::from_vec(vec![ZERO, c(10.0, 0.0)]));
        assert!(matches!(gibbs(&h, 100.0), Err(RiesError::Range(_))));
        assert!(gibbs(&h, f64::INFINITY).is_err());
    }

    #[test]
    fn step_unitary_degenerate_and_factorizing() {
        let p = ExchangeParams::default();
        let (sys, probe) = qubit_exchange(&p).unwrap();
        let u0 = step_unitary(&sys, &probe.with_tau(0.0).unwrap()).unwrap();
        assert!((u0 - CMat::identity(4, 4)).norm() < 1e-14);
        let free = probe.with_v(CMat::zeros(4, 4)).unwrap();
        let u = step_unitary(&sys, &free).unwrap();
        let expected = unitary_exp(sys.h(), p.tau).kronecker(&unitary_exp(probe.h(), p.tau));
        assert!((u - expected).norm() < 1e-13);
    }

    #[test]
    fn step_unitary_generic_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (sys, probe) = random_model(&mut rng, 2, 3).unwrap();
        let u = step_unitary(&sys, &probe).unwrap();
        assert!((&u * u.adjoint() - CMat::identity(6, 6)).norm() < 1e-11);
        // independent route: Padé exponential of the generator
        let g = probe.coupled_hamiltonian(&sys).unwrap().map(|z| z * c(0.0, -probe.tau()));
        assert!((u - crate::linalg::expm_pade(&g)).norm() < 1e-10);
    }

    #[test]
    fn step_unitary_dimension_mismatch() {
        let sys = qubit_system(1.0, 1.0).unwrap();
        let probe = ProbeSpec::new(CMat::identity(3, 3), 1.0, CMat::zeros(3, 3), 1.0).unwrap();
        assert!(matches!(step_unitary(&sys, &probe), Err(RiesError::Dimension(_))));
    }

    #[test]
    fn heisenberg_map_free_dynamics() {
        let p = ExchangeParams::default();
        let (sys, probe) = qubit_exchange(&p).unwrap();
        let free = probe.with_v(CMat::zeros(4, 4)).unwrap();
        let phi = reduced_heisenberg_map(&sys, &free).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 2, 2);
        let u = unitary_exp(sys.h(), p.tau);
        let expected = u.adjoint() * &a * &u;
        assert!((apply_map(&phi, &a) - expected).norm() < 1e-13);
    }

    #[test]
    fn heisenberg_map_unital_and_cp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (sys, probe) = random_model(&mut rng, 2, 2).unwrap();
            let phi = reduced_heisenberg_map(&sys, &probe).unwrap();
            let id = CMat::identity(2, 2);
            assert!((apply_map(&phi, &id) - &id).norm() < 1e-11);
            let (values, _) = eigh(&choi_matrix(&phi, 2));
            assert!(values[0] >= -1e-11);
            let h = random_hermitian(&mut rng, 2, 1.0);
            assert!(linalg::hermiticity_defect(&apply_map(&phi, &h)) < 1e-12);
        }
    }

    #[test]
    fn heisenberg_map_matches_one_step_chain() {
        let (sys, probe) = qubit_exchange(&ExchangeParams::default()).unwrap();
        let phi = reduced_heisenberg_map(&sys, &probe).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rho = random_density(&mut rng, 2);
        let steps = vec![probe];
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 2, 2);
            let direct = full_chain_oracle(&sys, &steps, &ChainObservable::System(a.clone()), 1, &rho).unwrap();
            let reduced = (rho.matrix() * apply_map(&phi, &a)).trace();
            assert!((direct - reduced).norm() < 1e-12);
        }
    }

    #[test]
    fn rdo_of_free_dynamics_is_unitary_with_degenerate_one() {
        let p = ExchangeParams::default();
        let (sys, probe) = qubit_exchange(&p).unwrap();
        let rdo = rdo_from_model(&sys, &probe.with_v(CMat::zeros(4, 4)).unwrap()).unwrap();
        let values = linalg::eigenvalues(rdo.matrix()).unwrap();
        assert!(values.iter().all(|z| (z.norm() - 1.0).abs() < 1e-10));
        let ones = values.iter().filter(|z| (*z - ONE).norm() < 1e-8).count();
        assert!(ones >= 2);
        // spectrum {e^{iτ(E_a - E_b)}}
        for target in [c(0.0, p.omega_s * p.tau).exp(), c(0.0, -p.omega_s * p.tau).exp()] {
            assert!(values.iter().any(|z| (z - target).norm() < 1e-10));
        }
    }

    #[test]
    fn rdo_zero_time_is_identity() {
        let (sys, probe) = qubit_exchange(&ExchangeParams::default()).unwrap();
        let rdo = rdo_from_model(&sys, &probe.with_tau(0.0).unwrap()).unwrap();
        assert!((rdo.matrix() - CMat::identity(4, 4)).norm() < 1e-13);
    }

    #[test]
    fn rdo_invariance_and_products_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sys = qubit_system(1.0, 0.8).unwrap();
        let steps: Vec<ProbeSpec> = (0..6)
            .map(|_| {
                let mut p = ExchangeParams::random(&mut rng);
                p.omega_s = 1.0;
                qubit_probe(&p).unwrap()
            })
            .collect();
        let rdos: Vec<Rdo> = steps.iter().map(|p| rdo_from_model(&sys, p).unwrap()).collect();
        let psi = sys.psi_s();
        for r in &rdos {
            assert!((r.matrix() * &psi - &psi).norm() < 1e-11);
        }
        let rho = sys.gibbs_state().clone();
        for m in 1..=6 {
            let a = random_matrix(&mut rng, 2, 2);
            let oracle = full_chain_oracle(&sys, &steps, &ChainObservable::System(a.clone()), m, &rho).unwrap();
            let mut v = sys.embed_observable(&a);
            for r in rdos[..m].iter().rev() {
                v = r.matrix() * v;
            }
            assert!((psi.dotc(&v) - oracle).norm() < 1e-10, "m={m}");
        }
    }

    #[test]
    fn oracle_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ExchangeParams::default();
        let (sys, probe) = qubit_exchange(&p).unwrap();
        let rho = random_density(&mut rng, 2);
        let a = random_matrix(&mut rng, 2, 2);
        let v0 = full_chain_oracle(&sys, &[], &ChainObservable::System(a.clone()), 0, &rho).unwrap();
        assert!((v0 - (rho.matrix() * &a).trace()).norm() < 1e-14);
        let free = probe.with_v(CMat::zeros(4, 4)).unwrap();
        let steps = vec![free.clone(), free.with_tau(0.4).unwrap(), free.with_tau(0.9).unwrap()];
        let total: f64 = steps.iter().map(|s| s.tau()).sum();
        let value = full_chain_oracle(&sys, &steps, &ChainObservable::System(a.clone()), 3, &rho).unwrap();
        let u = unitary_exp(sys.h(), total);
        let expected = (rho.matrix() * u.adjoint() * &a * &u).trace();
        assert!((value - expected).norm() < 1e-12);
    }

    #[test]
    fn chain_steps_are_full_hamiltonian_exponentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (sys, probe) = random_model(&mut rng, 2, 2).unwrap();
        let steps = vec![probe.clone(), probe.with_tau(0.3).unwrap(), probe.with_v(random_hermitian(&mut rng, 4, 0.5)).unwrap()];
        let rho = random_density(&mut rng, 2);
        let mut chain = FullChain::new(&sys, &steps, &rho).unwrap();
        let mut state = chain.state.clone();
        for k in 0..3 {
            chain.advance().unwrap();
            let h = chain.hamiltonian(k + 1).unwrap();
            let u = unitary_exp(&h, steps[k].tau());
            state = &u * state * u.adjoint();
            assert!((&state - &chain.state).norm() < 1e-12);
        }
    }

    #[test]
    fn oracle_capacity_guard() {
        let (sys, probe) = qubit_exchange(&ExchangeParams::default()).unwrap();
        let steps = vec![probe; 12];
        let rho = sys.gibbs_state().clone();
        let result = full_chain_oracle(&sys, &steps, &ChainObservable::System(CMat::identity(2, 2)), 12, &rho);
        assert!(matches!(result, Err(RiesError::Capacity { .. })));
    }

    #[test]
    fn reduce_instant_identity_and_free_probe() {
        let p = ExchangeParams::default();
        let (sys, probe) = qubit_exchange(&p).unwrap();
        let psi = sys.psi_s();
        let id = CMat::identity(2, 2);
        let window = ObservableWindow::new(id.clone(), vec![id.clone(), id.clone(), id.clone()], 1, 1).unwrap();
        let n = reduce_instant(&sys, &[&probe, &probe, &probe], &window.to_operator()).unwrap();
        assert!((psi.dotc(&(&n * &psi)) - ONE).norm() < 1e-13);

        let free = probe.with_v(CMat::zeros(4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = random_hermitian(&mut rng, 2, 1.0);
        let window = ObservableWindow::new(id, vec![b.clone()], 0, 0).unwrap();
        let n = reduce_instant(&sys, &[&free], &window.to_operator()).unwrap();
        let expected = (free.gibbs_state().matrix() * &b).trace();
        assert!((psi.dotc(&(&n * &psi)) - expected).norm() < 1e-13);
    }

    #[test]
    fn reduce_instant_system_only_window_is_one_step() {
        let (sys, probe) = qubit_exchange(&ExchangeParams::default()).unwrap();
        let rdo = rdo_from_model(&sys, &probe).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_matrix(&mut rng, 2, 2);
        let window = ObservableWindow::new(a.clone(), vec![CMat::identity(2, 2)], 0, 0).unwrap();
        let n = reduce_instant(&sys, &[&probe], &window.to_operator()).unwrap();
        let psi = sys.psi_s();
        let expected = rdo.matrix() * linalg::left_mul(&a) * &psi;
        assert!((&n * &psi - expected).norm() < 1e-12);
    }

    #[test]
    fn reduce_instant_window_checks() {
        let (sys, probe) = qubit_exchange(&ExchangeParams::default()).unwrap();
        let id = CMat::identity(2, 2);
        assert!(ObservableWindow::new(id.clone(), vec![id.clone()], 1, 1).is_err());
        let window = ObservableWindow::new(id.clone(), vec![id.clone(), id.clone()], 0, 1).unwrap();
        let err = reduce_instant(&sys, &[&probe], &window.to_operator());
        assert!(matches!(err, Err(RiesError::Validation(_))));
        let big = ObservableWindow::new(id.clone(), vec![id.clone(); 5], 2, 2).unwrap();
        let err = reduce_instant(&sys, &[&probe; 5], &big.to_operator());
        assert!(matches!(err, Err(RiesError::Capacity { .. })));
    }

    #[test]
    fn state_vector_reproduces_expectations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (sys, _) = random_model(&mut rng, 3, 2).unwrap();
        let rho = random_density(&mut rng, 3);
        let phi = sys.state_vector(&rho).unwrap();
        let a = random_matrix(&mut rng, 3, 3);
        let lhs = phi.dotc(&sys.embed_observable(&a));
        assert!((lhs - (rho.matrix() * &a).trace()).norm() < 1e-12);
        let _ = spectral_norm(&unvec(&phi, 3));
    }
}

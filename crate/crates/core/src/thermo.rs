//! Instantaneous observables riding with the interaction window, their
//! ergodic limits, and asymptotic energy and entropy production.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{mean_rdo, RrdoEnsemble};
use crate::error::{Result, RiesError};
use crate::linalg::{embed, weighted_partial_trace, CMat, CVec, C64};
use crate::model::{reduce_instant_operator, step_unitary, DensityMatrix, ObservableWindow, ProbeSpec, WindowOperator, WINDOW_LIMIT};
use crate::rdo::{classify, decompose_matrix, DEFAULT_GAP_MIN, DEFAULT_TOL_ONE};

/// Largest number of atom tuples a family will reduce.
pub const TUPLE_LIMIT: usize = 1 << 16;

/// Window observable defined for every tuple `(ω_{m−l}, …, ω_{m+r})` of
/// atoms, together with its reductions to the system.
#[derive(Clone, Debug)]
pub struct InstantObservableFamily {
    l: usize,
    r: usize,
    n_atoms: usize,
    reduced_ops: Vec<CMat>,
    reduced: Vec<CMat>,
    n_psi: Vec<CVec>,
    weights: Vec<f64>,
}

impl InstantObservableFamily {
    /// Reduces `builder(window probes, tuple)` for every atom tuple.
    pub fn build<F>(ens: &RrdoEnsemble, l: usize, r: usize, builder: F) -> Result<Self>
    where
        F: Fn(&[&ProbeSpec], &[usize]) -> Result<WindowOperator>,
    {
        if l + r > WINDOW_LIMIT {
            return Err(RiesError::Capacity { what: "window extent l + r".into(), needed: l + r, limit: WINDOW_LIMIT });
        }
        let sys = ens
            .system()
            .ok_or_else(|| RiesError::Unsupported("observable families need model-built atoms".into()))?;
        let probes = ens
            .atoms()
            .iter()
            .map(|a| a.probe.as_ref())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| RiesError::Unsupported("observable families need model-built atoms".into()))?;
        let n_atoms = probes.len();
        let width = l + r + 1;
        let count = (0..width).try_fold(1usize, |acc, _| acc.checked_mul(n_atoms)).unwrap_or(usize::MAX);
        if count > TUPLE_LIMIT {
            return Err(RiesError::Capacity { what: "atom tuples".into(), needed: count, limit: TUPLE_LIMIT });
        }
        let psi_s = ens.psi_s();
        let mut fam = Self {
            l,
            r,
            n_atoms,
            reduced_ops: Vec::with_capacity(count),
            reduced: Vec::with_capacity(count),
            n_psi: Vec::with_capacity(count),
            weights: Vec::with_capacity(count),
        };
        let mut tuple = vec![0usize; width];
        for index in 0..count {
            let mut rest = index;
            for slot in (0..width).rev() {
                tuple[slot] = rest % n_atoms;
                rest /= n_atoms;
            }
            let window: Vec<&ProbeSpec> = tuple.iter().map(|&k| probes[k]).collect();
            let op = builder(&window, &tuple)?;
            if op.l != l || op.r != r {
                return Err(RiesError::Validation("builder returned a window of the wrong extent".into()));
            }
            let n_op = reduce_instant_operator(sys, &window, &op)?;
            let n = crate::linalg::left_mul(&n_op);
            fam.n_psi.push(&n * psi_s);
            fam.reduced.push(n);
            fam.reduced_ops.push(n_op);
            fam.weights.push(tuple.iter().map(|&k| ens.atoms()[k].p).product());
        }
        Ok(fam)
    }

    /// Same product observable for every tuple.
    pub fn product(ens: &RrdoEnsemble, window: &ObservableWindow) -> Result<Self> {
        let op = window.to_operator();
        Self::build(ens, window.l, window.r, |_, _| Ok(op.clone()))
    }

    pub fn identity(ens: &RrdoEnsemble) -> Result<Self> {
        Self::build(ens, 0, 0, |probes, _| {
            let dims = vec![ens.system().map_or(0, |s| s.dim()), probes[0].dim()];
            let total = dims[0] * dims[1];
            WindowOperator::new(0, 0, dims, CMat::identity(total, total))
        })
    }

    /// `A_S ⊗ 1` observed right after each step.
    pub fn system(ens: &RrdoEnsemble, a: &CMat) -> Result<Self> {
        Self::build(ens, 0, 0, |probes, _| {
            let dims = vec![a.nrows(), probes[0].dim()];
            WindowOperator::new(0, 0, dims.clone(), embed(a, &dims, &[0]))
        })
    }

    /// Energy delivered to the probe of the current step,
    /// `H_E − Tr[ρ_E H_E]`, optionally weighted by that probe's `β_E`.
    pub fn probe_heat(ens: &RrdoEnsemble, beta_weighted: bool) -> Result<Self> {
        Self::build(ens, 0, 0, |probes, _| {
            let p = probes[0];
            let de = p.dim();
            let ds = p.v().nrows() / de;
            let mean = (p.gibbs_state().matrix() * p.h()).trace();
            let local = p.h() - CMat::identity(de, de) * mean;
            let weight = if beta_weighted { p.beta() } else { 1.0 };
            let op = CMat::identity(ds, ds).kronecker(&local).scale(weight);
            WindowOperator::new(0, 0, vec![ds, de], op)
        })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.reduced.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reduced.is_empty()
    }

    pub fn tuple_index(&self, tuple: &[usize]) -> usize {
        tuple.iter().fold(0, |acc, &k| acc * self.n_atoms + k)
    }

    /// `N(ω_{m−l}, …, ω_{m+r})`.
    pub fn reduced(&self, tuple: &[usize]) -> &CMat {
        &self.reduced[self.tuple_index(tuple)]
    }

    pub fn reduced_operator(&self, tuple: &[usize]) -> &CMat {
        &self.reduced_ops[self.tuple_index(tuple)]
    }
}

/// `V` of the next probe minus `V` of the current one: the energy jump when
/// the coupling is switched.
pub fn energy_jump_family(ens: &RrdoEnsemble) -> Result<InstantObservableFamily> {
    InstantObservableFamily::build(ens, 0, 1, |probes, _| {
        let (now, next) = (probes[0], probes[1]);
        let ds = now.v().nrows() / now.dim();
        let dims = vec![ds, now.dim(), next.dim()];
        let op = embed(next.v(), &dims, &[0, 2]) - embed(now.v(), &dims, &[0, 1]);
        WindowOperator::new(0, 1, dims, op)
    })
}

/// `E[N] = Σ_tuples (Π p) N(tuple)`.
pub fn mean_reduced_observable(fam: &InstantObservableFamily) -> CMat {
    let n = fam.reduced[0].nrows();
    fam.reduced.iter().zip(&fam.weights).fold(CMat::zeros(n, n), |acc, (m, w)| acc + m.scale(*w))
}

/// System operator whose left multiplication is [`mean_reduced_observable`].
pub fn mean_reduced_operator(fam: &InstantObservableFamily) -> CMat {
    let d = fam.reduced_ops[0].nrows();
    fam.reduced_ops.iter().zip(&fam.weights).fold(CMat::zeros(d, d), |acc, (m, w)| acc + m.scale(*w))
}

/// `θ` from the spectral projection of `E[M]` at 1, also when 1 is degenerate.
fn asymptotic_theta(ens: &RrdoEnsemble) -> Result<(CVec, bool)> {
    let mean = mean_rdo(ens)?;
    let in_class = classify(&mean, DEFAULT_TOL_ONE, DEFAULT_GAP_MIN)?.in_class_e;
    Ok((decompose_matrix(mean.matrix(), ens.psi_s(), DEFAULT_TOL_ONE)?.psi, in_class))
}

/// Cesàro average along one trajectory of
/// `⟨φ, M(ω₁) ⋯ M(ω_{m−l−1}) N(ω_{m−l}, …, ω_{m+r}) ψ_S⟩` over
/// `m = l+1, …, l+n_total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstantSeries {
    pub seed: u64,
    pub n_total: usize,
    pub mean: C64,
    /// Mean of the summands with index above `n_total / 2`: the slope of the
    /// running sum once the initial transient has died out.
    pub tail_mean: C64,
    /// `(n, running mean)` pairs.
    pub checkpoints: Vec<(usize, C64)>,
}

pub fn instant_monte_carlo(
    ens: &RrdoEnsemble,
    fam: &InstantObservableFamily,
    seed: u64,
    n_total: usize,
    phi: &CVec,
    checkpoint_every: usize,
) -> Result<InstantSeries> {
    if n_total == 0 {
        return Err(RiesError::Validation("n_total must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = fam.l + fam.r + 1;
    let mut window: std::collections::VecDeque<usize> = (0..width).map(|_| ens.sample(&mut rng)).collect();
    let mut w = phi.clone();
    let (mut re, mut im) = (Neumaier::default(), Neumaier::default());
    let mut checkpoints = Vec::new();
    let every = checkpoint_every.max(1);
    let mut tuple = vec![0usize; width];
    let half = n_total / 2;
    let mut at_half = C64::new(0.0, 0.0);
    for n in 1..=n_total {
        for (slot, k) in window.iter().enumerate() {
            tuple[slot] = *k;
        }
        let value = w.dotc(&fam.n_psi[fam.tuple_index(&tuple)]);
        re.add(value.re);
        im.add(value.im);
        if n % every == 0 || n == n_total {
            checkpoints.push((n, C64::new(re.total(), im.total()) / n as f64));
        }
        if n == half {
            at_half = C64::new(re.total(), im.total());
        }
        let first = window.pop_front().unwrap_or(0);
        w = ens.atoms()[first].rdo.matrix().adjoint() * w;
        window.push_back(ens.sample(&mut rng));
    }
    let total = C64::new(re.total(), im.total());
    Ok(InstantSeries {
        seed,
        n_total,
        mean: total / n_total as f64,
        tail_mean: (total - at_half) / (n_total - half) as f64,
        checkpoints,
    })
}

#[derive(Clone, Copy, Debug, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        self.comp += if self.sum.abs() >= x.abs() { (self.sum - t) + x } else { (x - t) + self.sum };
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstantLimit {
    pub closed_form: C64,
    pub mc_mean: C64,
    pub mc_stderr: f64,
    pub seeds: usize,
    pub n_total: usize,
    pub within_3se: bool,
}

fn mean_and_stderr(values: &[C64]) -> (C64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<C64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// `⟨θ, E[N] ψ_S⟩`.
pub fn instant_closed_form(ens: &RrdoEnsemble, fam: &InstantObservableFamily) -> Result<C64> {
    let (theta, in_class) = asymptotic_theta(ens)?;
    if !in_class {
        return Err(RiesError::Precondition("E[M] is not in the ergodic class".into()));
    }
    Ok(theta.dotc(&(mean_reduced_observable(fam) * ens.psi_s())))
}

/// Compares the closed form with Cesàro means of trajectories started at `ψ_S`.
pub fn instant_limit_from(closed_form: C64, series: &[InstantSeries]) -> InstantLimit {
    let values: Vec<C64> = series.iter().map(|s| s.mean).collect();
    let (mc_mean, mc_stderr) = mean_and_stderr(&values);
    InstantLimit {
        closed_form,
        mc_mean,
        mc_stderr,
        seeds: series.len(),
        n_total: series.first().map_or(0, |s| s.n_total),
        within_3se: (mc_mean - closed_form).norm() <= 3.0 * mc_stderr,
    }
}

/// `⟨θ, E[N] ψ_S⟩` with a Monte Carlo cross-check, one trajectory per seed.
pub fn ergodic_instant_limit(
    ens: &RrdoEnsemble,
    fam: &InstantObservableFamily,
    seeds: &[u64],
    n_total: usize,
) -> Result<InstantLimit> {
    let closed_form = instant_closed_form(ens, fam)?;
    let series = seeds
        .iter()
        .map(|&seed| instant_monte_carlo(ens, fam, seed, n_total, ens.psi_s(), n_total))
        .collect::<Result<Vec<_>>>()?;
    Ok(instant_limit_from(closed_form, &series))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxMethod {
    ClosedForm,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluxReport {
    pub de_plus: f64,
    pub ds_plus: f64,
    /// `ds_plus − E[β_E] de_plus`.
    pub residual: f64,
    pub de_imag: f64,
    pub ds_imag: f64,
    pub de_stderr: Option<f64>,
    pub ds_stderr: Option<f64>,
    pub method: FluxMethod,
    pub mean_beta: f64,
    pub in_class: bool,
    pub seeds: Option<usize>,
    pub n_total: Option<usize>,
    /// `(m, ΔE(m)/m, ΔS(m)/m)` averaged over seeds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub series: Vec<(usize, f64, f64)>,
}

fn mean_beta(ens: &RrdoEnsemble) -> Result<f64> {
    ens.atoms()
        .iter()
        .map(|a| a.probe.as_ref().map(|p| a.p * p.beta()))
        .sum::<Option<f64>>()
        .ok_or_else(|| RiesError::Unsupported("fluxes need model-built atoms".into()))
}

/// Energy and entropy production per step in the asymptotic state.
///
/// Per atom, `X = H_S + V − U*(H_S + V)U` is reduced to the system with the
/// probe Gibbs state and paired with `θ`; the entropy rate weights each atom
/// by its own `β_E`.
pub fn flux_closed_form(ens: &RrdoEnsemble) -> Result<FluxReport> {
    let sys = ens.system().ok_or_else(|| RiesError::Unsupported("fluxes need model-built atoms".into()))?;
    let beta = mean_beta(ens)?;
    let (theta, in_class) = asymptotic_theta(ens)?;
    let d = sys.dim();
    let mut energy = CVec::zeros(d * d);
    let mut entropy = CVec::zeros(d * d);
    for atom in ens.atoms() {
        let probe = atom.probe.as_ref().expect("checked by mean_beta");
        let u = step_unitary(sys, probe)?;
        let de = probe.dim();
        let local = sys.h().kronecker(&CMat::identity(de, de)) + probe.v();
        let x = &local - u.adjoint() * &local * &u;
        let reduced = weighted_partial_trace(&x, d, probe.gibbs_state().matrix());
        let flux = sys.embed_observable(&reduced);
        energy += flux.scale(atom.p);
        entropy += flux.scale(atom.p * probe.beta());
    }
    let de = theta.dotc(&energy);
    let ds = theta.dotc(&entropy);
    Ok(FluxReport {
        de_plus: de.re,
        ds_plus: ds.re,
        residual: ds.re - beta * de.re,
        de_imag: de.im,
        ds_imag: ds.im,
        de_stderr: None,
        ds_stderr: None,
        method: FluxMethod::ClosedForm,
        mean_beta: beta,
        in_class,
        seeds: None,
        n_total: None,
        series: Vec::new(),
    })
}

/// Energy-jump and heat families used by the Monte Carlo flux estimate.
#[derive(Clone, Debug)]
pub struct FluxFamilies {
    pub jumps: InstantObservableFamily,
    pub heat: InstantObservableFamily,
}

impl FluxFamilies {
    pub fn new(ens: &RrdoEnsemble) -> Result<Self> {
        Ok(Self { jumps: energy_jump_family(ens)?, heat: InstantObservableFamily::probe_heat(ens, true)? })
    }
}

/// Running sums of energy jumps and β-weighted probe heat along one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluxSample {
    pub energy: InstantSeries,
    pub entropy: InstantSeries,
}

/// Initial vector for `rho_init`, or `ψ_S` when absent.
pub fn initial_vector(ens: &RrdoEnsemble, rho_init: Option<&DensityMatrix>) -> Result<CVec> {
    match rho_init {
        Some(rho) => ens
            .system()
            .ok_or_else(|| RiesError::Unsupported("initial states need a system model".into()))?
            .state_vector(rho),
        None => Ok(ens.psi_s().clone()),
    }
}

pub fn flux_trajectory(
    ens: &RrdoEnsemble,
    fam: &FluxFamilies,
    seed: u64,
    n_total: usize,
    phi: &CVec,
) -> Result<FluxSample> {
    let every = (n_total / 20).max(1);
    Ok(FluxSample {
        energy: instant_monte_carlo(ens, &fam.jumps, seed, n_total, phi, every)?,
        entropy: instant_monte_carlo(ens, &fam.heat, seed, n_total, phi, every)?,
    })
}

/// Rates of `ΔE(m)` and `ΔS(m)` with standard errors over the samples.
///
/// The reported rates are slopes of the running sums over the second half of
/// each trajectory. The series holds the plain ratios `ΔE(m)/m`, `ΔS(m)/m`
/// averaged over samples.
pub fn flux_summary(ens: &RrdoEnsemble, samples: &[FluxSample]) -> Result<FluxReport> {
    if samples.is_empty() {
        return Err(RiesError::Validation("at least one seed is required".into()));
    }
    let beta = mean_beta(ens)?;
    let (_, in_class) = asymptotic_theta(ens)?;
    let k = samples.len() as f64;
    let mut series: Vec<(usize, f64, f64)> =
        samples[0].energy.checkpoints.iter().map(|(n, _)| (*n, 0.0, 0.0)).collect();
    for sample in samples {
        let pairs = sample.energy.checkpoints.iter().zip(&sample.entropy.checkpoints);
        for (row, ((_, e), (_, s))) in series.iter_mut().zip(pairs) {
            row.1 += e.re / k;
            row.2 += s.re / k;
        }
    }
    let de_values: Vec<C64> = samples.iter().map(|s| s.energy.tail_mean).collect();
    let ds_values: Vec<C64> = samples.iter().map(|s| s.entropy.tail_mean).collect();
    let (de, de_se) = mean_and_stderr(&de_values);
    let (ds, ds_se) = mean_and_stderr(&ds_values);
    Ok(FluxReport {
        de_plus: de.re,
        ds_plus: ds.re,
        residual: ds.re - beta * de.re,
        de_imag: de.im,
        ds_imag: ds.im,
        de_stderr: Some(de_se),
        ds_stderr: Some(ds_se),
        method: FluxMethod::MonteCarlo,
        mean_beta: beta,
        in_class,
        seeds: Some(samples.len()),
        n_total: Some(samples[0].energy.n_total),
        series,
    })
}

/// Monte Carlo rates of `ΔE(m)` (accumulated energy jumps) and `ΔS(m)`
/// (β-weighted heat delivered to the probes), one trajectory per seed,
/// started from `rho_init` on the system.
pub fn flux_monte_carlo(
    ens: &RrdoEnsemble,
    seeds: &[u64],
    n_total: usize,
    rho_init: Option<&DensityMatrix>,
) -> Result<FluxReport> {
    let fam = FluxFamilies::new(ens)?;
    let phi = initial_vector(ens, rho_init)?;
    let samples = seeds
        .iter()
        .map(|&seed| flux_trajectory(ens, &fam, seed, n_total, &phi))
        .collect::<Result<Vec<_>>>()?;
    flux_summary(ens, &samples)
}

//! The named experiments. Trajectories fan out over the worker pool; results
//! are collected in seed order so outputs do not depend on the pool size.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use ries_core::ensemble::{
    decay_estimator, lyapunov, mean_rdo, mean_rdo_check, simulate_forward, simulate_reverse, summarize_decay,
    theta_closed_form, RrdoEnsemble,
};
use ries_core::io::{matrix_from_json, vector_from_json};
use ries_core::linalg::{spectral_radius, CMat};
use ries_core::model::library::random_matrix;
use ries_core::model::{
    rdo_from_model, reduce_instant, ChainObservable, DensityMatrix, FullChain, ObservableWindow, ProbeSpec,
    SystemSpec,
};
use ries_core::rdo::{
    classify, classify_matrix, convergence_equivalence_check, ideal_asymptotics, product_diagnostics,
    validate, Rdo, TrackFlags, ValidateOptions,
};
use ries_core::thermo::{
    energy_jump_family, flux_closed_form, flux_summary, flux_trajectory, initial_vector, instant_closed_form,
    instant_limit_from, instant_monte_carlo, FluxFamilies, InstantObservableFamily,
};
use ries_core::{Result, RiesError};

use crate::config::{Experiment, ExperimentConfig, ObservableSpec};
use crate::report::{Outcome, Series};
use crate::CliError;

pub fn run_experiment(config: &ExperimentConfig, pool: &rayon::ThreadPool) -> std::result::Result<Outcome, CliError> {
    let out = match config.experiment {
        Experiment::Classify => classify_experiment(config),
        Experiment::Ideal => ideal(config),
        Experiment::Ergodic => pool.install(|| ergodic(config)),
        Experiment::Decay => pool.install(|| decay(config)),
        Experiment::Reverse => pool.install(|| reverse(config)),
        Experiment::Lyapunov => pool.install(|| lyapunov_experiment(config)),
        Experiment::Instant => pool.install(|| instant(config)),
        Experiment::Fluxes => pool.install(|| fluxes(config)),
        Experiment::OracleCheck => oracle_check(config),
    }?;
    Ok(out)
}

fn checks<const N: usize>(items: [(&str, bool); N]) -> BTreeMap<String, bool> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn per_seed<T, F>(seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    seeds.par_iter().map(|&s| f(s)).collect()
}

fn ensemble(config: &ExperimentConfig) -> Result<RrdoEnsemble> {
    config
        .ensemble_spec()
        .ok_or_else(|| RiesError::Validation("no ensemble or model given".into()))?
        .to_ensemble()
}

fn model(config: &ExperimentConfig) -> Result<(SystemSpec, ProbeSpec)> {
    config.model.as_ref().ok_or_else(|| RiesError::Validation("no model given".into()))?.to_specs()
}

fn single_rdo(config: &ExperimentConfig) -> Result<Rdo> {
    if config.model.is_some() {
        let (sys, probe) = model(config)?;
        return rdo_from_model(&sys, &probe);
    }
    let psi = vector_from_json(config.psi_s.as_deref().unwrap_or_default());
    let m = matrix_from_json(config.matrix.as_deref().unwrap_or_default(), Some(psi.len()))?;
    validate(m, psi, None, &ValidateOptions::default())
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}

fn classify_experiment(config: &ExperimentConfig) -> Result<Outcome> {
    let tol = &config.tolerances;
    let report = if config.matrix.is_some() && config.psi_s.is_none() {
        classify_matrix(&matrix_from_json(config.matrix.as_deref().unwrap_or_default(), None)?, tol.tol_one, tol.gap_min)?
    } else {
        classify(&single_rdo(config)?, tol.tol_one, tol.gap_min)?
    };
    let mut series = Series::new(&["index", "re", "im", "modulus"]);
    for (k, z) in report.eigenvalues.iter().enumerate() {
        series.push([k.to_string(), z.re.to_string(), z.im.to_string(), z.norm().to_string()]);
    }
    Ok(Outcome { payload: serde_json::to_value(&report)?, checks: BTreeMap::new(), series })
}

fn ideal(config: &ExperimentConfig) -> Result<Outcome> {
    let rdo = single_rdo(config)?;
    let asym = ideal_asymptotics(&rdo, config.n_total)?;
    let target = -asym.spr_mq.ln();
    let rate_ok = match asym.slope {
        Some(s) => (-s - target).abs() <= config.tolerances.ideal_rate * target,
        None => true,
    };
    let gns = rdo.certificate().gns().is_some();
    let trace = product_diagnostics(
        &vec![rdo.clone(); config.n_total],
        TrackFlags { transported_norms: gns, keep_vectors: true },
    )?;
    let convergence = convergence_equivalence_check(&trace)?;
    let mut series = Series { header: trace.csv_header(), rows: trace.csv_rows() };
    series.header.push("error".into());
    for (row, e) in series.rows.iter_mut().zip(&asym.errors) {
        row.push(e.to_string());
    }
    Ok(Outcome {
        payload: json!({
            "spr_mq": asym.spr_mq,
            "fitted_rate": asym.slope.map(|s| -s),
            "expected_rate": target,
            "final_error": asym.errors.last(),
            "c0": rdo.certificate().c0(),
            "bounds": trace.bounds,
            "max_theta_agreement": trace.max_theta_agreement,
            "max_reconstruction": trace.max_reconstruction,
            "convergence": convergence,
        }),
        checks: checks([("rate", rate_ok), ("uniform_bounds", trace.bounds.violations == 0)]),
        series,
    })
}

fn ergodic(config: &ExperimentConfig) -> Result<Outcome> {
    let ens = ensemble(config)?;
    let theta = theta_closed_form(&ens)?;
    let runs = per_seed(&config.seeds, |seed| simulate_forward(&ens, seed, config.n_total, config.checkpoint_every))?;
    let tol = &config.tolerances;
    let mut series = Series::new(&["seed", "n", "distance", "theta_distance", "mq_norm"]);
    let mut table: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut rate_ok = true;
    for run in &runs {
        for cp in &run.checkpoints {
            series.push([run.seed.to_string(), cp.n.to_string(), cp.distance.to_string(), cp.theta_distance.to_string(), cp.mq_norm.to_string()]);
            table.entry(cp.n).or_default().push(cp.distance);
            let checked = cp.n >= tol.ergodic_min_n || cp.n == run.n_total;
            rate_ok &= !checked || cp.distance <= tol.ergodic_constant / (cp.n as f64).sqrt();
        }
    }
    let rows: Vec<Value> = table
        .iter()
        .map(|(n, d)| {
            let max = d.iter().copied().fold(0.0, f64::max);
            json!({ "n": n, "mean_distance": mean(d.iter().copied()), "max_distance": max, "max_scaled": max * (*n as f64).sqrt() })
        })
        .collect();
    let violations: usize = runs.iter().map(|r| r.bounds.violations).sum();
    let invariance = runs.iter().map(|r| r.max_invariance_defect).fold(0.0, f64::max);
    Ok(Outcome {
        payload: json!({
            "theta": theta,
            "distance_table": rows,
            "bounds": runs.iter().map(|r| &r.bounds).collect::<Vec<_>>(),
            "max_invariance_defect": invariance,
        }),
        checks: checks([
            ("theta_agreement", theta.agreement <= 1e-10),
            ("ergodic_rate", rate_ok),
            ("uniform_bounds", violations == 0),
            ("invariance", invariance <= 1e-10),
        ]),
        series,
    })
}

fn decay(config: &ExperimentConfig) -> Result<Outcome> {
    let ens = ensemble(config)?;
    let (_, check) = mean_rdo_check(&ens, config.tolerances.tol_one, config.tolerances.gap_min)?;
    let runs = per_seed(&config.seeds, |seed| decay_estimator(&ens, seed, config.n_total))?;
    let batch = summarize_decay(&runs);
    let mut series = Series::new(&["seed", "alpha", "n0"]);
    for (run, n0) in runs.iter().zip(&batch.n0) {
        series.push([run.seed.to_string(), run.alpha.to_string(), n0.map_or(String::new(), |k| k.to_string())]);
    }
    Ok(Outcome {
        payload: json!({ "batch": batch, "mean": check }),
        checks: checks([("alpha_positive", batch.all_positive), ("mean_in_class", check.report.in_class_e)]),
        series,
    })
}

fn reverse(config: &ExperimentConfig) -> Result<Outcome> {
    let ens = ensemble(config)?;
    let runs = per_seed(&config.seeds, |seed| simulate_reverse(&ens, seed, config.n_total))?;
    let alphas = per_seed(&config.seeds, |seed| decay_estimator(&ens, seed, config.n_total).map(|r| r.alpha))?;
    let alpha = mean(alphas.iter().copied());
    let slopes: Vec<f64> = runs.iter().filter_map(|r| r.sigma_ratio_slope).collect();
    let rate = -mean(slopes.iter().copied());
    let rate_ok = slopes.len() == runs.len() && (rate - alpha).abs() <= config.tolerances.reverse_rate * alpha;
    let mut series = Series::new(&["seed", "n", "sigma_ratio", "residual"]);
    for run in &runs {
        for (k, (s, r)) in run.sigma_ratio.iter().zip(&run.residuals).enumerate() {
            series.push([run.seed.to_string(), (k + 1).to_string(), s.to_string(), r.to_string()]);
        }
    }
    Ok(Outcome {
        payload: json!({
            "alpha_mean": alpha,
            "sigma_ratio_rate": rate,
            "slopes": slopes,
            "final_residuals": runs.iter().map(|r| r.residuals.last().copied()).collect::<Vec<_>>(),
            "eta": runs.iter().map(|r| &r.eta).collect::<Vec<_>>(),
        }),
        checks: checks([("rate_consistent", rate_ok)]),
        series,
    })
}

fn lyapunov_experiment(config: &ExperimentConfig) -> Result<Outcome> {
    let ens = ensemble(config)?;
    let tol = &config.tolerances;
    let estimates = per_seed(&config.seeds, |seed| lyapunov(&ens, seed, config.n_total, config.reorth_every))?;
    let decay_n = config.n_total.min(2000);
    let alphas = per_seed(&config.seeds, |seed| decay_estimator(&ens, seed, decay_n).map(|r| r.alpha))?;
    let alpha = mean(alphas.iter().copied());
    let report = classify(&mean_rdo(&ens)?, tol.tol_one, tol.gap_min)?;
    let mut series = Series::new(&["seed", "gamma_1", "gamma_2", "gap"]);
    for (seed, e) in config.seeds.iter().zip(&estimates) {
        series.push([seed.to_string(), e.gamma_1.to_string(), e.gamma_2.to_string(), e.gap.to_string()]);
    }
    let gamma_1_ok = estimates.iter().all(|e| e.gamma_1.abs() <= tol.lyapunov);
    let gamma_2_ok = estimates.iter().all(|e| e.gamma_2 <= -alpha + tol.lyapunov);
    let simple = report.one_multiplicity == 1 && report.gap > tol.gap_min && estimates.iter().all(|e| e.gap > 0.0);
    Ok(Outcome {
        payload: json!({
            "alpha_mean": alpha,
            "estimates": estimates.iter().map(|e| json!({"gamma_1": e.gamma_1, "gamma_2": e.gamma_2, "exponents": e.exponents})).collect::<Vec<_>>(),
            "mean_spectrum": report,
        }),
        checks: checks([("gamma_1_zero", gamma_1_ok), ("gamma_2_below_minus_alpha", gamma_2_ok), ("simple_top_exponent", simple)]),
        series,
    })
}

fn family(ens: &RrdoEnsemble, spec: &ObservableSpec) -> Result<InstantObservableFamily> {
    match spec {
        ObservableSpec::Identity => InstantObservableFamily::identity(ens),
        ObservableSpec::System { a_s } => InstantObservableFamily::system(ens, &matrix_from_json(a_s, None)?),
        ObservableSpec::Window { a_s, b_list, l, r } => {
            let b = b_list.iter().map(|m| matrix_from_json(m, None)).collect::<Result<Vec<_>>>()?;
            let window = ObservableWindow::new(matrix_from_json(a_s, None)?, b, *l, *r)?;
            InstantObservableFamily::product(ens, &window)
        }
        ObservableSpec::EnergyJump => energy_jump_family(ens),
        ObservableSpec::ProbeHeat { beta_weighted } => InstantObservableFamily::probe_heat(ens, *beta_weighted),
    }
}

fn instant(config: &ExperimentConfig) -> Result<Outcome> {
    let ens = ensemble(config)?;
    let spec = config.observable.as_ref().ok_or_else(|| RiesError::Validation("no observable given".into()))?;
    let fam = family(&ens, spec)?;
    let closed = instant_closed_form(&ens, &fam)?;
    let series_runs = per_seed(&config.seeds, |seed| {
        instant_monte_carlo(&ens, &fam, seed, config.n_total, ens.psi_s(), config.checkpoint_every)
    })?;
    let mut limit = instant_limit_from(closed, &series_runs);
    limit.within_3se = (limit.mc_mean - closed).norm() <= config.tolerances.sigmas * limit.mc_stderr + config.tolerances.mc_floor;
    let mut series = Series::new(&["seed", "n", "mean_re", "mean_im"]);
    for run in &series_runs {
        for (n, v) in &run.checkpoints {
            series.push([run.seed.to_string(), n.to_string(), v.re.to_string(), v.im.to_string()]);
        }
    }
    Ok(Outcome {
        payload: serde_json::to_value(&limit)?,
        checks: checks([("monte_carlo_agreement", limit.within_3se)]),
        series,
    })
}

fn fluxes(config: &ExperimentConfig) -> Result<Outcome> {
    let ens = ensemble(config)?;
    let tol = &config.tolerances;
    let closed = flux_closed_form(&ens)?;
    let fam = FluxFamilies::new(&ens)?;
    let mut initial = vec![None];
    for rho in &config.rho_init {
        initial.push(Some(DensityMatrix::new(matrix_from_json(rho, None)?)?));
    }
    let mut reports = Vec::new();
    let mut series = Series::new(&["initial_state", "m", "energy_rate", "entropy_rate"]);
    for (k, rho) in initial.iter().enumerate() {
        let phi = initial_vector(&ens, rho.as_ref())?;
        let samples = per_seed(&config.seeds, |seed| flux_trajectory(&ens, &fam, seed, config.n_total, &phi))?;
        let report = flux_summary(&ens, &samples)?;
        for (m, e, s) in &report.series {
            series.push([k.to_string(), m.to_string(), e.to_string(), s.to_string()]);
        }
        reports.push(report);
    }
    let deterministic_beta = ens
        .atoms()
        .iter()
        .filter_map(|a| a.probe.as_ref().map(|p| p.beta()))
        .all(|b| (b - closed.mean_beta).abs() <= 1e-15 * closed.mean_beta.abs().max(1.0));
    let within = |value: f64, reference: f64, se: Option<f64>| (value - reference).abs() <= tol.sigmas * se.unwrap_or(0.0) + tol.mc_floor;
    let agree = reports.iter().all(|r| {
        within(r.de_plus, closed.de_plus, r.de_stderr) && within(r.ds_plus, closed.ds_plus, r.ds_stderr)
    });
    let base = &reports[0];
    let independent = reports.iter().skip(1).all(|r| {
        let se = |a: Option<f64>, b: Option<f64>| (a.unwrap_or(0.0).powi(2) + b.unwrap_or(0.0).powi(2)).sqrt();
        (r.de_plus - base.de_plus).abs() <= tol.sigmas * se(r.de_stderr, base.de_stderr) + tol.mc_floor
            && (r.ds_plus - base.ds_plus).abs() <= tol.sigmas * se(r.ds_stderr, base.ds_stderr) + tol.mc_floor
    });
    let mut items = vec![
        ("reality", closed.de_imag.abs() <= 1e-9 && closed.ds_imag.abs() <= 1e-9),
        ("monte_carlo_agreement", agree),
        ("initial_state_independence", independent),
    ];
    if deterministic_beta {
        items.push(("second_law", closed.residual.abs() <= tol.second_law));
    }
    Ok(Outcome {
        payload: json!({ "closed_form": closed, "monte_carlo": reports, "deterministic_beta": deterministic_beta }),
        checks: items.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        series,
    })
}

fn oracle_check(config: &ExperimentConfig) -> Result<Outcome> {
    let (sys, probe) = model(config)?;
    let steps = vec![probe.clone(); config.steps];
    let rdo = rdo_from_model(&sys, &probe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds[0]);
    let d = sys.dim();
    let observables: Vec<CMat> = (0..10).map(|_| random_matrix(&mut rng, d, d)).collect();
    let de = probe.dim();
    let windows: Vec<ObservableWindow> = (0..3)
        .map(|_| {
            let b = (0..3).map(|_| random_matrix(&mut rng, de, de)).collect();
            ObservableWindow::new(random_matrix(&mut rng, d, d), b, 1, 1)
        })
        .collect::<Result<_>>()?;
    let mut chain = FullChain::new(&sys, &steps, sys.gibbs_state())?;
    let mut left = sys.psi_s();
    let mut series = Series::new(&["m", "kind", "residual"]);
    let (mut worst_system, mut worst_window) = (0.0_f64, 0.0_f64);
    let window_probes = [&probe, &probe, &probe];
    let reduced_windows = windows
        .iter()
        .map(|w| Ok((w.to_operator(), reduce_instant(&sys, &window_probes, &w.to_operator())? * sys.psi_s())))
        .collect::<Result<Vec<_>>>()?;
    let mut before_window = sys.psi_s();
    for m in 1..=config.steps {
        chain.advance()?;
        left = rdo.matrix().adjoint() * left;
        let mut residual = 0.0_f64;
        for a in &observables {
            let exact = chain.expectation(&ChainObservable::System(a.clone()))?;
            residual = residual.max((left.dotc(&sys.embed_observable(a)) - exact).norm());
        }
        series.push([m.to_string(), "system".to_string(), residual.to_string()]);
        worst_system = worst_system.max(residual);
        if m >= 2 && m < config.steps {
            let mut residual = 0.0_f64;
            for (op, n_psi) in &reduced_windows {
                let exact = chain.expectation(&ChainObservable::Window(op.clone()))?;
                residual = residual.max((before_window.dotc(n_psi) - exact).norm());
            }
            series.push([m.to_string(), "window".to_string(), residual.to_string()]);
            worst_window = worst_window.max(residual);
            before_window = rdo.matrix().adjoint() * before_window;
        }
    }
    let spr = spectral_radius(rdo.matrix())?;
    Ok(Outcome {
        payload: json!({
            "steps": config.steps,
            "max_system_residual": worst_system,
            "max_window_residual": worst_window,
            "spectral_radius": spr,
        }),
        checks: checks([
            ("system_oracle", worst_system <= config.tolerances.oracle),
            ("window_oracle", worst_window <= config.tolerances.oracle),
        ]),
        series,
    })
}

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ries_core::ensemble::{mean_rdo, theta_closed_form, RrdoEnsemble};
use ries_core::io::EnsembleJson;
use ries_core::linalg::{inner, spectral_radius};
use ries_core::model::library::{qubit_exchange, qubit_probe, random_matrix, ExchangeParams};
use ries_core::model::rdo_from_model;
use ries_core::rdo::{classify, gns_norm, tail_log_slope};
use ries_core::thermo::flux_closed_form;

fn params() -> impl Strategy<Value = ExchangeParams> {
    (0.5f64..1.5, 0.5f64..1.5, 0.1f64..1.2, -0.3f64..0.3, 0.2f64..2.0, 0.2f64..2.0, 0.2f64..2.0).prop_map(
        |(omega_s, omega_e, coupling, zz, tau, beta_s, beta_e)| ExchangeParams {
            omega_s,
            omega_e,
            coupling,
            zz,
            tau,
            beta_s,
            beta_e,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn model_rdos_fix_psi_and_contract(p in params(), seed in 0u64..1000) {
        let (sys, probe) = qubit_exchange(&p).unwrap();
        let rdo = rdo_from_model(&sys, &probe).unwrap();
        let psi = rdo.psi_s().clone();
        prop_assert!((rdo.matrix() * &psi - &psi).norm() < 1e-12);
        prop_assert!(spectral_radius(rdo.matrix()).unwrap() <= 1.0 + 1e-10);
        let cert = sys.certificate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_matrix(&mut rng, 4, 1).column(0).into_owned();
        prop_assert!(gns_norm(&(rdo.matrix() * &v), &cert) <= gns_norm(&v, &cert) * (1.0 + 1e-10));
        let report = classify(&rdo, 1e-8, 1e-6).unwrap();
        prop_assert!(report.one_multiplicity >= 1);
    }

    #[test]
    fn theta_is_an_invariant_dual_vector(a in params(), b in params(), p in 0.2f64..0.8) {
        let (sys, first) = qubit_exchange(&a).unwrap();
        let second = qubit_probe(&ExchangeParams { omega_s: a.omega_s, beta_s: a.beta_s, ..b }).unwrap();
        let ens = RrdoEnsemble::from_models(&sys, vec![(p, first), (1.0 - p, second)]).unwrap();
        let closed = theta_closed_form(&ens);
        prop_assume!(closed.is_ok());
        let theta = closed.unwrap().theta();
        let mean = mean_rdo(&ens).unwrap();
        prop_assert!((mean.matrix().adjoint() * &theta - &theta).norm() < 1e-9);
        let overlap = inner(&theta, ens.psi_s());
        prop_assert!((overlap.re - 1.0).abs() < 1e-9 && overlap.im.abs() < 1e-9);
    }

    #[test]
    fn geometric_series_slope_is_recovered(rate in 0.05f64..2.0, scale in 0.1f64..10.0) {
        let series: Vec<f64> = (0..200).map(|n| scale * (-rate * n as f64).exp()).collect();
        let slope = tail_log_slope(&series, 1e-11).unwrap();
        prop_assert!((slope + rate).abs() < 1e-6 * rate.max(1.0));
    }
}

#[test]
fn json_pipeline_reaches_fluxes() {
    let (sys, coupled) = qubit_exchange(&ExchangeParams::default()).unwrap();
    let cold = coupled.with_tau(0.5).unwrap();
    let spec = EnsembleJson::from_models(&sys, &[(0.25, coupled), (0.75, cold)]);
    let text = serde_json::to_string(&spec).unwrap();
    let back: EnsembleJson = serde_json::from_str(&text).unwrap();
    let ens = back.to_ensemble().unwrap();
    assert_eq!(ens.atoms().len(), 2);

    let fluxes = flux_closed_form(&ens).unwrap();
    assert!(fluxes.in_class);
    assert_abs_diff_eq!(fluxes.de_imag, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(fluxes.ds_imag, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(fluxes.residual, fluxes.ds_plus - fluxes.mean_beta * fluxes.de_plus, epsilon = 1e-14);
    assert_abs_diff_eq!(fluxes.residual, 0.0, epsilon = 1e-10);
}

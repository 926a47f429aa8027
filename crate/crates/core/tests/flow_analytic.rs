use proptest::prelude::*;

use cgbg_core::cgdata::Standardizer;
use cgbg_core::cnf::{dopri5_integrate, log_density_at, sample_with_logdensity, AnalyticField, ODESolverConfig};

fn gaussian_log_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn tight() -> ODESolverConfig {
    ODESolverConfig {
        atol: 1e-10,
        rtol: 1e-10,
        ..ODESolverConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn linear_field_pushes_gaussian_to_gaussian(a in -1.5f64..1.5, mean in 10.0f64..50.0, std in 0.5f64..10.0, seed in 0u64..500) {
        let st = Standardizer { mean, std };
        let batch = sample_with_logdensity(&AnalyticField::Linear(a), &st, 40, seed, &tight()).unwrap();
        let sd = std * a.exp();
        for (r, lq) in batch.r.iter().zip(&batch.log_q) {
            prop_assert!((lq - gaussian_log_density(*r, mean, sd)).abs() < 1e-7);
        }
        let back = log_density_at(&AnalyticField::Linear(a), &st, &batch.r, &tight()).unwrap();
        for (x, y) in back.iter().zip(&batch.log_q) {
            prop_assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_field_translates(b in -3.0f64..3.0, seed in 0u64..500) {
        let st = Standardizer { mean: 0.0, std: 1.0 };
        let batch = sample_with_logdensity(&AnalyticField::Constant(b), &st, 30, seed, &ODESolverConfig::default()).unwrap();
        for (r, lq) in batch.r.iter().zip(&batch.log_q) {
            prop_assert!((lq - gaussian_log_density(*r, b, 1.0)).abs() < 1e-9);
        }
    }
}

#[test]
fn sampling_is_seeded() {
    let st = Standardizer { mean: 30.0, std: 5.0 };
    let f = AnalyticField::Linear(0.3);
    let a = sample_with_logdensity(&f, &st, 600, 4, &ODESolverConfig::default()).unwrap();
    let b = sample_with_logdensity(&f, &st, 600, 4, &ODESolverConfig::default()).unwrap();
    let c = sample_with_logdensity(&f, &st, 600, 5, &ODESolverConfig::default()).unwrap();
    assert_eq!(a.r, b.r);
    assert_eq!(a.log_q, b.log_q);
    assert_ne!(a.r, c.r);
    let prefix = sample_with_logdensity(&f, &st, 100, 4, &ODESolverConfig::default()).unwrap();
    assert_eq!(&a.r[..100], &prefix.r[..]);
}

#[test]
fn dopri5_harmonic_oscillator() {
    let (y, stats) = dopri5_integrate(
        |_t, y, dy| {
            dy[0] = y[1];
            dy[1] = -y[0];
        },
        &[1.0, 0.0],
        0.0,
        10.0,
        &tight(),
    )
    .unwrap();
    assert!((y[0] - 10f64.cos()).abs() < 1e-8, "{}", y[0]);
    assert!((y[1] + 10f64.sin()).abs() < 1e-8, "{}", y[1]);
    assert!(stats.rejected < stats.accepted);
}

#[test]
fn dopri5_time_dependent_backwards() {
    // dy/dt = 2t y, y(1) = e, integrated back to t = 0.
    let (y, _) = dopri5_integrate(|t, y, dy| dy[0] = 2.0 * t * y[0], &[1f64.exp()], 1.0, 0.0, &tight()).unwrap();
    assert!((y[0] - 1.0).abs() < 1e-9, "{}", y[0]);
}

#[test]
fn step_budget_is_enforced() {
    let cfg = ODESolverConfig {
        max_steps: 3,
        ..tight()
    };
    assert!(dopri5_integrate(|_t, y, dy| dy[0] = -50.0 * y[0], &[1.0], 0.0, 5.0, &cfg).is_err());
}

use proptest::prelude::*;

use cgbg_core::analysis::{js_from_masses, max_abs_deviation};
use cgbg_core::potential::ThermoState;
use cgbg_core::reweight::{clip_sweep, ess, ClipMode, ClipPolicy, WeightedEnsemble};

fn masses(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter("nonzero", |v| v.iter().sum::<f64>() > 1e-6)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn js_is_symmetric_and_bounded(p in masses(12), q in masses(12)) {
        let (p, q) = (normalized(&p), normalized(&q));
        let a = js_from_masses(&p, &q);
        let b = js_from_masses(&q, &p);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= -1e-15 && a <= std::f64::consts::LN_2 + 1e-12);
        prop_assert!(js_from_masses(&p, &p).abs() < 1e-14);
    }

    #[test]
    fn ess_bounds(w in prop::collection::vec(1e-6f64..1.0, 1..50)) {
        let w = normalized(&w);
        let (abs, norm) = ess(&w);
        prop_assert!(abs >= 1.0 - 1e-9 && abs <= w.len() as f64 + 1e-9);
        prop_assert!(norm > 0.0 && norm <= 1.0 + 1e-12);
    }

    #[test]
    fn weights_are_gauge_invariant(
        e in prop::collection::vec(-5.0f64..5.0, 20..60),
        shift in -50.0f64..50.0,
        lq_shift in -50.0f64..50.0,
        frac in 0.0f64..0.3,
    ) {
        let th = ThermoState::new(1.0).unwrap();
        let lq: Vec<f64> = e.iter().map(|x| -0.5 * x * x).collect();
        let r: Vec<f64> = (0..e.len()).map(|i| i as f64).collect();
        let a = WeightedEnsemble::build(r.clone(), lq.clone(), e.clone(), &th, ClipPolicy::discard(frac)).unwrap();
        let e2: Vec<f64> = e.iter().map(|x| x + shift).collect();
        let lq2: Vec<f64> = lq.iter().map(|x| x + lq_shift).collect();
        let b = WeightedEnsemble::build(r, lq2, e2, &th, ClipPolicy::discard(frac)).unwrap();
        prop_assert_eq!(&a.keep, &b.keep);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x - y).abs() <= 1e-10 * x.max(1e-300).max(*y));
        }
        let s: f64 = a.weights.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discard_count_and_order(lw in prop::collection::vec(-20.0f64..20.0, 10..200), frac in 0.0f64..0.49) {
        let th = ThermoState::new(1.0).unwrap();
        let n = lw.len();
        let e = vec![0.0; n];
        let lq: Vec<f64> = lw.iter().map(|x| -x).collect();
        let ens = WeightedEnsemble::build(vec![0.0; n], lq, e, &th, ClipPolicy::discard(frac)).unwrap();
        let dropped = ens.keep.iter().filter(|k| !**k).count();
        prop_assert_eq!(dropped, (frac * n as f64).floor() as usize);
        let min_dropped = (0..n).filter(|&i| !ens.keep[i]).map(|i| lw[i]).fold(f64::INFINITY, f64::min);
        let max_kept = (0..n).filter(|&i| ens.keep[i]).map(|i| lw[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_dropped >= max_kept);
    }

    #[test]
    fn cap_mode_ess_is_monotone(lw in prop::collection::vec(-10.0f64..10.0, 20..200)) {
        let th = ThermoState::new(1.0).unwrap();
        let n = lw.len();
        let lq: Vec<f64> = lw.iter().map(|x| -x).collect();
        let mut last = 0.0;
        for f in [0.0, 0.01, 0.05, 0.1, 0.2, 0.4] {
            let p = ClipPolicy { fraction: f, mode: ClipMode::Cap };
            let ens = WeightedEnsemble::build(vec![0.0; n], lq.clone(), vec![0.0; n], &th, p).unwrap();
            prop_assert!(ens.keep.iter().all(|k| *k));
            prop_assert!(ens.ess_norm >= last - 1e-12, "{} < {}", ens.ess_norm, last);
            last = ens.ess_norm;
        }
    }

    #[test]
    fn minimax_alignment_ignores_constants(a in prop::collection::vec(-3.0f64..3.0, 2..30), c in -100.0f64..100.0) {
        let b: Vec<f64> = a.iter().map(|x| x + c).collect();
        let mask = vec![true; a.len()];
        prop_assert!(max_abs_deviation(&a, &b, &mask) < 1e-9);
    }
}

#[test]
fn exact_proposal_has_unit_ess() {
    let th = ThermoState::new(2.0).unwrap();
    let e: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
    let lq: Vec<f64> = e.iter().map(|x| -x / 2.0 + 7.0).collect();
    let rows = clip_sweep(&lq, &e, &th, &[0.0, 0.1]).unwrap();
    assert!((rows[0].ess_norm - 1.0).abs() < 1e-12);
    assert!((rows[1].ess_norm - 1.0).abs() < 1e-12);
    assert!((rows[1].ess_norm_total - 0.9).abs() < 1e-12);
}

#[test]
fn non_finite_inputs_are_rejected() {
    let th = ThermoState::new(1.0).unwrap();
    let r = WeightedEnsemble::build(vec![0.0; 2], vec![0.0, f64::NAN], vec![0.0; 2], &th, ClipPolicy::default());
    assert!(r.is_err());
    let r = WeightedEnsemble::build(vec![0.0; 2], vec![0.0; 2], vec![f64::INFINITY, 0.0], &th, ClipPolicy::default());
    assert!(r.is_err());
    assert!(ClipPolicy::discard(0.5).validate().is_err());
}

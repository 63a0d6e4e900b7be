//! Property tests for the algebraic invariants the numeric pipeline relies
//! on: phase wrapping, the Craig-form pairwise error integral, water-filling
//! structure, codec energy accounting, and schedule validation.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;

use simstack_core::config::dbm_to_watts;
use simstack_core::metrics::{pep_class, q_function};
use simstack_core::ofdm_im::{binomial, ActivationMatrix, ImCode};
use simstack_core::power::{uniform_active, waterfill};
use simstack_core::sim::wrap_phase;
use simstack_core::upgd::StepSchedule;

proptest! {
    #[test]
    fn wrap_phase_lands_in_principal_interval(theta in -1e4f64..1e4) {
        let w = wrap_phase(theta);
        prop_assert!((0.0..std::f64::consts::TAU).contains(&w));
        // same angle modulo 2*pi
        let diff = (theta - w) / (2.0 * std::f64::consts::PI);
        prop_assert!((diff - diff.round()).abs() < 1e-9);
    }

    #[test]
    fn pep_decreases_when_any_active_gamma_grows(
        g in prop::collection::vec(0.0f64..30.0, 1..6),
        idx in 0usize..6,
        bump in 0.1f64..10.0,
        beta in 0.5f64..6.0,
    ) {
        let idx = idx % g.len();
        let deltas = vec![1.0; g.len()];
        let base = pep_class(&g, &deltas, beta).unwrap();
        let mut g2 = g.clone();
        g2[idx] += bump;
        let better = pep_class(&g2, &deltas, beta).unwrap();
        prop_assert!(better <= base + 1e-15);
        prop_assert!((0.0..=0.5).contains(&base));
    }

    #[test]
    fn pep_masked_tones_do_not_matter(
        g in prop::collection::vec(0.0f64..30.0, 2..6),
        beta in 0.5f64..6.0,
    ) {
        // delta^2 = 0 on every tone but the first: the rest of the profile
        // is irrelevant to the integral
        let mut deltas = vec![0.0; g.len()];
        deltas[0] = 1.0;
        let full = pep_class(&g, &deltas, beta).unwrap();
        let single = pep_class(&g[..1], &deltas[..1], beta).unwrap();
        prop_assert!((full - single).abs() < 1e-12);
    }

    #[test]
    // the Craig form is defined for non-negative arguments, which is all
    // the error bounds ever feed it
    fn q_function_is_monotone_and_bounded(a in 0.0f64..6.0, step in 0.001f64..2.0) {
        let qa = q_function(a);
        let qb = q_function(a + step);
        prop_assert!(qb <= qa + 1e-15);
        prop_assert!((0.0..=0.5).contains(&qa));
    }

    #[test]
    fn waterfill_spends_the_budget_and_orders_by_gain(
        seed_gains in prop::collection::vec(0.01f64..50.0, 2..12),
        pt in 0.05f64..20.0,
    ) {
        let n = seed_gains.len();
        let gains = Array3::from_shape_vec((1, 1, n), seed_gains.clone()).unwrap();
        let z = ActivationMatrix { z: Array2::ones((1, n)) };
        let alloc = waterfill(&gains, &z, n, pt).unwrap();
        prop_assert!((alloc.total() - pt).abs() < 1e-9 * pt.max(1.0));
        // stronger gains never get less power
        for i in 0..n {
            for j in 0..n {
                if seed_gains[i] >= seed_gains[j] {
                    prop_assert!(alloc.p[[0, 0, i]] >= alloc.p[[0, 0, j]] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn uniform_active_splits_evenly(
        mask in prop::collection::vec(prop::bool::ANY, 4..16),
        pt in 0.05f64..20.0,
    ) {
        prop_assume!(mask.iter().any(|&b| b));
        let n = mask.len();
        let z = ActivationMatrix {
            z: Array2::from_shape_vec((1, n), mask.iter().map(|&b| u8::from(b)).collect()).unwrap(),
        };
        let alloc = uniform_active(&z, n, pt).unwrap();
        prop_assert!((alloc.total() - pt).abs() < 1e-9 * pt.max(1.0));
        let active = mask.iter().filter(|&&b| b).count();
        let share = pt / active as f64;
        for (i, &b) in mask.iter().enumerate() {
            let expect = if b { share } else { 0.0 };
            prop_assert!((alloc.p[[0, 0, i]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_places_exactly_v_unit_symbols(
        word in 0u32..256,
        nv in prop::sample::select(vec![(4usize, 1usize), (4, 2), (4, 3), (2, 1)]),
    ) {
        let (n, v) = nv;
        let code = ImCode::new(n, v, 2).unwrap();
        let q = code.q();
        let word = word & ((1 << q) - 1);
        let bits: Vec<u8> = (0..q).map(|b| ((word >> (q - 1 - b)) & 1) as u8).collect();
        let symbols = code.encode_subblock(&bits).unwrap();
        let lit: Vec<usize> = (0..n).filter(|&i| symbols[i].norm() > 1e-12).collect();
        prop_assert_eq!(lit.len(), v);
        for &i in &lit {
            prop_assert!((symbols[i].norm() - 1.0).abs() < 1e-12);
        }
        prop_assert!(code.patterns.contains(&lit));
    }

    #[test]
    fn spectral_efficiency_is_linear_in_users(
        k in 1usize..8,
        scale in 2usize..4,
    ) {
        let code = ImCode::new(4, 2, 2).unwrap();
        let one = code.spectral_efficiency(k, 16, 8);
        let many = code.spectral_efficiency(k * scale, 16, 8);
        prop_assert!((many - one * scale as f64).abs() < 1e-12);
    }

    #[test]
    fn binomial_satisfies_pascal(n in 1usize..20, k in 0usize..20) {
        prop_assume!(k <= n);
        let lhs = binomial(n, k);
        let rhs = if k == 0 || k == n {
            1
        } else {
            binomial(n - 1, k - 1) + binomial(n - 1, k)
        };
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn dbm_conversion_is_exact_on_decades(d in -3i32..4) {
        let dbm = 30.0 + 10.0 * d as f64;
        prop_assert!((dbm_to_watts(dbm) - 10f64.powi(d)).abs() < 1e-12 * 10f64.powi(d));
    }

    #[test]
    fn schedule_rejects_non_positive_steps(
        mut eta in prop::collection::vec(0.01f64..1.0, 1..40),
        idx in 0usize..40,
        bad in -1.0f64..0.0,
    ) {
        prop_assert!(StepSchedule::new(eta.clone()).is_ok());
        let idx = idx % eta.len();
        eta[idx] = bad;
        prop_assert!(StepSchedule::new(eta).is_err());
    }
}

/// Free-space power transfer through the cascade must shrink as the stack
/// is squeezed: a plain (non-proptest) spot check that the insertion loss
/// ordering holds across three stack depths at the desk aperture.
#[test]
fn cascade_insertion_loss_grows_with_thinner_stacks() {
    use simstack_core::config::SystemConfig;
    use simstack_core::sim::{build_propagation, SimGeometry, SimState};
    use std::sync::Arc;

    let mut transfers = Vec::new();
    for dm_total in [0.01f64, 0.02, 0.05] {
        let mut cfg = SystemConfig::desk();
        cfg.dm_total = dm_total;
        let geom = SimGeometry::from_config(&cfg);
        let prop = Arc::new(build_propagation(&cfg, &geom));
        let state = SimState::zeros(prop);
        let g = state.cascade(1);
        let power: f64 = g.iter().map(|c| c.norm_sqr()).sum::<f64>() / cfg.s() as f64;
        transfers.push(power);
    }
    assert!(
        transfers[0] > transfers[1] && transfers[1] > transfers[2],
        "column power transfer should fall with wider layer spacing at fixed aperture: {transfers:?}"
    );
}

use std::collections::HashMap;

use grp_core::data::{k_core_filter, split_80_20, RatingRecord};
use grp_core::distributions::{density, gumbel_mle_fit, mle_residuals, DistKind, MleConvention};
use grp_core::features::ratio_feature;
use grp_core::training::{adam_update, AdamHyper};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = DistKind> {
    prop::sample::select(DistKind::ALL.to_vec())
}

fn records() -> impl Strategy<Value = Vec<RatingRecord>> {
    prop::collection::vec((0u8..12, 0u8..8, 1u32..=5), 5..120).prop_map(|rows| {
        let mut seen = HashMap::new();
        for (u, i, r) in rows {
            seen.insert((u, i), r);
        }
        let mut out: Vec<RatingRecord> = seen
            .into_iter()
            .map(|((u, i), r)| RatingRecord::new(format!("u{u}"), format!("i{i}"), r))
            .collect();
        out.sort_by(|a, b| (&a.user_id, &a.item_id).cmp(&(&b.user_id, &b.item_id)));
        out
    })
}

proptest! {
    #[test]
    fn densities_are_finite_and_nonnegative(
        k in kind(),
        x in 0.5f64..6.0,
        loc in 0.0f64..6.0,
        scale in 0.05f64..5.0,
        shape in 0.1f64..5.0,
    ) {
        let e = density(k, x, loc, scale, shape);
        prop_assert!(e.value.is_finite() && e.value >= 0.0);
        prop_assert!(e.d_x.is_finite() && e.d_loc.is_finite() && e.d_scale.is_finite() && e.d_shape.is_finite());
    }

    #[test]
    fn density_partials_match_central_differences(
        k in kind(),
        x in 1.0f64..5.0,
        loc in 1.0f64..5.0,
        scale in 0.5f64..3.0,
        shape in 0.5f64..4.0,
    ) {
        // Poisson is piecewise constant in x; keep x off the rounding edges.
        let x = if k == DistKind::Poisson { x.round() + 0.1 } else { x };
        let h = 1e-6;
        let e = density(k, x, loc, scale, shape);
        let f = |x: f64, l: f64, s: f64, a: f64| density(k, x, l, s, a).value;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-5 * (1.0 + a.abs().max(n.abs()));
        prop_assert!(close(e.d_x, (f(x + h, loc, scale, shape) - f(x - h, loc, scale, shape)) / (2.0 * h)));
        prop_assert!(close(e.d_scale, (f(x, loc, scale + h, shape) - f(x, loc, scale - h, shape)) / (2.0 * h)));
        if k.uses_location() {
            prop_assert!(close(e.d_loc, (f(x, loc + h, scale, shape) - f(x, loc - h, scale, shape)) / (2.0 * h)));
        }
        if k.uses_shape() {
            prop_assert!(close(e.d_shape, (f(x, loc, scale, shape + h) - f(x, loc, scale, shape - h)) / (2.0 * h)));
        }
    }

    #[test]
    fn gumbel_peaks_at_its_location(alpha in -5.0f64..5.0, beta in 0.05f64..5.0, off in 0.01f64..3.0) {
        let at = |x: f64| density(DistKind::Gumbel, x, alpha, beta, 0.0).value;
        prop_assert!(at(alpha) > at(alpha + off * beta));
        prop_assert!(at(alpha) > at(alpha - off * beta));
        prop_assert!((at(alpha) - 1.0 / (beta * std::f64::consts::E)).abs() < 1e-12);
    }

    #[test]
    fn corrected_mle_solves_its_equations(xs in prop::collection::vec(-5.0f64..5.0, 3..200)) {
        prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-3));
        let fit = gumbel_mle_fit(&xs, MleConvention::MinimumCorrected).unwrap();
        prop_assert!(fit.beta > 0.0);
        let (rs, rl) = mle_residuals(&xs, fit.alpha, fit.beta, MleConvention::MinimumCorrected);
        prop_assert!(rs.abs() <= 1e-8 && rl.abs() <= 1e-8, "residuals {rs} {rl}");
    }

    #[test]
    fn first_adam_step_moves_each_weight_by_at_most_lr(
        g in prop::collection::vec(-100.0f64..100.0, 1..20),
        lr in 1e-4f64..0.1,
    ) {
        let n = g.len();
        let mut w = vec![0.0; n];
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let h = AdamHyper { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        adam_update(&mut w, &g, &mut m, &mut v, 1, h);
        for (wi, gi) in w.iter().zip(&g) {
            prop_assert!(wi.abs() <= lr * (1.0 + 1e-12));
            // Each weight moves against its gradient.
            prop_assert!(*gi == 0.0 || wi.signum() == -gi.signum());
        }
    }

    #[test]
    fn ratio_features_lie_on_the_simplex(history in prop::collection::vec(1u32..=5, 0..50)) {
        let q = ratio_feature(&history, 5).unwrap();
        prop_assert!((q.q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q.q.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(q.support_count, history.len());
    }

    #[test]
    fn k_core_is_a_fixed_point_with_minimum_degree(rs in records(), k in 1usize..5) {
        let core = k_core_filter(&rs, k).unwrap();
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &core {
            *users.entry(&r.user_id).or_default() += 1;
            *items.entry(&r.item_id).or_default() += 1;
        }
        prop_assert!(users.values().chain(items.values()).all(|&d| d >= k));
        prop_assert_eq!(k_core_filter(&core, k).unwrap(), core.clone());
        prop_assert!(core.iter().all(|r| rs.contains(r)));
    }

    #[test]
    fn split_partitions_the_records(rs in records(), seed in any::<u64>()) {
        prop_assume!(rs.len() >= 5);
        let s = split_80_20(&rs, seed).unwrap();
        prop_assert_eq!(s.train.len(), rs.len() * 4 / 5);
        let mut all: Vec<_> = s.train.iter().chain(&s.test).cloned().collect();
        all.sort_by(|a, b| (&a.user_id, &a.item_id).cmp(&(&b.user_id, &b.item_id)));
        prop_assert_eq!(all, rs);
    }
}

use hedgegame::model::shake_lattice;
use hedgegame::regularize::{axis_costs, inf_convolution, Bump};
use proptest::prelude::*;

proptest! {
    #[test]
    fn envelope_is_a_lower_bound_attained_at_its_argmin(
        vals in prop::collection::vec(-5.0f64..5.0, 1..60),
        k in 0.1f64..1e3,
        h in 1e-3f64..0.5,
    ) {
        let n = vals.len();
        let c = axis_costs(k, &[h], &[1.0])[0];
        let r = inf_convolution(&vals, &[n], &[c]);
        for i in 0..n {
            prop_assert!(r.values[i] <= vals[i]);
            let j = r.argmin[i];
            let d = i as f64 - j as f64;
            prop_assert_eq!(r.values[i], vals[j] + c * (d * d));
            // no node does better
            for (q, v) in vals.iter().enumerate() {
                let d = i as f64 - q as f64;
                prop_assert!(r.values[i] <= v + c * (d * d));
            }
        }
    }

    #[test]
    fn envelope_commutes_with_constant_shifts(
        vals in prop::collection::vec(-1.0f64..1.0, 2..40),
        shift in -3.0f64..3.0,
    ) {
        let n = vals.len();
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let a = inf_convolution(&vals, &[n], &[0.7]);
        let b = inf_convolution(&shifted, &[n], &[0.7]);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x + shift - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn shake_points_stay_in_the_ball(eps in 0.0f64..1.0, dim in 1usize..4) {
        for b in shake_lattice(eps, dim) {
            prop_assert_eq!(b.len(), dim + 1);
            let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= eps * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn bump_is_even_and_vanishes_off_support(u in -2.0f64..2.0) {
        prop_assert_eq!(Bump::value(u), Bump::value(-u));
        prop_assert!(Bump::value(u) >= 0.0);
        if u.abs() >= 1.0 {
            prop_assert_eq!(Bump::value(u), 0.0);
            prop_assert_eq!(Bump::d1(u), 0.0);
        }
    }
}

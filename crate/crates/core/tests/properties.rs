use proptest::prelude::*;

use mfg_convex::grid::{h2_gram_apply, h2_inner, volterra, volterra_t, Deriv, SpaceTimeGrid, Stencils};
use mfg_convex::io::{decode_pgm16, encode_pgm16};
use mfg_convex::noise::{perturb, NoiseSpec};

fn grid() -> impl Strategy<Value = SpaceTimeGrid> {
    (4usize..9, 4usize..9, 1usize..5, 0.5f64..2.0)
        .prop_map(|(n1, n2, half, t)| SpaceTimeGrid::new((1.0, 2.0), (1.0, 1.5), t, n1, n2, 2 * half).unwrap())
}

fn grid_and_pair() -> impl Strategy<Value = (SpaceTimeGrid, Vec<f64>, Vec<f64>)> {
    grid().prop_flat_map(|g| {
        let n = g.len();
        (Just(g), prop::collection::vec(-1.0f64..1.0, n), prop::collection::vec(-1.0f64..1.0, n))
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-10 * scale.max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn derivative_transposes_are_adjoint((g, u, v) in grid_and_pair(), which in 0usize..9) {
        let d = Deriv::H2_TERMS[which + 1].unwrap();
        let st = Stencils::new(&g);
        let lhs = dot(&st.apply(d, &u), &v);
        let rhs = dot(&u, &st.apply_t(d, &v));
        prop_assert!(close(lhs, rhs, lhs.abs()), "{d:?}: {lhs} vs {rhs}");
    }

    #[test]
    fn volterra_transpose_is_adjoint((g, u, v) in grid_and_pair()) {
        let dims = g.space_time_dims();
        let lhs = dot(&volterra(&u, dims, g.ht()), &v);
        let rhs = dot(&u, &volterra_t(&v, dims, g.ht()));
        prop_assert!(close(lhs, rhs, lhs.abs()));
    }

    #[test]
    fn volterra_vanishes_at_midpoint_and_integrates_constants((g, u, _) in grid_and_pair()) {
        let dims = g.space_time_dims();
        let plane = g.spatial_len();
        let iu = volterra(&u, dims, g.ht());
        prop_assert!(iu[g.mid() * plane..(g.mid() + 1) * plane].iter().all(|&x| x == 0.0));
        let ones = volterra(&vec![1.0; g.len()], dims, g.ht());
        for k in 0..g.n_times() {
            let want = g.t(k) - g.t(g.mid());
            prop_assert!((ones[k * plane] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_integrates_constants(g in grid()) {
        let vol = (g.x1_max - g.x1_min) * (g.x2_max - g.x2_min) * g.t_max;
        let sum: f64 = g.quadrature_weights().iter().sum();
        prop_assert!((sum - vol).abs() < 1e-12);
    }

    #[test]
    fn gram_operator_represents_h2_inner((g, u, v) in grid_and_pair()) {
        let st = Stencils::new(&g);
        let w = g.quadrature_weights();
        let lhs = dot(&h2_gram_apply(&st, &w, &u), &v);
        let rhs = h2_inner(&g, &u, &v);
        prop_assert!(close(lhs, rhs, rhs.abs()));
        prop_assert!(h2_inner(&g, &u, &u) >= dot(&u, &u) * w.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn first_derivatives_are_exact_on_affine_fields(g in grid(), a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0) {
        let f = g.sample(|x1, x2, t| a * x1 + b * x2 + c * t);
        let st = Stencils::new(&g);
        for (d, want) in [(Deriv::X1, a), (Deriv::X2, b), (Deriv::T, c)] {
            prop_assert!(st.apply(d, &f.values).iter().all(|x| (x - want).abs() < 1e-9));
        }
        prop_assert!(st.apply(Deriv::X1X1, &f.values).iter().all(|x| x.abs() < 1e-7));
    }

    #[test]
    fn graymap_round_trip(width in 1usize..8, rows in 1usize..8, seed in any::<u64>()) {
        let values = NoiseSpec { delta: 0.0, seed }.draws(0, width * rows);
        let (lo, hi) = (-1.0, 1.0);
        let bytes = encode_pgm16(&values, width, lo, hi).unwrap();
        let (w, h, gray) = decode_pgm16(&bytes).unwrap();
        prop_assert_eq!((w, h), (width, rows));
        for (r, row) in gray.chunks(w).enumerate() {
            for (i, &p) in row.iter().enumerate() {
                let v = values[(rows - 1 - r) * width + i];
                let back = lo + (hi - lo) * p as f64 / 65535.0;
                prop_assert!((back - v).abs() <= (hi - lo) / 65535.0);
            }
        }
    }

    #[test]
    fn noise_is_seeded_and_bounded(seed in any::<u64>(), stream in 0u64..4, delta in 0.0f64..0.99, n in 1usize..6) {
        let spec = NoiseSpec::new(delta, seed).unwrap();
        let xi = spec.draws(stream, n);
        prop_assert_eq!(&xi, &spec.draws(stream, n));
        prop_assert!(xi.iter().all(|x| (-1.0..=1.0).contains(x)));
        let trace: Vec<f64> = (0..3 * n).map(|i| 1.0 + i as f64).collect();
        let noisy = perturb(&trace, 3, delta, &xi);
        for (a, b) in noisy.iter().zip(&trace) {
            prop_assert!((a - b).abs() <= delta * b.abs() + 1e-12);
        }
        prop_assert_eq!(perturb(&trace, 3, 0.0, &xi), trace);
    }
}

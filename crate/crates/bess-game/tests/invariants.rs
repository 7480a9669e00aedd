//! Property tests of model-level invariants.

use proptest::prelude::*;

use bess_game::equilibrium::{price, AffineGains};
use bess_game::moments::linear_flow;
use bess_game::scenarios::{arbitrageur_market, baseline_market, sample_theta_market};
use bess_game::simulate::{quantile, series_max_abs, series_range, series_tc};
use bess_game::model::TimeGrid;
use bess_game::sizing::{block_agent, build_block_market, BlockSpec, MajorMinor};

proptest! {
    #[test]
    fn price_is_affine_in_dispatch(seed in 0u64..500, q in 0.0f64..60.0, a in prop::collection::vec(-3.0f64..3.0, 4), b in prop::collection::vec(-3.0f64..3.0, 4)) {
        let m = sample_theta_market(seed, 4);
        let pa = price(&m, q, &a);
        let pb = price(&m, q, &b);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let pm = price(&m, q, &mid);
        for i in 0..4 {
            prop_assert!((pm[i] - 0.5 * (pa[i] + pb[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn more_supply_lowers_every_price(q in 0.0f64..60.0, dq in 0.01f64..10.0, a in prop::collection::vec(-3.0f64..3.0, 3)) {
        let m = baseline_market(3);
        let lo = price(&m, q, &a);
        let hi = price(&m, q + dq, &a);
        prop_assert!(lo.iter().zip(&hi).all(|(x, y)| y < x));
    }

    #[test]
    fn gains_apply_is_linear(q in -10.0f64..10.0, s in prop::collection::vec(-10.0f64..10.0, 3), k in -3.0f64..3.0) {
        let mut g = AffineGains::zeros(3);
        for (j, x) in g.b.iter_mut().enumerate() {
            *x = (j as f64 - 4.0) * 0.3;
        }
        g.a = vec![0.2, -0.1, 0.4];
        let base = g.apply(0.0, &[0.0; 3]);
        let one = g.apply(q, &s);
        let scaled: Vec<f64> = s.iter().map(|x| k * x).collect();
        let two = g.apply(k * q, &scaled);
        for i in 0..3 {
            prop_assert!(((two[i] - base[i]) - k * (one[i] - base[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn block_scaling_preserves_per_unit_targets(size in 1usize..40) {
        let unit = arbitrageur_market(1).agents[0].clone();
        let b = block_agent(&unit, size);
        let k = size as f64;
        prop_assert!((b.c2 * k - unit.c2).abs() < 1e-12);
        prop_assert!((b.s0 / k - unit.s0).abs() < 1e-12);
        prop_assert!((b.sigma * b.sigma / k - unit.sigma * unit.sigma).abs() < 1e-12);
        prop_assert!((b.zeta.at(3.0) / k - unit.zeta.at(3.0)).abs() < 1e-12);
    }

    #[test]
    fn major_minor_blocks_cover_the_market(major in 1usize..=32, minor in 1usize..=8) {
        let cfg = MajorMinor { n_units: 32, major, minor };
        match cfg.blocks() {
            Ok(blocks) => {
                prop_assert_eq!(blocks.iter().map(|b| b.size * b.count).sum::<usize>(), 32);
                let mut unit = arbitrageur_market(1).agents[0].clone();
                unit.rho = 0.0;
                let m = build_block_market(&unit, &blocks, &arbitrageur_market(1), 32).unwrap();
                prop_assert_eq!(m.n_agents(), blocks.iter().map(|b| b.count).sum::<usize>());
            }
            Err(_) => prop_assert!((32 - major) % minor != 0),
        }
    }

    #[test]
    fn series_statistics_are_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 25), c in -100.0f64..100.0) {
        let g = TimeGrid::new(24.0, 24);
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!((series_range(&xs, g, 21.0) - series_range(&shifted, g, 21.0)).abs() < 1e-9);
        prop_assert!(series_tc(&xs, g, 21.0) >= 0.0);
        prop_assert!(series_max_abs(&xs, g, 21.0) <= xs.iter().fold(0.0f64, |m, x| m.max(x.abs())) + 1e-12);
    }

    #[test]
    fn quantiles_are_monotone(mut xs in prop::collection::vec(-10.0f64..10.0, 2..60), p in 0.0f64..1.0, dp in 0.0f64..0.5) {
        xs.sort_by(|a, b| a.total_cmp(b));
        let hi = (p + dp).min(1.0);
        prop_assert!(quantile(&xs, p) <= quantile(&xs, hi) + 1e-12);
        prop_assert!(quantile(&xs, 0.0) >= xs[0] - 1e-12 && quantile(&xs, 1.0) <= xs[xs.len() - 1] + 1e-12);
    }

    #[test]
    fn linear_flow_matches_constant_coefficient_solution(r in -2.0f64..2.0, f in -3.0f64..3.0, x0 in -5.0f64..5.0) {
        let n = 400;
        let h = 2.0 / n as f64;
        let x = linear_flow(&vec![r; n + 1], &vec![f; n + 1], h, x0);
        let t = 2.0;
        let exact = if r.abs() < 1e-12 { x0 + f * t } else { (x0 + f / r) * (r * t).exp() - f / r };
        prop_assert!((x[n] - exact).abs() <= 1e-6 * (1.0 + exact.abs()));
    }
}

#[test]
fn unit_blocks_reproduce_the_reference_market() {
    let mut m = arbitrageur_market(5);
    m.agents.iter_mut().for_each(|a| a.rho = 0.0);
    let built = build_block_market(&m.agents[0], &[BlockSpec { size: 1, count: 5 }], &m, 5).unwrap();
    assert_eq!(built, m);
}

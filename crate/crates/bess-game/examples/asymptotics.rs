//! Large-market expansion in 1/N: leading-order coefficients, the first-order
//! correction, expansion-based controls and the L² limit of the average SOC.

use bess_game::asymptotics::{
    aggregate_control_expansion, bar_s_limit_check, expansion_coeffs, l2_test_market, price_expansion, richardson_error,
};
use bess_game::equilibrium::{solve_policy, FeedbackPolicy, Policy};

fn main() -> bess_game::Result<()> {
    // weak SOC penalties: with c4 = 100 the first-order term stays O(1) until
    // N is in the thousands
    let model = l2_test_market(200);
    let grid = model.riccati_grid();
    let ex = expansion_coeffs(&model, grid)?;
    println!("identity defect p4⁰ + p5¹ − (c3(T−t) + c4): {:.2e}", ex.identity_defect());
    for t in [0.0, 12.0, 23.0] {
        let x = ex.at(t)?;
        println!("t = {t:>4}: p4⁰ {:.5} p4¹ {:.4} p2⁰ {:.4} r2⁰ {:.4}", x.p4_0, x.p4_1, x.p2_0, x.r2_0);
    }

    // expansion vs exact equilibrium, SOC spread evenly around 5
    let exact = solve_policy(&model, false)?;
    let approx = FeedbackPolicy::expansion(&model, ex.clone(), 2);
    let s: Vec<f64> = (0..200).map(|i| 4.0 + 2.0 * i as f64 / 199.0).collect();
    for t in [6.0, 18.0] {
        let a: f64 = exact.controls(t, 32.0, &s)?.iter().sum();
        let b: f64 = approx.controls(t, 32.0, &s)?.iter().sum();
        println!(
            "t = {t:>4}: aggregate control exact {a:.4}, expansion {b:.4}, leading order {:.4}; price ≈ {:.3}",
            aggregate_control_expansion(&ex, t, 32.0, 5.0)?,
            price_expansion(&ex, t, 32.0, 5.0)?
        );
    }

    println!("Richardson error at N = 400: {:.4}", richardson_error(&l2_test_market(400), grid)?);
    let rep = bar_s_limit_check(&l2_test_market, &[8, 16, 32], 500, 3)?;
    for p in &rep.points {
        println!("N = {:>2}: E|S̄_T − S̄*_T|² = {:.4e} ± {:.1e}", p.n, p.l2_gap, p.stderr);
    }
    println!("log-log slope {:.3}", rep.slope);
    Ok(())
}

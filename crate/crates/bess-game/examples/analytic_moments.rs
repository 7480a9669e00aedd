//! Closed-form means and variances of the homogeneous equilibrium, checked
//! against a small Monte Carlo run, and their sensitivity to correlation.

use bess_game::equilibrium::FeedbackPolicy;
use bess_game::moments::{analytic_moments, rho_sensitivity_report};
use bess_game::riccati_homogeneous::solve_homogeneous;
use bess_game::scenarios::baseline_market;
use bess_game::simulate::{probe_values, simulate_paths, variance_estimate, Estimate, SimConfig, Var};

fn main() -> bess_game::Result<()> {
    let model = baseline_market(8);
    let grid = model.riccati_grid();
    let sol = solve_homogeneous(&model, grid)?;
    let m = analytic_moments(&model, &sol)?;

    let mut cfg = SimConfig::new(&model, 2000, 11);
    cfg.grid = grid;
    cfg.probe_times = vec![6.0, 12.0, 18.0];
    let ens = simulate_paths(&model, &FeedbackPolicy::homogeneous(&model, sol), &cfg)?;

    println!("{:>5} {:>22} {:>22} {:>22}", "t", "E[alpha] exact / MC", "Var(alpha) exact / MC", "Var(P) exact / MC");
    for (j, &t) in cfg.probe_times.iter().enumerate() {
        let k = m.node_of(t);
        let a = probe_values(&ens, j, Var::Alpha(0));
        let p = probe_values(&ens, j, Var::Price(0));
        let (ea, va, vp) = (Estimate::from_samples(&a), variance_estimate(&a), variance_estimate(&p));
        println!(
            "{t:>5} {:>10.4} / {:<9.4} {:>10.4} / {:<9.4} {:>10.4} / {:<9.4}",
            m.means.mean_alpha[k], ea.mean, m.vars.var_alpha[k], va.mean, m.vars.var_price[k], vp.mean
        );
    }

    println!("\ncorrelation with the common factor:");
    for row in rho_sensitivity_report(&model, grid, &[0.0, 0.3, 0.6, 0.9], &[12.0])? {
        println!("  rho {:.1}: time-averaged Std(alpha) {:.4}, Std(P) {:.4}", row.rho, row.avg_std_alpha, row.avg_std_price);
    }
    Ok(())
}

//! Price flattening across randomly drawn markets: heterogeneous operators,
//! and identical operators under random supply curves and cross-impact.

use bess_game::equilibrium::solve_policy;
use bess_game::model::MarketModel;
use bess_game::scenarios::{sample_heterogeneous_market, sample_theta_market};
use bess_game::simulate::{mean_path, no_storage_tb, series_range};

fn reduction(model: &MarketModel) -> bess_game::Result<f64> {
    let policy = solve_policy(model, false)?;
    let grid = model.sim_grid();
    let path = mean_path(model, &policy, grid)?;
    let n = model.n_agents();
    let tb = (0..n).map(|i| series_range(&path.agent_price(i), grid, 21.0)).sum::<f64>() / n as f64;
    Ok(1.0 - tb / no_storage_tb(model, grid, 21.0))
}

fn main() -> bess_game::Result<()> {
    let draws = 8;
    for (label, build) in [
        ("heterogeneous", sample_heterogeneous_market as fn(u64, usize) -> MarketModel),
        ("random supply", sample_theta_market),
    ] {
        let mut r: Vec<f64> = (1..=draws).map(|seed| reduction(&build(seed, 10))).collect::<bess_game::Result<_>>()?;
        r.sort_by(|a, b| a.total_cmp(b));
        println!(
            "{label:>14}, N = 10: TB reduction min {:.1}%, median {:.1}%, max {:.1}%",
            100.0 * r[0],
            50.0 * (r[draws as usize / 2 - 1] + r[draws as usize / 2]),
            100.0 * r[draws as usize - 1]
        );
    }
    Ok(())
}

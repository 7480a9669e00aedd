//! Competition effect: four hybrid operators joined by a growing number of
//! pure arbitrageurs. Mean curves come from the noise-free path, which is the
//! exact ensemble mean.

use bess_game::equilibrium::solve_policy;
use bess_game::scenarios::{baseline_market, two_class_market};
use bess_game::simulate::{mean_path, no_storage_tb, series_range};

fn main() -> bess_game::Result<()> {
    let reference = baseline_market(1);
    for n in [4usize, 8, 12, 16] {
        let model = two_class_market(4, n - 4, &reference);
        let policy = solve_policy(&model, false)?;
        let grid = model.sim_grid();
        let path = mean_path(&model, &policy, grid)?;
        let price = path.agent_price(0);
        let avg = price.iter().sum::<f64>() / price.len() as f64;
        let hybrid_s = path.agent_s(0)[grid.n_steps];
        let arb_s = if n > 4 { path.agent_s(n - 1)[grid.n_steps] } else { f64::NAN };
        println!(
            "N = {n:>2}: average E[P] {avg:.4}, daily range {:.3} (no storage {:.3}), terminal SOC hybrid {hybrid_s:.3} arbitrageur {arb_s:.3}",
            series_range(&price, grid, 21.0),
            no_storage_tb(&model, grid, 21.0)
        );
    }
    Ok(())
}

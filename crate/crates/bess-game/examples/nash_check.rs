//! Unilateral deviations from the equilibrium feedback raise the deviator's
//! expected cost. Common random numbers pair every deviated path with its
//! equilibrium twin.

use bess_game::equilibrium::{deviation_bump, solve_policy, DeviatedPolicy};
use bess_game::scenarios::baseline_market;
use bess_game::simulate::{simulate_paths, Estimate, SimConfig};

fn main() -> bess_game::Result<()> {
    let model = baseline_market(4);
    let policy = solve_policy(&model, false)?;
    let cfg = SimConfig::new(&model, 1000, 99);
    let eq = simulate_paths(&model, &policy, &cfg)?;
    for agent in [0, 3] {
        for eps in [-0.5, -0.1, 0.1, 0.5] {
            let dev = DeviatedPolicy { base: &policy, agent, eps, bump: deviation_bump };
            let ens = simulate_paths(&model, &dev, &cfg)?;
            let d: Vec<f64> = ens.metrics.iter().zip(&eq.metrics).map(|(x, y)| x.pnl[agent].objective() - y.pnl[agent].objective()).collect();
            let e = Estimate::from_samples(&d);
            println!("agent {agent} eps {eps:+.1}: cost change {:+.4} ± {:.4}", e.mean, e.stderr);
        }
    }
    Ok(())
}

//! Consolidation: one Major operator of M units among single-unit Minors, in a
//! market of 16 arbitrage units. Dispatch is reported relative to one unit in
//! the fully competitive market.

use bess_game::scenarios::arbitrageur_market;
use bess_game::sizing::{major_minor, unit_baseline, MajorMinor};

fn main() -> bess_game::Result<()> {
    let units = 16;
    let paths = 400;
    let mut market = arbitrageur_market(units);
    for a in market.agents.iter_mut() {
        a.rho = 0.0;
    }
    let unit = market.agents[0].clone();
    let base = unit_baseline(&unit, &market, units, paths, 5)?;
    println!("unit baseline: E[max |alpha|] = {:.4}, max |E alpha| = {:.4}", base.max_dispatch, base.mean_path);
    for major in [1, 4, 8, 12, 15, 16] {
        let rep = major_minor(&unit, &market, MajorMinor { n_units: units, major, minor: 1 }, &base, paths, 5)?;
        for r in &rep.rows {
            println!(
                "M = {major:>2} {:<5} x{:<2} dispatch {:>6.2} (mean path {:>6.2}), per-unit revenue {:>8.2} cost {:>8.2} net {:>8.2}",
                r.label, r.count, r.dispatch_ratio, r.mean_path_ratio, r.per_unit_revenue, r.per_unit_cost, r.per_unit_net
            );
        }
    }
    Ok(())
}

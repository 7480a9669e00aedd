//! Monte Carlo simulation of the reference market: daily storage statistics,
//! price flattening and quantile bands, with CSV output.

use std::path::PathBuf;

use bess_game::equilibrium::{solve_policy, ZeroPolicy};
use bess_game::model::TimeGrid;
use bess_game::scenarios::baseline_market;
use bess_game::simulate::{
    mean_path, no_storage_tb, quantile_bands, series_range, simulate_paths, stat_tb, stat_tb_mean_curve, stat_tc, stat_ts,
    write_paths_csv, write_summary_csv, SimConfig, Var,
};

fn main() -> bess_game::Result<()> {
    let model = baseline_market(8);
    let policy = solve_policy(&model, false)?;

    let mut cfg = SimConfig::new(&model, 1000, 7);
    cfg.keep_paths = 3;
    cfg.sample_stride = Some(10);
    let ens = simulate_paths(&model, &policy, &cfg)?;
    let cut = cfg.t_cutoff;

    let tc = stat_tc(&ens, cut)?;
    let ts = stat_ts(&ens, cut)?;
    let tb = stat_tb(&ens, cut)?;
    println!("TC = {:.3} ± {:.3}  TS = {:.3} ± {:.3}  pathwise TB = {:.3} ± {:.3}", tc.mean, tc.stderr, ts.mean, ts.stderr, tb.mean, tb.stderr);

    let idle = simulate_paths(&model, &ZeroPolicy { n: 8, horizon: model.horizon }, &SimConfig::new(&model, 1000, 7))?;
    println!("pathwise TB without storage = {:.3}", stat_tb(&idle, cut)?.mean);

    // the expected price curve is what the daily range is usually quoted on
    let without = no_storage_tb(&model, TimeGrid::new(model.horizon, 1440), cut);
    let exact = mean_path(&model, &policy, cfg.grid)?;
    let exact_tb = series_range(&exact.agent_price(0), cfg.grid, cut);
    println!(
        "range of E[P]: {exact_tb:.3} exact, {:.3} from the sample; {without:.3} without storage ({:.1}% flatter)",
        stat_tb_mean_curve(&ens, cut),
        100.0 * (1.0 - exact_tb / without)
    );

    let bands = quantile_bands(&ens, Var::Price(0), &[0.5, 0.9])?;
    let mid = bands[0].lower.len() / 2;
    println!("price at noon: 50% band [{:.2}, {:.2}], 90% band [{:.2}, {:.2}]", bands[0].lower[mid], bands[0].upper[mid], bands[1].lower[mid], bands[1].upper[mid]);

    let out = PathBuf::from("out/examples");
    std::fs::create_dir_all(&out)?;
    write_paths_csv(&ens.kept, &out.join("paths.csv"))?;
    write_summary_csv(&ens, &out.join("summary.csv"))?;
    println!("wrote {}", out.display());
    Ok(())
}

//! Command-line driver. Every run writes `manifest.json` next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::asymptotics::{bar_s_limit_check, expansion_coeffs, l2_test_market, richardson_error, zero_certificates};
use crate::equilibrium::{solve_policy_with, FeedbackPolicy, PolicySource};
use crate::error::{Error, Result};
use crate::model::{AgentParams, MarketModel};
use crate::moments::{analytic_moments, rho_sensitivity_report, write_moments_csv};
use crate::riccati_general::{solve_general, wellposedness_bound_general, BlockLayout, NormKind, SolveOptions, WellPosedness};
use crate::riccati_homogeneous::{solve_homogeneous, wellposedness_bound_homogeneous, COEFF_NAMES};
use crate::scenarios;
use crate::simulate::{
    self, no_storage_tb, simulate_paths, stat_tb, stat_tb_mean_curve, stat_tc, stat_ts, write_paths_csv, write_summary_csv, Estimate,
    SimConfig, Var,
};
use crate::sizing::{major_minor, unit_baseline, write_report_csv, MajorMinor, SizingReport};

#[derive(Debug, Parser)]
#[command(name = "bess-game", version, about = "Equilibrium storage dispatch: solve, simulate, sweep")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct Common {
    /// Market JSON; the 8-operator reference market when omitted (its arbitrageur units for `sizing`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1000)]
    pub paths: usize,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Riccati integration steps over the horizon.
    #[arg(long, global = true)]
    pub grid_steps: Option<usize>,
    /// Euler–Maruyama steps over the horizon.
    #[arg(long, global = true)]
    pub sim_steps: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Use the full coupled system even for identical operators.
    #[arg(long, global = true)]
    pub force_general: bool,
    /// Fail (exit 4) when the horizon exceeds the sufficient well-posedness bound.
    #[arg(long, global = true)]
    pub strict_wellposed: bool,
    #[arg(long, global = true, env = simulate::WORKERS_ENV)]
    pub workers: Option<usize>,
    /// Override the supply volatility.
    #[arg(long, global = true)]
    pub sigma0: Option<f64>,
    /// Override every operator's SOC volatility.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Subcommand, Clone, Serialize)]
pub enum Command {
    /// Solve the Riccati system and dump the coefficients.
    Solve {
        /// Write every k-th node.
        #[arg(long, default_value_t = 100)]
        dump_every: usize,
    },
    /// Monte Carlo ensemble with summaries and the daily statistics.
    Simulate {
        #[arg(long, default_value_t = 10)]
        keep_paths: usize,
        #[arg(long)]
        antithetic: bool,
        #[arg(long, default_value_t = 21.0)]
        cutoff: f64,
        /// Node stride of stored samples for the quantile columns.
        #[arg(long, default_value_t = 10)]
        band_stride: usize,
    },
    /// Cartesian parameter sweep, e.g. `--param c2=0.01,0.1,1 --param n=4,8`.
    Sweep {
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<SweepParam>,
        #[arg(long, default_value_t = 21.0)]
        cutoff: f64,
    },
    /// Closed-form means and variances (identical operators only).
    Moments {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.3, 0.6, 0.9])]
        rho: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
    /// Large-N expansion coefficients and convergence checks.
    Asymptotics {
        #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 16, 32, 64])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 400)]
        richardson_n: usize,
        #[arg(long, default_value_t = 100)]
        stride: usize,
    },
    /// Major/Minor block markets.
    Sizing {
        #[arg(long, default_value_t = 32)]
        units: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8, 16, 24, 31, 32])]
        major: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize])]
        minor: Vec<usize>,
    },
    /// Write the reference and randomised market files.
    Scenarios {
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Number of random heterogeneous and random-supply markets.
        #[arg(long, default_value_t = 0)]
        samples: usize,
    },
}

/// One swept parameter with its values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepParam {
    pub name: String,
    pub values: Vec<f64>,
}

const SWEEPABLE: [&str; 11] = ["c1", "c2", "c3", "c4", "rho", "sigma", "sigma0", "n", "n_hybrid", "M", "m"];

fn parse_param(s: &str) -> std::result::Result<SweepParam, String> {
    let (name, vals) = s.split_once('=').ok_or_else(|| format!("expected name=v1,v2,..., got '{s}'"))?;
    let name = name.trim();
    if !SWEEPABLE.contains(&name) && name != "seed" {
        return Err(format!("unknown sweep parameter '{name}' (known: {}, seed)", SWEEPABLE.join(", ")));
    }
    let values = vals
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{name}: bad value '{v}': {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(SweepParam { name: name.to_string(), values })
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a Command,
    common: &'a Common,
    config_sha256: String,
    seed: u64,
    horizon: f64,
    riccati_steps: usize,
    sim_steps: usize,
    n_agents: usize,
    solver: &'a str,
    versions: Versions,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Versions {
    bess_game: &'static str,
    os: &'static str,
    arch: &'static str,
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Market used when `--config` is omitted: the 8-operator reference market,
/// or for `sizing` its uncorrelated arbitrageur units.
pub fn default_model(cmd: &Command) -> MarketModel {
    match cmd {
        Command::Sizing { units, .. } => {
            let mut m = scenarios::arbitrageur_market(*units);
            m.agents.iter_mut().for_each(|a| a.rho = 0.0);
            m
        }
        _ => scenarios::baseline_market(8),
    }
}

/// Market from `--config` (or [`default_model`]) with overrides applied and validated.
pub fn load_model(common: &Common, cmd: &Command) -> Result<MarketModel> {
    let mut m = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            MarketModel::from_json(&text)?
        }
        None => default_model(cmd),
    };
    if let Some(k) = common.grid_steps {
        m.grid.riccati_steps = k;
    }
    if let Some(k) = common.sim_steps {
        m.grid.sim_steps = k;
    }
    if let Some(s) = common.sigma0 {
        m.sigma0 = s;
    }
    if let Some(s) = common.sigma {
        m.agents.iter_mut().for_each(|a| a.sigma = s);
    }
    Ok(m.validate()?.into_inner())
}

/// SHA-256 of the canonical JSON of the effective model.
pub fn config_hash(model: &MarketModel) -> String {
    hex::encode(Sha256::digest(model.to_json().as_bytes()))
}

fn wellposedness(model: &MarketModel, force_general: bool) -> Result<WellPosedness> {
    if model.is_homogeneous() && !force_general {
        wellposedness_bound_homogeneous(model)
    } else {
        wellposedness_bound_general(model, NormKind::Two)
    }
}

fn check_wellposed(model: &MarketModel, common: &Common) -> Result<WellPosedness> {
    let wp = wellposedness(model, common.force_general)?;
    if model.horizon > wp.t_max {
        if common.strict_wellposed {
            return Err(Error::IllPosed { horizon: model.horizon, t_max: wp.t_max });
        }
        eprintln!(
            "note: T = {} exceeds the sufficient well-posedness bound {:.4}; the solver checks for blow-up directly",
            model.horizon, wp.t_max
        );
    }
    Ok(wp)
}

fn execute(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    let model = load_model(common, &cli.command)?;
    fs::create_dir_all(&common.out_dir)?;
    let pool = simulate::worker_pool(common.workers)?;
    let (solver, outputs) = pool.install(|| dispatch(&cli.command, common, &model))?;
    let manifest = Manifest {
        command: &cli.command,
        common,
        config_sha256: config_hash(&model),
        seed: common.seed,
        horizon: model.horizon,
        riccati_steps: model.grid.riccati_steps,
        sim_steps: model.grid.sim_steps,
        n_agents: model.n_agents(),
        solver,
        versions: Versions { bess_game: env!("CARGO_PKG_VERSION"), os: std::env::consts::OS, arch: std::env::consts::ARCH },
        outputs,
    };
    fs::write(common.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn out(common: &Common, name: &str, list: &mut Vec<String>) -> PathBuf {
    list.push(name.to_string());
    common.out_dir.join(name)
}

fn solver_name(pol: &FeedbackPolicy) -> &'static str {
    match pol.source {
        PolicySource::General(_) => "general",
        PolicySource::Homogeneous(_) => "homogeneous",
        PolicySource::Expansion { .. } => "expansion",
    }
}

fn dispatch(cmd: &Command, common: &Common, model: &MarketModel) -> Result<(&'static str, Vec<String>)> {
    let mut files = Vec::new();
    let solver = match cmd {
        Command::Solve { dump_every } => cmd_solve(common, model, *dump_every, &mut files)?,
        Command::Simulate { keep_paths, antithetic, cutoff, band_stride } => {
            cmd_simulate(common, model, *keep_paths, *antithetic, *cutoff, *band_stride, &mut files)?
        }
        Command::Sweep { params, cutoff } => cmd_sweep(common, model, params, *cutoff, &mut files)?,
        Command::Moments { rho, stride } => cmd_moments(common, model, rho, *stride, &mut files)?,
        Command::Asymptotics { sizes, richardson_n, stride } => cmd_asymptotics(common, model, sizes, *richardson_n, *stride, &mut files)?,
        Command::Sizing { units, major, minor } => cmd_sizing(common, model, *units, major, minor, &mut files)?,
        Command::Scenarios { n, samples } => cmd_scenarios(common, *n, *samples, &mut files)?,
    };
    Ok((solver, files))
}

fn cmd_solve(common: &Common, model: &MarketModel, every: usize, files: &mut Vec<String>) -> Result<&'static str> {
    let wp = check_wellposed(model, common)?;
    println!("well-posedness bound t_max = {:.6} (beta = {:.6}){}", wp.t_max, wp.beta, wp.note.map(|n| format!(", {n}")).unwrap_or_default());
    let grid = model.riccati_grid();
    let every = every.max(1);
    let path = out(common, "coefficients.csv", files);
    let mut w = csv::Writer::from_path(&path)?;
    if model.is_homogeneous() && !common.force_general {
        let sol = solve_homogeneous(model, grid)?;
        let mut head = vec!["t".to_string()];
        head.extend(COEFF_NAMES.iter().map(|s| s.to_string()));
        w.write_record(&head)?;
        for k in (0..grid.n_nodes()).step_by(every) {
            let mut row = vec![grid.node(k).to_string()];
            row.extend(sol.coeffs[k].iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        println!("homogeneous system: 11 coefficients on {} nodes -> {}", grid.n_nodes().div_ceil(every), path.display());
        return Ok("homogeneous");
    }
    let sol = solve_general(model, grid, SolveOptions { store_every: Some(every), keep_blocks: Some(true), p_only: false })?;
    let lay = BlockLayout { n: model.n_agents() };
    let mut head = vec!["t".to_string()];
    for i in 1..=lay.n {
        for r in 1..=lay.n {
            for c in 1..=lay.n {
                head.push(format!("a{i}_P{r}_{c}"));
            }
        }
        head.extend((1..=lay.n).map(|j| format!("a{i}_p{j}")));
        head.extend((1..=lay.n).map(|j| format!("a{i}_r{j}")));
        head.extend([format!("a{i}_p0"), format!("a{i}_r0"), format!("a{i}_u")]);
    }
    w.write_record(&head)?;
    for k in 0..sol.n_stored() {
        let mut row = vec![sol.stored_time(k).to_string()];
        row.extend(sol.state_at_node(k)?.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    println!("general system: {} coupled ODEs on {} stored nodes -> {}", lay.system_dim(), sol.n_stored(), path.display());
    Ok("general")
}

fn solve(model: &MarketModel, common: &Common) -> Result<FeedbackPolicy> {
    check_wellposed(model, common)?;
    solve_policy_with(model, common.force_general, SolveOptions::default())
}

fn print_estimate(name: &str, e: Estimate) {
    println!("{name:<4} {:>12.5}  (s.e. {:.5})", e.mean, e.stderr);
}

fn cmd_simulate(
    common: &Common,
    model: &MarketModel,
    keep: usize,
    antithetic: bool,
    cutoff: f64,
    stride: usize,
    files: &mut Vec<String>,
) -> Result<&'static str> {
    if cutoff > model.horizon {
        return Err(Error::Config(format!("cut-off {cutoff} beyond horizon {}", model.horizon)));
    }
    let pol = solve(model, common)?;
    let mut cfg = SimConfig::new(model, common.paths, common.seed);
    cfg.keep_paths = keep.min(common.paths);
    cfg.antithetic = antithetic;
    cfg.t_cutoff = cutoff;
    cfg.sample_stride = Some(stride.max(1));
    let ens = simulate_paths(model, &pol, &cfg)?;
    write_summary_csv(&ens, &out(common, "summary.csv", files))?;
    if !ens.kept.is_empty() {
        write_paths_csv(&ens.kept, &out(common, "paths.csv", files))?;
    }
    println!("{} paths, {} operators, cut-off {cutoff} h", common.paths, model.n_agents());
    print_estimate("TC", stat_tc(&ens, cutoff)?);
    print_estimate("TS", stat_ts(&ens, cutoff)?);
    print_estimate("TB", stat_tb(&ens, cutoff)?);
    let tb_mean = stat_tb_mean_curve(&ens, cutoff);
    let tb0 = no_storage_tb(model, ens.grid(), cutoff);
    println!("range of the expected price {tb_mean:.4}, without storage {tb0:.4} (reduction {:.2}%)", 100.0 * (1.0 - tb_mean / tb0));
    Ok(solver_name(&pol))
}

/// SplitMix64 step used to derive per-cell seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn cartesian(params: &[SweepParam]) -> Vec<Vec<f64>> {
    if params.is_empty() || params.iter().any(|p| p.values.is_empty()) {
        return Vec::new();
    }
    params.iter().fold(vec![Vec::new()], |acc, p| {
        acc.iter().flat_map(|prefix| p.values.iter().map(move |v| [prefix.as_slice(), &[*v]].concat())).collect()
    })
}

fn count(name: &str, v: f64) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Config(format!("{name} must be a non-negative integer, got {v}")));
    }
    Ok(v as usize)
}

/// Apply one sweep cell to the base market.
pub fn apply_cell(base: &MarketModel, names: &[&str], values: &[f64]) -> Result<MarketModel> {
    let mut m = base.clone();
    let get = |k: &str| names.iter().position(|n| *n == k).map(|i| values[i]);
    let n = match get("n") {
        Some(v) => count("n", v)?,
        None => m.n_agents(),
    };
    if let Some(h) = get("n_hybrid") {
        let h = count("n_hybrid", h)?;
        if h > n {
            return Err(Error::Config(format!("n_hybrid = {h} exceeds n = {n}")));
        }
        m = scenarios::two_class_market(h, n - h, &m);
    } else if n != m.n_agents() {
        if !m.is_homogeneous() {
            return Err(Error::Config("sweeping n needs identical operators".into()));
        }
        m.agents = vec![m.agents[0].clone(); n];
        m.weights = vec![vec![1.0; n]; n];
    }
    for (name, v) in names.iter().zip(values) {
        let set: Option<fn(&mut AgentParams, f64)> = match *name {
            "c1" => Some(|a, v| a.c1 = v),
            "c2" => Some(|a, v| a.c2 = v),
            "c3" => Some(|a, v| a.c3 = v),
            "c4" => Some(|a, v| a.c4 = v),
            "rho" => Some(|a, v| a.rho = v),
            "sigma" => Some(|a, v| a.sigma = v),
            _ => None,
        };
        if let Some(f) = set {
            m.agents.iter_mut().for_each(|a| f(a, *v));
        }
        if *name == "sigma0" {
            m.sigma0 = *v;
        }
    }
    Ok(m.validate()?.into_inner())
}

type CellRows = Vec<(String, f64, f64)>;

fn market_cell(m: &MarketModel, common: &Common, seed: u64, cutoff: f64) -> Result<CellRows> {
    let pol = solve_policy_with(m, common.force_general, SolveOptions::default())?;
    let mut cfg = SimConfig::new(m, common.paths, seed);
    cfg.t_cutoff = cutoff;
    let ens = simulate_paths(m, &pol, &cfg)?;
    let g = ens.grid();
    let n = m.n_agents();
    let avg_price: Vec<f64> = (0..g.n_nodes())
        .map(|k| (0..n).map(|i| ens.mean_curve(Var::Price(i))[k]).sum::<f64>() / n as f64)
        .collect();
    let mean_price = crate::numerics::simpson(&avg_price, g.dt()) / m.horizon;
    let e = |x: Estimate| (x.mean, x.stderr);
    let mut rows = vec![
        ("TC".to_string(), e(stat_tc(&ens, cutoff)?)),
        ("TS".to_string(), e(stat_ts(&ens, cutoff)?)),
        ("TB".to_string(), e(stat_tb(&ens, cutoff)?)),
        ("TB_mean_curve".to_string(), (stat_tb_mean_curve(&ens, cutoff), f64::NAN)),
        ("mean_price".to_string(), (mean_price, f64::NAN)),
    ];
    rows.push(("TB_no_storage".to_string(), (no_storage_tb(m, g, cutoff), 0.0)));
    Ok(rows.into_iter().map(|(k, (v, s))| (k, v, s)).collect())
}

fn sizing_unit(model: &MarketModel) -> Result<AgentParams> {
    let u = model.agents[0].clone();
    if !model.is_homogeneous() {
        return Err(Error::Config("block markets are built from a market of identical unit operators".into()));
    }
    Ok(u)
}

fn sizing_rows(r: &SizingReport) -> CellRows {
    let mut rows = Vec::new();
    for row in &r.rows {
        rows.push((format!("{}_dispatch_ratio", row.label), row.dispatch_ratio, row.dispatch_stderr));
        rows.push((format!("{}_mean_path_ratio", row.label), row.mean_path_ratio, f64::NAN));
        rows.push((format!("{}_share", row.label), row.share, f64::NAN));
        rows.push((format!("{}_per_unit_net", row.label), row.per_unit_net, f64::NAN));
    }
    rows.push(("aggregate_ratio".into(), r.aggregate_ratio, f64::NAN));
    rows.push(("mean_path_aggregate".into(), r.mean_path_aggregate, f64::NAN));
    rows
}

fn cmd_sweep(common: &Common, model: &MarketModel, params: &[SweepParam], cutoff: f64, files: &mut Vec<String>) -> Result<&'static str> {
    let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
    let cells = cartesian(params);
    let sizing = names.contains(&"M") || names.contains(&"m");
    let baseline = if sizing && !cells.is_empty() {
        let unit = sizing_unit(model)?;
        Some(unit_baseline(&unit, model, model.n_agents(), common.paths, common.seed)?)
    } else {
        None
    };
    let results: Vec<Result<CellRows>> = cells
        .par_iter()
        .enumerate()
        .map(|(c, vals)| {
            let seed = derive_seed(common.seed, c as u64);
            if let Some(base) = &baseline {
                let get = |k: &str, d: usize| names.iter().position(|n| *n == k).map(|i| count(k, vals[i])).unwrap_or(Ok(d));
                let cfg = MajorMinor { n_units: model.n_agents(), major: get("M", 1)?, minor: get("m", 1)? };
                let rep = major_minor(&sizing_unit(model)?, model, cfg, base, common.paths, seed)?;
                return Ok(sizing_rows(&rep));
            }
            market_cell(&apply_cell(model, &names, vals)?, common, seed, cutoff)
        })
        .collect();
    let path = out(common, "sweep.csv", files);
    let mut w = csv::Writer::from_path(&path)?;
    let mut head = vec!["cell".to_string()];
    head.extend(names.iter().map(|s| s.to_string()));
    head.extend(["metric".into(), "value".into(), "stderr".into()]);
    w.write_record(&head)?;
    for (c, (vals, rows)) in cells.iter().zip(results).enumerate() {
        for (metric, v, se) in rows? {
            let mut rec = vec![c.to_string()];
            rec.extend(vals.iter().map(|x| x.to_string()));
            rec.extend([metric, v.to_string(), if se.is_nan() { String::new() } else { se.to_string() }]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    println!("{} cells -> {}", cells.len(), path.display());
    Ok(if sizing { "general" } else if model.is_homogeneous() && !common.force_general { "homogeneous" } else { "general" })
}

fn cmd_moments(common: &Common, model: &MarketModel, rho: &[f64], stride: usize, files: &mut Vec<String>) -> Result<&'static str> {
    check_wellposed(model, common)?;
    let grid = model.riccati_grid();
    let sol = solve_homogeneous(model, grid)?;
    let mc = analytic_moments(model, &sol)?;
    write_moments_csv(&mc, &out(common, "moments.csv", files), stride)?;
    let rows = rho_sensitivity_report(model, grid, rho, &[6.0, 12.0, 18.0])?;
    let mut w = csv::Writer::from_path(out(common, "rho_sensitivity.csv", files))?;
    w.write_record(["rho", "avg_std_alpha", "avg_std_price"])?;
    for r in &rows {
        w.write_record([r.rho.to_string(), r.avg_std_alpha.to_string(), r.avg_std_price.to_string()])?;
        println!("rho {:.2}: time-averaged Std(alpha) {:.5}, Std(P) {:.5}", r.rho, r.avg_std_alpha, r.avg_std_price);
    }
    w.flush()?;
    Ok("homogeneous")
}

fn cmd_asymptotics(
    common: &Common,
    model: &MarketModel,
    sizes: &[usize],
    richardson_n: usize,
    stride: usize,
    files: &mut Vec<String>,
) -> Result<&'static str> {
    if !model.is_homogeneous() {
        return Err(Error::NotHomogeneous);
    }
    let grid = model.riccati_grid();
    let co = expansion_coeffs(model, grid)?;
    let mut w = csv::Writer::from_path(out(common, "expansion.csv", files))?;
    w.write_record(["t", "coefficient", "value"])?;
    let named: [(&str, &Vec<f64>); 5] =
        [("p2_0", &co.p2_0), ("p4_0", &co.p4_0), ("r2_0", &co.r2_0), ("p4_1", &co.p4_1), ("p5_1", &co.p5_1)];
    for (name, v) in named {
        for k in (0..grid.n_nodes()).step_by(stride.max(1)) {
            w.write_record([grid.node(k).to_string(), name.to_string(), v[k].to_string()])?;
        }
    }
    w.flush()?;
    println!("identity defect p4_0 + p5_1 - (c3 (T - t) + c4): {:.3e}", co.identity_defect());
    let mut big = model.clone();
    big.agents = vec![model.agents[0].clone(); richardson_n];
    big.weights = vec![vec![1.0; richardson_n]; richardson_n];
    println!("Richardson relative error at N = {richardson_n}: {:.4}", richardson_error(&big, grid)?);
    for z in zero_certificates(model, grid, &[50, 100, 200, 400])? {
        println!("{}: fitted leading order {:.3e} (scale {:.3e})", z.name, z.intercept, z.scale);
    }
    let build = |n: usize| {
        let mut m = l2_test_market(n);
        m.grid = model.grid;
        m
    };
    let rep = bar_s_limit_check(&build, sizes, common.paths, common.seed)?;
    let mut w = csv::Writer::from_path(out(common, "convergence.csv", files))?;
    w.write_record(["N", "l2_gap", "stderr"])?;
    for p in &rep.points {
        w.write_record([p.n.to_string(), p.l2_gap.to_string(), p.stderr.to_string()])?;
    }
    w.flush()?;
    println!("log-log slope of the L2 gap: {:.3}", rep.slope);
    Ok("homogeneous")
}

fn cmd_sizing(
    common: &Common,
    model: &MarketModel,
    units: usize,
    majors: &[usize],
    minors: &[usize],
    files: &mut Vec<String>,
) -> Result<&'static str> {
    let unit = sizing_unit(model)?;
    let base = unit_baseline(&unit, model, units, common.paths, common.seed)?;
    println!("unit baseline E[max |alpha|] = {:.5} (s.e. {:.5})", base.max_dispatch, base.max_dispatch_stderr);
    let mut reports = Vec::new();
    for &mj in majors {
        for &mn in minors {
            let cfg = MajorMinor { n_units: units, major: mj, minor: mn };
            let rep = major_minor(&unit, model, cfg, &base, common.paths, common.seed)?;
            for r in &rep.rows {
                println!(
                    "M={mj:>3} m={mn:>3} {:<5} ratio {:>7.3} mean-path {:>7.3} share {:>6.3} per-unit net {:>9.3}",
                    r.label, r.dispatch_ratio, r.mean_path_ratio, r.share, r.per_unit_net
                );
            }
            reports.push(rep);
        }
    }
    write_report_csv(&reports, &out(common, "sizing.csv", files))?;
    Ok("general")
}

fn cmd_scenarios(common: &Common, n: usize, samples: usize, files: &mut Vec<String>) -> Result<&'static str> {
    let write = |name: String, m: &MarketModel, files: &mut Vec<String>| -> Result<()> {
        fs::write(out(common, &name, files), m.to_json())?;
        Ok(())
    };
    write(format!("baseline_{n}.json"), &scenarios::baseline_market(n), files)?;
    write(format!("arbitrageur_{n}.json"), &scenarios::arbitrageur_market(n), files)?;
    let base = scenarios::baseline_market(1);
    write(format!("two_class_4_{}.json", n.saturating_sub(4)), &scenarios::two_class_market(4.min(n), n.saturating_sub(4), &base), files)?;
    for s in 0..samples as u64 {
        let seed = derive_seed(common.seed, s);
        write(format!("heterogeneous_{s}.json"), &scenarios::sample_heterogeneous_market(seed, n), files)?;
        write(format!("theta_{s}.json"), &scenarios::sample_theta_market(seed, n), files)?;
    }
    println!("{} market files in {}", files.len(), common.out_dir.display());
    Ok("none")
}

/// Read a market file the way `--config` does.
pub fn read_market(path: &Path) -> Result<MarketModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(MarketModel::from_json(&text)?.validate()?.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_parse() {
        let p = parse_param("c2=0.01, 0.1,1").unwrap();
        assert_eq!(p.values, vec![0.01, 0.1, 1.0]);
        assert!(parse_param("c9=1").is_err());
        assert!(parse_param("c2").is_err());
        assert!(parse_param("c2=x").is_err());
    }

    #[test]
    fn cartesian_order() {
        let ps = vec![
            SweepParam { name: "a".into(), values: vec![1.0, 2.0] },
            SweepParam { name: "b".into(), values: vec![3.0, 4.0, 5.0] },
        ];
        let c = cartesian(&ps);
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], vec![1.0, 3.0]);
        assert_eq!(c[5], vec![2.0, 5.0]);
        assert!(cartesian(&[]).is_empty());
    }

    #[test]
    fn cells_modify_market() {
        let base = scenarios::baseline_market(8);
        let m = apply_cell(&base, &["n", "n_hybrid", "c2"], &[10.0, 4.0, 0.5]).unwrap();
        assert_eq!(m.n_agents(), 10);
        assert_eq!(m.agents.iter().filter(|a| a.is_arbitrageur()).count(), 6);
        assert!(m.agents.iter().all(|a| a.c2 == 0.5));
        assert!(apply_cell(&base, &["n"], &[2.5]).is_err());
        assert!(apply_cell(&base, &["c1"], &[-1.0]).is_err());
    }

    #[test]
    fn seeds_differ_per_cell() {
        let s: Vec<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 100);
        assert_eq!(derive_seed(7, 3), s[3]);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = scenarios::baseline_market(8);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.agents[0].c2 = 0.2;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}

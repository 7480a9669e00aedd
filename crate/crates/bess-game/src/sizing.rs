//! Markets of operators that each control a block of identical storage units.
//!
//! A block of `k` units is one agent with costs `c/k`, target `k·ζ`,
//! volatility `√k·σ` and initial SOC `k·S₀`; price impact is unchanged, so a
//! larger block internalises more of its own impact.

use std::path::Path;

use serde::Serialize;

use crate::equilibrium::solve_policy;
use crate::error::{Error, Result, Violation};
use crate::model::{AgentParams, MarketModel};
use crate::simulate::{mean_path_max_dispatch, simulate_paths, Estimate, SimConfig};

/// `count` operators of `size` units each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockSpec {
    pub size: usize,
    pub count: usize,
}

/// Units `(M, m)` of the Major and of each Minor operator, one Major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MajorMinor {
    pub n_units: usize,
    pub major: usize,
    pub minor: usize,
}

impl MajorMinor {
    pub fn blocks(self) -> Result<Vec<BlockSpec>> {
        let rest = self.n_units.checked_sub(self.major).ok_or_else(|| bad_blocks("Major larger than the market"))?;
        if self.minor == 0 || rest % self.minor != 0 {
            return Err(bad_blocks(&format!("{rest} remaining units do not split into Minors of size {}", self.minor)));
        }
        let mut v = vec![BlockSpec { size: self.major, count: 1 }];
        if rest > 0 {
            v.push(BlockSpec { size: self.minor, count: rest / self.minor });
        }
        Ok(v)
    }
}

fn bad_blocks(msg: &str) -> Error {
    Error::Invalid(vec![Violation { agent: None, field: "blocks".into(), message: msg.into() }])
}

/// Scale a unit operator to a block of `size` units.
pub fn block_agent(unit: &AgentParams, size: usize) -> AgentParams {
    let k = size as f64;
    AgentParams {
        c2: unit.c2 / k,
        c3: unit.c3 / k,
        c4: unit.c4 / k,
        zeta: unit.zeta.scaled(k),
        sigma: unit.sigma * k.sqrt(),
        s0: unit.s0 * k,
        ..unit.clone()
    }
}

/// One agent per operator in block order; market fields copied from `market`.
pub fn build_block_market(unit: &AgentParams, blocks: &[BlockSpec], market: &MarketModel, n_units: usize) -> Result<MarketModel> {
    let mut bad = Vec::new();
    if !unit.is_arbitrageur() {
        bad.push(Violation { agent: None, field: "a, b".into(), message: "block markets use arbitrageur units".into() });
    }
    if unit.rho != 0.0 {
        bad.push(Violation { agent: None, field: "rho".into(), message: format!("block markets need rho = 0, got {}", unit.rho) });
    }
    let total: usize = blocks.iter().map(|b| b.size * b.count).sum();
    if total != n_units || blocks.iter().any(|b| b.size == 0) {
        bad.push(Violation { agent: None, field: "blocks".into(), message: format!("blocks cover {total} units, market has {n_units}") });
    }
    if !bad.is_empty() {
        return Err(Error::Invalid(bad));
    }
    let agents: Vec<AgentParams> = blocks.iter().flat_map(|b| std::iter::repeat_n(block_agent(unit, b.size), b.count)).collect();
    let n = agents.len();
    Ok(MarketModel { agents, weights: vec![vec![1.0; n]; n], ..market.clone() })
}

/// Per-operator-type results of one block market.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorRow {
    pub label: &'static str,
    pub size: usize,
    pub count: usize,
    /// `E[max_{t≤T°} |α|]` of one operator over the baseline.
    pub dispatch_ratio: f64,
    pub dispatch_stderr: f64,
    /// `max_{t≤T°} |E[α]|` over the same quantity for the unit baseline.
    pub mean_path_ratio: f64,
    /// This type's share of summed operator dispatch.
    pub share: f64,
    pub per_unit_revenue: f64,
    pub per_unit_cost: f64,
    pub per_unit_net: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizingReport {
    pub config: MajorMinor,
    pub rows: Vec<OperatorRow>,
    /// Summed operator dispatch over `n_units × baseline`.
    pub aggregate_ratio: f64,
    /// `E[max |Σα|]` over the same quantity in the all-units market.
    pub aggregate_max_ratio: Option<f64>,
    /// Mean-path counterparts of `share` (per row) and `aggregate_ratio`.
    pub mean_path_shares: Vec<f64>,
    pub mean_path_aggregate: f64,
}

impl SizingReport {
    pub fn row(&self, label: &str) -> Option<&OperatorRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Block-market simulation outputs needed by the report.
pub struct BlockRun {
    pub blocks: Vec<BlockSpec>,
    pub max_alpha: Vec<Estimate>,
    pub mean_path_max: Vec<f64>,
    pub revenue: Vec<f64>,
    pub cost: Vec<f64>,
    pub agg_max: Estimate,
}

/// Solve and simulate a block market; per-operator estimates are pooled
/// across the operators of each block type.
pub fn run_blocks(market: &MarketModel, blocks: &[BlockSpec], n_paths: usize, seed: u64) -> Result<BlockRun> {
    let pol = solve_policy(market, false)?;
    let ens = simulate_paths(market, &pol, &SimConfig::new(market, n_paths, seed))?;
    let mean_path = mean_path_max_dispatch(&ens, ens.config.t_cutoff);
    let mut first = 0;
    let mut run = BlockRun {
        blocks: blocks.to_vec(),
        max_alpha: Vec::new(),
        mean_path_max: Vec::new(),
        revenue: Vec::new(),
        cost: Vec::new(),
        agg_max: Estimate::from_samples(&ens.metrics.iter().map(|m| m.agg_max_abs).collect::<Vec<_>>()),
    };
    for b in blocks {
        let ids: Vec<usize> = (first..first + b.count).collect();
        first += b.count;
        run.max_alpha.push(ens.agent_average(&ids, |m, i| m.max_abs_alpha[i]));
        run.mean_path_max.push(ids.iter().map(|&i| mean_path[i]).sum::<f64>() / b.count as f64);
        run.revenue.push(ens.agent_average(&ids, |m, i| m.pnl[i].revenue).mean);
        run.cost.push(ens.agent_average(&ids, |m, i| m.pnl[i].total_cost()).mean);
    }
    Ok(run)
}

/// Reference dispatch of a unit operator in the all-units market.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitBaseline {
    /// `E[max_{t≤T°} |α|]`.
    pub max_dispatch: f64,
    pub max_dispatch_stderr: f64,
    /// `max_{t≤T°} |E[α]|`.
    pub mean_path: f64,
    /// `E[max |Σα|]`.
    pub aggregate: f64,
}

/// Normalise a block run against the unit baseline.
pub fn dispatch_metrics(run: &BlockRun, config: MajorMinor, base: &UnitBaseline) -> SizingReport {
    let baseline_ref = base.max_dispatch;
    let total: f64 = run.blocks.iter().zip(&run.max_alpha).map(|(b, e)| b.count as f64 * e.mean).sum();
    let total_mp: f64 = run.blocks.iter().zip(&run.mean_path_max).map(|(b, e)| b.count as f64 * e).sum();
    let rows = run
        .blocks
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let k = b.size as f64;
            OperatorRow {
                label: if j == 0 { "major" } else { "minor" },
                size: b.size,
                count: b.count,
                dispatch_ratio: run.max_alpha[j].mean / baseline_ref,
                dispatch_stderr: run.max_alpha[j].stderr / baseline_ref,
                mean_path_ratio: run.mean_path_max[j] / base.mean_path,
                share: b.count as f64 * run.max_alpha[j].mean / total,
                per_unit_revenue: run.revenue[j] / k,
                per_unit_cost: run.cost[j] / k,
                per_unit_net: (run.revenue[j] - run.cost[j]) / k,
            }
        })
        .collect();
    SizingReport {
        config,
        rows,
        aggregate_ratio: total / (config.n_units as f64 * baseline_ref),
        aggregate_max_ratio: Some(run.agg_max.mean / base.aggregate),
        mean_path_shares: run.blocks.iter().zip(&run.mean_path_max).map(|(b, e)| b.count as f64 * e / total_mp).collect(),
        mean_path_aggregate: total_mp / (config.n_units as f64 * base.mean_path),
    }
}

/// Unit operator's `E[max |α|]` and the aggregate `E[max |Σα|]` in the
/// market of `n_units` single-unit operators.
pub fn unit_baseline(unit: &AgentParams, market: &MarketModel, n_units: usize, n_paths: usize, seed: u64) -> Result<UnitBaseline> {
    let blocks = [BlockSpec { size: 1, count: n_units }];
    let m = build_block_market(unit, &blocks, market, n_units)?;
    let run = run_blocks(&m, &blocks, n_paths, seed)?;
    Ok(UnitBaseline {
        max_dispatch: run.max_alpha[0].mean,
        max_dispatch_stderr: run.max_alpha[0].stderr,
        mean_path: run.mean_path_max[0],
        aggregate: run.agg_max.mean,
    })
}

/// Build, solve, simulate and report one Major/Minor configuration.
pub fn major_minor(
    unit: &AgentParams,
    market: &MarketModel,
    config: MajorMinor,
    baseline: &UnitBaseline,
    n_paths: usize,
    seed: u64,
) -> Result<SizingReport> {
    let blocks = config.blocks()?;
    let m = build_block_market(unit, &blocks, market, config.n_units)?;
    let run = run_blocks(&m, &blocks, n_paths, seed)?;
    Ok(dispatch_metrics(&run, config, baseline))
}

/// `(M, m, operator_type, dispatch_ratio, per_unit_revenue, per_unit_cost, per_unit_net)`.
pub fn write_report_csv(reports: &[SizingReport], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    w.write_record([
        "M",
        "m",
        "operator_type",
        "dispatch_ratio",
        "per_unit_revenue",
        "per_unit_cost",
        "per_unit_net",
        "mean_path_ratio",
    ])?;
    for r in reports {
        for row in &r.rows {
            w.write_record([
                r.config.major.to_string(),
                r.config.minor.to_string(),
                row.label.to_string(),
                row.dispatch_ratio.to_string(),
                row.per_unit_revenue.to_string(),
                row.per_unit_cost.to_string(),
                row.per_unit_net.to_string(),
                row.mean_path_ratio.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

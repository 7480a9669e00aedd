//! Euler–Maruyama simulation of supply and SOC under a feedback policy,
//! Monte Carlo ensembles and the daily summary statistics.
//!
//! Path `p` draws from its own ChaCha stream `(seed, p)`, so ensembles are
//! identical whatever the number of worker threads. Antithetic pairs share
//! the stream of their first member.

use std::io::Write;
use std::path::Path as FsPath;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::equilibrium::{price_into, AffineGains, Policy};
use crate::error::{Error, Result};
use crate::model::{MarketModel, TimeGrid};

/// Worker-count environment variable.
pub const WORKERS_ENV: &str = "BESS_WORKERS";

/// Thread pool sized by `workers`, else `BESS_WORKERS`, else rayon's default.
pub fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = workers.or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok())).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Simulation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Cut-off hour for the daily statistics.
    pub t_cutoff: f64,
    /// Number of leading paths kept in full.
    pub keep_paths: usize,
    /// Store per-path node values every `k` nodes for quantile bands.
    pub sample_stride: Option<usize>,
    /// Times at which every path's values are recorded.
    pub probe_times: Vec<f64>,
}

impl SimConfig {
    pub fn new(model: &MarketModel, n_paths: usize, seed: u64) -> SimConfig {
        SimConfig {
            grid: model.sim_grid(),
            n_paths,
            seed,
            antithetic: false,
            t_cutoff: 21.0,
            keep_paths: 0,
            sample_stride: None,
            probe_times: Vec::new(),
        }
    }
}

/// Revenue and cost decomposition of one agent along one path.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PnL {
    /// `−∫ P α dt`.
    pub revenue: f64,
    pub dispatch_cost: f64,
    pub soc_cost: f64,
    pub terminal_cost: f64,
}

impl PnL {
    pub fn total_cost(&self) -> f64 {
        self.dispatch_cost + self.soc_cost + self.terminal_cost
    }

    pub fn net(&self) -> f64 {
        self.revenue - self.total_cost()
    }

    /// The agent's objective `J = −net`.
    pub fn objective(&self) -> f64 {
        -self.net()
    }
}

/// One simulated trajectory on the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub grid: TimeGrid,
    pub n_agents: usize,
    pub q: Vec<f64>,
    /// Node-major `S` (N per node).
    pub s: Vec<f64>,
    pub alpha: Vec<f64>,
    pub prices: Vec<f64>,
    /// SOC increments actually applied, node-major (N per step).
    pub s_increments: Vec<f64>,
}

impl Path {
    pub fn s_at(&self, k: usize) -> &[f64] {
        &self.s[k * self.n_agents..(k + 1) * self.n_agents]
    }
    pub fn alpha_at(&self, k: usize) -> &[f64] {
        &self.alpha[k * self.n_agents..(k + 1) * self.n_agents]
    }
    pub fn prices_at(&self, k: usize) -> &[f64] {
        &self.prices[k * self.n_agents..(k + 1) * self.n_agents]
    }
    /// Series of agent `i`'s SOC.
    pub fn agent_s(&self, i: usize) -> Vec<f64> {
        (0..self.grid.n_nodes()).map(|k| self.s_at(k)[i]).collect()
    }
    pub fn agent_alpha(&self, i: usize) -> Vec<f64> {
        (0..self.grid.n_nodes()).map(|k| self.alpha_at(k)[i]).collect()
    }
    pub fn agent_price(&self, i: usize) -> Vec<f64> {
        (0..self.grid.n_nodes()).map(|k| self.prices_at(k)[i]).collect()
    }
}

/// Number of nodes with `t_k ≤ cutoff`.
fn cutoff_nodes(grid: TimeGrid, cutoff: f64) -> usize {
    (0..grid.n_nodes()).take_while(|&k| grid.node(k) <= cutoff + 1e-9).count()
}

/// Trapezoid `∫_0^{cutoff} |x_t| dt` over grid nodes.
pub fn series_tc(x: &[f64], grid: TimeGrid, cutoff: f64) -> f64 {
    let m = cutoff_nodes(grid, cutoff);
    let h = grid.dt();
    (1..m).map(|k| 0.5 * h * (x[k - 1].abs() + x[k].abs())).sum()
}

/// `max − min` over nodes with `t ≤ cutoff`.
pub fn series_range(x: &[f64], grid: TimeGrid, cutoff: f64) -> f64 {
    let m = cutoff_nodes(grid, cutoff);
    let (lo, hi) = x[..m].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    hi - lo
}

/// `max |x|` over nodes with `t ≤ cutoff`.
pub fn series_max_abs(x: &[f64], grid: TimeGrid, cutoff: f64) -> f64 {
    let m = cutoff_nodes(grid, cutoff);
    x[..m].iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Agent `i`'s revenue and costs along `path` (trapezoid in time).
pub fn pnl(path: &Path, model: &MarketModel, i: usize) -> PnL {
    let ag = &model.agents[i];
    let g = path.grid;
    let h = g.dt();
    let mut out = PnL::default();
    let rev = |k: usize| -path.prices_at(k)[i] * path.alpha_at(k)[i];
    let disp = |k: usize| ag.c2 * path.alpha_at(k)[i].powi(2);
    let soc = |k: usize| ag.c3 * (path.s_at(k)[i] - ag.zeta.at(g.node(k))).powi(2);
    for k in 1..g.n_nodes() {
        out.revenue += 0.5 * h * (rev(k - 1) + rev(k));
        out.dispatch_cost += 0.5 * h * (disp(k - 1) + disp(k));
        out.soc_cost += 0.5 * h * (soc(k - 1) + soc(k));
    }
    out.terminal_cost = ag.c4 * (path.s_at(g.n_steps)[i] - ag.zeta.at(g.horizon)).powi(2);
    out
}

/// Time-sampled inputs shared by all paths.
struct Tables {
    gains: Vec<AffineGains>,
    theta: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    common: Vec<f64>,
    idio: Vec<f64>,
}

impl Tables {
    fn build(model: &MarketModel, policy: &dyn Policy, grid: TimeGrid) -> Result<Tables> {
        let nodes = grid.nodes();
        Ok(Tables {
            gains: nodes.iter().map(|&t| policy.gains(t)).collect::<Result<_>>()?,
            theta: nodes.iter().map(|&t| model.theta.at(t)).collect(),
            a: nodes.iter().map(|&t| model.agents.iter().map(|x| x.a.at(t)).collect()).collect(),
            b: nodes.iter().map(|&t| model.agents.iter().map(|x| x.b.at(t)).collect()).collect(),
            common: model.agents.iter().map(|x| x.rho * x.sigma).collect(),
            idio: model.agents.iter().map(|x| x.sigma * (1.0 - x.rho * x.rho).max(0.0).sqrt()).collect(),
        })
    }
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn run_path(model: &MarketModel, tab: &Tables, grid: TimeGrid, seed: u64, index: usize, antithetic: bool) -> Path {
    let n = model.n_agents();
    let nodes = grid.n_nodes();
    let (stream, sign) = if antithetic { ((index / 2) as u64, if index.is_multiple_of(2) { 1.0 } else { -1.0 }) } else { (index as u64, 1.0) };
    let mut rng = path_rng(seed, stream);
    let h = grid.dt();
    let sq = h.sqrt();
    let mut path = Path {
        grid,
        n_agents: n,
        q: vec![0.0; nodes],
        s: vec![0.0; nodes * n],
        alpha: vec![0.0; nodes * n],
        prices: vec![0.0; nodes * n],
        s_increments: vec![0.0; grid.n_steps * n],
    };
    path.q[0] = model.q0;
    for (i, ag) in model.agents.iter().enumerate() {
        path.s[i] = ag.s0;
    }
    let mut dw = vec![0.0; n + 1];
    for k in 0..nodes {
        let q = path.q[k];
        let (head, tail) = path.s.split_at_mut((k + 1) * n);
        let s = &head[k * n..];
        let alpha = &mut path.alpha[k * n..(k + 1) * n];
        tab.gains[k].apply_into(q, s, alpha);
        price_into(model, q, alpha, &mut path.prices[k * n..(k + 1) * n]);
        if k == grid.n_steps {
            break;
        }
        for x in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = sign * sq * z;
        }
        path.q[k + 1] = q + model.kappa * (tab.theta[k] - q) * h + model.sigma0 * dw[0];
        let next = &mut tail[..n];
        for i in 0..n {
            let inc = (tab.a[k][i] + tab.b[k][i] * q + alpha[i]) * h + tab.common[i] * dw[0] + tab.idio[i] * dw[i + 1];
            path.s_increments[k * n + i] = inc;
            next[i] = s[i] + inc;
        }
    }
    path
}

/// Simulate a single path with the ensemble's stream convention.
pub fn simulate_path(model: &MarketModel, policy: &dyn Policy, grid: TimeGrid, seed: u64, index: usize) -> Result<Path> {
    check_agents(model, policy)?;
    let tab = Tables::build(model, policy, grid)?;
    Ok(run_path(model, &tab, grid, seed, index, false))
}

/// Expected trajectory. The scheme is affine in the Gaussian increments, so
/// the path with all noise switched off is the exact mean of the ensemble.
pub fn mean_path(model: &MarketModel, policy: &dyn Policy, grid: TimeGrid) -> Result<Path> {
    let mut quiet = model.clone();
    quiet.sigma0 = 0.0;
    for a in quiet.agents.iter_mut() {
        a.sigma = 0.0;
    }
    simulate_path(&quiet, policy, grid, 0, 0)
}

fn check_agents(model: &MarketModel, policy: &dyn Policy) -> Result<()> {
    if model.n_agents() != policy.n_agents() {
        return Err(Error::AgentMismatch { model: model.n_agents(), policy: policy.n_agents() });
    }
    if policy.horizon() + 1e-12 < model.horizon {
        return Err(Error::Domain { t: model.horizon, horizon: policy.horizon() });
    }
    Ok(())
}

/// Per-path, per-agent statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PathMetrics {
    pub tc: Vec<f64>,
    pub ts: Vec<f64>,
    pub tb: Vec<f64>,
    pub max_abs_alpha: Vec<f64>,
    pub pnl: Vec<PnL>,
    pub terminal_s: Vec<f64>,
    /// `max |Σ α|` and `∫ |Σ α|` up to the cut-off.
    pub agg_max_abs: f64,
    pub agg_tc: f64,
}

fn path_metrics(path: &Path, model: &MarketModel, cutoff: f64) -> PathMetrics {
    let n = model.n_agents();
    let g = path.grid;
    let agg: Vec<f64> = (0..g.n_nodes()).map(|k| path.alpha_at(k).iter().sum()).collect();
    let mut m = PathMetrics {
        tc: Vec::with_capacity(n),
        ts: Vec::with_capacity(n),
        tb: Vec::with_capacity(n),
        max_abs_alpha: Vec::with_capacity(n),
        pnl: Vec::with_capacity(n),
        terminal_s: path.s_at(g.n_steps).to_vec(),
        agg_max_abs: series_max_abs(&agg, g, cutoff),
        agg_tc: series_tc(&agg, g, cutoff),
    };
    for i in 0..n {
        let a = path.agent_alpha(i);
        m.tc.push(series_tc(&a, g, cutoff));
        m.ts.push(series_range(&path.agent_s(i), g, cutoff));
        m.tb.push(series_range(&path.agent_price(i), g, cutoff));
        m.max_abs_alpha.push(series_max_abs(&a, g, cutoff));
        m.pnl.push(pnl(path, model, i));
    }
    m
}

/// Streaming node moments for `(Q, S_i, α_i, P_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMoments {
    pub count: usize,
    /// Variable-major: `[Q, S_1..S_N, α_1..α_N, P_1..P_N] × nodes`.
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl NodeMoments {
    fn zeros(len: usize) -> Self {
        NodeMoments { count: 0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let c = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / c;
            *s += d * (v - *m);
        }
    }

    /// Chan et al. pairwise merge.
    fn merge(&mut self, o: &NodeMoments) {
        if o.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = o.clone();
            return;
        }
        let (na, nb) = (self.count as f64, o.count as f64);
        let n = na + nb;
        for j in 0..self.mean.len() {
            let d = o.mean[j] - self.mean[j];
            self.mean[j] += d * nb / n;
            self.m2[j] += o.m2[j] + d * d * na * nb / n;
        }
        self.count += o.count;
    }

    pub fn variance(&self, j: usize) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2[j] / (self.count - 1) as f64
        }
    }
}

/// Variable selector in summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Q,
    S(usize),
    Alpha(usize),
    Price(usize),
}

impl Var {
    fn index(self, n: usize) -> usize {
        match self {
            Var::Q => 0,
            Var::S(i) => 1 + i,
            Var::Alpha(i) => 1 + n + i,
            Var::Price(i) => 1 + 2 * n + i,
        }
    }

    pub fn name(self) -> String {
        match self {
            Var::Q => "Q".into(),
            Var::S(i) => format!("S_{}", i + 1),
            Var::Alpha(i) => format!("alpha_{}", i + 1),
            Var::Price(i) => format!("P_{}", i + 1),
        }
    }

    pub fn all(n: usize) -> Vec<Var> {
        let mut v = vec![Var::Q];
        v.extend((0..n).map(Var::S));
        v.extend((0..n).map(Var::Alpha));
        v.extend((0..n).map(Var::Price));
        v
    }
}

/// Monte Carlo ensemble summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub config: SimConfig,
    pub n_agents: usize,
    pub moments: NodeMoments,
    pub metrics: Vec<PathMetrics>,
    pub kept: Vec<Path>,
    /// Per path, the sampled nodes of every variable (variable-major).
    pub samples: Option<Vec<Vec<f64>>>,
    /// Per path and probe: `[Q, S.., α.., P..]`.
    pub probes: Vec<Vec<Vec<f64>>>,
}

const CHUNK: usize = 32;

fn node_vector(path: &Path, n: usize, out: &mut [f64]) {
    let nodes = path.grid.n_nodes();
    out[..nodes].copy_from_slice(&path.q);
    for k in 0..nodes {
        for i in 0..n {
            out[(1 + i) * nodes + k] = path.s[k * n + i];
            out[(1 + n + i) * nodes + k] = path.alpha[k * n + i];
            out[(1 + 2 * n + i) * nodes + k] = path.prices[k * n + i];
        }
    }
}

struct ChunkResult {
    moments: NodeMoments,
    metrics: Vec<PathMetrics>,
    kept: Vec<Path>,
    samples: Vec<Vec<f64>>,
    probes: Vec<Vec<Vec<f64>>>,
}

/// Simulate `config.n_paths` paths of `model` under `policy`.
pub fn simulate_paths(model: &MarketModel, policy: &dyn Policy, config: &SimConfig) -> Result<Ensemble> {
    check_agents(model, policy)?;
    let grid = config.grid;
    let tab = Tables::build(model, policy, grid)?;
    let n = model.n_agents();
    let nodes = grid.n_nodes();
    let width = (1 + 3 * n) * nodes;
    let probe_nodes: Vec<usize> = config
        .probe_times
        .iter()
        .map(|&t| ((t / grid.dt()).round() as usize).min(grid.n_steps))
        .collect();
    let n_chunks = config.n_paths.div_ceil(CHUNK);
    let chunks: Vec<ChunkResult> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut res = ChunkResult {
                moments: NodeMoments::zeros(width),
                metrics: Vec::new(),
                kept: Vec::new(),
                samples: Vec::new(),
                probes: Vec::new(),
            };
            let mut buf = vec![0.0; width];
            for p in c * CHUNK..((c + 1) * CHUNK).min(config.n_paths) {
                let path = run_path(model, &tab, grid, config.seed, p, config.antithetic);
                node_vector(&path, n, &mut buf);
                res.moments.push(&buf);
                res.metrics.push(path_metrics(&path, model, config.t_cutoff));
                if let Some(stride) = config.sample_stride {
                    let picked: Vec<f64> =
                        (0..1 + 3 * n).flat_map(|v| (0..nodes).step_by(stride).map(move |k| (v, k))).map(|(v, k)| buf[v * nodes + k]).collect();
                    res.samples.push(picked);
                }
                if !probe_nodes.is_empty() {
                    res.probes.push(
                        probe_nodes.iter().map(|&k| (0..1 + 3 * n).map(|v| buf[v * nodes + k]).collect()).collect(),
                    );
                }
                if p < config.keep_paths {
                    res.kept.push(path);
                }
            }
            res
        })
        .collect();
    let mut ens = Ensemble {
        config: config.clone(),
        n_agents: n,
        moments: NodeMoments::zeros(width),
        metrics: Vec::with_capacity(config.n_paths),
        kept: Vec::new(),
        samples: config.sample_stride.map(|_| Vec::with_capacity(config.n_paths)),
        probes: Vec::new(),
    };
    for c in chunks {
        ens.moments.merge(&c.moments);
        ens.metrics.extend(c.metrics);
        ens.kept.extend(c.kept);
        if let Some(s) = ens.samples.as_mut() {
            s.extend(c.samples);
        }
        ens.probes.extend(c.probes);
    }
    Ok(ens)
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(x: &[f64]) -> Estimate {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = if x.len() > 1 { x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Estimate { mean, stderr: (var / n).sqrt() }
    }
}

impl Ensemble {
    pub fn grid(&self) -> TimeGrid {
        self.config.grid
    }

    pub fn mean_curve(&self, v: Var) -> Vec<f64> {
        let nodes = self.grid().n_nodes();
        let j = v.index(self.n_agents) * nodes;
        self.moments.mean[j..j + nodes].to_vec()
    }

    pub fn std_curve(&self, v: Var) -> Vec<f64> {
        let nodes = self.grid().n_nodes();
        let j = v.index(self.n_agents) * nodes;
        (j..j + nodes).map(|x| self.moments.variance(x).sqrt()).collect()
    }

    fn check_cutoff(&self, t_cutoff: f64) -> Result<()> {
        if (t_cutoff - self.config.t_cutoff).abs() > 1e-12 {
            return Err(Error::NotApplicable(format!(
                "ensemble statistics were computed with cut-off {}, not {t_cutoff}",
                self.config.t_cutoff
            )));
        }
        Ok(())
    }

    /// Per-path metric averaged over `agents`, then over paths.
    pub fn agent_average(&self, agents: &[usize], f: impl Fn(&PathMetrics, usize) -> f64) -> Estimate {
        let per_path: Vec<f64> =
            self.metrics.iter().map(|m| agents.iter().map(|&i| f(m, i)).sum::<f64>() / agents.len() as f64).collect();
        Estimate::from_samples(&per_path)
    }

    fn all_agents(&self) -> Vec<usize> {
        (0..self.n_agents).collect()
    }
}

/// `E[∫_0^{T°} |α_t| dt]`, averaged over agents.
pub fn stat_tc(ens: &Ensemble, t_cutoff: f64) -> Result<Estimate> {
    ens.check_cutoff(t_cutoff)?;
    Ok(ens.agent_average(&ens.all_agents(), |m, i| m.tc[i]))
}

/// `E[max S − min S]` up to the cut-off, averaged over agents.
pub fn stat_ts(ens: &Ensemble, t_cutoff: f64) -> Result<Estimate> {
    ens.check_cutoff(t_cutoff)?;
    Ok(ens.agent_average(&ens.all_agents(), |m, i| m.ts[i]))
}

/// `E[max P − min P]` up to the cut-off, averaged over agents.
pub fn stat_tb(ens: &Ensemble, t_cutoff: f64) -> Result<Estimate> {
    ens.check_cutoff(t_cutoff)?;
    Ok(ens.agent_average(&ens.all_agents(), |m, i| m.tb[i]))
}

/// Range up to the cut-off of the expected price curve, averaged over agents.
/// This is the reading under which the reported daily ranges are quoted.
pub fn stat_tb_mean_curve(ens: &Ensemble, t_cutoff: f64) -> f64 {
    let g = ens.grid();
    (0..ens.n_agents).map(|i| series_range(&ens.mean_curve(Var::Price(i)), g, t_cutoff)).sum::<f64>() / ens.n_agents as f64
}

/// Largest `|E[α_i]|` up to the cut-off, per agent.
pub fn mean_path_max_dispatch(ens: &Ensemble, t_cutoff: f64) -> Vec<f64> {
    let g = ens.grid();
    (0..ens.n_agents).map(|i| series_max_abs(&ens.mean_curve(Var::Alpha(i)), g, t_cutoff)).collect()
}

/// Daily range of the price without storage, `P̄ − c1 θ(t)`, averaged over agents.
pub fn no_storage_tb(model: &MarketModel, grid: TimeGrid, t_cutoff: f64) -> f64 {
    let th: Vec<f64> = grid.nodes().iter().map(|&t| model.theta.at(t)).collect();
    let per: f64 = model
        .agents
        .iter()
        .map(|a| series_range(&th.iter().map(|q| a.p_bar - a.c1 * q).collect::<Vec<_>>(), grid, t_cutoff))
        .sum();
    per / model.n_agents() as f64
}

/// Symmetric quantile band at one coverage level.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Empirical quantile by linear interpolation of order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let x = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let k = x.floor() as usize;
    if k + 1 >= n {
        return sorted[n - 1];
    }
    sorted[k] + (x - k as f64) * (sorted[k + 1] - sorted[k])
}

/// Per-node bands `[q((1−ℓ)/2), q((1+ℓ)/2)]` from raw samples (`samples[path][node]`).
pub fn bands_from_samples(samples: &[Vec<f64>], levels: &[f64]) -> Vec<Band> {
    let nodes = samples.first().map_or(0, |s| s.len());
    let mut sorted_cols: Vec<Vec<f64>> = (0..nodes)
        .map(|k| {
            let mut c: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            c.sort_by(f64::total_cmp);
            c
        })
        .collect();
    levels
        .iter()
        .map(|&l| Band {
            level: l,
            lower: sorted_cols.iter_mut().map(|c| quantile(c, 0.5 * (1.0 - l))).collect(),
            upper: sorted_cols.iter_mut().map(|c| quantile(c, 0.5 * (1.0 + l))).collect(),
        })
        .collect()
}

/// Quantile bands of `v` on the sampled nodes.
pub fn quantile_bands(ens: &Ensemble, v: Var, levels: &[f64]) -> Result<Vec<Band>> {
    let samples = ens
        .samples
        .as_ref()
        .ok_or_else(|| Error::NotApplicable("ensemble was simulated without sample storage".into()))?;
    let per = sampled_nodes(ens);
    let j = v.index(ens.n_agents) * per;
    let cols: Vec<Vec<f64>> = samples.iter().map(|s| s[j..j + per].to_vec()).collect();
    Ok(bands_from_samples(&cols, levels))
}

fn sampled_nodes(ens: &Ensemble) -> usize {
    let stride = ens.config.sample_stride.unwrap_or(1);
    ens.grid().n_nodes().div_ceil(stride)
}

/// Probe values of `v` across paths at probe `j`.
pub fn probe_values(ens: &Ensemble, j: usize, v: Var) -> Vec<f64> {
    let idx = v.index(ens.n_agents);
    ens.probes.iter().map(|p| p[j][idx]).collect()
}

/// Sample variance with its standard error (from the fourth central moment).
pub fn variance_estimate(x: &[f64]) -> Estimate {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    Estimate { mean: var, stderr: ((m4 - m2 * m2) / n).max(0.0).sqrt() }
}

/// Long-format path dump: `path_id, t, Q, S_1.., alpha_1.., P_1..`.
pub fn write_paths_csv(paths: &[Path], out: &FsPath) -> Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    let n = paths.first().map_or(0, |p| p.n_agents);
    let mut header = vec!["path_id".to_string(), "t".into(), "Q".into()];
    header.extend((1..=n).map(|i| format!("S_{i}")));
    header.extend((1..=n).map(|i| format!("alpha_{i}")));
    header.extend((1..=n).map(|i| format!("P_{i}")));
    w.write_record(&header)?;
    for (p, path) in paths.iter().enumerate() {
        for k in 0..path.grid.n_nodes() {
            let mut row = vec![p.to_string(), path.grid.node(k).to_string(), path.q[k].to_string()];
            row.extend(path.s_at(k).iter().map(|x| x.to_string()));
            row.extend(path.alpha_at(k).iter().map(|x| x.to_string()));
            row.extend(path.prices_at(k).iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Summary CSV: `t, variable, mean, std, q05..q95`. Quantile columns are
/// filled on sampled nodes when samples were stored.
pub fn write_summary_csv(ens: &Ensemble, out: &FsPath) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(f, "t,variable,mean,std,q05,q10,q20,q80,q90,q95")?;
    let g = ens.grid();
    let stride = ens.config.sample_stride;
    let probs = [0.05, 0.10, 0.20, 0.80, 0.90, 0.95];
    for v in Var::all(ens.n_agents) {
        let mean = ens.mean_curve(v);
        let std = ens.std_curve(v);
        let sorted: Option<Vec<Vec<f64>>> = ens.samples.as_ref().map(|s| {
            let per = sampled_nodes(ens);
            let j = v.index(ens.n_agents) * per;
            (0..per)
                .map(|k| {
                    let mut c: Vec<f64> = s.iter().map(|row| row[j + k]).collect();
                    c.sort_by(f64::total_cmp);
                    c
                })
                .collect()
        });
        for k in 0..g.n_nodes() {
            write!(f, "{},{},{},{}", g.node(k), v.name(), mean[k], std[k])?;
            match (&sorted, stride) {
                (Some(cols), Some(st)) if k % st == 0 => {
                    for p in probs {
                        write!(f, ",{}", quantile(&cols[k / st], p))?;
                    }
                }
                _ => write!(f, ",,,,,,")?,
            }
            writeln!(f)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_policy, ZeroPolicy};
    use crate::model::Curve;
    use crate::scenarios::baseline_market;

    fn quiet(n: usize) -> MarketModel {
        let mut m = baseline_market(n);
        m.sigma0 = 0.0;
        m.theta = Curve::constant(30.0);
        m.q0 = 30.0;
        for a in m.agents.iter_mut() {
            a.sigma = 0.0;
        }
        m
    }

    #[test]
    fn deterministic_model_gives_identical_paths() {
        let m = quiet(2);
        let pol = ZeroPolicy { n: 2, horizon: 24.0 };
        let mut cfg = SimConfig::new(&m, 5, 1);
        cfg.keep_paths = 5;
        let ens = simulate_paths(&m, &pol, &cfg).unwrap();
        assert!(ens.kept.iter().all(|p| p == &ens.kept[0]));
        assert!(ens.kept[0].q.iter().all(|q| *q == 30.0));
        let tc = stat_tc(&ens, 21.0).unwrap();
        assert_eq!(tc.mean, 0.0);
        assert_eq!(tc.stderr, 0.0);
        assert!(stat_tc(&ens, 20.0).is_err());
    }

    #[test]
    fn antithetic_mean_equals_noise_free_path() {
        // pairs cancel the noise exactly up to round-off
        let m = baseline_market(3);
        let pol = solve_policy(&m, false).unwrap();
        let mut cfg = SimConfig::new(&m, 8, 4);
        cfg.antithetic = true;
        let ens = simulate_paths(&m, &pol, &cfg).unwrap();
        let mp = mean_path(&m, &pol, cfg.grid).unwrap();
        let mc = ens.mean_curve(Var::Price(1));
        let worst = mc.iter().zip(mp.agent_price(1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn increments_telescope_exactly() {
        let m = baseline_market(3);
        let pol = solve_policy(&m, false).unwrap();
        let p = simulate_path(&m, &pol, m.sim_grid(), 9, 4).unwrap();
        for k in 0..p.grid.n_steps {
            for i in 0..3 {
                assert_eq!(p.s_at(k + 1)[i], p.s_at(k)[i] + p.s_increments[k * 3 + i]);
            }
        }
    }

    #[test]
    fn series_statistics() {
        let g = TimeGrid::new(24.0, 2400);
        let c: Vec<f64> = vec![-0.7; 2401];
        assert!((series_tc(&c, g, 21.0) - 0.7 * 21.0).abs() < 1e-12);
        let sine: Vec<f64> = g.nodes().iter().map(|t| (std::f64::consts::PI * t / 12.0).sin()).collect();
        let exact = 12.0 / std::f64::consts::PI * (3.0 + (21.0 * std::f64::consts::PI / 12.0).cos());
        assert!((series_tc(&sine, g, 21.0) - exact).abs() < 1e-4);
        let s: Vec<f64> = g.nodes().iter().map(|t| 5.0 + (std::f64::consts::PI * t / 12.0).sin()).collect();
        assert!((series_range(&s, g, 21.0) - 2.0).abs() < 1e-9);
        assert_eq!(series_range(&vec![3.0; 2401], g, 21.0), 0.0);
    }

    #[test]
    fn no_storage_range_of_reference_day() {
        let m = baseline_market(2);
        let tb = no_storage_tb(&m, TimeGrid::new(24.0, 1440), 24.0);
        assert!((tb - 33.6).abs() < 0.05, "{tb}");
        let mut flat = m.clone();
        flat.theta = Curve::constant(20.0);
        assert_eq!(no_storage_tb(&flat, TimeGrid::new(24.0, 1440), 21.0), 0.0);
    }

    #[test]
    fn pnl_examples() {
        let m = baseline_market(1);
        let g = TimeGrid::new(1.0, 1);
        let path = Path {
            grid: g,
            n_agents: 1,
            q: vec![30.0, 30.0],
            s: vec![5.0, 4.0],
            alpha: vec![-1.0, -1.0],
            prices: vec![20.0, 20.0],
            s_increments: vec![-1.0],
        };
        let x = pnl(&path, &m, 0);
        assert_eq!(x.revenue, 20.0);
        assert!((x.net() + x.total_cost() - x.revenue).abs() < 1e-12);
        let idle = Path { alpha: vec![0.0, 0.0], ..path };
        let y = pnl(&idle, &m, 0);
        assert_eq!((y.revenue, y.dispatch_cost), (0.0, 0.0));
        assert!((y.terminal_cost - 100.0).abs() < 1e-12);
    }

    #[test]
    fn normal_quantiles() {
        let mut rng = path_rng(5, 0);
        let draws: Vec<Vec<f64>> = (0..100_000).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
        let b = bands_from_samples(&draws, &[0.9, 0.5]);
        assert!((b[0].upper[0] - 1.6449).abs() < 0.02);
        assert!((b[0].lower[0] + 1.6449).abs() < 0.02);
        assert!(b[1].upper[0] > b[1].lower[0]);
        let single = bands_from_samples(&vec![vec![1.0, 2.0]; 7], &[0.95]);
        assert_eq!(single[0].lower, vec![1.0, 2.0]);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let m = baseline_market(3);
        let pol = solve_policy(&m, false).unwrap();
        let mut cfg = SimConfig::new(&m, 70, 42);
        cfg.sample_stride = Some(50);
        cfg.probe_times = vec![6.0, 12.0];
        let one = worker_pool(Some(1)).unwrap().install(|| simulate_paths(&m, &pol, &cfg)).unwrap();
        let three = worker_pool(Some(3)).unwrap().install(|| simulate_paths(&m, &pol, &cfg)).unwrap();
        assert_eq!(one, three);
        let again = simulate_paths(&m, &pol, &cfg).unwrap();
        assert_eq!(one, again);
    }

    #[test]
    fn agent_mismatch_rejected() {
        let m = baseline_market(3);
        let pol = ZeroPolicy { n: 2, horizon: 24.0 };
        assert!(matches!(simulate_paths(&m, &pol, &SimConfig::new(&m, 2, 0)), Err(Error::AgentMismatch { .. })));
    }

    #[test]
    fn antithetic_pairs_mirror_noise() {
        let m = baseline_market(1);
        let pol = ZeroPolicy { n: 1, horizon: 24.0 };
        let mut cfg = SimConfig::new(&m, 2, 3);
        cfg.antithetic = true;
        cfg.keep_paths = 2;
        let ens = simulate_paths(&m, &pol, &cfg).unwrap();
        let (a, b) = (&ens.kept[0], &ens.kept[1]);
        // zero policy: the Q deviations from the noise-free flow are mirrored
        let det = simulate_paths(&quiet_like(&m), &pol, &SimConfig { keep_paths: 1, n_paths: 1, ..cfg.clone() }).unwrap();
        for k in (0..2401).step_by(97) {
            let mid = 0.5 * (a.q[k] + b.q[k]);
            assert!((mid - det.kept[0].q[k]).abs() < 1e-9);
        }
    }

    fn quiet_like(m: &MarketModel) -> MarketModel {
        let mut x = m.clone();
        x.sigma0 = 0.0;
        x.agents.iter_mut().for_each(|a| a.sigma = 0.0);
        x
    }
}

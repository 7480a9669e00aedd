//! Coupled Riccati system for the heterogeneous N-agent game.
//!
//! Agent i's value function is
//! `V(t,q,s) = p0 q² + 2 q pᵀs + sᵀP s + r0 q + rᵀs + u`, and the blocks
//! `(P, p, r, p0, r0, u)` solve a terminal-value ODE system that is integrated
//! here in reversed time `τ = T − t` with classical RK4.

use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{build_noise, MarketModel, TimeGrid};
use crate::numerics::Stencil;

/// `d_i = w_ii c1_i + 2 c2_i` and `M = (I + diag(d)⁻¹ diag(c1) W)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionData {
    pub d: DVector<f64>,
    pub m: DMatrix<f64>,
}

pub fn build_interaction(model: &MarketModel) -> Result<InteractionData> {
    let n = model.n_agents();
    let w = model.weight_matrix();
    let d = DVector::from_fn(n, |i, _| w[(i, i)] * model.agents[i].c1 + 2.0 * model.agents[i].c2);
    let a = DMatrix::from_fn(n, n, |i, j| {
        let e = if i == j { 1.0 } else { 0.0 };
        e + model.agents[i].c1 * w[(i, j)] / d[i]
    });
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smin > 0.0) || smax / smin > 1e12 {
        return Err(Error::Singular { smallest_sv: smin });
    }
    let m = a.clone().try_inverse().ok_or(Error::Singular { smallest_sv: smin })?;
    let resid = (&m * &a - DMatrix::identity(n, n)).amax();
    if resid > 1e-10 {
        return Err(Error::Singular { smallest_sv: smin });
    }
    Ok(InteractionData { d, m })
}

/// Layout of one agent's coefficient block inside the flat state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub n: usize,
}

impl BlockLayout {
    pub fn width(&self) -> usize {
        self.n * self.n + 2 * self.n + 3
    }
    pub fn p_mat(&self) -> std::ops::Range<usize> {
        0..self.n * self.n
    }
    pub fn p_vec(&self) -> std::ops::Range<usize> {
        self.n * self.n..self.n * self.n + self.n
    }
    pub fn r_vec(&self) -> std::ops::Range<usize> {
        self.n * self.n + self.n..self.n * self.n + 2 * self.n
    }
    pub fn p0(&self) -> usize {
        self.n * self.n + 2 * self.n
    }
    pub fn r0(&self) -> usize {
        self.p0() + 1
    }
    pub fn u(&self) -> usize {
        self.p0() + 2
    }
    /// Total scalar ODE count `N³ + 2N² + 3N`.
    pub fn system_dim(&self) -> usize {
        self.n * self.width()
    }
    fn block_name(&self, k: usize) -> &'static str {
        if k < self.n * self.n {
            "P"
        } else if k < self.n * self.n + self.n {
            "p"
        } else if k < self.n * self.n + 2 * self.n {
            "r"
        } else if k == self.p0() {
            "p0"
        } else if k == self.r0() {
            "r0"
        } else {
            "u"
        }
    }
}

/// One agent's coefficients at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBlock {
    pub p_mat: DMatrix<f64>,
    pub p: DVector<f64>,
    pub r: DVector<f64>,
    pub p0: f64,
    pub r0: f64,
    pub u: f64,
}

impl AgentBlock {
    fn from_slice(x: &[f64], lay: BlockLayout) -> AgentBlock {
        let n = lay.n;
        AgentBlock {
            p_mat: DMatrix::from_row_slice(n, n, &x[lay.p_mat()]),
            p: DVector::from_column_slice(&x[lay.p_vec()]),
            r: DVector::from_column_slice(&x[lay.r_vec()]),
            p0: x[lay.p0()],
            r0: x[lay.r0()],
            u: x[lay.u()],
        }
    }

    /// Quadratic value `p0 q² + 2 q pᵀs + sᵀP s + r0 q + rᵀs + u`.
    pub fn value(&self, q: f64, s: &[f64]) -> f64 {
        let s = DVector::from_column_slice(s);
        self.p0 * q * q + 2.0 * q * self.p.dot(&s) + s.dot(&(&self.p_mat * &s)) + self.r0 * q + self.r.dot(&s) + self.u
    }
}

/// The six equilibrium intermediates at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Intermediates {
    pub k1: DVector<f64>,
    pub k2: DMatrix<f64>,
    pub k3: DVector<f64>,
    pub k4: DVector<f64>,
    pub k5: DMatrix<f64>,
    pub k6: DVector<f64>,
}

/// Intermediates from a flat all-agent state snapshot.
pub fn compute_intermediates(state: &[f64], model: &MarketModel, inter: &InteractionData) -> Intermediates {
    let n = model.n_agents();
    let lay = BlockLayout { n };
    let w = model.weight_matrix();
    intermediates_with(state, model, inter, &w, lay)
}

fn intermediates_with(
    state: &[f64],
    model: &MarketModel,
    inter: &InteractionData,
    w: &DMatrix<f64>,
    lay: BlockLayout,
) -> Intermediates {
    let n = lay.n;
    let bw = lay.width();
    let mut v1 = DVector::zeros(n);
    let mut v3 = DVector::zeros(n);
    let mut rows = DMatrix::zeros(n, n);
    for i in 0..n {
        let blk = &state[i * bw..(i + 1) * bw];
        let ag = &model.agents[i];
        let di = inter.d[i];
        v1[i] = (ag.c1 - 2.0 * blk[lay.p_vec().start + i]) / di;
        v3[i] = (blk[lay.r_vec().start + i] + ag.p_bar) / di;
        for l in 0..n {
            rows[(i, l)] = 2.0 * blk[i * n + l] / di;
        }
    }
    let k1 = &inter.m * v1;
    let k2 = &inter.m * rows;
    let k3 = &inter.m * v3;
    let k4 = DVector::from_element(n, 1.0) - w * &k1;
    let k5 = w * &k2;
    let k6 = w * &k3;
    Intermediates { k1, k2, k3, k4, k5, k6 }
}

/// Integration and storage options.
#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct SolveOptions {
    /// Keep every `store_every`-th integration node. `None` picks a default
    /// from N (every node for N ≤ 4, every 10th otherwise).
    pub store_every: Option<usize>,
    /// Retain the full coefficient blocks (needed for values and dumps).
    /// `None` keeps them for N ≤ 16.
    pub keep_blocks: Option<bool>,
    /// Integrate only the autonomous `P` subsystem.
    pub p_only: bool,
}


/// Coefficient trajectories on the stored nodes.
#[derive(Debug, Clone)]
pub struct GeneralSolution {
    pub grid: TimeGrid,
    pub store_every: usize,
    pub n_agents: usize,
    pub interaction: InteractionData,
    /// Per stored node: `k1 (N) | K2 row-major (N²) | k3 (N)`.
    gains: Vec<f64>,
    /// Per stored node: all agents' blocks, if retained.
    blocks: Option<Vec<f64>>,
}

impl GeneralSolution {
    pub fn layout(&self) -> BlockLayout {
        BlockLayout { n: self.n_agents }
    }

    pub fn n_stored(&self) -> usize {
        self.grid.n_steps / self.store_every + 1
    }

    pub fn stored_dt(&self) -> f64 {
        self.grid.dt() * self.store_every as f64
    }

    pub fn stored_time(&self, k: usize) -> f64 {
        self.grid.node(k * self.store_every)
    }

    pub fn has_blocks(&self) -> bool {
        self.blocks.is_some()
    }

    fn gains_width(&self) -> usize {
        self.n_agents * self.n_agents + 2 * self.n_agents
    }

    fn stencil(&self, t: f64) -> Result<Stencil> {
        let horizon = self.grid.horizon;
        if !(-1e-12..=horizon + 1e-12).contains(&t) {
            return Err(Error::Domain { t, horizon });
        }
        Ok(Stencil::new(t.clamp(0.0, horizon), self.stored_dt(), self.n_stored() - 1))
    }

    /// Interpolated `(k1, K2, k3)` at time `t` in a flat buffer.
    pub fn gains_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let st = self.stencil(t)?;
        st.apply_block(&self.gains, self.gains_width(), out);
        Ok(())
    }

    /// Equilibrium controls `α = k1 q − K2 s − k3` for every agent.
    pub fn controls(&self, t: f64, q: f64, s: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_agents;
        let mut g = vec![0.0; self.gains_width()];
        self.gains_into(t, &mut g)?;
        Ok(controls_from_gains(&g, n, q, s))
    }

    /// Full block of agent `i` at stored node `k`.
    pub fn block(&self, k: usize, i: usize) -> Result<AgentBlock> {
        let blocks = self.blocks.as_ref().ok_or(Error::BlocksDropped)?;
        let lay = self.layout();
        let bw = lay.width();
        let base = k * self.n_agents * bw + i * bw;
        Ok(AgentBlock::from_slice(&blocks[base..base + bw], lay))
    }

    /// Interpolated block of agent `i` at time `t`.
    pub fn block_at(&self, t: f64, i: usize) -> Result<AgentBlock> {
        let blocks = self.blocks.as_ref().ok_or(Error::BlocksDropped)?;
        let st = self.stencil(t)?;
        let lay = self.layout();
        let bw = lay.width();
        let stride = self.n_agents * bw;
        let mut out = vec![0.0; bw];
        for j in 0..st.len {
            let base = (st.first + j) * stride + i * bw;
            for (o, x) in out.iter_mut().zip(&blocks[base..base + bw]) {
                if j == 0 {
                    *o = st.weights[0] * x;
                } else {
                    *o += st.weights[j] * x;
                }
            }
        }
        Ok(AgentBlock::from_slice(&out, lay))
    }

    /// Agent `i`'s value function.
    pub fn value(&self, i: usize, t: f64, q: f64, s: &[f64]) -> Result<f64> {
        Ok(self.block_at(t, i)?.value(q, s))
    }

    /// Raw stored state (all agents) at stored node `k`.
    pub fn state_at_node(&self, k: usize) -> Result<&[f64]> {
        let blocks = self.blocks.as_ref().ok_or(Error::BlocksDropped)?;
        let w = self.n_agents * self.layout().width();
        Ok(&blocks[k * w..(k + 1) * w])
    }
}

pub(crate) fn controls_from_gains(g: &[f64], n: usize, q: f64, s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    controls_from_gains_into(g, n, q, s, &mut out);
    out
}

pub(crate) fn controls_from_gains_into(g: &[f64], n: usize, q: f64, s: &[f64], out: &mut [f64]) {
    let (k1, rest) = g.split_at(n);
    let (k2, k3) = rest.split_at(n * n);
    for i in 0..n {
        let row = &k2[i * n..(i + 1) * n];
        let ks: f64 = row.iter().zip(s).map(|(a, b)| a * b).sum();
        out[i] = k1[i] * q - ks - k3[i];
    }
}

/// Time-dependent inputs of the right-hand side.
struct Forcing {
    a: Vec<f64>,
    b: Vec<f64>,
    zeta: Vec<f64>,
    theta: f64,
}

impl Forcing {
    fn at(model: &MarketModel, t: f64) -> Forcing {
        Forcing {
            a: model.agents.iter().map(|x| x.a.at(t)).collect(),
            b: model.agents.iter().map(|x| x.b.at(t)).collect(),
            zeta: model.agents.iter().map(|x| x.zeta.at(t)).collect(),
            theta: model.theta.at(t),
        }
    }
}

struct System<'a> {
    model: &'a MarketModel,
    inter: &'a InteractionData,
    w: DMatrix<f64>,
    cov: DMatrix<f64>,
    lay: BlockLayout,
    p_only: bool,
}

impl<'a> System<'a> {
    /// `dX/dτ` (equivalently `−dX/dt`) at calendar time `t`.
    fn rhs(&self, t: f64, state: &[f64], out: &mut [f64]) {
        let lay = self.lay;
        let n = lay.n;
        let bw = lay.width();
        let k = intermediates_with(state, self.model, self.inter, &self.w, lay);
        let f = Forcing::at(self.model, t);
        let kappa = self.model.kappa;
        let work = |i: usize, blk: &[f64], o: &mut [f64], g: &mut DMatrix<f64>| {
            self.agent_rhs(i, blk, o, g, &k, &f, kappa);
        };
        if n >= 8 {
            out.par_chunks_mut(bw).enumerate().for_each_init(
                || DMatrix::zeros(n, n),
                |g, (i, o)| work(i, &state[i * bw..(i + 1) * bw], o, g),
            );
        } else {
            let mut g = DMatrix::zeros(n, n);
            for (i, o) in out.chunks_mut(bw).enumerate() {
                work(i, &state[i * bw..(i + 1) * bw], o, &mut g);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn agent_rhs(
        &self,
        i: usize,
        blk: &[f64],
        o: &mut [f64],
        g: &mut DMatrix<f64>,
        k: &Intermediates,
        f: &Forcing,
        kappa: f64,
    ) {
        let lay = self.lay;
        let n = lay.n;
        let ag = &self.model.agents[i];
        let (c1, c2, c3) = (ag.c1, ag.c2, ag.c3);
        // P is symmetric, so reading the row-major slice column-major is harmless
        let pm: DMatrixView<f64> = DMatrixView::from_slice(&blk[lay.p_mat()], n, n);
        g.gemm(1.0, &pm, &k.k2, 0.0);
        let k2i = |l: usize| k.k2[(i, l)];
        let k5i = |l: usize| k.k5[(i, l)];
        for j in 0..n {
            for l in 0..n {
                let mut v = 0.5 * c1 * (k2i(j) * k5i(l) + k5i(j) * k2i(l)) + c2 * k2i(j) * k2i(l)
                    - g[(j, l)]
                    - g[(l, j)];
                if j == i && l == i {
                    v += c3;
                }
                o[j * n + l] = v;
            }
        }
        if self.p_only {
            o[lay.p_mat().end..].iter_mut().for_each(|x| *x = 0.0);
            return;
        }
        let p = &blk[lay.p_vec()];
        let r = &blk[lay.r_vec()];
        let (p0, r0) = (blk[lay.p0()], blk[lay.r0()]);
        let (k1i, k3i, k4i, k6i) = (k.k1[i], k.k3[i], k.k4[i], k.k6[i]);
        let p_row = |j: usize| &blk[j * n..(j + 1) * n];
        let theta = f.theta;
        let zeta = f.zeta[i];
        // k2ᵀ applied to p and r
        let k2t_dot = |v: &[f64], j: usize| (0..n).map(|l| k.k2[(l, j)] * v[l]).sum::<f64>();
        let mut p_k1b = 0.0;
        let mut p_k3a = 0.0;
        let mut r_k1b = 0.0;
        let mut r_k3a = 0.0;
        for l in 0..n {
            p_k1b += p[l] * (k.k1[l] + f.b[l]);
            p_k3a += p[l] * (k.k3[l] - f.a[l]);
            r_k1b += r[l] * (k.k1[l] + f.b[l]);
            r_k3a += r[l] * (k.k3[l] - f.a[l]);
        }
        let pv = lay.p_vec().start;
        let rv = lay.r_vec().start;
        for j in 0..n {
            let row = p_row(j);
            let mut pk1b = 0.0;
            let mut pk3a = 0.0;
            for l in 0..n {
                pk1b += row[l] * (k.k1[l] + f.b[l]);
                pk3a += row[l] * (k.k3[l] - f.a[l]);
            }
            o[pv + j] = -0.5 * c1 * (k1i * k5i(j) - k4i * k2i(j)) - c2 * k1i * k2i(j) - kappa * p[j] + pk1b
                - k2t_dot(p, j);
            let mut rj = -ag.p_bar * k2i(j) + c1 * (k6i * k2i(j) + k3i * k5i(j)) + 2.0 * c2 * k3i * k2i(j)
                + 2.0 * kappa * theta * p[j]
                - k2t_dot(r, j)
                - 2.0 * pk3a;
            if j == i {
                rj -= 2.0 * c3 * zeta;
            }
            o[rv + j] = rj;
        }
        o[lay.p0()] = -c1 * k1i * k4i + c2 * k1i * k1i - 2.0 * kappa * p0 + 2.0 * p_k1b;
        o[lay.r0()] = ag.p_bar * k1i + c1 * (k3i * k4i - k1i * k6i) - 2.0 * c2 * k1i * k3i
            + kappa * (2.0 * theta * p0 - r0)
            + r_k1b
            - 2.0 * p_k3a;
        // Tr(ΣΣᵀ [[p0, pᵀ], [p, P]])
        let cov = &self.cov;
        let mut tr = cov[(0, 0)] * p0;
        for j in 0..n {
            tr += 2.0 * cov[(0, j + 1)] * p[j];
            let row = p_row(j);
            for l in 0..n {
                tr += cov[(j + 1, l + 1)] * row[l];
            }
        }
        o[lay.u()] = -ag.p_bar * k3i + c1 * k3i * k6i + c2 * k3i * k3i + c3 * zeta * zeta + kappa * theta * r0
            - r_k3a
            + tr;
    }
}

fn symmetrize(state: &mut [f64], lay: BlockLayout) {
    let n = lay.n;
    for blk in state.chunks_mut(lay.width()) {
        for j in 0..n {
            for l in (j + 1)..n {
                let v = 0.5 * (blk[j * n + l] + blk[l * n + j]);
                blk[j * n + l] = v;
                blk[l * n + j] = v;
            }
        }
    }
}

/// Terminal state: `P = c4 e_i e_iᵀ`, `r = −2 c4 ζ(T) e_i`, `u = c4 ζ(T)²`.
pub fn terminal_state(model: &MarketModel) -> Vec<f64> {
    let n = model.n_agents();
    let lay = BlockLayout { n };
    let bw = lay.width();
    let t = model.horizon;
    let mut y = vec![0.0; n * bw];
    for (i, ag) in model.agents.iter().enumerate() {
        let blk = &mut y[i * bw..(i + 1) * bw];
        let z = ag.zeta.at(t);
        blk[i * n + i] = ag.c4;
        blk[lay.r_vec().start + i] = -2.0 * ag.c4 * z;
        blk[lay.u()] = ag.c4 * z * z;
    }
    y
}

fn default_store_every(n: usize) -> usize {
    if n <= 4 {
        1
    } else {
        10
    }
}

fn largest_divisor_at_most(n_steps: usize, s: usize) -> usize {
    (1..=s.max(1)).rev().find(|d| n_steps.is_multiple_of(*d)).unwrap_or(1)
}

/// Backward integration of the coupled system on `grid`.
pub fn solve_general(model: &MarketModel, grid: TimeGrid, opts: SolveOptions) -> Result<GeneralSolution> {
    let n = model.n_agents();
    let lay = BlockLayout { n };
    let inter = build_interaction(model)?;
    let w = model.weight_matrix();
    let sys = System {
        model,
        inter: &inter,
        w: w.clone(),
        cov: build_noise(model).covariance(),
        lay,
        p_only: opts.p_only,
    };
    let store_every = largest_divisor_at_most(grid.n_steps, opts.store_every.unwrap_or(default_store_every(n)));
    let keep_blocks = opts.keep_blocks.unwrap_or(n <= 16);
    let n_stored = grid.n_steps / store_every + 1;
    let dim = lay.system_dim();
    let gw = n * n + 2 * n;
    let mut gains = vec![0.0; n_stored * gw];
    let mut blocks = if keep_blocks { Some(vec![0.0; n_stored * dim]) } else { None };

    let record = |k_node: usize, y: &[f64], gains: &mut [f64], blocks: &mut Option<Vec<f64>>| {
        if !k_node.is_multiple_of(store_every) {
            return;
        }
        let ks = k_node / store_every;
        let it = intermediates_with(y, model, &inter, &w, lay);
        let g = &mut gains[ks * gw..(ks + 1) * gw];
        g[..n].copy_from_slice(it.k1.as_slice());
        for i in 0..n {
            for l in 0..n {
                g[n + i * n + l] = it.k2[(i, l)];
            }
        }
        g[n + n * n..].copy_from_slice(it.k3.as_slice());
        if let Some(b) = blocks.as_mut() {
            b[ks * dim..(ks + 1) * dim].copy_from_slice(y);
        }
    };

    let mut y = terminal_state(model);
    record(grid.n_steps, &y, &mut gains, &mut blocks);
    let h = grid.dt();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for step in 0..grid.n_steps {
        // reversed time τ = step·h, calendar time t = T − τ
        let node = grid.n_steps - step;
        let t = grid.node(node);
        let t_mid = t - 0.5 * h;
        let t_end = grid.node(node - 1);
        sys.rhs(t, &y, &mut k1);
        axpy_into(&y, 0.5 * h, &k1, &mut tmp);
        symmetrize(&mut tmp, lay);
        sys.rhs(t_mid, &tmp, &mut k2);
        axpy_into(&y, 0.5 * h, &k2, &mut tmp);
        symmetrize(&mut tmp, lay);
        sys.rhs(t_mid, &tmp, &mut k3);
        axpy_into(&y, h, &k3, &mut tmp);
        symmetrize(&mut tmp, lay);
        sys.rhs(t_end, &tmp, &mut k4);
        for j in 0..dim {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        symmetrize(&mut y, lay);
        if let Some(bad) = y.iter().position(|x| !x.is_finite() || x.abs() > 1e200) {
            let agent = bad / lay.width();
            return Err(Error::BlowUp {
                t: t_end,
                block: format!("agent {agent} {}", lay.block_name(bad % lay.width())),
            });
        }
        record(node - 1, &y, &mut gains, &mut blocks);
    }
    Ok(GeneralSolution { grid, store_every, n_agents: n, interaction: inter, gains, blocks })
}

fn axpy_into(y: &[f64], a: f64, x: &[f64], out: &mut [f64]) {
    for ((o, yi), xi) in out.iter_mut().zip(y).zip(x) {
        *o = yi + a * xi;
    }
}

/// `dX/dτ` of the full system at calendar time `t`; exposed for residual checks.
pub fn general_rhs(model: &MarketModel, t: f64, state: &[f64]) -> Result<Vec<f64>> {
    let n = model.n_agents();
    let inter = build_interaction(model)?;
    let sys = System {
        model,
        inter: &inter,
        w: model.weight_matrix(),
        cov: build_noise(model).covariance(),
        lay: BlockLayout { n },
        p_only: false,
    };
    let mut out = vec![0.0; state.len()];
    sys.rhs(t, state, &mut out);
    Ok(out)
}

/// Matrix norm used in the well-posedness bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    Two,
    Inf,
}

fn norm(m: &DMatrix<f64>, kind: NormKind) -> f64 {
    match kind {
        NormKind::Two => m.clone().singular_values().max(),
        NormKind::Inf => (0..m.nrows()).map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max),
    }
}

/// Sufficient horizon for existence of the coupled Riccati solution.
#[derive(Debug, Clone, PartialEq)]
pub struct WellPosedness {
    pub t_max: f64,
    pub beta: f64,
    pub degenerate: bool,
    pub note: Option<String>,
}

/// `T < (1/(2N√(‖C3‖β)))·[π − 2 atan(N√β‖C4‖/√‖C3‖)]`.
pub(crate) fn horizon_bound(n_factor: f64, c3n: f64, c4n: f64, beta: f64) -> WellPosedness {
    if c3n > 0.0 {
        let t_max = (std::f64::consts::PI - 2.0 * (n_factor * beta.sqrt() * c4n / c3n.sqrt()).atan())
            / (2.0 * n_factor * (c3n * beta).sqrt());
        return WellPosedness { t_max, beta, degenerate: false, note: None };
    }
    let (t_max, note) = if c4n > 0.0 {
        (
            1.0 / (n_factor * n_factor * beta * c4n),
            "running SOC penalty is zero: reporting the c3 -> 0 limit 1/(N^2 beta ||C4||)",
        )
    } else {
        (f64::INFINITY, "all SOC penalties vanish: the quadratic blocks stay zero for any horizon")
    };
    WellPosedness { t_max, beta, degenerate: true, note: Some(note.into()) }
}

/// Block norms and β for the general system.
pub fn wellposedness_bound_general(model: &MarketModel, kind: NormKind) -> Result<WellPosedness> {
    let n = model.n_agents();
    let inter = build_interaction(model)?;
    let w = model.weight_matrix();
    let m = &inter.m;
    let wm = &w * m;
    let d = &inter.d;
    let c3n = model.agents.iter().map(|a| a.c3).fold(0.0, f64::max);
    let c4n = model.agents.iter().map(|a| a.c4).fold(0.0, f64::max);
    let mut s_norm = 0.0f64;
    let mut st_norm = 0.0f64;
    for i in 0..n {
        let col = m.column(i) * (2.0 / d[i]);
        let (a, b) = match kind {
            NormKind::Two => (col.norm(), col.norm()),
            NormKind::Inf => (col.amax(), col.iter().map(|x| x.abs()).sum()),
        };
        s_norm = s_norm.max(a);
        st_norm = st_norm.max(b);
    }
    let mut b_norm = 0.0f64;
    for i in 0..n {
        let ag = &model.agents[i];
        let bi = DMatrix::from_fn(n, n, |j, l| {
            let dd = d[j] * d[l];
            2.0 * ag.c1 / dd * (m[(i, j)] * wm[(j, l)] + wm[(i, j)] * m[(i, l)])
                + 4.0 * ag.c2 / dd * m[(i, j)] * m[(i, l)]
        });
        b_norm = b_norm.max(norm(&bi, kind));
    }
    let beta = s_norm + st_norm + b_norm;
    Ok(horizon_bound(n as f64, c3n, c4n, beta))
}

/// Shared handle used by policies.
pub type SharedGeneral = Arc<GeneralSolution>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Curve;
    use crate::scenarios::{baseline_market, sample_heterogeneous_market};

    fn small_grid(model: &MarketModel, steps: usize) -> TimeGrid {
        TimeGrid::new(model.horizon, steps)
    }

    #[test]
    fn interaction_examples() {
        let m = baseline_market(2);
        let it = build_interaction(&m).unwrap();
        assert!((it.d[0] - 1.2).abs() < 1e-15);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 } - 0.3125;
                assert!((it.m[(i, j)] - e).abs() < 1e-12);
            }
        }
        let it1 = build_interaction(&baseline_market(1)).unwrap();
        assert!((it1.m[(0, 0)] - 6.0 / 11.0).abs() < 1e-12);
        let mut tiny = baseline_market(3);
        tiny.agents.iter_mut().for_each(|a| a.c1 = 1e-12);
        let it = build_interaction(&tiny).unwrap();
        assert!((it.m.clone() - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn homogeneous_interaction_closed_form() {
        for n in [3, 5, 9] {
            let m = baseline_market(n);
            let it = build_interaction(&m).unwrap();
            let c = 1.0 / (0.2 + (n as f64 + 1.0));
            let expect = DMatrix::identity(n, n) - DMatrix::from_element(n, n, c);
            assert!((it.m.clone() - expect).amax() < 1e-12);
        }
    }

    #[test]
    fn intermediates_examples() {
        let mut m = baseline_market(3);
        m.agents.iter_mut().for_each(|a| a.p_bar = 0.0);
        let it = build_interaction(&m).unwrap();
        let zero = vec![0.0; BlockLayout { n: 3 }.system_dim()];
        let k = compute_intermediates(&zero, &m, &it);
        let v = DVector::from_element(3, 1.0 / 1.2);
        assert!((k.k1.clone() - &it.m * v).amax() < 1e-15);
        assert_eq!(k.k2.amax(), 0.0);
        assert_eq!(k.k3.amax(), 0.0);
        assert_eq!(k.k5.amax(), 0.0);
        assert!((k.k4.clone() - (DVector::from_element(3, 1.0) - m.weight_matrix() * &k.k1)).amax() < 1e-15);
        assert!((k.k1[0] - k.k1[2]).abs() < 1e-15);

        let m1 = baseline_market(1);
        let it1 = build_interaction(&m1).unwrap();
        let k = compute_intermediates(&terminal_state(&m1), &m1, &it1);
        assert!((k.k2[(0, 0)] - 6.0 / 11.0 * 200.0 / 1.2).abs() < 1e-9);
        assert!((k.k2[(0, 0)] - 90.909).abs() < 1e-3);
    }

    #[test]
    fn dimensions() {
        assert_eq!(BlockLayout { n: 1 }.system_dim(), 6);
        assert_eq!(BlockLayout { n: 8 }.system_dim(), 664);
    }

    #[test]
    fn zero_cost_fixed_point() {
        let mut m = baseline_market(3);
        for a in m.agents.iter_mut() {
            a.c3 = 0.0;
            a.c4 = 0.0;
            a.p_bar = 0.0;
            a.a = Curve::zero();
            a.b = Curve::zero();
        }
        // price exposure alone keeps the q-only terms alive; every SOC term stays zero
        let sol = solve_general(&m, small_grid(&m, 6000), SolveOptions::default()).unwrap();
        let lay = BlockLayout { n: 3 };
        for k in 0..sol.n_stored() {
            let x = sol.state_at_node(k).unwrap();
            for i in 0..3 {
                let o = i * lay.width();
                for j in lay.p_mat().chain(lay.p_vec()).chain(lay.r_vec()) {
                    assert_eq!(x[o + j], 0.0);
                }
            }
        }
        assert!(sol.state_at_node(0).unwrap()[lay.p0()] < 0.0);
    }

    #[test]
    fn terminal_exact_and_symmetric() {
        let m = sample_heterogeneous_market(3, 3);
        let sol = solve_general(&m, small_grid(&m, 6000), SolveOptions::default()).unwrap();
        let last = sol.n_stored() - 1;
        assert_eq!(sol.state_at_node(last).unwrap(), terminal_state(&m).as_slice());
        for k in (0..sol.n_stored()).step_by(97) {
            for i in 0..3 {
                let b = sol.block(k, i).unwrap();
                assert!((b.p_mat.clone() - b.p_mat.transpose()).amax() <= 1e-9);
            }
        }
    }

    #[test]
    fn p_subsystem_is_autonomous() {
        let m = sample_heterogeneous_market(11, 3);
        let g = small_grid(&m, 6000);
        let full = solve_general(&m, g, SolveOptions::default()).unwrap();
        let ponly = solve_general(&m, g, SolveOptions { p_only: true, ..Default::default() }).unwrap();
        let lay = BlockLayout { n: 3 };
        for k in 0..full.n_stored() {
            let a = full.state_at_node(k).unwrap();
            let b = ponly.state_at_node(k).unwrap();
            for i in 0..3 {
                let o = i * lay.width();
                for j in lay.p_mat() {
                    assert!((a[o + j] - b[o + j]).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let m = sample_heterogeneous_market(5, 3);
        let perm = [2usize, 0, 1];
        let mut mp = m.clone();
        mp.agents = perm.iter().map(|&j| m.agents[j].clone()).collect();
        let g = small_grid(&m, 6000);
        let a = solve_general(&m, g, SolveOptions::default()).unwrap();
        let b = solve_general(&mp, g, SolveOptions::default()).unwrap();
        for k in [0, 250, 600] {
            for (ip, &i) in perm.iter().enumerate() {
                let x = a.block(k, i).unwrap();
                let y = b.block(k, ip).unwrap();
                for j in 0..3 {
                    for l in 0..3 {
                        assert!((x.p_mat[(perm[j], perm[l])] - y.p_mat[(j, l)]).abs() < 1e-9);
                    }
                    assert!((x.p[perm[j]] - y.p[j]).abs() < 1e-9);
                    assert!((x.r[perm[j]] - y.r[j]).abs() < 1e-8 * (1.0 + x.r[perm[j]].abs()));
                }
                assert!((x.u - y.u).abs() < 1e-8 * (1.0 + x.u.abs()));
            }
        }
    }

    #[test]
    fn rk4_refinement_order() {
        let m = baseline_market(2);
        let opts = SolveOptions { store_every: Some(1), ..Default::default() };
        let coarse = solve_general(&m, small_grid(&m, 6000), opts).unwrap();
        let mid = solve_general(&m, small_grid(&m, 12000), opts).unwrap();
        let fine = solve_general(&m, small_grid(&m, 24000), opts).unwrap();
        let e1: f64 = (0..coarse.n_stored())
            .map(|k| {
                let a = coarse.state_at_node(k).unwrap();
                let b = mid.state_at_node(2 * k).unwrap();
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        let e2: f64 = (0..mid.n_stored())
            .map(|k| {
                let a = mid.state_at_node(k).unwrap();
                let b = fine.state_at_node(2 * k).unwrap();
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        let order = (e1 / e2).log2();
        assert!(order >= 3.5, "observed order {order} ({e1:e} vs {e2:e})");
    }

    #[test]
    fn wellposedness_structure() {
        let m = baseline_market(2);
        let wp = wellposedness_bound_general(&m, NormKind::Two).unwrap();
        assert!(wp.beta > 0.0 && wp.t_max > 0.0 && !wp.degenerate);
        let mut z = m.clone();
        z.agents.iter_mut().for_each(|a| a.c3 = 0.0);
        let wz = wellposedness_bound_general(&z, NormKind::Two).unwrap();
        assert!(wz.degenerate && wz.t_max.is_finite());
        z.agents.iter_mut().for_each(|a| a.c4 = 0.0);
        assert!(wellposedness_bound_general(&z, NormKind::Two).unwrap().t_max.is_infinite());
    }
}

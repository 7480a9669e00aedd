//! Equilibrium feedback maps, value functions and prices.
//!
//! Every equilibrium in this crate is affine in the state, so a policy is
//! exposed as time-dependent gains `α = a q + B s + c`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::asymptotics::{expansion_gains, ExpansionCoeffs};
use crate::error::{Error, Result};
use crate::model::{MarketModel, TimeGrid};
use crate::riccati_general::{solve_general, GeneralSolution, SolveOptions};
use crate::riccati_homogeneous::{solve_homogeneous, HomogeneousSolution};

/// Affine feedback at one time: `α_i = a_i q + Σ_j B_ij s_j + c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGains {
    pub a: Vec<f64>,
    /// Row-major N×N.
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl AffineGains {
    pub fn zeros(n: usize) -> AffineGains {
        AffineGains { a: vec![0.0; n], b: vec![0.0; n * n], c: vec![0.0; n] }
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn apply_into(&self, q: f64, s: &[f64], out: &mut [f64]) {
        let n = self.n();
        for i in 0..n {
            let row = &self.b[i * n..(i + 1) * n];
            let bs: f64 = row.iter().zip(s).map(|(x, y)| x * y).sum();
            out[i] = self.a[i] * q + bs + self.c[i];
        }
    }

    pub fn apply(&self, q: f64, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.apply_into(q, s, &mut out);
        out
    }
}

/// Anything that produces affine feedback gains over `[0, horizon]`.
pub trait Policy: Send + Sync {
    fn n_agents(&self) -> usize;
    fn horizon(&self) -> f64;
    fn gains(&self, t: f64) -> Result<AffineGains>;

    fn controls(&self, t: f64, q: f64, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.gains(t)?.apply(q, s))
    }
}

#[derive(Debug, Clone)]
pub enum PolicySource {
    General(Arc<GeneralSolution>),
    Homogeneous(Arc<HomogeneousSolution>),
    /// Large-market expansion truncated after the `order`-th power of 1/N.
    Expansion { coeffs: Arc<ExpansionCoeffs>, order: usize },
}

/// Equilibrium feedback built from one of the solvers.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    pub source: PolicySource,
    pub model: Arc<MarketModel>,
}

impl FeedbackPolicy {
    pub fn general(model: &MarketModel, sol: GeneralSolution) -> FeedbackPolicy {
        FeedbackPolicy { source: PolicySource::General(Arc::new(sol)), model: Arc::new(model.clone()) }
    }

    pub fn homogeneous(model: &MarketModel, sol: HomogeneousSolution) -> FeedbackPolicy {
        FeedbackPolicy { source: PolicySource::Homogeneous(Arc::new(sol)), model: Arc::new(model.clone()) }
    }

    pub fn expansion(model: &MarketModel, coeffs: ExpansionCoeffs, order: usize) -> FeedbackPolicy {
        FeedbackPolicy {
            source: PolicySource::Expansion { coeffs: Arc::new(coeffs), order },
            model: Arc::new(model.clone()),
        }
    }

    pub fn is_general(&self) -> bool {
        matches!(self.source, PolicySource::General(_))
    }
}

/// Solve the model with the reduced system when it applies, unless `force_general`.
pub fn solve_policy(model: &MarketModel, force_general: bool) -> Result<FeedbackPolicy> {
    solve_policy_with(model, force_general, SolveOptions::default())
}

/// Step-count multipliers tried in turn when RK4 blows up on the configured grid.
pub const REFINEMENTS: [usize; 3] = [1, 2, 4];

/// As [`solve_policy`]. A blow-up is retried on grids refined by
/// [`REFINEMENTS`]: for strongly coupled markets the stiff terminal layer
/// (rates of several hundred per hour) can destabilise RK4 on a grid that is
/// fine for the reference market. A blow-up on the finest grid is returned.
pub fn solve_policy_with(model: &MarketModel, force_general: bool, opts: SolveOptions) -> Result<FeedbackPolicy> {
    let base = model.riccati_grid();
    let mut last = None;
    for k in REFINEMENTS {
        let grid = TimeGrid::new(base.horizon, base.n_steps * k);
        let attempt = if model.is_homogeneous() && !force_general {
            solve_homogeneous(model, grid).map(|s| FeedbackPolicy::homogeneous(model, s))
        } else {
            solve_general(model, grid, opts).map(|s| FeedbackPolicy::general(model, s))
        };
        match attempt {
            Err(e @ Error::BlowUp { .. }) => last = Some(e),
            other => return other,
        }
    }
    Err(last.expect("at least one refinement"))
}

impl Policy for FeedbackPolicy {
    fn n_agents(&self) -> usize {
        self.model.n_agents()
    }

    fn horizon(&self) -> f64 {
        self.model.horizon
    }

    fn gains(&self, t: f64) -> Result<AffineGains> {
        let n = self.n_agents();
        match &self.source {
            PolicySource::General(sol) => {
                let mut g = vec![0.0; n * n + 2 * n];
                sol.gains_into(t, &mut g)?;
                Ok(AffineGains {
                    a: g[..n].to_vec(),
                    b: g[n..n + n * n].iter().map(|x| -x).collect(),
                    c: g[n + n * n..].iter().map(|x| -x).collect(),
                })
            }
            PolicySource::Homogeneous(sol) => {
                let g = sol.g_functions(t)?;
                let mut out = AffineGains::zeros(n);
                for i in 0..n {
                    out.a[i] = g.g1;
                    out.c[i] = g.g4;
                    for j in 0..n {
                        out.b[i * n + j] = if i == j { g.g2 } else { g.g3 };
                    }
                }
                Ok(out)
            }
            PolicySource::Expansion { coeffs, order } => expansion_gains(coeffs, t, n, *order),
        }
    }
}

/// Agent `i`'s equilibrium control from the general solution.
pub fn control_general(policy: &FeedbackPolicy, i: usize, t: f64, q: f64, s: &[f64]) -> Result<f64> {
    match &policy.source {
        PolicySource::General(sol) => Ok(sol.controls(t, q, s)?[i]),
        _ => Err(Error::NotApplicable("policy was not built from the general solver".into())),
    }
}

/// `g1 q + g2 s_i + g3 Σ_{j≠i} s_j + g4`.
pub fn control_homogeneous(policy: &FeedbackPolicy, t: f64, q: f64, s_i: f64, sum_others: f64) -> Result<f64> {
    match &policy.source {
        PolicySource::Homogeneous(sol) => sol.control(t, q, s_i, sum_others),
        _ => Err(Error::NotApplicable("policy was not built from the homogeneous solver".into())),
    }
}

/// Agent `i`'s equilibrium value.
pub fn value_general(policy: &FeedbackPolicy, i: usize, t: f64, q: f64, s: &[f64]) -> Result<f64> {
    match &policy.source {
        PolicySource::General(sol) => sol.value(i, t, q, s),
        PolicySource::Homogeneous(sol) => sol.value(i, t, q, s),
        PolicySource::Expansion { .. } => Err(Error::NotApplicable("expansion carries no value function".into())),
    }
}

/// Locational prices `P_i = P̄_i − c1_i (q − w_iᵀα)`.
pub fn price(model: &MarketModel, q: f64, alphas: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; model.n_agents()];
    price_into(model, q, alphas, &mut out);
    out
}

pub fn price_into(model: &MarketModel, q: f64, alphas: &[f64], out: &mut [f64]) {
    for (i, ag) in model.agents.iter().enumerate() {
        let wa: f64 = model.weights[i].iter().zip(alphas).map(|(w, a)| w * a).sum();
        out[i] = ag.p_bar - ag.c1 * (q - wa);
    }
}

/// Second-order sufficient condition of each agent's pointwise minimisation.
pub fn hamiltonian_is_convex(model: &MarketModel) -> bool {
    model.agents.iter().enumerate().all(|(i, a)| a.c1 * model.weights[i][i] + 2.0 * a.c2 > 0.0)
}

/// No-trade policy.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPolicy {
    pub n: usize,
    pub horizon: f64,
}

impl Policy for ZeroPolicy {
    fn n_agents(&self) -> usize {
        self.n
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn gains(&self, _t: f64) -> Result<AffineGains> {
        Ok(AffineGains::zeros(self.n))
    }
}

/// Half-sine bump supported on [6, 18] h.
pub fn deviation_bump(t: f64) -> f64 {
    if (6.0..=18.0).contains(&t) {
        (PI * (t - 6.0) / 12.0).sin()
    } else {
        0.0
    }
}

/// `base` with agent `agent`'s intercept shifted by `eps · bump(t)`.
pub struct DeviatedPolicy<'a> {
    pub base: &'a dyn Policy,
    pub agent: usize,
    pub eps: f64,
    pub bump: fn(f64) -> f64,
}

impl Policy for DeviatedPolicy<'_> {
    fn n_agents(&self) -> usize {
        self.base.n_agents()
    }
    fn horizon(&self) -> f64 {
        self.base.horizon()
    }
    fn gains(&self, t: f64) -> Result<AffineGains> {
        let mut g = self.base.gains(t)?;
        g.c[self.agent] += self.eps * (self.bump)(t);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_noise, Curve, TimeGrid};
    use crate::riccati_general::{build_interaction, AgentBlock};
    use crate::scenarios::{baseline_market, sample_heterogeneous_market, sample_theta_market};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(m: &MarketModel) -> TimeGrid {
        TimeGrid::new(m.horizon, 6000)
    }

    #[test]
    fn price_examples() {
        let m = baseline_market(3);
        assert_eq!(price(&m, 30.0, &[0.0; 3]), vec![20.0; 3]);
        assert_eq!(price(&m, 50.0, &[0.0; 3]), vec![0.0; 3]);
        let t = sample_theta_market(2, 3);
        let base = price(&t, 30.0, &[0.1, -0.2, 0.3]);
        let bumped = price(&t, 30.0, &[0.1, -0.2 + 0.5, 0.3]);
        for i in 0..3 {
            let expect = t.agents[i].c1 * t.weights[i][1] * 0.5;
            assert!((bumped[i] - base[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cost_control_is_price_response() {
        let mut m = sample_theta_market(4, 3);
        for a in m.agents.iter_mut() {
            a.c3 = 0.0;
            a.c4 = 0.0;
            a.p_bar = 0.0;
            a.a = Curve::zero();
            a.b = Curve::zero();
        }
        let pol = solve_policy(&m, true).unwrap();
        let it = build_interaction(&m).unwrap();
        let q = 17.0;
        let s = [1.0, -2.0, 4.0];
        // at the horizon p(T)=0, so the control is the pure price response
        let v = nalgebra::DVector::from_fn(3, |i, _| m.agents[i].c1 / it.d[i]);
        let expect = &it.m * v * q;
        for i in 0..3 {
            assert!((control_general(&pol, i, 24.0, q, &s).unwrap() - expect[i]).abs() < 1e-12);
        }
        // controls never depend on the SOC when no SOC cost is present
        let a = pol.controls(3.0, q, &s).unwrap();
        let b = pol.controls(3.0, q, &[0.0; 3]).unwrap();
        for i in 0..3 {
            assert_eq!(a[i], b[i]);
            assert_eq!(value_general(&pol, i, 24.0, q, &s).unwrap(), 0.0);
        }
        let hom = solve_policy(&baseline_market(3), false).unwrap();
        assert!(matches!(control_homogeneous(&pol, 1.0, 0.0, 0.0, 0.0), Err(Error::NotApplicable(_))));
        assert!(control_homogeneous(&hom, 1.0, 20.0, 5.0, 10.0).is_ok());
    }

    #[test]
    fn terminal_value_examples() {
        let m = baseline_market(2);
        let pol = solve_policy(&m, true).unwrap();
        assert_eq!(value_general(&pol, 0, 24.0, 30.0, &[5.0, 7.0]).unwrap(), 0.0);
        assert!((value_general(&pol, 0, 24.0, 30.0, &[6.0, 7.0]).unwrap() - 100.0).abs() < 1e-9);
        assert!(matches!(pol.controls(24.5, 0.0, &[0.0; 2]), Err(Error::Domain { .. })));
    }

    #[test]
    fn symmetric_state_symmetric_controls() {
        let m = baseline_market(5);
        let pol = solve_policy(&m, false).unwrap();
        let a = pol.controls(7.3, 25.0, &[4.0; 5]).unwrap();
        assert!(a.iter().all(|x| (x - a[0]).abs() < 1e-12 * (1.0 + a[0].abs())));
        let g = pol.gains(7.3).unwrap();
        assert!(g.b[1] == g.b[2] && g.b[0] == g.b[6]);
    }

    #[test]
    fn permuted_model_permutes_controls() {
        let m = sample_heterogeneous_market(9, 3);
        let perm = [1usize, 2, 0];
        let mut mp = m.clone();
        mp.agents = perm.iter().map(|&j| m.agents[j].clone()).collect();
        let a = solve_policy(&m, true).unwrap();
        let b = solve_policy(&mp, true).unwrap();
        let s = [3.0, 5.5, 6.0];
        let sp: Vec<f64> = perm.iter().map(|&j| s[j]).collect();
        let x = a.controls(11.0, 26.0, &s).unwrap();
        let y = b.controls(11.0, 26.0, &sp).unwrap();
        for (ip, &i) in perm.iter().enumerate() {
            assert!((x[i] - y[ip]).abs() < 1e-9);
        }
    }

    /// Per-agent Hamiltonian terms at a state, given the agent's block.
    fn hjb_parts(m: &MarketModel, blk: &AgentBlock, i: usize, t: f64, q: f64, s: &[f64], alpha: &[f64]) -> (f64, f64) {
        let n = m.n_agents();
        let sv = nalgebra::DVector::from_column_slice(s);
        let vq = 2.0 * blk.p0 * q + 2.0 * blk.p.dot(&sv) + blk.r0;
        let vs = 2.0 * &blk.p * q + 2.0 * &blk.p_mat * &sv + &blk.r;
        let mut drift = m.kappa * (m.theta.at(t) - q) * vq;
        for j in 0..n {
            let ag = &m.agents[j];
            drift += (ag.a.at(t) + ag.b.at(t) * q + alpha[j]) * vs[j];
        }
        let cov = build_noise(m).covariance();
        let mut hess = nalgebra::DMatrix::zeros(n + 1, n + 1);
        hess[(0, 0)] = blk.p0;
        for j in 0..n {
            hess[(0, j + 1)] = blk.p[j];
            hess[(j + 1, 0)] = blk.p[j];
            for l in 0..n {
                hess[(j + 1, l + 1)] = blk.p_mat[(j, l)];
            }
        }
        let trace = (&cov * hess).trace();
        let ag = &m.agents[i];
        let p = price(m, q, alpha)[i];
        let run = p * alpha[i] + ag.c2 * alpha[i] * alpha[i] + ag.c3 * (s[i] - ag.zeta.at(t)).powi(2);
        // first-order condition in the agent's own control
        let foc = vs[i] + p + ag.c1 * m.weights[i][i] * alpha[i] + 2.0 * ag.c2 * alpha[i];
        (drift + trace + run, foc)
    }

    #[test]
    fn hjb_residual_and_first_order_condition() {
        for m in [sample_heterogeneous_market(21, 3), sample_theta_market(5, 3)] {
            let g = TimeGrid::new(m.horizon, 24000);
            let sol = solve_general(&m, g, SolveOptions { store_every: Some(1), keep_blocks: Some(true), p_only: false })
                .unwrap();
            let pol = FeedbackPolicy::general(&m, sol);
            let PolicySource::General(sol) = &pol.source else { unreachable!() };
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let h = g.dt();
            for _ in 0..25 {
                let k = rng.gen_range(10..20000usize);
                let t = g.node(k);
                let q = rng.gen_range(15.0..45.0);
                let s: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..10.0)).collect();
                let alpha = pol.controls(t, q, &s).unwrap();
                for i in 0..3 {
                    let v = sol.block(k, i).unwrap().value(q, &s);
                    let dv = (sol.block(k + 1, i).unwrap().value(q, &s) - sol.block(k - 1, i).unwrap().value(q, &s))
                        / (2.0 * h);
                    let (ham, foc) = hjb_parts(&m, &sol.block(k, i).unwrap(), i, t, q, &s, &alpha);
                    let resid = dv + ham;
                    assert!(resid.abs() <= 1e-5 * (1.0 + v.abs()), "residual {resid} at t={t}, V={v}");
                    assert!(foc.abs() <= 1e-8 * (1.0 + ham.abs()).max(1.0), "foc {foc}");
                }
            }
        }
    }

    #[test]
    fn deviation_shifts_only_one_agent() {
        let m = baseline_market(3);
        let pol = solve_policy(&m, false).unwrap();
        let dev = DeviatedPolicy { base: &pol, agent: 0, eps: 0.5, bump: deviation_bump };
        let a = pol.gains(12.0).unwrap();
        let b = dev.gains(12.0).unwrap();
        assert!((b.c[0] - a.c[0] - 0.5).abs() < 1e-12);
        assert_eq!(a.c[1], b.c[1]);
        assert_eq!(dev.gains(3.0).unwrap(), pol.gains(3.0).unwrap());
        assert!(hamiltonian_is_convex(&m));
        let _ = grid(&m);
    }
}

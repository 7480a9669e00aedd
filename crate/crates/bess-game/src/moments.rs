//! Closed-form means and (co)variances of the homogeneous equilibrium.
//!
//! Every quantity solves a scalar linear ODE `x' = λ(t) x + f(t)`. Rather
//! than forming `exp(∫λ)` globally, which overflows once the SOC feedback
//! gets strong near `T`, the variation-of-constants integral is accumulated
//! over Simpson pairs using only local exponentials.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AgentParams, MarketModel, TimeGrid};
use crate::numerics::cumulative_integral;
use crate::riccati_homogeneous::{solve_homogeneous, HomogeneousSolution};

/// Solve `x' = rate·x + forcing`, `x(0) = x0`, on a uniform grid.
pub fn linear_flow(rate: &[f64], forcing: &[f64], h: f64, x0: f64) -> Vec<f64> {
    let n = rate.len();
    let mut x = vec![0.0; n];
    if n == 0 {
        return x;
    }
    x[0] = x0;
    let g = cumulative_integral(rate, h);
    for k in 1..n {
        if k % 2 == 0 {
            let e = |j: usize| (g[k] - g[j]).exp();
            x[k] = e(k - 2) * x[k - 2] + h / 3.0 * (e(k - 2) * forcing[k - 2] + 4.0 * e(k - 1) * forcing[k - 1] + forcing[k]);
        } else if k + 1 < n {
            // one cell with the three-point rule through the next node
            let e = |j: usize| (g[k] - g[j]).exp();
            x[k] = e(k - 1) * x[k - 1] + h / 12.0 * (5.0 * e(k - 1) * forcing[k - 1] + 8.0 * forcing[k] - e(k + 1) * forcing[k + 1]);
        } else {
            let e = (g[k] - g[k - 1]).exp();
            x[k] = e * x[k - 1] + 0.5 * h * (e * forcing[k - 1] + forcing[k]);
        }
    }
    x
}

/// Expected trajectories, identical for every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCurves {
    pub grid: TimeGrid,
    pub mean_q: Vec<f64>,
    /// `m_S`.
    pub mean_s: Vec<f64>,
    pub mean_alpha: Vec<f64>,
    pub mean_price: Vec<f64>,
}

/// Variances and the Q/S̄ covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceCurves {
    pub grid: TimeGrid,
    pub var_q: Vec<f64>,
    pub cov_q_sbar: Vec<f64>,
    pub var_sbar: Vec<f64>,
    /// `Var(S_i − S̄)`.
    pub var_dev: Vec<f64>,
    pub var_alpha: Vec<f64>,
    pub var_price: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentCurves {
    pub means: MeanCurves,
    pub vars: VarianceCurves,
}

/// Node-wise inputs shared by both passes.
struct Inputs {
    n: f64,
    h: f64,
    g1: Vec<f64>,
    g_tilde: Vec<f64>,
    g_dev: Vec<f64>,
    g4: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn inputs(sol: &HomogeneousSolution) -> Inputs {
    let grid = sol.grid;
    let n = sol.n_agents as f64;
    let gs: Vec<_> = (0..grid.n_nodes()).map(|k| sol.g_at_node(k)).collect();
    let nodes = grid.nodes();
    Inputs {
        n,
        h: grid.dt(),
        g1: gs.iter().map(|g| g.g1).collect(),
        g_tilde: gs.iter().map(|g| g.g_tilde(n)).collect(),
        g_dev: gs.iter().map(|g| g.g2 - g.g3).collect(),
        g4: gs.iter().map(|g| g.g4).collect(),
        a: nodes.iter().map(|&t| sol.agent.a.at(t)).collect(),
        b: nodes.iter().map(|&t| sol.agent.b.at(t)).collect(),
    }
}

fn check(model: &MarketModel, sol: &HomogeneousSolution) -> Result<()> {
    if !model.is_homogeneous() {
        return Err(Error::NotHomogeneous);
    }
    if model.n_agents() != sol.n_agents {
        return Err(Error::AgentMismatch { model: model.n_agents(), policy: sol.n_agents });
    }
    Ok(())
}

/// `E[Q]`, `m_S`, `E[α̂]` and `E[P̂]` on the solution grid.
pub fn analytic_means(model: &MarketModel, sol: &HomogeneousSolution) -> Result<MeanCurves> {
    check(model, sol)?;
    Ok(means_from(model, &sol.agent, &inputs(sol), sol.grid))
}

fn means_from(model: &MarketModel, ag: &AgentParams, x: &Inputs, grid: TimeGrid) -> MeanCurves {
    let nodes = grid.nodes();
    let kappa_theta: Vec<f64> = nodes.iter().map(|&t| model.kappa * model.theta.at(t)).collect();
    let mean_q = linear_flow(&vec![-model.kappa; nodes.len()], &kappa_theta, x.h, model.q0);
    let drift: Vec<f64> = (0..nodes.len()).map(|k| (x.g1[k] + x.b[k]) * mean_q[k] + x.g4[k] + x.a[k]).collect();
    let mean_s = linear_flow(&x.g_tilde, &drift, x.h, ag.s0);
    let mean_alpha: Vec<f64> = (0..nodes.len()).map(|k| x.g1[k] * mean_q[k] + x.g_tilde[k] * mean_s[k] + x.g4[k]).collect();
    let mean_price: Vec<f64> = (0..nodes.len())
        .map(|k| ag.p_bar + ag.c1 * ((x.n * x.g1[k] - 1.0) * mean_q[k] + x.n * x.g_tilde[k] * mean_s[k] + x.n * x.g4[k]))
        .collect();
    MeanCurves { grid, mean_q, mean_s, mean_alpha, mean_price }
}

/// Variance parts, including the idiosyncratic `(1 − 1/N)` term of `Var(α̂)`.
pub fn analytic_second_moments(model: &MarketModel, sol: &HomogeneousSolution) -> Result<VarianceCurves> {
    check(model, sol)?;
    Ok(vars_from(model, &sol.agent, &inputs(sol), sol.grid))
}

fn vars_from(model: &MarketModel, ag: &AgentParams, x: &Inputs, grid: TimeGrid) -> VarianceCurves {
    let len = grid.n_nodes();
    let k2 = 2.0 * model.kappa;
    let s0sq = model.sigma0 * model.sigma0;
    let var_q: Vec<f64> = grid.nodes().iter().map(|&t| s0sq * (-(-k2 * t).exp_m1()) / k2).collect();
    let feedback: Vec<f64> = (0..len).map(|k| x.b[k] + x.g1[k]).collect();

    let rate_c: Vec<f64> = x.g_tilde.iter().map(|g| g - model.kappa).collect();
    let f_c: Vec<f64> = (0..len).map(|k| feedback[k] * var_q[k] + ag.rho * ag.sigma * model.sigma0).collect();
    let cov_q_sbar = linear_flow(&rate_c, &f_c, x.h, 0.0);

    let common = ag.rho * ag.rho * ag.sigma * ag.sigma;
    let idio = (1.0 - ag.rho * ag.rho) * ag.sigma * ag.sigma;
    let rate_v: Vec<f64> = x.g_tilde.iter().map(|g| 2.0 * g).collect();
    let f_v: Vec<f64> = (0..len).map(|k| 2.0 * feedback[k] * cov_q_sbar[k] + common + idio / x.n).collect();
    let var_sbar = linear_flow(&rate_v, &f_v, x.h, 0.0);

    let rate_d: Vec<f64> = x.g_dev.iter().map(|g| 2.0 * g).collect();
    let dev_unit = linear_flow(&rate_d, &vec![1.0; len], x.h, 0.0);
    let var_dev: Vec<f64> = dev_unit.iter().map(|v| idio * (1.0 - 1.0 / x.n) * v).collect();

    let var_alpha: Vec<f64> = (0..len)
        .map(|k| {
            let (g1, gt) = (x.g1[k], x.g_tilde[k]);
            g1 * g1 * var_q[k] + gt * gt * var_sbar[k] + 2.0 * g1 * gt * cov_q_sbar[k] + x.g_dev[k].powi(2) * var_dev[k]
        })
        .collect();
    let c1sq = ag.c1 * ag.c1;
    let var_price: Vec<f64> = (0..len)
        .map(|k| {
            let lead = 1.0 - x.n * x.g1[k];
            let gt = x.g_tilde[k];
            c1sq * lead * lead * var_q[k] + x.n * x.n * c1sq * gt * gt * var_sbar[k] - 2.0 * x.n * c1sq * lead * gt * cov_q_sbar[k]
        })
        .collect();
    VarianceCurves { grid, var_q, cov_q_sbar, var_sbar, var_dev, var_alpha, var_price }
}

pub fn analytic_moments(model: &MarketModel, sol: &HomogeneousSolution) -> Result<MomentCurves> {
    Ok(MomentCurves { means: analytic_means(model, sol)?, vars: analytic_second_moments(model, sol)? })
}

impl MomentCurves {
    pub fn grid(&self) -> TimeGrid {
        self.means.grid
    }

    /// Named curves in output order.
    pub fn named(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("mean_Q", &self.means.mean_q),
            ("mean_S", &self.means.mean_s),
            ("mean_alpha", &self.means.mean_alpha),
            ("mean_price", &self.means.mean_price),
            ("V_Q", &self.vars.var_q),
            ("C_QSbar", &self.vars.cov_q_sbar),
            ("V_Sbar", &self.vars.var_sbar),
            ("var_alpha", &self.vars.var_alpha),
            ("var_price", &self.vars.var_price),
        ]
    }

    /// Node index closest to `t`.
    pub fn node_of(&self, t: f64) -> usize {
        let g = self.grid();
        ((t / g.dt()).round() as usize).min(g.n_steps)
    }
}

/// `(t, quantity, value)` in long format.
pub fn write_moments_csv(m: &MomentCurves, out: &Path, stride: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["t", "quantity", "value"])?;
    let g = m.grid();
    for (name, curve) in m.named() {
        for k in (0..g.n_nodes()).step_by(stride.max(1)) {
            w.write_record([g.node(k).to_string(), name.to_string(), curve[k].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Analytic standard deviations at one correlation level.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoRow {
    pub rho: f64,
    /// Time-averaged `Std(α̂)` and `Std(P̂)` over the horizon.
    pub avg_std_alpha: f64,
    pub avg_std_price: f64,
    /// `(t, Std(α̂_t), Std(P̂_t))` at the requested times.
    pub at_times: Vec<(f64, f64, f64)>,
    pub means: MeanCurves,
}

/// Re-solve the market at each `ρ` and report the analytic dispersion.
pub fn rho_sensitivity_report(model: &MarketModel, grid: TimeGrid, rho_values: &[f64], times: &[f64]) -> Result<Vec<RhoRow>> {
    rho_values
        .iter()
        .map(|&rho| {
            let mut m = model.clone();
            m.agents.iter_mut().for_each(|a| a.rho = rho);
            let sol = solve_homogeneous(&m, grid)?;
            let mc = analytic_moments(&m, &sol)?;
            let std_a: Vec<f64> = mc.vars.var_alpha.iter().map(|v| v.max(0.0).sqrt()).collect();
            let std_p: Vec<f64> = mc.vars.var_price.iter().map(|v| v.max(0.0).sqrt()).collect();
            let avg = |x: &[f64]| crate::numerics::simpson(x, grid.dt()) / grid.horizon;
            Ok(RhoRow {
                rho,
                avg_std_alpha: avg(&std_a),
                avg_std_price: avg(&std_p),
                at_times: times.iter().map(|&t| (t, std_a[mc.node_of(t)], std_p[mc.node_of(t)])).collect(),
                means: mc.means,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Curve;
    use crate::scenarios::baseline_market;

    fn grid() -> TimeGrid {
        TimeGrid::new(24.0, 24_000)
    }

    fn baseline(n: usize) -> (MarketModel, HomogeneousSolution) {
        let m = baseline_market(n);
        let sol = solve_homogeneous(&m, grid()).unwrap();
        (m, sol)
    }

    #[test]
    fn linear_flow_matches_closed_forms() {
        let g = TimeGrid::new(2.0, 2000);
        let t = g.nodes();
        // x' = −3x + 1, x(0)=2
        let x = linear_flow(&vec![-3.0; t.len()], &vec![1.0; t.len()], g.dt(), 2.0);
        for (k, &s) in t.iter().enumerate() {
            let exact = 1.0 / 3.0 + (2.0 - 1.0 / 3.0) * (-3.0 * s).exp();
            assert!((x[k] - exact).abs() < 1e-10, "{k}");
        }
        // x' = 2t x, x(0)=1 → exp(t²); stiff-ish negative variant too
        let rate: Vec<f64> = t.iter().map(|s| -300.0 * s).collect();
        let y = linear_flow(&rate, &vec![0.0; t.len()], g.dt(), 1.0);
        for (k, &s) in t.iter().enumerate().step_by(37) {
            let exact = (-150.0 * s * s).exp();
            assert!((y[k] - exact).abs() < 1e-7, "{k}: {} {exact}", y[k]);
        }
    }

    #[test]
    fn ou_mean_and_variance() {
        let mut m = baseline_market(2);
        m.theta = Curve::constant(30.0);
        m.q0 = 30.0;
        let sol = solve_homogeneous(&m, grid()).unwrap();
        let mc = analytic_moments(&m, &sol).unwrap();
        assert!(mc.means.mean_q.iter().all(|q| (q - 30.0).abs() < 1e-9));
        m.q0 = 20.0;
        let mean = analytic_means(&m, &sol).unwrap();
        let k = mc.node_of(0.2);
        assert!((mean.mean_q[k] - (30.0 - 10.0 * (-1.0f64).exp())).abs() < 1e-9);
        assert!((mc.vars.var_q.last().unwrap() - 2.5).abs() < 1e-9);
    }

    fn zeroed_inputs(sol: &HomogeneousSolution) -> Inputs {
        let mut x = inputs(sol);
        for v in [&mut x.g1, &mut x.g_tilde, &mut x.g_dev, &mut x.g4, &mut x.a, &mut x.b] {
            v.iter_mut().for_each(|g| *g = 0.0);
        }
        x
    }

    #[test]
    fn zero_policy_keeps_mean_soc() {
        let (m, sol) = baseline(3);
        let mean = means_from(&m, &sol.agent, &zeroed_inputs(&sol), sol.grid);
        assert!(mean.mean_s.iter().all(|s| *s == 5.0));
    }

    #[test]
    fn decoupled_noise_has_zero_covariance() {
        let (m, mut sol) = baseline(3);
        sol.agent.rho = 0.0;
        let v = vars_from(&m, &sol.agent, &zeroed_inputs(&sol), sol.grid);
        assert!(v.cov_q_sbar.iter().all(|c| *c == 0.0));
        // pure Brownian S̄ with variance σ²t/N
        let t = sol.grid.horizon;
        assert!((v.var_sbar.last().unwrap() - 0.25 * t / 3.0).abs() < 1e-9);
    }

    #[test]
    fn mean_soc_satisfies_its_ode() {
        let (m, sol) = baseline(8);
        let mean = analytic_means(&m, &sol).unwrap();
        let x = inputs(&sol);
        let h = x.h;
        let mut worst: f64 = 0.0;
        for k in (1..sol.grid.n_steps).step_by(7) {
            let deriv = (mean.mean_s[k + 1] - mean.mean_s[k - 1]) / (2.0 * h);
            let rhs = x.g_tilde[k] * mean.mean_s[k] + (x.g1[k] + x.b[k]) * mean.mean_q[k] + x.g4[k] + x.a[k];
            worst = worst.max((deriv - rhs).abs() / (1.0 + rhs.abs()));
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn var_sbar_matches_rk4_of_its_ode() {
        // fine grid: the RK4 reference takes steps of 2h through a rate near −600
        let m = baseline_market(8);
        let sol = solve_homogeneous(&m, TimeGrid::new(24.0, 48_000)).unwrap();
        let v = analytic_second_moments(&m, &sol).unwrap();
        let x = inputs(&sol);
        let ag = &sol.agent;
        let f = |k: usize, y: [f64; 2]| -> [f64; 2] {
            let fb = x.b[k] + x.g1[k];
            let dc = (x.g_tilde[k] - m.kappa) * y[0] + fb * v.var_q[k] + ag.rho * ag.sigma * m.sigma0;
            let dv = 2.0 * x.g_tilde[k] * y[1]
                + 2.0 * fb * y[0]
                + ag.rho.powi(2) * ag.sigma.powi(2)
                + (1.0 - ag.rho.powi(2)) * ag.sigma.powi(2) / x.n;
            [dc, dv]
        };
        // RK4 with step 2h: midpoints fall on odd nodes
        let h2 = 2.0 * x.h;
        let mut y = [0.0, 0.0];
        let scale = v.var_sbar.iter().chain(&v.cov_q_sbar).fold(0.0f64, |a, x| a.max(x.abs()));
        let mut worst: f64 = 0.0;
        for k in (0..sol.grid.n_steps).step_by(2) {
            let k1 = f(k, y);
            let k2 = f(k + 1, [y[0] + 0.5 * h2 * k1[0], y[1] + 0.5 * h2 * k1[1]]);
            let k3 = f(k + 1, [y[0] + 0.5 * h2 * k2[0], y[1] + 0.5 * h2 * k2[1]]);
            let k4 = f(k + 2, [y[0] + h2 * k3[0], y[1] + h2 * k3[1]]);
            for j in 0..2 {
                y[j] += h2 / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            worst = worst.max((y[1] - v.var_sbar[k + 2]).abs()).max((y[0] - v.cov_q_sbar[k + 2]).abs());
        }
        assert!(worst < 1e-8 * scale.max(1.0), "{worst} {scale}");
    }

    #[test]
    fn variances_nonnegative_and_price_identity() {
        let (m, sol) = baseline(8);
        let v = analytic_second_moments(&m, &sol).unwrap();
        let x = inputs(&sol);
        for k in 0..sol.grid.n_nodes() {
            for val in [v.var_q[k], v.var_sbar[k], v.var_alpha[k], v.var_price[k], v.var_dev[k]] {
                assert!(val >= -1e-12);
            }
            // Var(P) = c1² Var(Q − Σα) with Σα = N g1 Q + N g̃ S̄ + N g4
            let (a_q, a_s) = (1.0 - x.n * x.g1[k], -x.n * x.g_tilde[k]);
            let direct = a_q * a_q * v.var_q[k] + a_s * a_s * v.var_sbar[k] + 2.0 * a_q * a_s * v.cov_q_sbar[k];
            assert!((v.var_price[k] - direct).abs() <= 1e-8 * (1.0 + direct));
        }
    }

    #[test]
    fn means_invariant_in_sigma_and_rho() {
        let (m, sol) = baseline(8);
        let base = analytic_means(&m, &sol).unwrap();
        let mut m2 = m.clone();
        m2.agents.iter_mut().for_each(|a| {
            a.sigma = 1.7;
            a.rho = 0.1
        });
        let sol2 = solve_homogeneous(&m2, grid()).unwrap();
        assert_eq!(analytic_means(&m2, &sol2).unwrap(), base);
    }

    #[test]
    fn noiseless_agents_have_no_idiosyncratic_term() {
        let (mut m, _) = baseline(4);
        m.agents.iter_mut().for_each(|a| a.sigma = 0.0);
        let sol = solve_homogeneous(&m, grid()).unwrap();
        let v = analytic_second_moments(&m, &sol).unwrap();
        assert!(v.var_dev.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn rho_trend() {
        let m = baseline_market(8);
        let rows = rho_sensitivity_report(&m, grid(), &[0.0, 0.3, 0.6, 0.9], &[12.0]).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].avg_std_alpha < w[0].avg_std_alpha);
            assert!(w[1].avg_std_price > w[0].avg_std_price);
            assert_eq!(w[0].means, w[1].means);
        }
    }
}

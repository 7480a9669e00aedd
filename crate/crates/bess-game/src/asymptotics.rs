//! Large-market expansion in `ε = 1/N` for identical operators.
//!
//! Leading-order coefficients have closed forms or single quadratures; the
//! first-order pair `(p4¹, p5¹)` is integrated numerically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::equilibrium::AffineGains;
use crate::error::{Error, Result};
use crate::model::{AgentParams, Curve, MarketModel, TimeGrid};
use crate::numerics::{cumulative_integral_to_end, discounted_integral_to_end, Stencil};
use crate::riccati_homogeneous::{solve_homogeneous, ReducedSystem};
use crate::scenarios;

/// Scalar parameters the expansion depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionParams {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub p_bar: f64,
    pub horizon: f64,
}

impl ExpansionParams {
    pub fn from_agent(ag: &AgentParams, horizon: f64) -> Self {
        ExpansionParams { c1: ag.c1, c2: ag.c2, c3: ag.c3, c4: ag.c4, p_bar: ag.p_bar, horizon }
    }

    pub fn d(&self) -> f64 {
        self.c1 + 2.0 * self.c2
    }

    /// Decay coefficient `(4d − 4c2)/d²` of the leading-order Riccati equation.
    pub fn decay(&self) -> f64 {
        let d = self.d();
        4.0 * (d - self.c2) / (d * d)
    }

    /// `c3 (T − t) + c4`.
    pub fn linear_cost(&self, t: f64) -> f64 {
        self.c3 * (self.horizon - t) + self.c4
    }
}

/// Closed-form leading-order own-SOC coefficient.
pub fn p4_leading(par: &ExpansionParams, t: f64) -> f64 {
    let a = par.decay();
    assert!(a > 0.0, "4d − 4c2 must be positive");
    let tau = par.horizon - t;
    let k = (par.c3 / a).sqrt();
    // tanh(A k τ)/k, continuous as c3 → 0
    let r = if k > 0.0 { (a * k * tau).tanh() / k } else { a * tau };
    (par.c4 + k * k * r) / (1.0 + par.c4 * r)
}

/// Right-hand side in reversed time of `(p4⁰, p4¹, p5¹)`.
fn first_order_rhs(par: &ExpansionParams, y: [f64; 3]) -> [f64; 3] {
    let d = par.d();
    let s = par.c1 + par.c2;
    let [p40, p41, p51] = y;
    let dp40 = par.c3 - 4.0 * s / (d * d) * p40 * p40;
    let dp41 = 8.0 * s / (d * d) * p40 * p40 - 8.0 * s / (d * d) * p40 * p41
        + (12.0 * par.c1 + 16.0 * par.c2) / (d * d) * p40 * p51;
    let dp51 = 4.0 * s / (d * d) * p40 * p40;
    [dp40, dp41, dp51]
}

/// RK4 in reversed time on `grid` with `substeps` internal steps per cell.
/// Returns `(p4⁰, p4¹, p5¹)` at every node.
pub fn integrate_first_order(par: &ExpansionParams, grid: TimeGrid, substeps: usize) -> Vec<[f64; 3]> {
    let n = grid.n_steps;
    let h = grid.dt() / substeps as f64;
    let mut y = [par.c4, 0.0, 0.0];
    let mut out = vec![[0.0; 3]; n + 1];
    out[n] = y;
    let add = |y: &[f64; 3], k: &[f64; 3], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
    for step in 0..n {
        for _ in 0..substeps {
            let k1 = first_order_rhs(par, y);
            let k2 = first_order_rhs(par, add(&y, &k1, 0.5 * h));
            let k3 = first_order_rhs(par, add(&y, &k2, 0.5 * h));
            let k4 = first_order_rhs(par, add(&y, &k3, h));
            for j in 0..3 {
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        out[n - step - 1] = y;
    }
    out
}

/// Expansion coefficients tabulated on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionCoeffs {
    pub grid: TimeGrid,
    pub params: ExpansionParams,
    pub p2_0: Vec<f64>,
    pub p4_0: Vec<f64>,
    pub r2_0: Vec<f64>,
    pub p4_1: Vec<f64>,
    pub p5_1: Vec<f64>,
}

/// Internal RK4 substeps per grid cell for the first-order pair.
pub const FIRST_ORDER_SUBSTEPS: usize = 100;

pub fn expansion_coeffs(model: &MarketModel, grid: TimeGrid) -> Result<ExpansionCoeffs> {
    if !model.is_homogeneous() {
        return Err(Error::NotHomogeneous);
    }
    let ag = &model.agents[0];
    let par = ExpansionParams::from_agent(ag, model.horizon);
    let nodes = grid.nodes();
    let h = grid.dt();
    let big_t = model.horizon;
    let kap = model.kappa;

    // p2⁰(t) = ∫_t^T e^{−κ(s−t)} (c3(T−s)+c4) b(s) ds
    let forcing: Vec<f64> = nodes.iter().map(|&s| par.linear_cost(s) * ag.b.at(s)).collect();
    let p2_0 = discounted_integral_to_end(&forcing, h, kap);

    // the inner integral of the double integral is p2⁰ itself
    let src: Vec<f64> = nodes
        .iter()
        .zip(&p2_0)
        .map(|(&s, &p2)| par.linear_cost(s) * ag.a.at(s) - par.c3 * ag.zeta.at(s) + kap * model.theta.at(s) * p2)
        .collect();
    let zt = ag.zeta.at(big_t);
    let r2_0: Vec<f64> = cumulative_integral_to_end(&src, h).iter().map(|x| 2.0 * x - 2.0 * par.c4 * zt).collect();

    let first = integrate_first_order(&par, grid, FIRST_ORDER_SUBSTEPS);
    Ok(ExpansionCoeffs {
        grid,
        p4_0: nodes.iter().map(|&t| p4_leading(&par, t)).collect(),
        p4_1: first.iter().map(|y| y[1]).collect(),
        p5_1: first.iter().map(|y| y[2]).collect(),
        p2_0,
        r2_0,
        params: par,
    })
}

/// Coefficients at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionPoint {
    pub p2_0: f64,
    pub p4_0: f64,
    pub r2_0: f64,
    pub p4_1: f64,
    pub p5_1: f64,
}

impl ExpansionCoeffs {
    pub fn at(&self, t: f64) -> Result<ExpansionPoint> {
        let horizon = self.grid.horizon;
        if !(-1e-12..=horizon + 1e-12).contains(&t) {
            return Err(Error::Domain { t, horizon });
        }
        let st = Stencil::new(t.clamp(0.0, horizon), self.grid.dt(), self.grid.n_steps);
        Ok(ExpansionPoint {
            p2_0: st.apply(&self.p2_0),
            p4_0: st.apply(&self.p4_0),
            r2_0: st.apply(&self.r2_0),
            p4_1: st.apply(&self.p4_1),
            p5_1: st.apply(&self.p5_1),
        })
    }

    /// Largest deviation from `p4⁰ + p5¹ = c3(T − t) + c4` over the grid.
    pub fn identity_defect(&self) -> f64 {
        self.grid
            .nodes()
            .iter()
            .enumerate()
            .map(|(k, &t)| (self.p4_0[k] + self.p5_1[k] - self.params.linear_cost(t)).abs())
            .fold(0.0, f64::max)
    }
}

/// Affine gains of the expansion truncated after `ε^order`.
pub fn expansion_gains(coeffs: &ExpansionCoeffs, t: f64, n: usize, order: usize) -> Result<AffineGains> {
    let x = coeffs.at(t)?;
    let par = &coeffs.params;
    let (c1, d) = (par.c1, par.d());
    let eps = 1.0 / n as f64;
    let mut g = AffineGains::zeros(n);
    // (2/d) p4⁰ (s̄ − s_i)
    let lead = 2.0 / d * x.p4_0;
    let mut diag = -lead + lead * eps;
    let mut off = lead * eps;
    let (mut a, mut c) = (0.0, 0.0);
    if order >= 1 {
        a = eps * (1.0 - 2.0 * x.p2_0 / c1);
        diag += eps * 2.0 / d * (x.p5_1 - x.p4_1);
        c = -eps * (x.r2_0 + par.p_bar) / c1;
    }
    if order >= 2 {
        off += eps * eps * (2.0 / d * x.p4_1 - 2.0 * (c1 + d) / (d * c1) * x.p5_1 - 2.0 / c1 * x.p4_0);
    }
    for i in 0..n {
        g.a[i] = a;
        g.c[i] = c;
        for j in 0..n {
            g.b[i * n + j] = if i == j { diag } else { off };
        }
    }
    Ok(g)
}

/// Individual control from the three-term expansion.
pub fn control_expansion(coeffs: &ExpansionCoeffs, t: f64, q: f64, s_i: f64, s_bar: f64, sum_others: f64, n: usize) -> Result<f64> {
    let x = coeffs.at(t)?;
    let par = &coeffs.params;
    let (c1, d) = (par.c1, par.d());
    let eps = 1.0 / n as f64;
    Ok(2.0 / d * x.p4_0 * (s_bar - s_i)
        + eps * ((1.0 - 2.0 * x.p2_0 / c1) * q + 2.0 / d * (x.p5_1 - x.p4_1) * s_i - (x.r2_0 + par.p_bar) / c1)
        + eps * eps * (2.0 / d * x.p4_1 - 2.0 * (c1 + d) / (d * c1) * x.p5_1 - 2.0 / c1 * x.p4_0) * sum_others)
}

/// Leading-order aggregate control `Σ α_i`.
pub fn aggregate_control_expansion(coeffs: &ExpansionCoeffs, t: f64, q: f64, s_bar: f64) -> Result<f64> {
    let x = coeffs.at(t)?;
    let par = &coeffs.params;
    let c1 = par.c1;
    Ok((1.0 - 2.0 * x.p2_0 / c1) * q - 2.0 / c1 * par.linear_cost(t) * s_bar - (x.r2_0 + par.p_bar) / c1)
}

/// Leading-order equilibrium price.
pub fn price_expansion(coeffs: &ExpansionCoeffs, t: f64, q: f64, s_bar: f64) -> Result<f64> {
    let x = coeffs.at(t)?;
    Ok(-2.0 * x.p2_0 * q - 2.0 * coeffs.params.linear_cost(t) * s_bar - x.r2_0)
}

/// `max_t |N(p̃4(t; N) − p4⁰(t)) − p4¹(t)| / max_t |p4¹(t)|`.
pub fn richardson_error(model: &MarketModel, grid: TimeGrid) -> Result<f64> {
    let sol = solve_homogeneous(model, grid)?;
    let ex = expansion_coeffs(model, grid)?;
    let n = model.n_agents() as f64;
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for k in 0..=grid.n_steps {
        let scaled = n * (sol.coeffs[k][3] - ex.p4_0[k]);
        num = num.max((scaled - ex.p4_1[k]).abs());
        den = den.max(ex.p4_1[k].abs());
    }
    Ok(num / den)
}

/// Fitted `ε⁰` coefficient of a reduced coefficient across market sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroCertificate {
    pub name: &'static str,
    /// max over t of |fitted intercept|.
    pub intercept: f64,
    /// max over t and N of |coefficient|, for scale.
    pub scale: f64,
}

/// Fit `x(t; N) ≈ A(t) + B(t)/N + C(t)/N²` by least squares for the
/// coefficients whose leading order vanishes.
pub fn zero_certificates(model: &MarketModel, grid: TimeGrid, sizes: &[usize]) -> Result<Vec<ZeroCertificate>> {
    if !model.is_homogeneous() {
        return Err(Error::NotHomogeneous);
    }
    let sys = ReducedSystem::new(model);
    let runs: Vec<Vec<[f64; 11]>> = sizes
        .par_iter()
        .map(|&n| sys.with_n(n).integrate(grid))
        .collect::<Result<Vec<_>>>()?;
    let design = nalgebra::DMatrix::from_fn(sizes.len(), 3, |r, c| (1.0 / sizes[r] as f64).powi(c as i32));
    let pinv = design.clone().pseudo_inverse(1e-14).map_err(|e| Error::NotApplicable(e.to_string()))?;
    let picks: [(&str, usize); 5] = [("p3", 2), ("p5", 4), ("p6", 5), ("p7", 6), ("r3", 9)];
    Ok(picks
        .iter()
        .map(|&(name, j)| {
            let mut intercept: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for k in 0..=grid.n_steps {
                let y = nalgebra::DVector::from_fn(sizes.len(), |r, _| runs[r][k][j]);
                scale = scale.max(y.amax());
                intercept = intercept.max((pinv.row(0) * &y)[0].abs());
            }
            ZeroCertificate { name, intercept, scale }
        })
        .collect())
}

/// Arbitrageur market in which the 1/N regime is already visible for
/// moderate N: weak SOC penalties and supply centred on the price zero.
pub fn l2_test_market(n: usize) -> MarketModel {
    let agent = AgentParams {
        a: Curve::zero(),
        b: Curve::zero(),
        sigma: 0.5,
        rho: 0.6,
        p_bar: 30.0,
        c1: 1.0,
        c2: 0.1,
        c3: 0.001,
        c4: 0.01,
        zeta: Curve::constant(5.0),
        s0: 5.0,
    };
    let mut m = scenarios::arbitrageur_market(n);
    m.agents = vec![agent; n];
    m.theta = Curve::constant(30.0);
    m.q0 = 30.0;
    m.sigma0 = 1.0;
    m
}

/// One market size in the L² convergence study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Point {
    pub n: usize,
    pub l2_gap: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2Report {
    pub points: Vec<L2Point>,
    /// Least-squares slope of log gap against log N.
    pub slope: f64,
}

/// Mean squared gap between the average SOC under the exact equilibrium and
/// its limit process, driven by the same common noise, for each size in
/// `build(n)`.
pub fn bar_s_limit_check(
    build: &(dyn Fn(usize) -> MarketModel + Sync),
    sizes: &[usize],
    n_paths: usize,
    seed: u64,
) -> Result<L2Report> {
    let mut points = Vec::new();
    for &n in sizes {
        let model = build(n);
        if !model.is_homogeneous() {
            return Err(Error::NotHomogeneous);
        }
        let sol = solve_homogeneous(&model, model.riccati_grid())?;
        let sim = model.sim_grid();
        let gains: Vec<_> = (0..=sim.n_steps).map(|k| sol.g_functions(sim.node(k))).collect::<Result<_>>()?;
        let ag = &model.agents[0];
        let dt = sim.dt();
        let sq = dt.sqrt();
        let idio = ag.sigma * (1.0 - ag.rho * ag.rho).max(0.0).sqrt();
        let gaps: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                // common-noise stream keyed by path only, so sizes are coupled
                let mut common = ChaCha8Rng::seed_from_u64(seed);
                common.set_stream(p as u64);
                let mut own = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                own.set_stream(p as u64);
                let mut q = model.q0;
                let mut s = vec![ag.s0; n];
                let mut s_lim = ag.s0;
                for k in 0..sim.n_steps {
                    let t = sim.node(k);
                    let g = &gains[k];
                    let total: f64 = s.iter().sum();
                    let (a, b) = (ag.a.at(t), ag.b.at(t));
                    let dw0: f64 = sq * Distribution::<f64>::sample(&StandardNormal, &mut common);
                    for si in s.iter_mut() {
                        let alpha = g.g1 * q + (g.g2 - g.g3) * *si + g.g3 * total + g.g4;
                        let dwi: f64 = sq * Distribution::<f64>::sample(&StandardNormal, &mut own);
                        *si += (a + b * q + alpha) * dt + ag.rho * ag.sigma * dw0 + idio * dwi;
                    }
                    s_lim += (a + b * q) * dt + ag.rho * ag.sigma * dw0;
                    q += model.kappa * (model.theta.at(t) - q) * dt + model.sigma0 * dw0;
                }
                let bar = s.iter().sum::<f64>() / n as f64;
                (bar - s_lim).powi(2)
            })
            .collect();
        let mean = gaps.iter().sum::<f64>() / n_paths as f64;
        let var = gaps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n_paths.max(2) - 1) as f64;
        points.push(L2Point { n, l2_gap: mean, stderr: (var / n_paths as f64).sqrt() });
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.l2_gap.ln()).collect();
    Ok(L2Report { slope: ls_slope(&xs, &ys), points })
}

pub(crate) fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{arbitrageur_market, baseline_market};

    fn table_params() -> ExpansionParams {
        ExpansionParams::from_agent(&baseline_market(1).agents[0], 24.0)
    }

    #[test]
    fn p4_leading_examples() {
        let par = table_params();
        assert_eq!(p4_leading(&par, 24.0), 100.0);
        let zero = ExpansionParams { c3: 0.0, ..par.clone() };
        let expect = 100.0 / (1.0 + 100.0 * zero.decay());
        assert!((p4_leading(&zero, 23.0) - expect).abs() < 1e-12);
        assert!((p4_leading(&zero, 23.0) - 0.326205).abs() < 1e-6);
        // large τ tends to the stationary root
        let root = (par.c3 / par.decay()).sqrt();
        assert!((p4_leading(&par, 0.0) - root).abs() < 1e-6);
    }

    #[test]
    fn p4_leading_solves_its_ode() {
        let par = table_params();
        let h = 1e-4;
        for t in [0.5, 5.0, 12.0, 20.0, 23.0, 23.9] {
            let fd = (p4_leading(&par, t + h) - p4_leading(&par, t - h)) / (2.0 * h);
            let p = p4_leading(&par, t);
            let resid = fd - (par.decay() * p * p - par.c3);
            assert!(resid.abs() <= 1e-6 * (1.0 + p * p * par.decay()), "t={t} residual {resid}");
        }
    }

    #[test]
    fn numeric_matches_closed_form_and_identity() {
        let m = baseline_market(8);
        let grid = m.riccati_grid();
        let par = table_params();
        let num = integrate_first_order(&par, grid, FIRST_ORDER_SUBSTEPS);
        let worst = grid
            .nodes()
            .iter()
            .zip(&num)
            .map(|(&t, y)| (y[0] - p4_leading(&par, t)).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-8, "{worst}");
        let ex = expansion_coeffs(&m, grid).unwrap();
        assert!(ex.identity_defect() <= 1e-8, "{}", ex.identity_defect());
        assert_eq!(ex.p4_0[grid.n_steps], 100.0);
        assert_eq!(ex.p4_1[grid.n_steps], 0.0);
    }

    #[test]
    fn arbitrageur_reductions() {
        let m = arbitrageur_market(10);
        let grid = m.riccati_grid();
        let ex = expansion_coeffs(&m, grid).unwrap();
        assert!(ex.p2_0.iter().all(|x| *x == 0.0));
        // r2⁰ = −2c3 ∫ζ − 2c4ζ(T) for constant ζ
        for &t in &[0.0, 6.5, 23.0] {
            let x = ex.at(t).unwrap();
            let expect = -2.0 * 0.25 * 5.0 * (24.0 - t) - 2.0 * 100.0 * 5.0;
            assert!((x.r2_0 - expect).abs() < 1e-8);
            let p = price_expansion(&ex, t, 30.0, 4.0).unwrap();
            let closed = -2.0 * ex.params.linear_cost(t) * 4.0 + 2.0 * 0.25 * 5.0 * (24.0 - t) + 2.0 * 100.0 * 5.0;
            assert!((p - closed).abs() < 1e-8);
        }
        // at the horizon the aggregate is q − (2c4/c1)s̄ − (−2c4ζ + P̄)/c1
        let agg = aggregate_control_expansion(&ex, 24.0, 30.0, 4.0).unwrap();
        assert!((agg - (30.0 - 200.0 * 4.0 - (-1000.0 + 50.0))).abs() < 1e-8);
        let c3zero = {
            let mut m2 = m.clone();
            m2.agents.iter_mut().for_each(|a| a.c3 = 0.0);
            expansion_coeffs(&m2, grid).unwrap()
        };
        assert!(price_expansion(&c3zero, 24.0, 30.0, 5.0).unwrap().abs() < 1e-9);
    }

    #[test]
    fn individual_expansion_is_consistent() {
        let m = baseline_market(50);
        let ex = expansion_coeffs(&m, m.riccati_grid()).unwrap();
        let (t, q) = (9.0, 27.0);
        let s: Vec<f64> = (0..50).map(|i| 4.0 + 0.04 * i as f64).collect();
        let total: f64 = s.iter().sum();
        let bar = total / 50.0;
        let g = expansion_gains(&ex, t, 50, 2).unwrap();
        let via_gains = g.apply(q, &s);
        let mut agg = 0.0;
        for i in 0..50 {
            let a = control_expansion(&ex, t, q, s[i], bar, total - s[i], 50).unwrap();
            assert!((a - via_gains[i]).abs() < 1e-9, "{a} vs {}", via_gains[i]);
            agg += a;
        }
        let lead = aggregate_control_expansion(&ex, t, q, bar).unwrap();
        // agreement up to O(ε) relative to the size of the terms
        assert!((agg - lead).abs() < 0.1 * (1.0 + lead.abs()), "{agg} vs {lead}");
        // symmetric state: the leading term vanishes
        let sym = control_expansion(&ex, t, q, bar, bar, 49.0 * bar, 50).unwrap();
        let g1 = expansion_gains(&ex, t, 50, 1).unwrap().apply(q, &vec![bar; 50])[0];
        assert!((sym - g1 - (2.0 / 1.2 * ex.at(t).unwrap().p4_1 / 2500.0 - 2.0 * 2.2 / 1.2 * ex.at(t).unwrap().p5_1 / 2500.0 - 2.0 * ex.at(t).unwrap().p4_0 / 2500.0) * 49.0 * bar).abs() < 1e-9);
    }

    #[test]
    fn designed_family_is_valid() {
        let m = l2_test_market(8);
        assert!(m.is_homogeneous());
        assert!(m.validate().is_ok());
    }
}

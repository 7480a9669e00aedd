//! Reduced Riccati system for markets of identical operators with uniform
//! cross impact. Eleven scalar coefficients whatever the market size:
//! `p1..p7`, `r1..r3`, `u`.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::model::{AgentParams, MarketModel, TimeGrid};
use crate::numerics::Stencil;
use crate::riccati_general::{horizon_bound, WellPosedness};

pub const COEFF_NAMES: [&str; 11] = ["p1", "p2", "p3", "p4", "p5", "p6", "p7", "r1", "r2", "r3", "u"];

/// Snapshot of the eleven coefficients.
pub type Coeffs = [f64; 11];

/// Scalar constants of the reduced system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    pub n: f64,
    pub d: f64,
    pub eta0: f64,
    pub eta1: f64,
}

impl Constants {
    pub fn new(agent: &AgentParams, n: usize) -> Constants {
        let nf = n as f64;
        let d = agent.c1 + 2.0 * agent.c2;
        Constants { n: nf, d, eta0: nf * agent.p_bar / d, eta1: 1.0 + (nf * agent.c1) / d }
    }
}

/// Feedback coefficients of the reduced control and net-supply maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GCoeffs {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: f64,
    pub g5: f64,
    pub g6: f64,
    pub g7: f64,
    pub g8: f64,
}

impl GCoeffs {
    pub fn from_coeffs(x: &Coeffs, ag: &AgentParams, k: Constants) -> GCoeffs {
        let (n, d, e0, e1) = (k.n, k.d, k.eta0, k.eta1);
        let c1 = ag.c1;
        let (p2, p4, p5, r2) = (x[1], x[3], x[4], x[8]);
        let agg = 2.0 * c1 * (p4 + (n - 1.0) * p5) / (d * d * e1);
        let g6 = (2.0 * p4 + 2.0 * (n - 1.0) * p5) / (d * e1);
        GCoeffs {
            g1: c1 / (d * e1) + 2.0 * n * c1 * p2 / (d * d * e1) - 2.0 * p2 / d,
            g2: agg - 2.0 * p4 / d,
            g3: agg - 2.0 * p5 / d,
            g4: n * c1 * r2 / (d * d * e1) + c1 * e0 / (d * e1) - (r2 + ag.p_bar) / d,
            g5: (1.0 + 2.0 * n * p2 / d) / e1,
            g6,
            g7: g6,
            g8: n * r2 / (d * e1) + e0 / e1,
        }
    }

    /// `g2 + (N − 1) g3`, the loading of the average SOC in the control.
    pub fn g_tilde(&self, n: f64) -> f64 {
        self.g2 + (n - 1.0) * self.g3
    }
}

/// Market-level forcing at one time.
#[derive(Debug, Clone, Copy)]
struct Forcing {
    a: f64,
    b: f64,
    zeta: f64,
    theta: f64,
}

/// Everything the reduced right-hand side needs.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub agent: AgentParams,
    pub consts: Constants,
    pub kappa: f64,
    pub theta: crate::model::Curve,
    pub sigma0: f64,
}

impl ReducedSystem {
    pub fn new(model: &MarketModel) -> ReducedSystem {
        let agent = model.agents[0].clone();
        ReducedSystem {
            consts: Constants::new(&agent, model.n_agents()),
            agent,
            kappa: model.kappa,
            theta: model.theta.clone(),
            sigma0: model.sigma0,
        }
    }

    /// Same system with a different market size.
    pub fn with_n(&self, n: usize) -> ReducedSystem {
        ReducedSystem { consts: Constants::new(&self.agent, n), ..self.clone() }
    }

    fn forcing(&self, t: f64) -> Forcing {
        Forcing { a: self.agent.a.at(t), b: self.agent.b.at(t), zeta: self.agent.zeta.at(t), theta: self.theta.at(t) }
    }

    /// `dX/dτ = −dX/dt` at calendar time `t`.
    pub fn rhs(&self, t: f64, x: &Coeffs) -> Coeffs {
        let f = self.forcing(t);
        let ag = &self.agent;
        let (c1, c2, c3, pb) = (ag.c1, ag.c2, ag.c3, ag.p_bar);
        let kap = self.kappa;
        let n = self.consts.n;
        let [p1, p2, p3, p4, p5, p6, p7, r1, r2, r3, _u] = *x;
        let g = GCoeffs::from_coeffs(x, ag, self.consts);
        let GCoeffs { g1, g2, g3, g4, g5, g6, g7, g8 } = g;
        let (a, b, zeta, theta) = (f.a, f.b, f.zeta, f.theta);

        let s1 = 2.0 * p2 + 2.0 * (n - 1.0) * p3; // 1ᵀh1
        let s2 = 2.0 * p4 + 2.0 * (n - 1.0) * p5; // 1ᵀh2
        let s4 = r2 + (n - 1.0) * r3; // 1ᵀh4
        let h1h5 = (g1 + b) * s1;
        let h1h6 = 2.0 * p2 * g2 + 2.0 * (n - 1.0) * p3 * g3;
        let h2h5 = (g1 + b) * s2;
        let h2h6 = 2.0 * p4 * g2 + 2.0 * (n - 1.0) * p5 * g3;
        let h1h8 = (g4 + a) * s1;
        let h4h5 = (g1 + b) * s4;
        let h2h8 = (g4 + a) * s2;
        let h4h6 = r2 * g2 + (n - 1.0) * r3 * g3;
        let h4h8 = (g4 + a) * s4;

        let dp1 = -c1 * g1 * g5 + c2 * g1 * g1 - 2.0 * kap * p1 + h1h5;
        let dp2 = -0.5 * c1 * (g1 * g6 + g2 * g5) + c2 * g1 * g2 - kap * p2 + 0.5 * h1h6 + 0.5 * h2h5;
        let dp3 = -0.5 * c1 * (g1 * g7 + g3 * g5) + c2 * g1 * g3 - kap * p3
            + p2 * g3
            + p3 * g2
            + (n - 2.0) * p3 * g3
            + g1 * p5
            + g1 * p7
            + (n - 2.0) * g1 * p6
            + p5 * b
            + p7 * b
            + (n - 2.0) * p6 * b;
        let dp4 = -c1 * g2 * g6 + c2 * g2 * g2 + c3 + h2h6;
        let dp5 = -0.5 * c1 * (g2 * g7 + g3 * g6) + c2 * g2 * g3
            + p4 * g3
            + p5 * g2
            + (n - 2.0) * p5 * g3
            + g2 * p5
            + g3 * p7
            + (n - 2.0) * g3 * p6;
        let dp6 = -c1 * g3 * g7 + c2 * g3 * g3 + 2.0 * p5 * g3 + 2.0 * (p6 * g2 + p7 * g3 + (n - 3.0) * p6 * g3);
        let dp7 = -c1 * g3 * g7 + c2 * g3 * g3 + 2.0 * p5 * g3 + 2.0 * (p7 * g2 + (n - 2.0) * p6 * g3);
        let dr1 = pb * g1 - c1 * (g4 * g5 + g1 * g8) + 2.0 * c2 * g1 * g4 + 2.0 * kap * p1 * theta - kap * r1
            + h1h8
            + h4h5;
        let dr2 = pb * g2 - c1 * (g4 * g6 + g2 * g8) + 2.0 * c2 * g2 * g4 - 2.0 * c3 * zeta
            + 2.0 * kap * p2 * theta
            + h2h8
            + h4h6;
        let dr3 = pb * g3 - c1 * (g4 * g7 + g3 * g8) + 2.0 * c2 * g3 * g4 + 2.0 * kap * p3 * theta
            + r2 * g3
            + r3 * g2
            + (n - 2.0) * r3 * g3
            + (g4 + a) * (2.0 * p5 + 2.0 * p7 + 2.0 * (n - 2.0) * p6);
        // ½ Tr(ΣΣᵀ ∂²V) with ∂²V built from the reduced coefficients
        let (s0, s, rho) = (self.sigma0, ag.sigma, ag.rho);
        let trace = s0 * s0 * p1
            + 2.0 * s0 * s * rho * (p2 + (n - 1.0) * p3)
            + s * s * (p4 + (n - 1.0) * p7)
            + s * s * rho * rho * (2.0 * (n - 1.0) * p5 + (n - 1.0) * (n - 2.0) * p6);
        let du = pb * g4 - c1 * g4 * g8 + c2 * g4 * g4 + c3 * zeta * zeta + r1 * kap * theta + h4h8 + trace;
        [dp1, dp2, dp3, dp4, dp5, dp6, dp7, dr1, dr2, dr3, du]
    }

    pub fn terminal(&self, horizon: f64) -> Coeffs {
        let z = self.agent.zeta.at(horizon);
        let c4 = self.agent.c4;
        let mut x = [0.0; 11];
        x[3] = c4;
        x[8] = -2.0 * c4 * z;
        x[10] = c4 * z * z;
        x
    }

    /// Reversed-time RK4 on `grid`; node `k` of the result is calendar time `t_k`.
    pub fn integrate(&self, grid: TimeGrid) -> Result<Vec<Coeffs>> {
        let n = grid.n_steps;
        let h = grid.dt();
        let mut out = vec![[0.0; 11]; n + 1];
        let mut y = self.terminal(grid.horizon);
        out[n] = y;
        let add = |y: &Coeffs, k: &Coeffs, s: f64| -> Coeffs {
            let mut z = *y;
            for j in 0..11 {
                z[j] += s * k[j];
            }
            z
        };
        for step in 0..n {
            let node = n - step;
            let t = grid.node(node);
            let tm = t - 0.5 * h;
            let te = grid.node(node - 1);
            let k1 = self.rhs(t, &y);
            let k2 = self.rhs(tm, &add(&y, &k1, 0.5 * h));
            let k3 = self.rhs(tm, &add(&y, &k2, 0.5 * h));
            let k4 = self.rhs(te, &add(&y, &k3, h));
            for j in 0..11 {
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            if let Some(j) = y.iter().position(|v| !v.is_finite() || v.abs() > 1e200) {
                return Err(Error::BlowUp { t: te, block: COEFF_NAMES[j].into() });
            }
            out[node - 1] = y;
        }
        Ok(out)
    }
}

/// Coefficient trajectories on every node of the integration grid.
#[derive(Debug, Clone)]
pub struct HomogeneousSolution {
    pub grid: TimeGrid,
    pub n_agents: usize,
    pub agent: AgentParams,
    pub consts: Constants,
    pub coeffs: Vec<Coeffs>,
}

pub fn solve_homogeneous(model: &MarketModel, grid: TimeGrid) -> Result<HomogeneousSolution> {
    if !model.is_homogeneous() {
        return Err(Error::NotHomogeneous);
    }
    let sys = ReducedSystem::new(model);
    let coeffs = sys.integrate(grid)?;
    Ok(HomogeneousSolution {
        grid,
        n_agents: model.n_agents(),
        agent: sys.agent,
        consts: sys.consts,
        coeffs,
    })
}

impl HomogeneousSolution {
    fn stencil(&self, t: f64) -> Result<Stencil> {
        let horizon = self.grid.horizon;
        if !(-1e-12..=horizon + 1e-12).contains(&t) {
            return Err(Error::Domain { t, horizon });
        }
        Ok(Stencil::new(t.clamp(0.0, horizon), self.grid.dt(), self.grid.n_steps))
    }

    /// Interpolated coefficients at time `t`.
    pub fn coeffs_at(&self, t: f64) -> Result<Coeffs> {
        let st = self.stencil(t)?;
        let mut out = [0.0; 11];
        for j in 0..st.len {
            let c = &self.coeffs[st.first + j];
            for k in 0..11 {
                out[k] += st.weights[j] * c[k];
            }
        }
        Ok(out)
    }

    pub fn g_functions(&self, t: f64) -> Result<GCoeffs> {
        Ok(GCoeffs::from_coeffs(&self.coeffs_at(t)?, &self.agent, self.consts))
    }

    pub fn g_at_node(&self, k: usize) -> GCoeffs {
        GCoeffs::from_coeffs(&self.coeffs[k], &self.agent, self.consts)
    }

    /// `α_i = g1 q + g2 s_i + g3 Σ_{j≠i} s_j + g4`.
    pub fn control(&self, t: f64, q: f64, s_i: f64, sum_others: f64) -> Result<f64> {
        let g = self.g_functions(t)?;
        Ok(g.g1 * q + g.g2 * s_i + g.g3 * sum_others + g.g4)
    }

    /// Agent `i`'s value from the reduced quadratic form.
    pub fn value(&self, i: usize, t: f64, q: f64, s: &[f64]) -> Result<f64> {
        let [p1, p2, p3, p4, p5, p6, p7, r1, r2, r3, u] = self.coeffs_at(t)?;
        let si = s[i];
        let others: f64 = s.iter().sum::<f64>() - si;
        let sq_others: f64 = s.iter().map(|x| x * x).sum::<f64>() - si * si;
        let cross = others * others - sq_others;
        Ok(p1 * q * q + 2.0 * p2 * si * q + 2.0 * p3 * others * q + p4 * si * si + 2.0 * p5 * si * others
            + p7 * sq_others
            + p6 * cross
            + r1 * q
            + r2 * si
            + r3 * others
            + u)
    }
}

/// The three quadratic forms of the closed `(p4, p5, p6)` subsystem in
/// reversed time: `dp̄_k/dτ = p̄ᵀ M_k p̄ (+ c3 for k = 4)`.
pub fn calm_matrices(c1: f64, c2: f64, n: usize) -> [Matrix3<f64>; 3] {
    let nf = n as f64;
    let d = c1 + 2.0 * c2;
    let dd = (nf + 1.0) * c1 + 2.0 * c2; // d·η1
    let q = d * d * dd * dd;
    let l = d * dd;
    let s = c1 + c2;
    let a = nf * c1 + 2.0 * c2;
    let poly = 3.0 * nf * c1 * c1 + 4.0 * nf * c1 * c2 + c1 * c1 + 8.0 * c1 * c2 + 8.0 * c2 * c2;
    let m1_44 = -4.0 * s * a * a / q;
    let m1_45 = 2.0 * c1 * (nf - 1.0) * poly / q;
    let m1_55 = -4.0 * (nf - 1.0) * s * poly / q;
    let m2_44 = 4.0 * c1 * s * a / q;
    let m2_45 = -8.0 * s * s * a / q;
    let m2_46 = c1 * (nf - 1.0) / l;
    let m2_55 = -2.0
        * (nf * nf * c1.powi(3) + 4.0 * nf * nf * c1 * c1 * c2 + 4.0 * nf * nf * c1 * c2 * c2
            - 6.0 * nf * c1.powi(3)
            - 12.0 * nf * c1 * c1 * c2
            + 8.0 * nf * c2.powi(3)
            + c1.powi(3)
            - 8.0 * c1 * c1 * c2
            - 24.0 * c1 * c2 * c2
            - 16.0 * c2.powi(3))
        / q;
    let m2_56 = -2.0 * (nf - 1.0) * s / l;
    let m3_44 = -4.0 * c1 * c1 * s / q;
    let m3_45 = 8.0 * c1 * s * s / q;
    let m3_46 = -4.0 * s / l;
    let m3_55 = -16.0 * s.powi(3) / q;
    let m3_56 = -2.0 * (nf * c1 + 2.0 * nf * c2 - 3.0 * c1 - 4.0 * c2) / l;
    [
        Matrix3::new(m1_44, m1_45, 0.0, m1_45, m1_55, 0.0, 0.0, 0.0, 0.0),
        Matrix3::new(m2_44, m2_45, m2_46, m2_45, m2_55, m2_56, m2_46, m2_56, 0.0),
        Matrix3::new(m3_44, m3_45, m3_46, m3_45, m3_55, m3_56, m3_46, m3_56, 0.0),
    ]
}

/// `λ_N = −1/(c1+c2) − 4Nc1³/((c1+2c2)²((N+1)c1+2c2)²)`.
pub fn lambda_n(c1: f64, c2: f64, n: usize) -> f64 {
    let nf = n as f64;
    let d = c1 + 2.0 * c2;
    let dd = (nf + 1.0) * c1 + 2.0 * c2;
    -1.0 / (c1 + c2) - 4.0 * nf * c1.powi(3) / (d * d * dd * dd)
}

/// Largest value of `m44 + 2 m45 ξ + m55 ξ²` over the admissible ξ range,
/// i.e. the sharpest decay rate of p̄4 available inside the region.
pub fn region_decay_rate(c1: f64, c2: f64, n: usize) -> f64 {
    let m = calm_matrices(c1, c2, n)[0];
    let xmax = c1 / (2.0 * (c1 + c2));
    let f = |x: f64| m[(0, 0)] + 2.0 * m[(0, 1)] * x + m[(1, 1)] * x * x;
    let mut best = f(0.0).max(f(xmax));
    if m[(1, 1)] != 0.0 {
        let v = -m[(0, 1)] / m[(1, 1)];
        if v > 0.0 && v < xmax {
            best = best.max(f(v));
        }
    }
    best
}

pub fn wellposedness_bound_homogeneous(model: &MarketModel) -> Result<WellPosedness> {
    if !model.is_homogeneous() {
        return Err(Error::NotHomogeneous);
    }
    let ag = &model.agents[0];
    let ms = calm_matrices(ag.c1, ag.c2, model.n_agents());
    let beta = ms.iter().map(|m| m.singular_values().max().powi(2)).sum::<f64>().sqrt();
    Ok(horizon_bound(1.0, ag.c3, ag.c4, beta))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionReport {
    pub inside: bool,
    pub worst_margin: f64,
    pub lambda_n: f64,
    /// Upper bound used for p̄4.
    pub p4_cap: f64,
}

/// Signed distance of `(p̄4, p̄5, p̄6)` to the faces of the invariant region.
pub fn region_margin(x: [f64; 3], c1: f64, c2: f64, n: usize, p4_cap: f64) -> f64 {
    let [p4, p5, p6] = x;
    let nf = n as f64;
    [
        p4,
        p4_cap - p4,
        p5,
        c1 / (2.0 * (c1 + c2)) * p4 - p5,
        -p6,
        p6 + c1 / (nf * c1 + 2.0 * c2) * p5,
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

/// Relative tolerance on face margins (integration round-off along faces the
/// trajectory starts on).
pub const REGION_TOL: f64 = 1e-9;

pub fn invariant_region_check(sol: &HomogeneousSolution) -> Result<RegionReport> {
    let n = sol.n_agents;
    let ag = &sol.agent;
    if n < 5 {
        return Err(Error::NotApplicable(format!("needs N >= 5, got {n}")));
    }
    if !(ag.c4 > 0.0) {
        return Err(Error::NotApplicable("needs c4 > 0".into()));
    }
    let lam = lambda_n(ag.c1, ag.c2, n);
    let rate = region_decay_rate(ag.c1, ag.c2, n).max(lam);
    let cap = if rate < 0.0 { ag.c4.max((ag.c3 / -rate).sqrt()) } else { f64::INFINITY };
    let worst = sol
        .coeffs
        .iter()
        .map(|c| region_margin([c[3], c[4], c[5]], ag.c1, ag.c2, n, cap))
        .fold(f64::INFINITY, f64::min);
    Ok(RegionReport { inside: worst >= -REGION_TOL * ag.c4, worst_margin: worst, lambda_n: lam, p4_cap: cap })
}

/// Reversed-time trajectory of the closed `(p4, p5, p6)` subsystem alone.
pub fn integrate_quadratic_subsystem(model: &MarketModel, grid: TimeGrid) -> Vec<[f64; 3]> {
    let ag = &model.agents[0];
    let ms = calm_matrices(ag.c1, ag.c2, model.n_agents());
    let f = |x: &[f64; 3]| {
        let v = nalgebra::Vector3::new(x[0], x[1], x[2]);
        [ag.c3 + v.dot(&(ms[0] * v)), v.dot(&(ms[1] * v)), v.dot(&(ms[2] * v))]
    };
    let h = grid.dt();
    let mut y = [ag.c4, 0.0, 0.0];
    let mut out = vec![[0.0; 3]; grid.n_steps + 1];
    out[grid.n_steps] = y;
    let add = |y: &[f64; 3], k: &[f64; 3], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
    for step in 0..grid.n_steps {
        let k1 = f(&y);
        let k2 = f(&add(&y, &k1, 0.5 * h));
        let k3 = f(&add(&y, &k2, 0.5 * h));
        let k4 = f(&add(&y, &k3, h));
        for j in 0..3 {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        out[grid.n_steps - step - 1] = y;
    }
    out
}

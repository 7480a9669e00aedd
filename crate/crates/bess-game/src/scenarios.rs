//! Ready-made markets: the reference day, two-class supply/competition
//! markets and the randomized heterogeneous generators.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{AgentParams, Curve, GridSpec, MarketModel, SineTerm};

/// Average supply curve with a morning trough and an evening peak.
pub fn baseline_theta() -> Curve {
    theta_curve(30.0, 14.0, 7.0, 16.0, -7.0)
}

/// `mean - A1 sin(pi (2t + F1)/24) - A2 sin(pi (4t + F2)/24)`.
pub fn theta_curve(mean: f64, a1: f64, a2: f64, f1: f64, f2: f64) -> Curve {
    Curve::SinusoidSum {
        offset: mean,
        terms: vec![
            SineTerm { amp: -a1, freq: PI / 12.0, phase: PI * f1 / 24.0 },
            SineTerm { amp: -a2, freq: PI / 6.0, phase: PI * f2 / 24.0 },
        ],
    }
}

/// Solar self-generation intercept, zero before 5:20am.
pub fn baseline_a() -> Curve {
    Curve::ClampedSinusoid { amp: 0.2, freq: 0.075 * PI, phase: -2.0 * PI / 5.0, floor: 0.0 }
}

/// Self-generation loading on aggregate supply.
pub fn baseline_b() -> Curve {
    Curve::PiecewiseLinear {
        knots: vec![
            (0.0, 0.0),
            (16.0 / 3.0, 0.0),
            (8.0, 0.008),
            (16.0, 0.008),
            (56.0 / 3.0, 0.0),
            (24.0, 0.0),
        ],
    }
}

/// Hybrid operator with the reference costs.
pub fn hybrid_agent() -> AgentParams {
    AgentParams {
        a: baseline_a(),
        b: baseline_b(),
        sigma: 0.5,
        rho: 0.6,
        p_bar: 50.0,
        c1: 1.0,
        c2: 0.1,
        c3: 0.25,
        c4: 100.0,
        zeta: Curve::constant(5.0),
        s0: 5.0,
    }
}

/// Pure storage operator: no self-generation.
pub fn arbitrageur_agent() -> AgentParams {
    AgentParams { a: Curve::zero(), b: Curve::zero(), ..hybrid_agent() }
}

fn market(agents: Vec<AgentParams>, theta: Curve) -> MarketModel {
    let n = agents.len();
    let q0 = theta.at(0.0);
    MarketModel {
        horizon: 24.0,
        kappa: 5.0,
        theta,
        sigma0: 5.0,
        q0,
        grid: GridSpec::default(),
        agents,
        weights: vec![vec![1.0; n]; n],
    }
}

/// Reference homogeneous market of `n` hybrid operators.
pub fn baseline_market(n: usize) -> MarketModel {
    market(vec![hybrid_agent(); n], baseline_theta())
}

/// Homogeneous market of `n` arbitrageurs on the reference day.
pub fn arbitrageur_market(n: usize) -> MarketModel {
    market(vec![arbitrageur_agent(); n], baseline_theta())
}

/// `n_hybrid` operators with self-generation followed by `n_arb` arbitrageurs;
/// everything else copied from `base`'s first agent and market fields.
pub fn two_class_market(n_hybrid: usize, n_arb: usize, base: &MarketModel) -> MarketModel {
    let proto = base.agents[0].clone();
    let hybrid = AgentParams { a: baseline_a(), b: baseline_b(), ..proto.clone() };
    let arb = AgentParams { a: Curve::zero(), b: Curve::zero(), ..proto };
    let mut agents = vec![hybrid; n_hybrid];
    agents.extend(std::iter::repeat_n(arb, n_arb));
    let n = agents.len();
    MarketModel { agents, weights: vec![vec![1.0; n]; n], ..base.clone() }
}

/// Operators of random scale `G` (natural log uniform on [-1, 1]) with random
/// correlation and running SOC penalty.
pub fn sample_heterogeneous_market(seed: u64, n: usize) -> MarketModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents = (0..n)
        .map(|_| {
            let g = rng.gen_range(-1.0..1.0f64).exp();
            let rho = rng.gen_range(0.0..0.9);
            let c3 = rng.gen_range(0.1..1.0);
            AgentParams {
                a: baseline_a().scaled(g),
                b: baseline_b().scaled(g),
                sigma: g.sqrt(),
                rho,
                c3,
                ..hybrid_agent()
            }
        })
        .collect();
    market(agents, baseline_theta())
}

/// Identical operators facing a random supply curve and random symmetric
/// cross-impact weights in [0.5, 1].
pub fn sample_theta_market(seed: u64, n: usize) -> MarketModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = rng.gen_range(25.0..35.0);
    let a1 = rng.gen_range(18.0..26.0);
    let a2 = rng.gen_range(6.0..10.0);
    let f1 = rng.gen_range(12.0..18.0);
    let f2 = rng.gen_range(-9.0..-5.0);
    let mut m = market(vec![hybrid_agent(); n], theta_curve(mean, a1, a2, f1, f2));
    for i in 0..n {
        for j in (i + 1)..n {
            let w = rng.gen_range(0.5..1.0);
            m.weights[i][j] = w;
            m.weights[j][i] = w;
        }
    }
    m
}

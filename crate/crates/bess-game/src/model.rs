//! Market model: time curves, agent parameters, the N-agent market and its
//! validation, plus the common/idiosyncratic noise loading.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

/// One sine component `amp * sin(freq * t + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineTerm {
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

/// Deterministic function of time (hours), stored symbolically so configs
/// round-trip through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Curve {
    Constant { value: f64 },
    /// `(t, value)` knots, linear in between, flat outside.
    PiecewiseLinear { knots: Vec<(f64, f64)> },
    SinusoidSum { offset: f64, terms: Vec<SineTerm> },
    ClampedSinusoid { amp: f64, freq: f64, phase: f64, floor: f64 },
    /// Samples at `start + k * step`, linearly interpolated, flat outside.
    Table { start: f64, step: f64, values: Vec<f64> },
}

impl Curve {
    pub fn constant(value: f64) -> Self {
        Curve::Constant { value }
    }

    pub fn zero() -> Self {
        Curve::Constant { value: 0.0 }
    }

    /// Plain evaluation, no range check.
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Curve::Constant { value } => *value,
            Curve::PiecewiseLinear { knots } => {
                let (t0, v0) = knots[0];
                if t <= t0 {
                    return v0;
                }
                for w in knots.windows(2) {
                    let ((ta, va), (tb, vb)) = (w[0], w[1]);
                    if t <= tb {
                        return va + (vb - va) * (t - ta) / (tb - ta);
                    }
                }
                knots[knots.len() - 1].1
            }
            Curve::SinusoidSum { offset, terms } => {
                offset + terms.iter().map(|s| s.amp * (s.freq * t + s.phase).sin()).sum::<f64>()
            }
            Curve::ClampedSinusoid { amp, freq, phase, floor } => {
                (amp * (freq * t + phase).sin()).max(*floor)
            }
            Curve::Table { start, step, values } => {
                let x = (t - start) / step;
                if x <= 0.0 {
                    return values[0];
                }
                let k = x.floor() as usize;
                if k + 1 >= values.len() {
                    return values[values.len() - 1];
                }
                let w = x - k as f64;
                values[k] * (1.0 - w) + values[k + 1] * w
            }
        }
    }

    /// Evaluation restricted to the model horizon.
    pub fn eval(&self, t: f64, horizon: f64) -> Result<f64> {
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::Domain { t, horizon });
        }
        Ok(self.at(t))
    }

    /// Multiply the curve by a non-negative factor.
    pub fn scaled(&self, k: f64) -> Curve {
        assert!(k >= 0.0, "curve scale factor must be non-negative");
        match self {
            Curve::Constant { value } => Curve::Constant { value: value * k },
            Curve::PiecewiseLinear { knots } => {
                Curve::PiecewiseLinear { knots: knots.iter().map(|&(t, v)| (t, v * k)).collect() }
            }
            Curve::SinusoidSum { offset, terms } => Curve::SinusoidSum {
                offset: offset * k,
                terms: terms
                    .iter()
                    .map(|s| SineTerm { amp: s.amp * k, freq: s.freq, phase: s.phase })
                    .collect(),
            },
            Curve::ClampedSinusoid { amp, freq, phase, floor } => Curve::ClampedSinusoid {
                amp: amp * k,
                freq: *freq,
                phase: *phase,
                floor: floor * k,
            },
            Curve::Table { start, step, values } => Curve::Table {
                start: *start,
                step: *step,
                values: values.iter().map(|v| v * k).collect(),
            },
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Curve::Constant { value } => *value == 0.0,
            Curve::PiecewiseLinear { knots } => knots.iter().all(|k| k.1 == 0.0),
            Curve::SinusoidSum { offset, terms } => {
                *offset == 0.0 && terms.iter().all(|s| s.amp == 0.0)
            }
            Curve::ClampedSinusoid { amp, floor, .. } => *amp == 0.0 && *floor == 0.0,
            Curve::Table { values, .. } => values.iter().all(|v| *v == 0.0),
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let finite = |x: f64| x.is_finite();
        match self {
            Curve::Constant { value } if !finite(*value) => out.push("non-finite value".into()),
            Curve::PiecewiseLinear { knots } => {
                if knots.is_empty() {
                    out.push("no knots".into());
                }
                if knots.iter().any(|k| !finite(k.0) || !finite(k.1)) {
                    out.push("non-finite knot".into());
                }
                if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                    out.push("knot times must be strictly increasing".into());
                }
            }
            Curve::SinusoidSum { offset, terms } => {
                if !finite(*offset) || terms.iter().any(|s| !(finite(s.amp) && finite(s.freq) && finite(s.phase))) {
                    out.push("non-finite sinusoid parameter".into());
                }
            }
            Curve::ClampedSinusoid { amp, freq, phase, floor } => {
                if ![*amp, *freq, *phase, *floor].iter().all(|x| x.is_finite()) {
                    out.push("non-finite sinusoid parameter".into());
                }
            }
            Curve::Table { start, step, values } => {
                if values.is_empty() {
                    out.push("empty table".into());
                }
                if !(*step > 0.0) || !finite(*start) {
                    out.push("table step must be positive".into());
                }
                if values.iter().any(|v| !finite(*v)) {
                    out.push("non-finite table value".into());
                }
            }
            _ => {}
        }
        out
    }
}

/// Per-operator parameters. Costs are per unit of time, prices in $.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    /// Self-generation intercept (GW).
    pub a: Curve,
    /// Self-generation loading on the aggregate supply Q.
    pub b: Curve,
    pub sigma: f64,
    pub rho: f64,
    pub p_bar: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    /// SOC target (GWh).
    pub zeta: Curve,
    pub s0: f64,
}

impl AgentParams {
    pub fn is_arbitrageur(&self) -> bool {
        self.a.is_zero() && self.b.is_zero()
    }
}

/// Discretisation choices that travel with a config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default = "default_riccati_steps")]
    pub riccati_steps: usize,
    #[serde(default = "default_sim_steps")]
    pub sim_steps: usize,
}

fn default_riccati_steps() -> usize {
    24_000
}

fn default_sim_steps() -> usize {
    2_400
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { riccati_steps: default_riccati_steps(), sim_steps: default_sim_steps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub horizon: f64,
    pub kappa: f64,
    pub theta: Curve,
    pub sigma0: f64,
    pub q0: f64,
    #[serde(default)]
    pub grid: GridSpec,
    pub agents: Vec<AgentParams>,
    /// Price-impact weights, row i belongs to agent i. Empty means all ones.
    #[serde(default)]
    pub weights: Vec<Vec<f64>>,
}

impl MarketModel {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn from_json(text: &str) -> Result<MarketModel> {
        let mut m: MarketModel = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        if m.weights.is_empty() {
            m.weights = vec![vec![1.0; m.agents.len()]; m.agents.len()];
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("market model serializes")
    }

    pub fn weight_matrix(&self) -> DMatrix<f64> {
        let n = self.n_agents();
        if self.weights.is_empty() {
            return DMatrix::from_element(n, n, 1.0);
        }
        DMatrix::from_fn(n, n, |i, j| self.weights[i][j])
    }

    /// All agents identical and W all ones.
    pub fn is_homogeneous(&self) -> bool {
        let first = &self.agents[0];
        self.agents.iter().all(|a| a == first)
            && (self.weights.is_empty() || self.weights.iter().flatten().all(|&w| w == 1.0))
    }

    pub fn validate(self) -> std::result::Result<ValidatedModel, Error> {
        let v = violations(&self);
        if v.is_empty() {
            Ok(ValidatedModel(self))
        } else {
            Err(Error::Invalid(v))
        }
    }

    pub fn riccati_grid(&self) -> TimeGrid {
        TimeGrid::new(self.horizon, self.grid.riccati_steps)
    }

    pub fn sim_grid(&self) -> TimeGrid {
        TimeGrid::new(self.horizon, self.grid.sim_steps)
    }
}

fn violations(m: &MarketModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |agent: Option<usize>, field: &str, message: String| {
        out.push(Violation { agent, field: field.to_string(), message })
    };
    let n = m.agents.len();
    if n == 0 {
        push(None, "agents", "at least one agent required".into());
    }
    if !(m.horizon > 0.0 && m.horizon.is_finite()) {
        push(None, "horizon", format!("must be positive, got {}", m.horizon));
    }
    if !(m.kappa > 0.0 && m.kappa.is_finite()) {
        push(None, "kappa", format!("must be positive, got {}", m.kappa));
    }
    if !(m.sigma0 >= 0.0 && m.sigma0.is_finite()) {
        push(None, "sigma0", format!("must be non-negative, got {}", m.sigma0));
    }
    if !m.q0.is_finite() {
        push(None, "q0", "must be finite".into());
    }
    if m.grid.riccati_steps == 0 {
        push(None, "grid.riccati_steps", "must be at least 1".into());
    }
    if m.grid.sim_steps == 0 {
        push(None, "grid.sim_steps", "must be at least 1".into());
    }
    for p in m.theta.problems() {
        push(None, "theta", p);
    }
    for (i, a) in m.agents.iter().enumerate() {
        let ag = Some(i);
        if !(a.c1 > 0.0 && a.c1.is_finite()) {
            push(ag, "c1", format!("must be positive, got {}", a.c1));
        }
        for (name, v) in [("c2", a.c2), ("c3", a.c3), ("c4", a.c4), ("sigma", a.sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                push(ag, name, format!("must be non-negative, got {v}"));
            }
        }
        if !(-1.0..=1.0).contains(&a.rho) {
            push(ag, "rho", format!("must lie in [-1, 1], got {}", a.rho));
        }
        if !a.p_bar.is_finite() {
            push(ag, "p_bar", "must be finite".into());
        }
        if !a.s0.is_finite() {
            push(ag, "s0", "must be finite".into());
        }
        for (name, c) in [("a", &a.a), ("b", &a.b), ("zeta", &a.zeta)] {
            for p in c.problems() {
                push(ag, name, p);
            }
        }
    }
    if !m.weights.is_empty() {
        if m.weights.len() != n || m.weights.iter().any(|r| r.len() != n) {
            push(None, "weights", format!("must be {n}x{n}"));
        } else {
            for i in 0..n {
                for j in 0..n {
                    let w = m.weights[i][j];
                    if i == j && w != 1.0 {
                        push(Some(i), "weights", format!("diagonal weight must equal 1, got w[{i}][{i}] = {w}"));
                    } else if !(w >= 0.0 && w.is_finite()) {
                        push(Some(i), "weights", format!("weight w[{i}][{j}] = {w} must be non-negative"));
                    }
                }
            }
        }
    }
    out
}

/// A market model that passed [`MarketModel::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedModel(MarketModel);

impl ValidatedModel {
    pub fn into_inner(self) -> MarketModel {
        self.0
    }
}

impl std::ops::Deref for ValidatedModel {
    type Target = MarketModel;
    fn deref(&self) -> &MarketModel {
        &self.0
    }
}

/// Lower-triangular loading of `(W⁰, W¹, …, Wᴺ)` onto `(Q, S¹, …, Sᴺ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStructure {
    pub sigma_matrix: DMatrix<f64>,
}

impl NoiseStructure {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.sigma_matrix * self.sigma_matrix.transpose()
    }
}

pub fn build_noise(model: &MarketModel) -> NoiseStructure {
    let n = model.n_agents();
    let mut s = DMatrix::zeros(n + 1, n + 1);
    s[(0, 0)] = model.sigma0;
    for (i, a) in model.agents.iter().enumerate() {
        s[(i + 1, 0)] = a.sigma * a.rho;
        s[(i + 1, i + 1)] = a.sigma * (1.0 - a.rho * a.rho).max(0.0).sqrt();
    }
    NoiseStructure { sigma_matrix: s }
}

/// Uniform grid on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Self {
        assert!(n_steps >= 1, "grid needs at least one step");
        TimeGrid { horizon, n_steps }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.node(k)).collect()
    }
}

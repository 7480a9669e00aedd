//! Small numerical kernels shared by the solvers: uniform-grid cubic
//! interpolation and cumulative Simpson quadrature.

/// Four-point Lagrange stencil on a uniform grid `t_k = k * h`, `k = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub first: usize,
    pub weights: [f64; 4],
    pub len: usize,
}

impl Stencil {
    /// Stencil for evaluating at `t`. Exact node hits collapse to a single
    /// unit weight so stored values are returned bit-for-bit.
    pub fn new(t: f64, h: f64, n: usize) -> Stencil {
        let x = t / h;
        let k = x.round();
        if (x - k).abs() < 1e-9 && k >= 0.0 && (k as usize) <= n {
            return Stencil { first: k as usize, weights: [1.0, 0.0, 0.0, 0.0], len: 1 };
        }
        if n < 3 {
            // linear fallback on very short grids
            let k = (x.floor().max(0.0) as usize).min(n.saturating_sub(1));
            let w = x - k as f64;
            return Stencil { first: k, weights: [1.0 - w, w, 0.0, 0.0], len: 2 };
        }
        let k = x.floor().max(0.0) as usize;
        let first = k.saturating_sub(1).min(n - 3);
        let u = x - first as f64;
        // nodes at u = 0, 1, 2, 3
        let w0 = -(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0;
        let w1 = u * (u - 2.0) * (u - 3.0) / 2.0;
        let w2 = -u * (u - 1.0) * (u - 3.0) / 2.0;
        let w3 = u * (u - 1.0) * (u - 2.0) / 6.0;
        Stencil { first, weights: [w0, w1, w2, w3], len: 4 }
    }

    /// Interpolate a scalar series.
    pub fn apply(&self, values: &[f64]) -> f64 {
        (0..self.len).map(|j| self.weights[j] * values[self.first + j]).sum()
    }

    /// Interpolate a node-major block series (`width` values per node) into `out`.
    pub fn apply_block(&self, data: &[f64], width: usize, out: &mut [f64]) {
        let base = self.first * width;
        out.copy_from_slice(&data[base..base + width]);
        if self.len == 1 {
            return;
        }
        let w0 = self.weights[0];
        out.iter_mut().for_each(|x| *x *= w0);
        for j in 1..self.len {
            let w = self.weights[j];
            let row = &data[base + j * width..base + (j + 1) * width];
            out.iter_mut().zip(row).for_each(|(o, r)| *o += w * r);
        }
    }
}

/// Running integral `F_k = ∫_0^{t_k} f` on a uniform grid. Each cell uses a
/// three-point rule; consecutive cell pairs add up to Simpson's rule.
pub fn cumulative_integral(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        out[1] = 0.5 * h * (f[0] + f[1]);
        return out;
    }
    out[1] = h / 12.0 * (5.0 * f[0] + 8.0 * f[1] - f[2]);
    for k in 2..n {
        // pair the cell with its predecessor so even nodes carry exact Simpson sums
        if k % 2 == 0 {
            out[k] = out[k - 2] + h / 3.0 * (f[k - 2] + 4.0 * f[k - 1] + f[k]);
        } else {
            out[k] = out[k - 1] + h / 12.0 * (-f[k - 2] + 8.0 * f[k - 1] + 5.0 * f[k]);
        }
    }
    out
}

/// Running integral from each node to the end, `G_k = ∫_{t_k}^{T} f`.
pub fn cumulative_integral_to_end(f: &[f64], h: f64) -> Vec<f64> {
    let rev: Vec<f64> = f.iter().rev().cloned().collect();
    let mut g = cumulative_integral(&rev, h);
    g.reverse();
    g
}

/// `G_k = ∫_{t_k}^{T} e^{−rate (s − t_k)} f(s) ds`, accumulated backwards in
/// Simpson pairs so no exponential ever overflows.
pub fn discounted_integral_to_end(f: &[f64], h: f64, rate: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    let last = n - 1;
    let e1 = (-rate * h).exp();
    let e2 = e1 * e1;
    if n == 2 {
        out[0] = 0.5 * h * (f[0] + e1 * f[1]);
        return out;
    }
    // one cell with a three-point rule, weights relative to t_{last-1}
    out[last - 1] = h / 12.0 * (-f[last - 2] / e1 + 8.0 * f[last - 1] + 5.0 * e1 * f[last]);
    for k in (0..last - 1).rev() {
        out[k] = e2 * out[k + 2] + h / 3.0 * (f[k] + 4.0 * e1 * f[k + 1] + e2 * f[k + 2]);
    }
    out
}

/// Composite Simpson over the whole array.
pub fn simpson(f: &[f64], h: f64) -> f64 {
    *cumulative_integral(f, h).last().unwrap_or(&0.0)
}

//! ODE model abstraction and an adaptive Dormand–Prince 5(4) integrator with
//! dense output.
//!
//! Models are written as `x' = F(x, θ, t)` with `x(0) = ξ`. The full parameter
//! is `η = (ξ, θ)`, always concatenated in that order. Derivative layouts are
//! row-major:
//!
//! - `jac_state`: `d × d`, entry `[i*d + j] = ∂F_i/∂x_j`
//! - `jac_param`: `d × p`, entry `[i*p + k] = ∂F_i/∂θ_k`
//! - [`SecondDerivatives`]: `xx[i][j][k] = ∂²F_i/∂x_j∂x_k`,
//!   `xp[i][j][k] = ∂²F_i/∂x_j∂θ_k`, `pp[i][k][l] = ∂²F_i/∂θ_k∂θ_l`
//!
//! `F` never depends on `ξ` directly, so the `ξ` blocks of `∂F/∂η` vanish.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Second-order partial derivatives of the right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondDerivatives {
    pub dim_state: usize,
    pub dim_param: usize,
    pub xx: Vec<f64>,
    pub xp: Vec<f64>,
    pub pp: Vec<f64>,
}

impl SecondDerivatives {
    pub fn zeros(d: usize, p: usize) -> Self {
        Self {
            dim_state: d,
            dim_param: p,
            xx: vec![0.0; d * d * d],
            xp: vec![0.0; d * d * p],
            pp: vec![0.0; d * p * p],
        }
    }

    pub fn clear(&mut self) {
        self.xx.iter_mut().for_each(|v| *v = 0.0);
        self.xp.iter_mut().for_each(|v| *v = 0.0);
        self.pp.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    pub fn xx(&self, i: usize, j: usize, k: usize) -> f64 {
        let d = self.dim_state;
        self.xx[(i * d + j) * d + k]
    }

    #[inline]
    pub fn xp(&self, i: usize, j: usize, k: usize) -> f64 {
        self.xp[(i * self.dim_state + j) * self.dim_param + k]
    }

    #[inline]
    pub fn pp(&self, i: usize, k: usize, l: usize) -> f64 {
        let p = self.dim_param;
        self.pp[(i * p + k) * p + l]
    }
}

/// Right-hand side `F(x, θ) = g(x) θ` for systems linear in the rate
/// parameters.
pub trait ThetaLinear {
    /// Writes the `d × p` coefficient matrix `g(x)` (row-major) into `out`.
    fn g(&self, x: &[f64], out: &mut [f64]);
}

/// An ODE system `x' = F(x, θ, t)`.
///
/// Only [`rhs`](OdeModel::rhs) is required. The derivative callbacks default
/// to central finite differences; models that override them with analytic
/// code should also return `true` from
/// [`analytic_derivatives`](OdeModel::analytic_derivatives) so reports can
/// flag the fallback.
pub trait OdeModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim_state(&self) -> usize;
    fn dim_param(&self) -> usize;

    fn rhs(&self, t: f64, x: &[f64], theta: &[f64], dx: &mut [f64]);

    fn is_autonomous(&self) -> bool {
        true
    }

    fn analytic_derivatives(&self) -> bool {
        false
    }

    fn theta_linear(&self) -> Option<&dyn ThetaLinear> {
        None
    }

    fn jac_state(&self, t: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.dim_state();
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            let h = fd_step(x[j]);
            xp[j] = x[j] + h;
            self.rhs(t, &xp, theta, &mut fp);
            xp[j] = x[j] - h;
            self.rhs(t, &xp, theta, &mut fm);
            xp[j] = x[j];
            for i in 0..d {
                out[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    fn jac_param(&self, t: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.dim_state();
        let p = self.dim_param();
        let mut tp = theta.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for k in 0..p {
            let h = fd_step(theta[k]);
            tp[k] = theta[k] + h;
            self.rhs(t, x, &tp, &mut fp);
            tp[k] = theta[k] - h;
            self.rhs(t, x, &tp, &mut fm);
            tp[k] = theta[k];
            for i in 0..d {
                out[i * p + k] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    /// `∂F/∂t`, needed only when autonomizing a time-dependent model.
    fn time_derivative(&self, t: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.dim_state();
        let h = fd_step(t);
        let mut fm = vec![0.0; d];
        self.rhs(t + h, x, theta, out);
        self.rhs(t - h, x, theta, &mut fm);
        for i in 0..d {
            out[i] = (out[i] - fm[i]) / (2.0 * h);
        }
    }

    /// Second derivatives, by central differences of the Jacobians unless
    /// overridden.
    fn hessians(&self, t: f64, x: &[f64], theta: &[f64], out: &mut SecondDerivatives) {
        let d = self.dim_state();
        let p = self.dim_param();
        let mut jp = vec![0.0; d * d];
        let mut jm = vec![0.0; d * d];
        let mut pp = vec![0.0; d * p];
        let mut pm = vec![0.0; d * p];
        let mut xs = x.to_vec();
        for k in 0..d {
            let h = fd_step(x[k]);
            xs[k] = x[k] + h;
            self.jac_state(t, &xs, theta, &mut jp);
            xs[k] = x[k] - h;
            self.jac_state(t, &xs, theta, &mut jm);
            xs[k] = x[k];
            for i in 0..d {
                for j in 0..d {
                    out.xx[(i * d + j) * d + k] = (jp[i * d + j] - jm[i * d + j]) / (2.0 * h);
                }
            }
        }
        let mut ts = theta.to_vec();
        for l in 0..p {
            let h = fd_step(theta[l]);
            ts[l] = theta[l] + h;
            self.jac_state(t, x, &ts, &mut jp);
            self.jac_param(t, x, &ts, &mut pp);
            ts[l] = theta[l] - h;
            self.jac_state(t, x, &ts, &mut jm);
            self.jac_param(t, x, &ts, &mut pm);
            ts[l] = theta[l];
            for i in 0..d {
                for j in 0..d {
                    out.xp[(i * d + j) * p + l] = (jp[i * d + j] - jm[i * d + j]) / (2.0 * h);
                }
                for k in 0..p {
                    out.pp[(i * p + k) * p + l] = (pp[i * p + k] - pm[i * p + k]) / (2.0 * h);
                }
            }
        }
    }
}

fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1e-3)
}

/// `η = (ξ, θ)` together with the mask of components being estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub xi: Vec<f64>,
    pub theta: Vec<f64>,
    pub estimate: Vec<bool>,
}

impl ParameterVector {
    /// All components marked as estimated.
    pub fn new(xi: Vec<f64>, theta: Vec<f64>) -> Self {
        let n = xi.len() + theta.len();
        Self { xi, theta, estimate: vec![true; n] }
    }

    pub fn with_known_xi(mut self) -> Self {
        for m in &mut self.estimate[..self.xi.len()] {
            *m = false;
        }
        self
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.dim(), "mask length");
        self.estimate = mask;
        self
    }

    pub fn dim(&self) -> usize {
        self.xi.len() + self.theta.len()
    }

    pub fn dim_state(&self) -> usize {
        self.xi.len()
    }

    /// Concatenated `(ξ₁..ξ_d, θ₁..θ_p)`.
    pub fn eta(&self) -> Vec<f64> {
        let mut v = self.xi.clone();
        v.extend_from_slice(&self.theta);
        v
    }

    pub fn get(&self, k: usize) -> f64 {
        if k < self.xi.len() {
            self.xi[k]
        } else {
            self.theta[k - self.xi.len()]
        }
    }

    pub fn set(&mut self, k: usize, value: f64) {
        let d = self.xi.len();
        if k < d {
            self.xi[k] = value;
        } else {
            self.theta[k - d] = value;
        }
    }

    pub fn estimated_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&k| self.estimate[k]).collect()
    }

    pub fn num_estimated(&self) -> usize {
        self.estimate.iter().filter(|&&m| m).count()
    }

    /// Values of the estimated components, in `η` order.
    pub fn estimated_values(&self) -> Vec<f64> {
        self.estimated_indices().into_iter().map(|k| self.get(k)).collect()
    }

    /// Copy with the estimated components replaced by `values`; known
    /// components are left untouched.
    pub fn with_estimated_values(&self, values: &[f64]) -> Self {
        let mut out = self.clone();
        for (k, v) in self.estimated_indices().into_iter().zip(values) {
            out.set(k, *v);
        }
        out
    }

    /// Component label, `xi1..xid` then `theta1..thetap`.
    pub fn label(&self, k: usize) -> String {
        let d = self.xi.len();
        if k < d {
            format!("xi{}", k + 1)
        } else {
            format!("theta{}", k - d + 1)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.xi.iter().chain(&self.theta).all(|v| v.is_finite())
    }

    pub fn check_against(&self, model: &dyn OdeModel) -> Result<()> {
        if self.xi.len() != model.dim_state() || self.theta.len() != model.dim_param() {
            return Err(Error::DimensionMismatch(format!(
                "model `{}` expects d={}, p={} but got d={}, p={}",
                model.name(),
                model.dim_state(),
                model.dim_param(),
                self.xi.len(),
                self.theta.len()
            )));
        }
        if self.estimate.len() != self.dim() {
            return Err(Error::DimensionMismatch("estimate mask length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, max_steps: 100_000 }
    }
}

impl Tolerances {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) || self.max_steps == 0 {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise-quartic continuous extension of an accepted Dormand–Prince
/// step sequence.
#[derive(Debug, Clone)]
pub struct DenseOutput {
    dim: usize,
    nodes: Vec<f64>,
    values: Vec<f64>,
    // five coefficient vectors per step
    coeffs: Vec<f64>,
    steps_rejected: usize,
}

impl DenseOutput {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node_value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn t_end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn steps_accepted(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn steps_rejected(&self) -> usize {
        self.steps_rejected
    }

    /// Evaluates the interpolant at `t`, clamped to `[0, t_end]`. Grid nodes
    /// return the stored step values exactly.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let n = self.dim;
        let last = self.nodes.len() - 1;
        let t = t.clamp(self.nodes[0], self.nodes[last]);
        let idx = self.nodes.partition_point(|&s| s <= t);
        if idx > 0 && self.nodes[idx - 1] == t {
            out.copy_from_slice(self.node_value(idx - 1));
            return;
        }
        let seg = idx.saturating_sub(1).min(last - 1);
        let t0 = self.nodes[seg];
        let h = self.nodes[seg + 1] - t0;
        let s = (t - t0) / h;
        let s1 = 1.0 - s;
        let c = &self.coeffs[seg * 5 * n..(seg + 1) * 5 * n];
        for i in 0..n {
            out[i] = c[i] + s * (c[n + i] + s1 * (c[2 * n + i] + s * (c[3 * n + i] + s1 * c[4 * n + i])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Integrates `y' = f(t, y)` from `0` to `t_end` with PI step control and
/// records the dense output of every accepted step.
pub fn dopri5<F>(f: F, y0: &[f64], t_end: f64, tol: &Tolerances) -> Result<DenseOutput>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    tol.validate()?;
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(Error::InvalidArgument(format!("t_end must be positive, got {t_end}")));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { t: 0.0 });
    }
    let n = y0.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut y = y0.to_vec();

    let mut out = DenseOutput {
        dim: n,
        nodes: vec![0.0],
        values: y.clone(),
        coeffs: Vec::new(),
        steps_rejected: 0,
    };

    let mut t = 0.0;
    f(t, &y, &mut k1);
    let mut h = initial_step(&f, &y, &k1, t_end, tol);
    let h_min = 1e-14 * t_end;
    let mut facold: f64 = 1e-4;
    let mut last_rejected = false;
    let (beta, expo1, safe, facc1, facc2) = (0.04, 0.17, 0.9, 5.0, 0.1);

    let mut steps = 0usize;
    while t < t_end {
        if steps >= tol.max_steps {
            return Err(Error::TooManySteps { t, max_steps: tol.max_steps });
        }
        steps += 1;
        if h < h_min {
            return Err(Error::StepSizeUnderflow { t });
        }
        let mut is_last = false;
        if t + h >= t_end {
            h = t_end - t;
            is_last = true;
        }

        for i in 0..n {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        f(t + C2 * h, &ytmp, &mut k2);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * h, &ytmp, &mut k3);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * h, &ytmp, &mut k4);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * h, &ytmp, &mut k5);
        for i in 0..n {
            ytmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + h, &ytmp, &mut k6);
        for i in 0..n {
            ynew[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(t + h, &ynew, &mut k7);

        let mut err = 0.0;
        for i in 0..n {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = tol.atol + tol.rtol * y[i].abs().max(ynew[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / n.max(1) as f64).sqrt();

        if !err.is_finite() {
            out.steps_rejected += 1;
            last_rejected = true;
            h *= 0.1;
            continue;
        }

        let fac11 = err.powf(expo1);
        if err <= 1.0 {
            let fac = (fac11 / facold.powf(beta) / safe).clamp(facc2, facc1);
            let mut hnew = h / fac;
            facold = err.max(1e-4);

            if ynew.iter().any(|v| !v.is_finite() || v.abs() > 1e150) {
                return Err(Error::NonFiniteState { t: t + h });
            }
            let base = out.coeffs.len();
            out.coeffs.resize(base + 5 * n, 0.0);
            let c = &mut out.coeffs[base..];
            for i in 0..n {
                let ydiff = ynew[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                c[i] = y[i];
                c[n + i] = ydiff;
                c[2 * n + i] = bspl;
                c[3 * n + i] = ydiff - h * k7[i] - bspl;
                c[4 * n + i] =
                    h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            t = if is_last { t_end } else { t + h };
            std::mem::swap(&mut y, &mut ynew);
            std::mem::swap(&mut k1, &mut k7);
            out.nodes.push(t);
            out.values.extend_from_slice(&y);

            if last_rejected {
                hnew = hnew.min(h);
            }
            last_rejected = false;
            h = hnew;
        } else {
            out.steps_rejected += 1;
            last_rejected = true;
            h /= (fac11 / safe).min(facc1);
        }
    }
    Ok(out)
}

fn initial_step<F>(f: &F, y: &[f64], f0: &[f64], t_end: f64, tol: &Tolerances) -> f64
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let sc: Vec<f64> = y.iter().map(|v| tol.atol + tol.rtol * v.abs()).collect();
    let rms = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
    let dnf = rms(f0);
    let dny = rms(y);
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { 0.01 * dny / dnf };
    h = h.min(t_end);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h * b).collect();
    let mut f1 = vec![0.0; n];
    f(h, &y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let der2 = rms(&diff) / h;
    let der12 = dnf.max(der2);
    let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(0.2) };
    (100.0 * h).min(h1).min(t_end)
}

/// Dense solution `x(η, ·)` on `[0, T]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    dense: DenseOutput,
}

impl Trajectory {
    pub fn dim_state(&self) -> usize {
        self.dense.dim()
    }

    /// Accepted step nodes, `0 = t_0 < ... < t_m = T`.
    pub fn grid(&self) -> &[f64] {
        self.dense.nodes()
    }

    pub fn value_at_node(&self, k: usize) -> &[f64] {
        self.dense.node_value(k)
    }

    pub fn t_end(&self) -> f64 {
        self.dense.t_end()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.dense.eval(t)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        self.dense.eval_into(t, out)
    }

    pub fn dense(&self) -> &DenseOutput {
        &self.dense
    }
}

/// Solves the initial value problem `x' = F(x, θ, t)`, `x(0) = ξ` on
/// `[0, t_end]`.
pub fn integrate(model: &dyn OdeModel, eta: &ParameterVector, t_end: f64, tol: &Tolerances) -> Result<Trajectory> {
    eta.check_against(model)?;
    let theta = eta.theta.clone();
    let dense = dopri5(|t, x, dx| model.rhs(t, x, &theta, dx), &eta.xi, t_end, tol)?;
    Ok(Trajectory { dense })
}

/// Autonomous form of a time-dependent model: the state gains a last
/// component `x_{d+1}(t) = t` with `x_{d+1}(0) = 0`.
pub struct Autonomized {
    inner: Arc<dyn OdeModel>,
    name: String,
}

pub fn autonomize(model: Arc<dyn OdeModel>) -> Autonomized {
    let name = format!("{}_autonomous", model.name());
    Autonomized { inner: model, name }
}

impl Autonomized {
    /// Extends `η` with the appended initial value `0`, marked as known.
    pub fn extend_eta(&self, eta: &ParameterVector) -> ParameterVector {
        let d = eta.xi.len();
        let mut xi = eta.xi.clone();
        xi.push(0.0);
        let mut mask = eta.estimate[..d].to_vec();
        mask.push(false);
        mask.extend_from_slice(&eta.estimate[d..]);
        ParameterVector { xi, theta: eta.theta.clone(), estimate: mask }
    }
}

impl OdeModel for Autonomized {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim_state(&self) -> usize {
        self.inner.dim_state() + 1
    }

    fn dim_param(&self) -> usize {
        self.inner.dim_param()
    }

    fn analytic_derivatives(&self) -> bool {
        self.inner.analytic_derivatives() && self.inner.is_autonomous()
    }

    fn rhs(&self, _t: f64, x: &[f64], theta: &[f64], dx: &mut [f64]) {
        let d = self.inner.dim_state();
        self.inner.rhs(x[d], &x[..d], theta, &mut dx[..d]);
        dx[d] = 1.0;
    }

    fn jac_state(&self, _t: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.inner.dim_state();
        let n = d + 1;
        let tau = x[d];
        let mut inner = vec![0.0; d * d];
        self.inner.jac_state(tau, &x[..d], theta, &mut inner);
        let mut ft = vec![0.0; d];
        self.inner.time_derivative(tau, &x[..d], theta, &mut ft);
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            out[i * n..i * n + d].copy_from_slice(&inner[i * d..(i + 1) * d]);
            out[i * n + d] = ft[i];
        }
    }

    fn jac_param(&self, _t: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.inner.dim_state();
        let p = self.inner.dim_param();
        self.inner.jac_param(x[d], &x[..d], theta, &mut out[..d * p]);
        out[d * p..].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Time-rescaled model on `τ = t / T ∈ [0, 1]`: `dx/dτ = T · F(x, θ, Tτ)`.
/// Parameters keep their original meaning; only observation times change.
pub struct TimeScaled {
    inner: Arc<dyn OdeModel>,
    scale: f64,
    name: String,
}

impl TimeScaled {
    pub fn new(inner: Arc<dyn OdeModel>, scale: f64) -> Self {
        assert!(scale > 0.0, "time scale must be positive");
        let name = inner.name().to_string();
        Self { inner, scale, name }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl ThetaLinear for TimeScaled {
    fn g(&self, x: &[f64], out: &mut [f64]) {
        if let Some(lin) = self.inner.theta_linear() {
            lin.g(x, out);
            out.iter_mut().for_each(|v| *v *= self.scale);
        }
    }
}

impl OdeModel for TimeScaled {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim_state(&self) -> usize {
        self.inner.dim_state()
    }

    fn dim_param(&self) -> usize {
        self.inner.dim_param()
    }

    fn is_autonomous(&self) -> bool {
        self.inner.is_autonomous()
    }

    fn analytic_derivatives(&self) -> bool {
        self.inner.analytic_derivatives()
    }

    fn theta_linear(&self) -> Option<&dyn ThetaLinear> {
        self.inner.theta_linear().map(|_| self as &dyn ThetaLinear)
    }

    fn rhs(&self, t: f64, x: &[f64], theta: &[f64], dx: &mut [f64]) {
        self.inner.rhs(t * self.scale, x, theta, dx);
        dx.iter_mut().for_each(|v| *v *= self.scale);
    }

    fn jac_state(&self, t: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.jac_state(t * self.scale, x, theta, out);
        out.iter_mut().for_each(|v| *v *= self.scale);
    }

    fn jac_param(&self, t: f64, x: &[f64], theta: &[f64], out: &mut [f64]) {
        self.inner.jac_param(t * self.scale, x, theta, out);
        out.iter_mut().for_each(|v| *v *= self.scale);
    }

    fn hessians(&self, t: f64, x: &[f64], theta: &[f64], out: &mut SecondDerivatives) {
        self.inner.hessians(t * self.scale, x, theta, out);
        for v in out.xx.iter_mut().chain(out.xp.iter_mut()).chain(out.pp.iter_mut()) {
            *v *= self.scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay;

    impl OdeModel for Decay {
        fn name(&self) -> &str {
            "decay"
        }
        fn dim_state(&self) -> usize {
            1
        }
        fn dim_param(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, x: &[f64], theta: &[f64], dx: &mut [f64]) {
            dx[0] = theta[0] * x[0];
        }
    }

    /// x' = θ t, explicitly time dependent.
    struct Ramp;

    impl OdeModel for Ramp {
        fn name(&self) -> &str {
            "ramp"
        }
        fn dim_state(&self) -> usize {
            1
        }
        fn dim_param(&self) -> usize {
            1
        }
        fn is_autonomous(&self) -> bool {
            false
        }
        fn rhs(&self, t: f64, _x: &[f64], theta: &[f64], dx: &mut [f64]) {
            dx[0] = theta[0] * t;
        }
    }

    #[test]
    fn zero_rate_is_constant() {
        let eta = ParameterVector::new(vec![1.0], vec![0.0]);
        let traj = integrate(&Decay, &eta, 10.0, &Tolerances::default()).unwrap();
        for k in 0..traj.grid().len() {
            assert_eq!(traj.value_at_node(k)[0], 1.0);
        }
        assert_eq!(traj.eval(3.7)[0], 1.0);
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let eta = ParameterVector::new(vec![1.0], vec![-1.0]);
        let traj = integrate(&Decay, &eta, 1.0, &Tolerances::default()).unwrap();
        assert!((traj.eval(1.0)[0] - (-1.0f64).exp()).abs() < 1e-8);
        for t in [0.013, 0.25, 0.5, 0.77, 0.999] {
            assert!((traj.eval(t)[0] - (-t as f64).exp()).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn grid_spans_horizon_and_interpolant_hits_nodes() {
        let eta = ParameterVector::new(vec![2.0], vec![0.3]);
        let traj = integrate(&Decay, &eta, 4.0, &Tolerances::default()).unwrap();
        let g = traj.grid();
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 4.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        for (k, &t) in g.iter().enumerate() {
            assert_eq!(traj.eval(t)[0], traj.value_at_node(k)[0]);
        }
    }

    #[test]
    fn time_reversal_recovers_start() {
        let tol = Tolerances::default();
        let fwd = integrate(&Decay, &ParameterVector::new(vec![1.0], vec![-1.0]), 1.0, &tol).unwrap();
        let end = fwd.eval(1.0)[0];
        let back = integrate(&Decay, &ParameterVector::new(vec![end], vec![1.0]), 1.0, &tol).unwrap();
        assert!((back.eval(1.0)[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn halving_tolerance_is_consistent() {
        let eta = ParameterVector::new(vec![1.0], vec![0.7]);
        let coarse = Tolerances::new(1e-6, 1e-8);
        let fine = Tolerances::new(5e-7, 5e-9);
        let a = integrate(&Decay, &eta, 3.0, &coarse).unwrap().eval(3.0)[0];
        let b = integrate(&Decay, &eta, 3.0, &fine).unwrap().eval(3.0)[0];
        assert!((a - b).abs() < 1e-6 * a.abs());
    }

    #[test]
    fn blow_up_is_reported() {
        // x' = x^2 explodes at t = 1
        struct Riccati;
        impl OdeModel for Riccati {
            fn name(&self) -> &str {
                "riccati"
            }
            fn dim_state(&self) -> usize {
                1
            }
            fn dim_param(&self) -> usize {
                1
            }
            fn rhs(&self, _t: f64, x: &[f64], theta: &[f64], dx: &mut [f64]) {
                dx[0] = theta[0] * x[0] * x[0];
            }
        }
        let eta = ParameterVector::new(vec![1.0], vec![1.0]);
        let err = integrate(&Riccati, &eta, 2.0, &Tolerances::default()).unwrap_err();
        assert!(
            matches!(err, Error::StepSizeUnderflow { .. } | Error::NonFiniteState { .. } | Error::TooManySteps { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let eta = ParameterVector::new(vec![1.0], vec![1.0]);
        assert!(integrate(&Decay, &eta, 0.0, &Tolerances::default()).is_err());
        assert!(integrate(&Decay, &eta, 1.0, &Tolerances::new(0.0, 1e-9)).is_err());
        let bad = ParameterVector::new(vec![1.0, 2.0], vec![1.0]);
        assert!(matches!(
            integrate(&Decay, &bad, 1.0, &Tolerances::default()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn autonomized_ramp_gives_half_t_squared() {
        let auto = autonomize(Arc::new(Ramp));
        assert_eq!(auto.dim_state(), 2);
        let eta = auto.extend_eta(&ParameterVector::new(vec![0.0], vec![1.0]));
        assert_eq!(eta.xi, vec![0.0, 0.0]);
        assert_eq!(eta.estimate, vec![true, false, true]);
        let traj = integrate(&auto, &eta, 1.0, &Tolerances::default()).unwrap();
        let end = traj.eval(1.0);
        assert!((end[0] - 0.5).abs() < 1e-10);
        assert!((end[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn autonomized_extra_component_has_unit_slope() {
        let auto = autonomize(Arc::new(Decay));
        let mut dx = [0.0; 2];
        auto.rhs(0.0, &[3.0, 0.4], &[-2.0], &mut dx);
        assert_eq!(dx, [-6.0, 1.0]);
        let eta = auto.extend_eta(&ParameterVector::new(vec![7.0], vec![-2.0]));
        assert_eq!(eta.xi[1], 0.0);
        let mut jac = [0.0; 4];
        auto.jac_state(0.0, &[1.0, 0.5], &[0.5], &mut jac);
        assert_eq!(&jac[2..], &[0.0, 0.0]);
    }

    #[test]
    fn time_scaled_model_agrees_with_original() {
        let scaled = TimeScaled::new(Arc::new(Decay), 10.0);
        let eta = ParameterVector::new(vec![1.5], vec![-0.2]);
        let a = integrate(&Decay, &eta, 10.0, &Tolerances::default()).unwrap();
        let b = integrate(&scaled, &eta, 1.0, &Tolerances::default()).unwrap();
        for tau in [0.1, 0.35, 0.8, 1.0] {
            assert!((a.eval(10.0 * tau)[0] - b.eval(tau)[0]).abs() < 1e-7);
        }
    }

    #[test]
    fn parameter_vector_masks() {
        let eta = ParameterVector::new(vec![1.0, 2.0], vec![3.0]).with_known_xi();
        assert_eq!(eta.estimated_indices(), vec![2]);
        assert_eq!(eta.estimated_values(), vec![3.0]);
        let upd = eta.with_estimated_values(&[9.0]);
        assert_eq!(upd.eta(), vec![1.0, 2.0, 9.0]);
        assert_eq!(upd.label(0), "xi1");
        assert_eq!(upd.label(2), "theta1");
    }
}

//! Smooth-and-match preliminary estimators.
//!
//! For systems linear in θ the integral form is used: with
//! `Ĝ(t) = ∫₀ᵗ g(x̂(s)) ds`, `Â = ∫₀ᵀ Ĝ`, `B̂ = ∫₀ᵀ ĜᵀĜ`, the pair `(ξ̂, θ̂)`
//! minimizes `∫₀ᵀ |x̂(t) − ξ − Ĝ(t) θ|² dt` in closed form. Other systems use
//! gradient matching followed by the linear least-squares recovery of `ξ`.
//! All time integrals use the trapezoidal rule on the smoother's grid.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::ode::{OdeModel, ParameterVector};
use crate::quadrature::trapezoid_weights;
use crate::smoothing::SmoothedCurve;

/// Normal matrices above this scaled condition number are treated as
/// singular.
pub const MAX_NORMAL_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmeMethod {
    IntegralSme,
    DerivativeSme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreliminaryEstimate {
    pub eta_hat: ParameterVector,
    pub method: SmeMethod,
    pub bandwidth: f64,
}

/// `Ĝ` on the smoother grid together with `Â`, `B̂` and the two data
/// moments `∫ x̂` and `∫ Ĝᵀ x̂`.
#[derive(Debug, Clone)]
pub struct IntegralOperators {
    pub grid: Vec<f64>,
    /// `Ĝ(t_k)`, each `d × p`
    pub g_hat: Vec<DMatrix<f64>>,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub x_integral: DVector<f64>,
    pub gx_integral: DVector<f64>,
}

impl IntegralOperators {
    pub fn horizon(&self) -> f64 {
        self.grid.last().unwrap() - self.grid[0]
    }
}

pub fn integral_operators(curve: &SmoothedCurve, model: &dyn OdeModel) -> Result<IntegralOperators> {
    let lin = model
        .theta_linear()
        .ok_or_else(|| Error::InvalidArgument(format!("model `{}` is not linear in theta", model.name())))?;
    let d = model.dim_state();
    let p = model.dim_param();
    if curve.dim_state() != d {
        return Err(Error::DimensionMismatch(format!("curve has {} states, model {d}", curve.dim_state())));
    }
    let grid = curve.eval_grid.clone();
    let m = grid.len();
    let w = trapezoid_weights(&grid);

    let mut gbuf = vec![0.0; d * p];
    let mut g_prev = DMatrix::zeros(d, p);
    let mut g_hat = Vec::with_capacity(m);
    let mut cum = DMatrix::zeros(d, p);
    for k in 0..m {
        lin.g(&curve.value_at(k), &mut gbuf);
        let g_now = DMatrix::from_row_slice(d, p, &gbuf);
        if k > 0 {
            let h = grid[k] - grid[k - 1];
            cum += (&g_prev + &g_now) * (0.5 * h);
        }
        g_hat.push(cum.clone());
        g_prev = g_now;
    }

    let mut a_hat = DMatrix::zeros(d, p);
    let mut b_hat = DMatrix::zeros(p, p);
    let mut x_integral = DVector::zeros(d);
    let mut gx_integral = DVector::zeros(p);
    for k in 0..m {
        let x = curve.values.column(k);
        a_hat += &g_hat[k] * w[k];
        b_hat += g_hat[k].tr_mul(&g_hat[k]) * w[k];
        x_integral += x * w[k];
        gx_integral += g_hat[k].tr_mul(&x) * w[k];
    }
    Ok(IntegralOperators { grid, g_hat, a_hat, b_hat, x_integral, gx_integral })
}

fn check_condition(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    let c = linalg::scaled_condition(m);
    if !(c <= MAX_NORMAL_CONDITION) {
        return Err(Error::SingularNormalMatrix(what));
    }
    Ok(())
}

/// Closed-form integral smooth-and-match estimator.
///
/// Without `known_xi`:
/// `ξ̂ = (T·I − ÂB̂⁻¹Âᵀ)⁻¹ ∫ (I − ÂB̂⁻¹Ĝᵀ(t)) x̂(t) dt` and
/// `θ̂ = B̂⁻¹ ∫ Ĝᵀ(t)(x̂(t) − ξ̂) dt`. With `known_xi` only the second
/// formula is used, with `ξ̂` replaced by the known value.
pub fn integral_sme(
    curve: &SmoothedCurve,
    model: &dyn OdeModel,
    known_xi: Option<&[f64]>,
) -> Result<PreliminaryEstimate> {
    let ops = integral_operators(curve, model)?;
    let d = model.dim_state();
    check_condition(&ops.b_hat, "B")?;

    let xi = match known_xi {
        Some(xi) => {
            if xi.len() != d {
                return Err(Error::DimensionMismatch(format!("known xi has {} entries, expected {d}", xi.len())));
            }
            DVector::from_column_slice(xi)
        }
        None => {
            // B⁻¹Âᵀ and B⁻¹∫Ĝᵀx̂ through QR solves
            let b_inv_at = linalg::lstsq(&ops.b_hat, &ops.a_hat.transpose()).ok_or(Error::SingularNormalMatrix("B"))?;
            let b_inv_gx = linalg::lstsq_vec(&ops.b_hat, &ops.gx_integral).ok_or(Error::SingularNormalMatrix("B"))?;
            let lhs = DMatrix::identity(d, d) * ops.horizon() - &ops.a_hat * b_inv_at;
            let rhs = &ops.x_integral - &ops.a_hat * b_inv_gx;
            check_condition(&lhs, "T*I - A B^-1 A^T")?;
            linalg::lstsq_vec(&lhs, &rhs).ok_or(Error::SingularNormalMatrix("T*I - A B^-1 A^T"))?
        }
    };
    let theta_rhs = &ops.gx_integral - ops.a_hat.tr_mul(&xi);
    let theta = linalg::lstsq_vec(&ops.b_hat, &theta_rhs).ok_or(Error::SingularNormalMatrix("B"))?;

    let mut eta = ParameterVector::new(xi.iter().copied().collect(), theta.iter().copied().collect());
    if known_xi.is_some() {
        eta = eta.with_known_xi();
    }
    finite(PreliminaryEstimate { eta_hat: eta, method: SmeMethod::IntegralSme, bandwidth: curve.bandwidth })
}

/// Integral SME honouring an arbitrary estimate mask: known components are
/// taken from `template`, the rest solve the reduced normal equations of
/// `∫ |x̂ − ξ − Ĝθ|²`.
pub fn integral_sme_masked(
    curve: &SmoothedCurve,
    model: &dyn OdeModel,
    template: &ParameterVector,
) -> Result<PreliminaryEstimate> {
    template.check_against(model)?;
    let d = model.dim_state();
    let xi_mask = &template.estimate[..d];
    let theta_all = template.estimate[d..].iter().all(|&m| m);
    if theta_all && xi_mask.iter().all(|&m| m) {
        return integral_sme(curve, model, None).map(|mut e| {
            e.eta_hat.estimate = template.estimate.clone();
            e
        });
    }
    if theta_all && xi_mask.iter().all(|&m| !m) {
        return integral_sme(curve, model, Some(&template.xi)).map(|mut e| {
            e.eta_hat.estimate = template.estimate.clone();
            e
        });
    }

    let ops = integral_operators(curve, model)?;
    let q = template.dim();
    let mut full = DMatrix::zeros(q, q);
    full.view_mut((0, 0), (d, d)).copy_from(&(DMatrix::<f64>::identity(d, d) * ops.horizon()));
    full.view_mut((0, d), ops.a_hat.shape()).copy_from(&ops.a_hat);
    full.view_mut((d, 0), (ops.a_hat.ncols(), d)).copy_from(&ops.a_hat.transpose());
    full.view_mut((d, d), ops.b_hat.shape()).copy_from(&ops.b_hat);
    let mut rhs = DVector::zeros(q);
    rhs.rows_mut(0, d).copy_from(&ops.x_integral);
    rhs.rows_mut(d, q - d).copy_from(&ops.gx_integral);

    let est = template.estimated_indices();
    let known: Vec<usize> = (0..q).filter(|k| !template.estimate[*k]).collect();
    let eta0 = template.eta();
    let sub = DMatrix::from_fn(est.len(), est.len(), |a, b| full[(est[a], est[b])]);
    let sub_rhs = DVector::from_fn(est.len(), |a, _| {
        rhs[est[a]] - known.iter().map(|&k| full[(est[a], k)] * eta0[k]).sum::<f64>()
    });
    check_condition(&sub, "reduced normal matrix")?;
    let sol = linalg::lstsq_vec(&sub, &sub_rhs).ok_or(Error::SingularNormalMatrix("reduced normal matrix"))?;
    let eta = template.with_estimated_values(sol.as_slice());
    finite(PreliminaryEstimate { eta_hat: eta, method: SmeMethod::IntegralSme, bandwidth: curve.bandwidth })
}

fn finite(e: PreliminaryEstimate) -> Result<PreliminaryEstimate> {
    if e.eta_hat.is_finite() {
        Ok(e)
    } else {
        Err(Error::SingularNormalMatrix("non-finite preliminary estimate"))
    }
}

/// Box and restart budget for the derivative SME when the model is not
/// linear in θ.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub restarts: usize,
    pub max_iters: u64,
    pub seed: u64,
}

impl SearchBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper, restarts: 10, max_iters: 2000, seed: 0 }
    }
}

struct MatchCost<'a> {
    model: &'a dyn OdeModel,
    curve: &'a SmoothedCurve,
    weights: &'a [f64],
    template: &'a [f64],
    free: &'a [usize],
    lower: &'a [f64],
    upper: &'a [f64],
}

impl MatchCost<'_> {
    fn objective(&self, free_values: &[f64]) -> f64 {
        let d = self.model.dim_state();
        let mut theta = self.template.to_vec();
        for (k, &idx) in self.free.iter().enumerate() {
            let v = free_values[k];
            if v < self.lower[k] || v > self.upper[k] || !v.is_finite() {
                return f64::INFINITY;
            }
            theta[idx] = v;
        }
        let mut f = vec![0.0; d];
        let mut total = 0.0;
        for (k, &t) in self.curve.eval_grid.iter().enumerate() {
            if self.weights[k] == 0.0 {
                continue;
            }
            self.model.rhs(t, &self.curve.value_at(k), &theta, &mut f);
            let r: f64 = (0..d).map(|i| (self.curve.derivatives[(i, k)] - f[i]).powi(2)).sum();
            total += self.weights[k] * r;
        }
        total
    }
}

impl CostFunction for MatchCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.objective(p))
    }
}

/// Gradient-matching estimator: minimizes
/// `∫ |x̂'(t) − F(x̂(t); θ)|² w(t) dt` over the estimated θ components, then
/// recovers the estimated ξ components with [`recover_initial_values`].
///
/// θ-linear models reduce to a weighted linear least-squares solve; other
/// models need `search` and use Nelder–Mead with random restarts inside the
/// box.
pub fn derivative_sme(
    curve: &SmoothedCurve,
    model: &dyn OdeModel,
    weight: &dyn Fn(f64) -> f64,
    template: &ParameterVector,
    search: Option<&SearchBox>,
) -> Result<PreliminaryEstimate> {
    template.check_against(model)?;
    let d = model.dim_state();
    let p = model.dim_param();
    let weights: Vec<f64> = trapezoid_weights(&curve.eval_grid)
        .iter()
        .zip(&curve.eval_grid)
        .map(|(q, &t)| q * weight(t))
        .collect();
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument("weight function must be nonnegative".into()));
    }
    let free: Vec<usize> = (0..p).filter(|k| template.estimate[d + k]).collect();

    let theta = if free.is_empty() {
        template.theta.clone()
    } else if let Some(lin) = model.theta_linear() {
        let mut gbuf = vec![0.0; d * p];
        let mut normal = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for k in 0..curve.len() {
            if weights[k] == 0.0 {
                continue;
            }
            lin.g(&curve.value_at(k), &mut gbuf);
            let g = DMatrix::from_row_slice(d, p, &gbuf);
            normal += g.tr_mul(&g) * weights[k];
            rhs += g.tr_mul(&curve.derivatives.column(k)) * weights[k];
        }
        let fixed: Vec<usize> = (0..p).filter(|k| !template.estimate[d + k]).collect();
        let sub = DMatrix::from_fn(free.len(), free.len(), |a, b| normal[(free[a], free[b])]);
        let sub_rhs = DVector::from_fn(free.len(), |a, _| {
            rhs[free[a]] - fixed.iter().map(|&k| normal[(free[a], k)] * template.theta[k]).sum::<f64>()
        });
        check_condition(&sub, "gradient-matching normal matrix")?;
        let sol = linalg::lstsq_vec(&sub, &sub_rhs).ok_or(Error::SingularNormalMatrix("gradient-matching normal matrix"))?;
        let mut theta = template.theta.clone();
        for (a, &k) in free.iter().enumerate() {
            theta[k] = sol[a];
        }
        theta
    } else {
        let search = search.ok_or_else(|| {
            Error::InvalidArgument("a search box is required for models that are not linear in theta".into())
        })?;
        nelder_mead_match(curve, model, &weights, template, &free, search)?
    };

    let mut eta = template.clone();
    eta.theta = theta;
    if template.estimate[..d].iter().any(|&m| m) {
        let xi = recover_initial_values(curve, model, &eta.theta);
        for i in 0..d {
            if template.estimate[i] {
                eta.xi[i] = xi[i];
            }
        }
    }
    if !eta.is_finite() {
        return Err(Error::OptimizerDiverged("non-finite gradient-matching estimate".into()));
    }
    Ok(PreliminaryEstimate { eta_hat: eta, method: SmeMethod::DerivativeSme, bandwidth: curve.bandwidth })
}

fn nelder_mead_match(
    curve: &SmoothedCurve,
    model: &dyn OdeModel,
    weights: &[f64],
    template: &ParameterVector,
    free: &[usize],
    search: &SearchBox,
) -> Result<Vec<f64>> {
    if search.lower.len() != free.len() || search.upper.len() != free.len() {
        return Err(Error::DimensionMismatch(format!(
            "search box must have {} entries (one per estimated theta)",
            free.len()
        )));
    }
    if search.lower.iter().zip(&search.upper).any(|(l, u)| !(l < u)) {
        return Err(Error::InvalidArgument("search box lower bounds must be below upper bounds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..search.restarts.max(1) {
        let start: Vec<f64> =
            search.lower.iter().zip(&search.upper).map(|(l, u)| rng.random_range(*l..*u)).collect();
        let mut simplex = vec![start.clone()];
        for k in 0..free.len() {
            let mut v = start.clone();
            let span = 0.1 * (search.upper[k] - search.lower[k]);
            v[k] = if v[k] + span <= search.upper[k] { v[k] + span } else { v[k] - span };
            simplex.push(v);
        }
        let cost = MatchCost {
            model,
            curve,
            weights,
            template: &template.theta,
            free,
            lower: &search.lower,
            upper: &search.upper,
        };
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(1e-12)
            .map_err(|e| Error::OptimizerDiverged(e.to_string()))?;
        let res = Executor::new(cost, solver).configure(|s| s.max_iters(search.max_iters)).run();
        let Ok(res) = res else { continue };
        let state = res.state();
        if let Some(p) = state.get_best_param() {
            let c = state.get_best_cost();
            if c.is_finite() && best.as_ref().map_or(true, |(bc, _)| c < *bc) {
                best = Some((c, p.clone()));
            }
        }
    }
    let (_, sol) = best.ok_or_else(|| Error::OptimizerDiverged("no restart produced a finite objective".into()))?;
    let mut theta = template.theta.clone();
    for (a, &k) in free.iter().enumerate() {
        theta[k] = sol[a];
    }
    Ok(theta)
}

/// `ξ̂ = (1/T) ∫₀ᵀ [x̂(t) − ∫₀ᵗ F(x̂(s); θ̂) ds] dt`, the minimizer of
/// `∫₀ᵀ |x̂(t) − ξ − ∫₀ᵗ F(x̂(s); θ̂) ds|² dt`.
pub fn recover_initial_values(curve: &SmoothedCurve, model: &dyn OdeModel, theta_hat: &[f64]) -> Vec<f64> {
    let d = curve.dim_state();
    let grid = &curve.eval_grid;
    let w = trapezoid_weights(grid);
    let horizon = grid.last().unwrap() - grid[0];
    let mut f_prev = vec![0.0; d];
    let mut f_now = vec![0.0; d];
    let mut cum = vec![0.0; d];
    let mut acc = vec![0.0; d];
    for (k, &t) in grid.iter().enumerate() {
        model.rhs(t, &curve.value_at(k), theta_hat, &mut f_now);
        if k > 0 {
            let h = t - grid[k - 1];
            for i in 0..d {
                cum[i] += 0.5 * h * (f_prev[i] + f_now[i]);
            }
        }
        for i in 0..d {
            acc[i] += w[k] * (curve.values[(i, k)] - cum[i]);
        }
        std::mem::swap(&mut f_prev, &mut f_now);
    }
    acc.iter().map(|a| a / horizon).collect()
}

/// The estimator used ahead of the one-step update: the integral SME when the
/// model is linear in θ, gradient matching otherwise.
pub fn preliminary_estimate(
    curve: &SmoothedCurve,
    model: &dyn OdeModel,
    template: &ParameterVector,
    search: Option<&SearchBox>,
) -> Result<PreliminaryEstimate> {
    if model.theta_linear().is_some() {
        integral_sme_masked(curve, model, template)
    } else {
        derivative_sme(curve, model, &|_| 1.0, template, search)
    }
}

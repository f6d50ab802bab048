//! Residual variance, Fisher information and Wald confidence intervals.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::ode::{OdeModel, ParameterVector, Tolerances};
use crate::quadrature::trapezoid_weights;
use crate::sensitivity::{self, SensitivityOrder, SensitivitySolution};
use crate::smoothing::uniform_grid;

/// Fisher matrices above this scaled condition number cannot be inverted.
pub const MAX_FISHER_CONDITION: f64 = 1e12;

/// Default number of points in the Fisher quadrature grid.
pub const DEFAULT_QUADRATURE_POINTS: usize = 2001;

/// `σ̂² = RSS / (d (n − 1))`.
pub fn sigma2_from_rss(rss: f64, dim_state: usize, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument("at least two observations are needed to estimate sigma^2".into()));
    }
    Ok(rss / (dim_state * (n - 1)) as f64)
}

pub fn sigma2_hat(model: &dyn OdeModel, eta: &ParameterVector, data: &Dataset, tol: &Tolerances) -> Result<f64> {
    let rss = sensitivity::residual_sum_of_squares(model, eta, data, tol)?;
    sigma2_from_rss(rss, data.dim_state(), data.n())
}

/// `I(η) = (1/σ²) Σ_i (1/T) ∫₀ᵀ s_i(t) s_i(t)ᵀ dt` over the estimated
/// components.
///
/// The σ²-free part `unit` is stored separately so that a zero residual
/// variance still yields (degenerate) intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherMatrix {
    /// `Σ_i (1/T) ∫ s_i s_iᵀ`
    pub unit: DMatrix<f64>,
    pub horizon: f64,
    pub sigma2: f64,
    pub indices: Vec<usize>,
}

impl FisherMatrix {
    /// `unit / σ²`; infinite entries when σ² is zero.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.unit / self.sigma2
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn condition(&self) -> f64 {
        linalg::scaled_condition(&self.unit)
    }

    /// `I⁻¹ = σ² · unit⁻¹`.
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let condition = self.condition();
        if !(condition <= MAX_FISHER_CONDITION) {
            return Err(Error::SingularFisher { condition });
        }
        let inv = linalg::inverse_scaled(&self.unit).ok_or(Error::SingularFisher { condition })?;
        Ok(inv * self.sigma2)
    }

    /// Asymptotic variances `I⁻¹_jj / n`.
    pub fn asymptotic_variances(&self, n: usize) -> Result<Vec<f64>> {
        let inv = self.inverse()?;
        Ok((0..self.dim()).map(|j| inv[(j, j)] / n as f64).collect())
    }
}

pub fn fisher_info(
    model: &dyn OdeModel,
    eta: &ParameterVector,
    sigma2: f64,
    t_end: f64,
    quadrature_points: usize,
    tol: &Tolerances,
) -> Result<FisherMatrix> {
    let sol = sensitivity::solve_sensitivities(model, eta, t_end, SensitivityOrder::First, tol)?;
    fisher_from(&sol, eta, sigma2, quadrature_points)
}

/// Fisher information from an existing sensitivity solution, integrated by
/// the trapezoidal rule on `quadrature_points` equispaced points of
/// `[0, T]` through the dense output.
pub fn fisher_from(
    sol: &SensitivitySolution,
    eta: &ParameterVector,
    sigma2: f64,
    quadrature_points: usize,
) -> Result<FisherMatrix> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma^2 must be finite and nonnegative, got {sigma2}")));
    }
    if quadrature_points < 2 {
        return Err(Error::InvalidArgument("at least two quadrature points are required".into()));
    }
    let d = sol.dim_state();
    let q = sol.dim_eta();
    let horizon = sol.t_end();
    let grid = uniform_grid(horizon, quadrature_points);
    let w = trapezoid_weights(&grid);
    let idx = eta.estimated_indices();
    let r = idx.len();
    let mut unit = DMatrix::zeros(r, r);
    let mut y = vec![0.0; sol.dense().dim()];
    for (k, &t) in grid.iter().enumerate() {
        sol.eval_raw(t, &mut y);
        let s = &y[d..d + d * q];
        for i in 0..d {
            for (a, &ka) in idx.iter().enumerate() {
                let sa = s[i * q + ka] * w[k];
                for (b, &kb) in idx.iter().enumerate().skip(a) {
                    unit[(a, b)] += sa * s[i * q + kb];
                }
            }
        }
    }
    unit /= horizon;
    for a in 0..r {
        for b in 0..a {
            unit[(a, b)] = unit[(b, a)];
        }
    }
    Ok(FisherMatrix { unit, horizon, sigma2, indices: idx })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    /// index into `η`
    pub index: usize,
    pub label: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub std_error: f64,
}

impl Interval {
    /// Inclusive containment.
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Two-sided standard normal quantile `z_{1 − (1 − level)/2}`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {level}")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

/// Wald intervals `η̄_j ± z √(I⁻¹_jj / n)` for the estimated components.
pub fn confidence_intervals(eta: &ParameterVector, fisher: &FisherMatrix, n: usize, level: f64) -> Result<Vec<Interval>> {
    let z = normal_quantile(level)?;
    let var = fisher.asymptotic_variances(n)?;
    Ok(fisher
        .indices
        .iter()
        .zip(var)
        .map(|(&k, v)| {
            let se = v.max(0.0).sqrt();
            let point = eta.get(k);
            Interval { index: k, label: eta.label(k), point, lower: point - z * se, upper: point + z * se, std_error: se }
        })
        .collect())
}

//! Levenberg–Marquardt least-squares baseline with the residual Jacobian
//! taken from the first-order sensitivities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::accel::{self, AccelConfig, Diagnostics, EstimateReport, Method};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::DEFAULT_QUADRATURE_POINTS;
use crate::linalg;
use crate::ode::{OdeModel, ParameterVector, Tolerances};
use crate::preliminary::{self, PreliminaryEstimate};
use crate::sensitivity::{self, SensitivityOrder};
use crate::smoothing::{self, SmootherConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsConfig {
    pub max_iterations: usize,
    /// stop when `‖Ψ_n‖∞` falls below this
    pub gradient_tol: f64,
    /// stop when the relative step length falls below this
    pub step_tol: f64,
    /// stop when the relative RSS decrease of an accepted step falls below
    /// this
    pub rss_tol: f64,
    /// initial multiplier of `diag(JᵀJ)` in the damped normal equations
    pub initial_damping: f64,
    pub tol: Tolerances,
    pub quadrature_points: usize,
    pub level: f64,
}

impl Default for NlsConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            rss_tol: 1e-14,
            initial_damping: 1e-3,
            tol: Tolerances::default(),
            quadrature_points: DEFAULT_QUADRATURE_POINTS,
            level: 0.95,
        }
    }
}

impl NlsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        for (name, v) in [
            ("gradient_tol", self.gradient_tol),
            ("step_tol", self.step_tol),
            ("rss_tol", self.rss_tol),
            ("initial_damping", self.initial_damping),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    Step,
    Rss,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlsOutcome {
    pub eta: ParameterVector,
    pub rss: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// RSS after each accepted step, starting with the initial value
    pub rss_history: Vec<f64>,
}

impl NlsOutcome {
    pub fn converged(&self) -> bool {
        self.termination != Termination::MaxIterations
    }
}

struct Linearization {
    rss: f64,
    /// `Jᵀ r` over the estimated components, `= Ψ_n`
    grad: DVector<f64>,
    /// `Jᵀ J`
    normal: DMatrix<f64>,
}

fn linearize(model: &dyn OdeModel, eta: &ParameterVector, data: &Dataset, tol: &Tolerances) -> Result<Linearization> {
    let sol = sensitivity::solve_sensitivities(model, eta, data.t_end(), SensitivityOrder::First, tol)?;
    let v = sensitivity::estimating_function_from(&sol, eta, data);
    Ok(Linearization { rss: v.rss, grad: v.psi, normal: -v.dpsi })
}

/// Minimizes `R_n(η)` from `start` over the estimated components.
///
/// Exhausting the iteration budget is not an error: the best iterate is
/// returned with [`Termination::MaxIterations`].
pub fn levenberg_marquardt(
    model: &dyn OdeModel,
    data: &Dataset,
    start: &ParameterVector,
    config: &NlsConfig,
) -> Result<NlsOutcome> {
    config.validate()?;
    start.check_against(model)?;
    if !start.is_finite() {
        return Err(Error::InvalidArgument("initial parameter vector is not finite".into()));
    }
    let mut eta = start.clone();
    let mut lin = linearize(model, &eta, data, &config.tol)?;
    let mut history = vec![lin.rss];
    if eta.num_estimated() == 0 {
        return Ok(NlsOutcome { eta, rss: lin.rss, iterations: 0, termination: Termination::Gradient, rss_history: history });
    }
    let mut mu = config.initial_damping;
    let mut nu = 2.0;

    for iter in 0..config.max_iterations {
        if lin.grad.amax() < config.gradient_tol {
            return Ok(NlsOutcome { eta, rss: lin.rss, iterations: iter, termination: Termination::Gradient, rss_history: history });
        }
        let scale = DVector::from_iterator(lin.normal.nrows(), lin.normal.diagonal().iter().map(|v| v.abs().max(1e-300)));
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut damped = lin.normal.clone();
            for k in 0..damped.nrows() {
                damped[(k, k)] += mu * scale[k];
            }
            let Some(delta) = linalg::solve_scaled(&damped, &lin.grad) else {
                mu *= nu;
                nu *= 2.0;
                if attempts > 60 {
                    let condition = linalg::scaled_condition(&lin.normal);
                    return Err(Error::SingularJacobian { condition });
                }
                continue;
            };
            let current = eta.estimated_values();
            let trial_values: Vec<f64> = current.iter().zip(delta.iter()).map(|(e, d)| e + d).collect();
            let trial = eta.with_estimated_values(&trial_values);
            let step_norm = delta.norm();
            let eta_norm = DVector::from_vec(current).norm();
            if step_norm <= config.step_tol * (eta_norm + config.step_tol) {
                return Ok(NlsOutcome { eta, rss: lin.rss, iterations: iter + 1, termination: Termination::Step, rss_history: history });
            }
            // predicted decrease of R_n = δᵀ(μ D δ + Jᵀr)
            let predicted = delta.dot(&(delta.component_mul(&scale) * mu + &lin.grad));
            let trial_lin = if trial.is_finite() { linearize(model, &trial, data, &config.tol).ok() } else { None };
            match trial_lin {
                Some(tl) if tl.rss.is_finite() && tl.rss < lin.rss => {
                    let rho = (lin.rss - tl.rss) / predicted.max(f64::MIN_POSITIVE);
                    mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                    nu = 2.0;
                    let rel = (lin.rss - tl.rss) / lin.rss.max(f64::MIN_POSITIVE);
                    eta = trial;
                    lin = tl;
                    history.push(lin.rss);
                    if rel < config.rss_tol {
                        return Ok(NlsOutcome { eta, rss: lin.rss, iterations: iter + 1, termination: Termination::Rss, rss_history: history });
                    }
                    break;
                }
                _ => {
                    mu *= nu;
                    nu *= 2.0;
                    if !mu.is_finite() || attempts > 60 {
                        // no decrease possible along any damped direction
                        return Ok(NlsOutcome { eta, rss: lin.rss, iterations: iter + 1, termination: Termination::Step, rss_history: history });
                    }
                }
            }
        }
    }
    log::warn!("Levenberg-Marquardt stopped after {} iterations without converging", config.max_iterations);
    Ok(NlsOutcome {
        eta,
        rss: lin.rss,
        iterations: config.max_iterations,
        termination: Termination::MaxIterations,
        rss_history: history,
    })
}

/// The default NLS start: the preliminary estimate at the largest candidate
/// bandwidth.
pub fn initial_estimate(
    model: &dyn OdeModel,
    data: &Dataset,
    template: &ParameterVector,
    config: &AccelConfig,
) -> Result<PreliminaryEstimate> {
    config.validate()?;
    let b = config.bandwidth_set(data).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let grid = smoothing::uniform_grid(data.t_end(), config.eval_points);
    let curve = smoothing::local_poly_fit(data, &SmootherConfig::new(config.degree, b, grid), &config.kernel)?;
    preliminary::preliminary_estimate(&curve, model, template, config.search.as_ref())
}

/// NLS estimate from `start` (or from [`initial_estimate`] when `start` is
/// `None`), with the same inference as the one-step estimator.
pub fn nls_fit(
    model: &dyn OdeModel,
    data: &Dataset,
    template: &ParameterVector,
    start: Option<&ParameterVector>,
    accel_config: &AccelConfig,
    config: &NlsConfig,
) -> Result<EstimateReport> {
    let prelim = match start {
        Some(s) => PreliminaryEstimate { eta_hat: s.clone(), method: preliminary::SmeMethod::IntegralSme, bandwidth: f64::NAN },
        None => initial_estimate(model, data, template, accel_config)?,
    };
    let out = levenberg_marquardt(model, data, &prelim.eta_hat, config)?;
    let inf = accel::infer(model, &out.eta, data, out.rss, &config.tol, config.quadrature_points, config.level)?;
    let converged = out.converged();
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(Error::MaxIterationsExceeded { iterations: out.iterations }.to_string());
    }
    Ok(EstimateReport {
        method: Method::Nls,
        model: model.name().to_string(),
        n: data.n(),
        dim_state: data.dim_state(),
        eta_prelim: prelim.eta_hat,
        prelim_method: prelim.method,
        estimate: out.eta,
        selected_bandwidth: prelim.bandwidth.is_finite().then_some(prelim.bandwidth),
        rss: out.rss,
        sigma2_hat: inf.sigma2,
        fisher: inf.fisher,
        intervals: inf.intervals,
        level: config.level,
        diagnostics: Diagnostics {
            jacobian_condition: None,
            fisher_condition: Some(inf.fisher_condition),
            bandwidth_trials: Vec::new(),
            nls_iterations: Some(out.iterations),
            nls_converged: Some(converged),
            finite_difference_derivatives: !model.analytic_derivatives(),
            integrator_steps: inf.steps,
            warnings,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Linear, LotkaVolterra};
    use crate::ode::integrate;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn linear_data(n: usize, sigma: f64, seed: u64) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let times: Vec<f64> = (0..n).map(|j| j as f64 / (n - 1) as f64).collect();
        let vals: Vec<f64> =
            times.iter().map(|t| 0.5 * (-t).exp() + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 }).collect();
        Dataset::from_rows(times, &[vals]).unwrap()
    }

    fn tight() -> NlsConfig {
        NlsConfig { tol: Tolerances::new(1e-11, 1e-13), ..Default::default() }
    }

    #[test]
    fn converges_immediately_at_truth() {
        let data = linear_data(21, 0.0, 0);
        let start = ParameterVector::new(vec![0.5], vec![-1.0]);
        let out = levenberg_marquardt(&Linear, &data, &start, &tight()).unwrap();
        assert!(out.iterations <= 2);
        assert!(out.converged());
        assert!((out.eta.xi[0] - 0.5).abs() < 1e-8);
        assert!((out.eta.theta[0] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn noiseless_recovery_from_far_start() {
        let data = linear_data(21, 0.0, 0);
        let start = ParameterVector::new(vec![1.5], vec![0.5]);
        let out = levenberg_marquardt(&Linear, &data, &start, &tight()).unwrap();
        assert!(out.converged(), "{:?}", out.termination);
        assert!((out.eta.xi[0] - 0.5).abs() < 1e-8);
        assert!((out.eta.theta[0] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn rss_non_increasing() {
        let data = linear_data(51, 0.05, 7);
        let out = levenberg_marquardt(&Linear, &data, &ParameterVector::new(vec![1.0], vec![0.0]), &NlsConfig::default()).unwrap();
        assert!(out.rss_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.converged());
    }

    #[test]
    fn gradient_small_at_gradient_convergence() {
        let data = linear_data(51, 0.05, 8);
        let cfg = tight();
        let out = levenberg_marquardt(&Linear, &data, &ParameterVector::new(vec![0.6], vec![-0.8]), &cfg).unwrap();
        let v = sensitivity::estimating_function(&Linear, &out.eta, &data, &cfg.tol).unwrap();
        if out.termination == Termination::Gradient {
            assert!(v.psi.amax() < cfg.gradient_tol);
        } else {
            assert!(v.psi.amax() < 1e-6, "{:?} {}", out.termination, v.psi.amax());
        }
    }

    /// Scalar regression `y = θ²`: `x' = θ²` with known `x(0) = 0`, observed
    /// three times at `t = 1`.
    #[test]
    fn scalar_quadratic_matches_grid_search() {
        struct Sq;
        impl OdeModel for Sq {
            fn name(&self) -> &str {
                "sq"
            }
            fn dim_state(&self) -> usize {
                1
            }
            fn dim_param(&self) -> usize {
                1
            }
            fn rhs(&self, _t: f64, _x: &[f64], th: &[f64], dx: &mut [f64]) {
                dx[0] = th[0] * th[0];
            }
        }
        let ys = [2.1, 1.7, 2.4];
        let data = Dataset::from_rows(vec![1.0, 1.0, 1.0], &[ys.to_vec()]).unwrap();
        let rss = |th: f64| ys.iter().map(|y| (y - th * th).powi(2)).sum::<f64>();
        let oracle = (0..=300_000)
            .map(|i| 0.5 + 2.0 * i as f64 / 300_000.0)
            .min_by(|a, b| rss(*a).partial_cmp(&rss(*b)).unwrap())
            .unwrap();
        let start = ParameterVector::new(vec![0.0], vec![1.0]).with_known_xi();
        let out = levenberg_marquardt(&Sq, &data, &start, &tight()).unwrap();
        assert!((out.eta.theta[0] - oracle).abs() < 1e-5);
        assert!((out.eta.theta[0] - (2.0666666666666667f64).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn iteration_budget_returns_best_iterate() {
        let data = linear_data(21, 0.05, 3);
        let cfg = NlsConfig { max_iterations: 1, gradient_tol: 1e-300, step_tol: 1e-300, rss_tol: 1e-300, ..Default::default() };
        let start = ParameterVector::new(vec![2.0], vec![1.0]);
        let out = levenberg_marquardt(&Linear, &data, &start, &cfg).unwrap();
        assert_eq!(out.termination, Termination::MaxIterations);
        assert!(out.rss <= out.rss_history[0]);
    }

    #[test]
    fn nls_report_from_sme_start() {
        let data = linear_data(21, 0.05, 4);
        let r = nls_fit(&Linear, &data, &ParameterVector::new(vec![0.0], vec![0.0]), None, &AccelConfig::default(), &NlsConfig::default())
            .unwrap();
        assert_eq!(r.method, Method::Nls);
        assert_eq!(r.diagnostics.nls_converged, Some(true));
        let traj = integrate(&Linear, &r.estimate, 1.0, &Tolerances::default()).unwrap();
        let rss: f64 = data.times().iter().enumerate().map(|(j, &t)| (data.values()[(0, j)] - traj.eval(t)[0]).powi(2)).sum();
        assert!((rss - r.rss).abs() < 1e-10);
    }

    #[test]
    fn accel_start_barely_moves() {
        let data = linear_data(51, 0.05, 5);
        let t = ParameterVector::new(vec![0.0], vec![0.0]);
        let a = accel::fit(&Linear, &data, &t, &AccelConfig::default()).unwrap();
        let n = nls_fit(&Linear, &data, &t, Some(&a.estimate), &AccelConfig::default(), &NlsConfig::default()).unwrap();
        for c in &a.intervals {
            let diff = (a.estimate.get(c.index) - n.estimate.get(c.index)).abs();
            assert!(diff < 0.05 * c.std_error, "{} moved {diff} vs se {}", c.label, c.std_error);
        }
    }

    #[test]
    fn lotka_volterra_recovers_noiseless() {
        let truth = ParameterVector::new(vec![1.0, 0.5], vec![0.5; 4]);
        let traj = integrate(&LotkaVolterra, &truth, 10.0, &Tolerances::new(1e-12, 1e-14)).unwrap();
        let times: Vec<f64> = (0..51).map(|j| j as f64 * 0.2).collect();
        let rows: Vec<Vec<f64>> = (0..2).map(|i| times.iter().map(|&t| traj.eval(t)[i]).collect()).collect();
        let data = Dataset::from_rows(times, &rows).unwrap();
        let start = ParameterVector::new(vec![1.05, 0.45], vec![0.55, 0.45, 0.55, 0.45]);
        let out = levenberg_marquardt(&LotkaVolterra, &data, &start, &tight()).unwrap();
        assert!(out.converged());
        for k in 0..6 {
            assert!((out.eta.get(k) - truth.get(k)).abs() < 1e-7, "k={k}");
        }
    }
}

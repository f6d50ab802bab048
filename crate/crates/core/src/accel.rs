//! The one-step estimator: a single Newton step on `Ψ_n(η) = 0` from a
//! smooth-and-match start, with the bandwidth chosen by the residual sum of
//! squares of the refitted trajectory.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{self, Interval, DEFAULT_QUADRATURE_POINTS};
use crate::linalg;
use crate::ode::{OdeModel, ParameterVector, Tolerances};
use crate::preliminary::{self, PreliminaryEstimate, SearchBox, SmeMethod};
use crate::sensitivity::{self, SensitivityOrder};
use crate::smoothing::{self, Kernel, SmootherConfig, DEFAULT_EVAL_POINTS};

/// Newton Jacobians above this scaled condition number are rejected.
pub const MAX_JACOBIAN_CONDITION: f64 = 1e12;

pub const DEFAULT_BANDWIDTH_CONSTANTS: [f64; 6] = [0.5, 0.75, 1.0, 1.5, 2.0, 3.0];

#[derive(Debug, Clone)]
pub struct AccelConfig {
    /// candidate bandwidths are `c · n^{-1/3} · (t_n − t_1)`
    pub bandwidth_constants: Vec<f64>,
    /// explicit candidate bandwidths; override the constants when set
    pub bandwidths: Option<Vec<f64>>,
    pub kernel: Kernel,
    pub degree: usize,
    pub eval_points: usize,
    pub quadrature_points: usize,
    pub tol: Tolerances,
    pub level: f64,
    /// box for gradient matching when the model is not linear in θ
    pub search: Option<SearchBox>,
}

impl Default for AccelConfig {
    fn default() -> Self {
        Self {
            bandwidth_constants: DEFAULT_BANDWIDTH_CONSTANTS.to_vec(),
            bandwidths: None,
            kernel: Kernel::epanechnikov(),
            degree: 1,
            eval_points: DEFAULT_EVAL_POINTS,
            quadrature_points: DEFAULT_QUADRATURE_POINTS,
            tol: Tolerances::default(),
            level: 0.95,
            search: None,
        }
    }
}

impl AccelConfig {
    pub fn validate(&self) -> Result<()> {
        let set = self.bandwidths.as_ref().unwrap_or(&self.bandwidth_constants);
        if set.is_empty() {
            return Err(Error::InvalidArgument("the bandwidth set is empty".into()));
        }
        if set.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::InvalidArgument("bandwidths must be positive".into()));
        }
        if self.eval_points < 2 || self.quadrature_points < 2 {
            return Err(Error::InvalidArgument("grids need at least two points".into()));
        }
        inference::normal_quantile(self.level)?;
        Ok(())
    }

    /// Candidate bandwidths for `data`.
    pub fn bandwidth_set(&self, data: &Dataset) -> Vec<f64> {
        if let Some(b) = &self.bandwidths {
            return b.clone();
        }
        let span = data.t_end() - data.times()[0];
        smoothing::bandwidth_set(data.n(), &self.bandwidth_constants).into_iter().map(|b| b * span).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Accel,
    Nls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthTrial {
    pub bandwidth: f64,
    pub rss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub jacobian_condition: Option<f64>,
    pub fisher_condition: Option<f64>,
    pub bandwidth_trials: Vec<BandwidthTrial>,
    pub nls_iterations: Option<usize>,
    pub nls_converged: Option<bool>,
    pub finite_difference_derivatives: bool,
    pub integrator_steps: usize,
    pub warnings: Vec<String>,
}

/// Everything produced by one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub model: String,
    pub n: usize,
    pub dim_state: usize,
    pub eta_prelim: ParameterVector,
    pub prelim_method: SmeMethod,
    pub estimate: ParameterVector,
    pub selected_bandwidth: Option<f64>,
    pub rss: f64,
    pub sigma2_hat: f64,
    /// Fisher information over the estimated components; absent when
    /// `σ̂² = 0`
    pub fisher: Option<Vec<Vec<f64>>>,
    pub intervals: Vec<Interval>,
    pub level: f64,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    pub fn interval(&self, index: usize) -> Option<&Interval> {
        self.intervals.iter().find(|c| c.index == index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStep {
    pub eta: ParameterVector,
    pub jacobian_condition: f64,
}

/// `η̄ = η̂ − (dΨ_n/dη(η̂))⁻¹ Ψ_n(η̂)` over the estimated components, from a
/// single second-order sensitivity solve.
pub fn one_step(model: &dyn OdeModel, eta_hat: &ParameterVector, data: &Dataset, tol: &Tolerances) -> Result<OneStep> {
    let v = sensitivity::estimating_function(model, eta_hat, data, tol)?;
    if v.indices.is_empty() {
        return Ok(OneStep { eta: eta_hat.clone(), jacobian_condition: 1.0 });
    }
    let condition = linalg::scaled_condition(&v.dpsi);
    if !(condition <= MAX_JACOBIAN_CONDITION) {
        return Err(Error::SingularJacobian { condition });
    }
    let delta = linalg::solve_scaled(&v.dpsi, &v.psi).ok_or(Error::SingularJacobian { condition })?;
    let current = eta_hat.estimated_values();
    let updated: Vec<f64> = current.iter().zip(delta.iter()).map(|(e, d)| e - d).collect();
    if updated.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFiniteUpdate);
    }
    Ok(OneStep { eta: eta_hat.with_estimated_values(&updated), jacobian_condition: condition })
}

/// Result of the pipeline at one bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthRun {
    pub bandwidth: f64,
    pub prelim: PreliminaryEstimate,
    pub eta: ParameterVector,
    pub rss: f64,
    pub jacobian_condition: f64,
}

/// Smoother, preliminary estimate, one step and refit RSS at bandwidth `b`.
pub fn run_bandwidth(
    model: &dyn OdeModel,
    data: &Dataset,
    template: &ParameterVector,
    config: &AccelConfig,
    b: f64,
) -> Result<BandwidthRun> {
    let grid = smoothing::uniform_grid(data.t_end(), config.eval_points);
    let curve = smoothing::local_poly_fit(data, &SmootherConfig::new(config.degree, b, grid), &config.kernel)?;
    let prelim = preliminary::preliminary_estimate(&curve, model, template, config.search.as_ref())?;
    let step = one_step(model, &prelim.eta_hat, data, &config.tol)?;
    let rss = sensitivity::residual_sum_of_squares(model, &step.eta, data, &config.tol)?;
    if !rss.is_finite() {
        return Err(Error::NonFiniteUpdate);
    }
    Ok(BandwidthRun { bandwidth: b, prelim, eta: step.eta, rss, jacobian_condition: step.jacobian_condition })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthSelection {
    pub best: BandwidthRun,
    pub trials: Vec<BandwidthTrial>,
}

/// Runs the pipeline at every candidate bandwidth (in parallel) and keeps
/// the one with the smallest refit RSS. Failing bandwidths are skipped.
pub fn select_bandwidth(
    model: &dyn OdeModel,
    data: &Dataset,
    template: &ParameterVector,
    config: &AccelConfig,
) -> Result<BandwidthSelection> {
    config.validate()?;
    template.check_against(model)?;
    let set = config.bandwidth_set(data);
    let runs: Vec<Result<BandwidthRun>> =
        set.par_iter().map(|&b| run_bandwidth(model, data, template, config, b)).collect();

    let mut trials = Vec::with_capacity(runs.len());
    let mut best: Option<BandwidthRun> = None;
    let mut last_err = None;
    for (b, run) in set.iter().zip(runs) {
        match run {
            Ok(r) => {
                trials.push(BandwidthTrial { bandwidth: *b, rss: Some(r.rss), error: None });
                if best.as_ref().map_or(true, |cur| r.rss < cur.rss) {
                    best = Some(r);
                }
            }
            Err(e) => {
                log::debug!("bandwidth {b} skipped: {e}");
                trials.push(BandwidthTrial { bandwidth: *b, rss: None, error: Some(e.to_string()) });
                last_err = Some(e);
            }
        }
    }
    match best {
        Some(best) => Ok(BandwidthSelection { best, trials }),
        None => Err(Error::AllBandwidthsFailed {
            last: Box::new(last_err.unwrap_or_else(|| Error::InvalidArgument("no bandwidths".into()))),
        }),
    }
}

/// Shared inference block: `σ̂²`, Fisher information and intervals at `eta`.
pub(crate) struct InferenceParts {
    pub sigma2: f64,
    pub fisher: Option<Vec<Vec<f64>>>,
    pub intervals: Vec<Interval>,
    pub fisher_condition: f64,
    pub steps: usize,
}

pub(crate) fn infer(
    model: &dyn OdeModel,
    eta: &ParameterVector,
    data: &Dataset,
    rss: f64,
    tol: &Tolerances,
    quadrature_points: usize,
    level: f64,
) -> Result<InferenceParts> {
    let sigma2 = inference::sigma2_from_rss(rss, data.dim_state(), data.n())?;
    let sol = sensitivity::solve_sensitivities(model, eta, data.t_end(), SensitivityOrder::First, tol)?;
    let fisher = inference::fisher_from(&sol, eta, sigma2, quadrature_points)?;
    let intervals = inference::confidence_intervals(eta, &fisher, data.n(), level)?;
    let matrix = (sigma2 > 0.0).then(|| {
        let m = fisher.matrix();
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    });
    Ok(InferenceParts {
        sigma2,
        fisher: matrix,
        intervals,
        fisher_condition: fisher.condition(),
        steps: sol.dense().steps_accepted(),
    })
}

/// Full ACCEL estimate: bandwidth selection followed by inference at the
/// selected one-step estimate.
pub fn fit(model: &dyn OdeModel, data: &Dataset, template: &ParameterVector, config: &AccelConfig) -> Result<EstimateReport> {
    let sel = select_bandwidth(model, data, template, config)?;
    let best = sel.best;
    let inf = infer(model, &best.eta, data, best.rss, &config.tol, config.quadrature_points, config.level)?;
    let mut warnings = Vec::new();
    let failed = sel.trials.iter().filter(|t| t.error.is_some()).count();
    if failed > 0 {
        warnings.push(format!("{failed} of {} bandwidths failed", sel.trials.len()));
    }
    Ok(EstimateReport {
        method: Method::Accel,
        model: model.name().to_string(),
        n: data.n(),
        dim_state: data.dim_state(),
        eta_prelim: best.prelim.eta_hat,
        prelim_method: best.prelim.method,
        estimate: best.eta,
        selected_bandwidth: Some(best.bandwidth),
        rss: best.rss,
        sigma2_hat: inf.sigma2,
        fisher: inf.fisher,
        intervals: inf.intervals,
        level: config.level,
        diagnostics: Diagnostics {
            jacobian_condition: Some(best.jacobian_condition),
            fisher_condition: Some(inf.fisher_condition),
            bandwidth_trials: sel.trials,
            nls_iterations: None,
            nls_converged: None,
            finite_difference_derivatives: !model.analytic_derivatives(),
            integrator_steps: inf.steps,
            warnings,
        },
    })
}

//! Synthetic data under `Y_ij = x_i(η₀, t_j) + ε_ij` and Monte Carlo studies
//! of the one-step and least-squares estimators.
//!
//! Replicate `k` draws from a ChaCha8 stream selected by `(seed, k)`, so a
//! replicate's data do not depend on scheduling or on how many other
//! replicates run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accel::{self, AccelConfig, EstimateReport, DEFAULT_BANDWIDTH_CONSTANTS};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, ALPHA_PINENE_SIGMA, ALPHA_PINENE_TIMES};
use crate::nls::{self, NlsConfig};
use crate::ode::{integrate, ParameterVector, Tolerances};

/// Failure fraction above which a study is aborted.
pub const ABORT_FRACTION: f64 = 0.2;
/// Failure fraction above which a warning is emitted.
pub const WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeDesign {
    Grid { times: Vec<f64> },
    /// `n` equispaced points from `start` to `end` inclusive
    Equidistant { start: f64, end: f64, n: usize },
    /// `n` sorted independent uniform draws on `[0, end]`, fresh per replicate
    UniformRandom { end: f64, n: usize },
}

impl TimeDesign {
    pub fn n(&self) -> usize {
        match self {
            TimeDesign::Grid { times } => times.len(),
            TimeDesign::Equidistant { n, .. } | TimeDesign::UniformRandom { n, .. } => *n,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            TimeDesign::Grid { times } => times.iter().copied().fold(0.0, f64::max),
            TimeDesign::Equidistant { end, .. } | TimeDesign::UniformRandom { end, .. } => *end,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            TimeDesign::Grid { times } => {
                !times.is_empty()
                    && times.iter().all(|t| t.is_finite() && *t >= 0.0)
                    && times.windows(2).all(|w| w[0] <= w[1])
            }
            TimeDesign::Equidistant { start, end, n } => *n >= 2 && *start >= 0.0 && end > start && end.is_finite(),
            TimeDesign::UniformRandom { end, n } => *n >= 1 && *end > 0.0 && end.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid time design {self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            TimeDesign::Grid { times } => times.clone(),
            TimeDesign::Equidistant { start, end, n } => {
                let h = (end - start) / (*n - 1) as f64;
                let mut t: Vec<f64> = (0..*n).map(|j| start + j as f64 * h).collect();
                t[*n - 1] = *end;
                t
            }
            TimeDesign::UniformRandom { end, n } => {
                let mut t: Vec<f64> = (0..*n).map(|_| rng.random_range(0.0..=*end)).collect();
                t.sort_by(f64::total_cmp);
                t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Accel,
    Nls,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Accel => "ACCEL",
            Estimator::Nls => "NLS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub model: String,
    /// true `η₀` together with the estimate mask
    pub truth: ParameterVector,
    pub design: TimeDesign,
    /// per-state noise standard deviations; a single entry applies to every
    /// state
    pub noise_sd: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    pub level: f64,
    pub bandwidth_constants: Vec<f64>,
    pub degree: usize,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let entry = models::catalog_get(&self.model)?;
        self.truth.check_against(entry.model.as_ref())?;
        self.design.validate()?;
        let d = entry.model.dim_state();
        if !(self.noise_sd.len() == 1 || self.noise_sd.len() == d) {
            return Err(Error::DimensionMismatch(format!(
                "noise_sd needs 1 or {d} entries, got {}",
                self.noise_sd.len()
            )));
        }
        if self.noise_sd.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("noise standard deviations must be nonnegative".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidArgument("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidArgument("no estimators requested".into()));
        }
        self.accel_config().validate()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        if self.noise_sd.len() == 1 {
            self.noise_sd[0]
        } else {
            self.noise_sd[i]
        }
    }

    pub fn accel_config(&self) -> AccelConfig {
        AccelConfig {
            bandwidth_constants: self.bandwidth_constants.clone(),
            degree: self.degree,
            level: self.level,
            ..Default::default()
        }
    }

    pub fn nls_config(&self) -> NlsConfig {
        NlsConfig { level: self.level, ..Default::default() }
    }
}

/// Noise stream for replicate `index`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One synthetic dataset; a deterministic function of `(spec.seed, index)`.
pub fn simulate_dataset(spec: &ScenarioSpec, index: u64) -> Result<Dataset> {
    let entry = models::catalog_get(&spec.model)?;
    let mut rng = replicate_rng(spec.seed, index);
    let times = spec.design.sample(&mut rng);
    let t_end = times.iter().copied().fold(0.0, f64::max);
    let d = entry.model.dim_state();
    let mut rows = vec![Vec::with_capacity(times.len()); d];
    if t_end > 0.0 {
        let traj = integrate(entry.model.as_ref(), &spec.truth, t_end, &Tolerances::new(1e-12, 1e-14))?;
        let mut x = vec![0.0; d];
        for &t in &times {
            traj.eval_into(t, &mut x);
            for i in 0..d {
                rows[i].push(x[i]);
            }
        }
    } else {
        for _ in &times {
            for i in 0..d {
                rows[i].push(spec.truth.xi[i]);
            }
        }
    }
    // noise is drawn time by time, states in order within each time
    for j in 0..times.len() {
        for (i, row) in rows.iter_mut().enumerate() {
            let s = spec.sigma(i);
            if s > 0.0 {
                row[j] += Normal::new(0.0, s).expect("validated sigma").sample(&mut rng);
            }
        }
    }
    Dataset::from_rows(times, &rows)
}

/// What a study keeps from one successful fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    /// estimated components, in `η` order
    pub values: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `I⁻¹_jj / n`
    pub asym_var: Vec<f64>,
}

impl ReplicateEstimate {
    fn from_report(r: &EstimateReport) -> Self {
        Self {
            values: r.intervals.iter().map(|c| c.point).collect(),
            lower: r.intervals.iter().map(|c| c.lower).collect(),
            upper: r.intervals.iter().map(|c| c.upper).collect(),
            asym_var: r.intervals.iter().map(|c| c.std_error * c.std_error).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: u64,
    /// one entry per requested estimator, in the scenario's order; `Err` holds
    /// the failure message
    pub results: Vec<(Estimator, std::result::Result<ReplicateEstimate, String>)>,
}

fn run_one(spec: &ScenarioSpec, index: u64) -> ReplicateOutcome {
    let results = match simulate_and_fit(spec, index) {
        Ok(r) => r,
        Err(e) => spec.estimators.iter().map(|&est| (est, Err(e.to_string()))).collect(),
    };
    ReplicateOutcome { index, results }
}

fn simulate_and_fit(
    spec: &ScenarioSpec,
    index: u64,
) -> Result<Vec<(Estimator, std::result::Result<ReplicateEstimate, String>)>> {
    let entry = models::catalog_get(&spec.model)?;
    let model = entry.model.as_ref();
    let data = simulate_dataset(spec, index)?;
    let acfg = spec.accel_config();
    let ncfg = spec.nls_config();
    Ok(spec
        .estimators
        .iter()
        .map(|&est| {
            let res = match est {
                Estimator::Accel => accel::fit(model, &data, &spec.truth, &acfg),
                Estimator::Nls => nls::nls_fit(model, &data, &spec.truth, None, &acfg, &ncfg).and_then(|r| {
                    if r.diagnostics.nls_converged == Some(false) {
                        Err(Error::MaxIterationsExceeded { iterations: r.diagnostics.nls_iterations.unwrap_or(0) })
                    } else {
                        Ok(r)
                    }
                }),
            };
            (est, res.map(|r| ReplicateEstimate::from_report(&r)).map_err(|e| e.to_string()))
        })
        .collect())
}

/// Runs replicates `0..spec.replications` in parallel; the output is ordered
/// by replicate index.
pub fn run_replicates(spec: &ScenarioSpec) -> Result<Vec<ReplicateOutcome>> {
    spec.validate()?;
    Ok((0..spec.replications as u64).into_par_iter().map(|k| run_one(spec, k)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub label: String,
    pub truth: f64,
    pub mean: f64,
    pub coverage: f64,
    /// sample standard deviation of the point estimates (divisor `R − 1`)
    pub ste: f64,
    /// `√(mean of I⁻¹_jj / n)`
    pub asym: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub successes: usize,
    pub failures: usize,
    pub parameters: Vec<ParameterSummary>,
    /// up to five distinct failure messages
    pub failure_examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub scenario: String,
    pub model: String,
    pub replications: usize,
    pub level: f64,
    pub estimators: Vec<EstimatorSummary>,
    pub warnings: Vec<String>,
}

impl McSummary {
    pub fn estimator(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }
}

/// Aggregates replicate outcomes. Aborts when more than 20% of the
/// replicates failed for any estimator.
pub fn summarize(spec: &ScenarioSpec, outcomes: &[ReplicateOutcome]) -> Result<McSummary> {
    let idx = spec.truth.estimated_indices();
    let total = outcomes.len();
    let mut estimators = Vec::new();
    let mut warnings = Vec::new();
    for (pos, &est) in spec.estimators.iter().enumerate() {
        let mut ok: Vec<&ReplicateEstimate> = Vec::new();
        let mut examples: Vec<String> = Vec::new();
        for o in outcomes {
            match &o.results[pos].1 {
                Ok(r) => ok.push(r),
                Err(msg) => {
                    if examples.len() < 5 && !examples.contains(msg) {
                        examples.push(msg.clone());
                    }
                }
            }
        }
        let failures = total - ok.len();
        if failures as f64 > ABORT_FRACTION * total as f64 {
            return Err(Error::StudyAborted { failed: failures, total });
        }
        if failures as f64 > WARN_FRACTION * total as f64 {
            let msg = format!("{}: {failures} of {total} replicates failed", est.name());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let r = ok.len() as f64;
        let parameters = idx
            .iter()
            .enumerate()
            .map(|(a, &k)| {
                let truth = spec.truth.get(k);
                let mean = ok.iter().map(|e| e.values[a]).sum::<f64>() / r;
                let ste = if ok.len() > 1 {
                    (ok.iter().map(|e| (e.values[a] - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
                } else {
                    0.0
                };
                let covered = ok.iter().filter(|e| e.lower[a] <= truth && truth <= e.upper[a]).count();
                let asym = (ok.iter().map(|e| e.asym_var[a]).sum::<f64>() / r).sqrt();
                ParameterSummary { label: spec.truth.label(k), truth, mean, coverage: covered as f64 / r, ste, asym }
            })
            .collect();
        estimators.push(EstimatorSummary {
            estimator: est,
            successes: ok.len(),
            failures,
            parameters,
            failure_examples: examples,
        });
    }
    Ok(McSummary {
        scenario: spec.name.clone(),
        model: spec.model.clone(),
        replications: total,
        level: spec.level,
        estimators,
        warnings,
    })
}

pub fn run_study(spec: &ScenarioSpec) -> Result<McSummary> {
    let outcomes = run_replicates(spec)?;
    summarize(spec, &outcomes)
}

pub const PRESET_NAMES: &[&str] = &[
    "linear_A_n21",
    "linear_B_n21",
    "linear_C_n21",
    "linear_D_n21",
    "linear_A_n51",
    "linear_B_n51",
    "linear_C_n51",
    "linear_D_n51",
    "linear_variance_n101",
    "lotka_n21",
    "lotka_n51",
    "nitrogen_n21",
    "barnes_n11",
    "alpha_a002",
    "alpha_a01",
    "smoke",
];

fn base(name: &str, model: &str, truth: ParameterVector, design: TimeDesign, noise_sd: Vec<f64>) -> ScenarioSpec {
    ScenarioSpec {
        name: name.to_string(),
        model: model.to_string(),
        truth,
        design,
        noise_sd,
        replications: 500,
        seed: 20_240_601,
        estimators: vec![Estimator::Accel, Estimator::Nls],
        level: 0.95,
        bandwidth_constants: DEFAULT_BANDWIDTH_CONSTANTS.to_vec(),
        degree: 1,
    }
}

/// Built-in simulation scenarios. The linear-model designs live on the unit
/// interval.
pub fn preset(name: &str) -> Result<ScenarioSpec> {
    let linear = |setup: char, n: usize| {
        let (xi, theta) = match setup {
            'A' => (0.5, -1.0),
            'B' => (0.5, 1.0),
            'C' => (1.0, -1.0),
            _ => (1.0, 1.0),
        };
        base(
            name,
            "linear",
            ParameterVector::new(vec![xi], vec![theta]),
            TimeDesign::Equidistant { start: 0.0, end: 1.0, n },
            vec![0.05],
        )
    };
    let spec = match name {
        "linear_A_n21" => linear('A', 21),
        "linear_B_n21" => linear('B', 21),
        "linear_C_n21" => linear('C', 21),
        "linear_D_n21" => linear('D', 21),
        "linear_A_n51" => linear('A', 51),
        "linear_B_n51" => linear('B', 51),
        "linear_C_n51" => linear('C', 51),
        "linear_D_n51" => linear('D', 51),
        "linear_variance_n101" => linear('A', 101),
        "lotka_n21" | "lotka_n51" => {
            let n = if name == "lotka_n21" { 21 } else { 51 };
            base(
                name,
                "lotka_volterra",
                ParameterVector::new(vec![1.0, 0.5], vec![0.5; 4]),
                TimeDesign::Equidistant { start: 0.0, end: 10.0, n },
                vec![0.05],
            )
        }
        "nitrogen_n21" => base(
            name,
            "nitrogen_oxide",
            ParameterVector::new(vec![0.0], vec![0.4577e-5, 0.2797e-3]),
            TimeDesign::Equidistant { start: 0.0, end: 40.0, n: 21 },
            vec![0.5],
        ),
        "barnes_n11" => base(
            name,
            "barnes",
            models::catalog_get("barnes")?.default_eta,
            TimeDesign::Equidistant { start: 0.0, end: 5.0, n: 11 },
            vec![0.05],
        ),
        "alpha_a002" | "alpha_a01" => {
            let a = if name == "alpha_a002" { 0.02 } else { 0.1 };
            let mut s = base(
                name,
                "alpha_pinene",
                models::catalog_get("alpha_pinene")?.default_eta,
                TimeDesign::Grid { times: ALPHA_PINENE_TIMES.to_vec() },
                ALPHA_PINENE_SIGMA.iter().map(|s| a * s).collect(),
            );
            s.estimators = vec![Estimator::Accel];
            // eight irregular points: a local linear fit needs windows so wide
            // that its bias survives the Newton step
            s.degree = 2;
            s
        }
        "smoke" => {
            let mut s = linear('A', 21);
            s.replications = 1;
            s
        }
        other => return Err(Error::InvalidArgument(format!("unknown preset `{other}`"))),
    };
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_validate() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            p.validate().unwrap();
            assert_eq!(&p.name, name);
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn noiseless_data_equal_trajectory() {
        let mut spec = preset("lotka_n21").unwrap();
        spec.noise_sd = vec![0.0];
        let d = simulate_dataset(&spec, 3).unwrap();
        let traj = integrate(models::catalog_get("lotka_volterra").unwrap().model.as_ref(), &spec.truth, 10.0, &Tolerances::new(1e-12, 1e-14)).unwrap();
        for (j, &t) in d.times().iter().enumerate() {
            assert_eq!(d.observation(j), traj.eval(t));
        }
    }

    #[test]
    fn replicates_are_deterministic_and_distinct() {
        let spec = preset("linear_A_n21").unwrap();
        let a = simulate_dataset(&spec, 7).unwrap();
        let b = simulate_dataset(&spec, 7).unwrap();
        let c = simulate_dataset(&spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_variance() {
        let mut spec = preset("linear_A_n21").unwrap();
        spec.design = TimeDesign::Grid { times: vec![0.0; 100_000] };
        let d = simulate_dataset(&spec, 0).unwrap();
        let eps: Vec<f64> = d.values().iter().map(|y| y - 0.5).collect();
        let mean = eps.iter().sum::<f64>() / eps.len() as f64;
        let var = eps.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (eps.len() - 1) as f64;
        assert!((var / 0.0025 - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn per_state_sigma() {
        let spec = preset("alpha_a002").unwrap();
        assert_eq!(spec.sigma(0), 0.02 * 44.6833);
        assert_eq!(spec.sigma(4), 0.02 * 12.4147);
        let d = simulate_dataset(&spec, 0).unwrap();
        assert_eq!(d.n(), 8);
        assert_eq!(d.dim_state(), 5);
    }

    #[test]
    fn random_design_sorted_within_horizon() {
        let mut spec = preset("linear_A_n21").unwrap();
        spec.design = TimeDesign::UniformRandom { end: 2.0, n: 30 };
        let d = simulate_dataset(&spec, 1).unwrap();
        assert!(d.times().windows(2).all(|w| w[0] <= w[1]));
        assert!(d.times().iter().all(|t| (0.0..=2.0).contains(t)));
    }

    #[test]
    fn degenerate_single_noiseless_replicate() {
        let mut spec = preset("smoke").unwrap();
        spec.noise_sd = vec![0.0];
        spec.degree = 2;
        let outcomes = run_replicates(&spec).unwrap();
        let s = summarize(&spec, &outcomes).unwrap();
        for e in &s.estimators {
            assert_eq!(e.successes, 1);
            let r = outcomes[0].results.iter().find(|(x, _)| *x == e.estimator).unwrap().1.as_ref().unwrap();
            for (a, p) in e.parameters.iter().enumerate() {
                assert_eq!(p.mean, r.values[a]);
                assert_eq!(p.ste, 0.0);
                assert!(p.coverage == 0.0 || p.coverage == 1.0);
            }
        }
    }

    fn fake(values: &[f64], lower: f64, upper: f64) -> ReplicateEstimate {
        ReplicateEstimate {
            values: values.to_vec(),
            lower: vec![lower; values.len()],
            upper: vec![upper; values.len()],
            asym_var: vec![0.04; values.len()],
        }
    }

    #[test]
    fn aggregation_arithmetic() {
        let mut spec = preset("linear_A_n21").unwrap();
        spec.estimators = vec![Estimator::Accel];
        spec.truth = spec.truth.with_mask(vec![true, false]);
        // truth 0.5; the second interval ends exactly at the truth (inclusive)
        let outcomes = vec![
            ReplicateOutcome { index: 0, results: vec![(Estimator::Accel, Ok(fake(&[0.4], 0.3, 0.45)))] },
            ReplicateOutcome { index: 1, results: vec![(Estimator::Accel, Ok(fake(&[0.6], 0.5, 0.7)))] },
            ReplicateOutcome { index: 2, results: vec![(Estimator::Accel, Ok(fake(&[0.5], 0.4, 0.6)))] },
        ];
        let s = summarize(&spec, &outcomes).unwrap();
        let p = &s.estimators[0].parameters[0];
        assert!((p.mean - 0.5).abs() < 1e-15);
        assert!((p.ste - 0.1).abs() < 1e-12);
        assert!((p.coverage - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.asym - 0.2).abs() < 1e-15);
    }

    #[test]
    fn abort_and_warn_thresholds() {
        let mut spec = preset("linear_A_n21").unwrap();
        spec.estimators = vec![Estimator::Accel];
        let make = |fail: usize, total: usize| -> Vec<ReplicateOutcome> {
            (0..total)
                .map(|k| ReplicateOutcome {
                    index: k as u64,
                    results: vec![(
                        Estimator::Accel,
                        if k < fail { Err("boom".into()) } else { Ok(fake(&[0.5, -1.0], 0.0, 0.0)) },
                    )],
                })
                .collect()
        };
        assert!(matches!(summarize(&spec, &make(21, 100)), Err(Error::StudyAborted { failed: 21, total: 100 })));
        let s = summarize(&spec, &make(20, 100)).unwrap();
        assert_eq!(s.estimators[0].failures, 20);
        assert_eq!(s.warnings.len(), 1);
        assert_eq!(s.estimators[0].failure_examples, vec!["boom".to_string()]);
        assert!(summarize(&spec, &make(1, 100)).unwrap().warnings.is_empty());
    }

    #[test]
    fn small_study_is_order_independent() {
        let mut spec = preset("linear_A_n21").unwrap();
        spec.replications = 8;
        let outcomes = run_replicates(&spec).unwrap();
        let mut reversed = outcomes.clone();
        reversed.reverse();
        let a = summarize(&spec, &outcomes).unwrap();
        let b = summarize(&spec, &reversed).unwrap();
        for (x, y) in a.estimators.iter().zip(&b.estimators) {
            for (p, q) in x.parameters.iter().zip(&y.parameters) {
                assert!((p.mean - q.mean).abs() < 1e-12);
                assert!((p.ste - q.ste).abs() < 1e-12);
                assert_eq!(p.coverage, q.coverage);
            }
        }
        // a second run reproduces the replicates exactly
        assert_eq!(outcomes, run_replicates(&spec).unwrap());
    }
}

//! Run configuration: one flat TOML table with typed keys. Unknown keys
//! are rejected.
//!
//! ```toml
//! preset = "nitrogen_n21"   # optional starting point for simulate/mc/fit
//! model = "nitrogen_oxide"
//! known_xi = [0.0]         # hold the initial state fixed at these values
//! level = 0.95
//! degree = 1
//! ```

use std::path::Path;
use std::sync::Arc;

use accel_ode::accel::{AccelConfig, Method};
use accel_ode::mc::{self, Estimator, ScenarioSpec, TimeDesign};
use accel_ode::models;
use accel_ode::nls::NlsConfig;
use accel_ode::ode::TimeScaled;
use accel_ode::preliminary::SearchBox;
use accel_ode::{OdeModel, ParameterVector, Tolerances};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

const STAGE: &str = "config parsing";

fn err(message: impl std::fmt::Display) -> CliError {
    CliError::parse(STAGE, message)
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// built-in scenario supplying model, truth, design and noise
    pub preset: Option<String>,
    pub model: Option<String>,
    /// initial state: the truth for simulate/mc, a template for fit
    pub xi: Option<Vec<f64>>,
    pub theta: Option<Vec<f64>>,
    /// initial state values treated as known
    pub known_xi: Option<Vec<f64>>,
    /// component labels (`xi1`, `theta2`, ...) held at their `xi`/`theta` value
    pub fixed: Option<Vec<String>>,
    /// estimator used by `fit`
    pub method: Option<Method>,
    pub level: Option<f64>,
    pub bandwidth_constants: Option<Vec<f64>>,
    pub bandwidths: Option<Vec<f64>>,
    pub degree: Option<usize>,
    pub eval_points: Option<usize>,
    pub quadrature_points: Option<usize>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub max_iterations: Option<usize>,
    /// `fit` only: divide observation times by this before estimation
    pub time_scale: Option<f64>,
    pub search_lower: Option<Vec<f64>>,
    pub search_upper: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub noise_sd: Option<Vec<f64>>,
    pub design: Option<TimeDesign>,
    pub estimators: Option<Vec<Estimator>>,
    pub name: Option<String>,
}

/// Command-line flags that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub level: Option<f64>,
}

/// Everything `fit` needs besides the data.
pub struct FitSetup {
    pub model: Arc<dyn OdeModel>,
    pub template: ParameterVector,
    pub method: Method,
    pub accel: AccelConfig,
    pub nls: NlsConfig,
    pub time_scale: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| err(e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Parse { stage, message } => CliError::Parse { stage, message: format!("{}: {message}", path.display()) },
            other => other,
        })
    }

    fn preset_spec(&self) -> CliResult<Option<ScenarioSpec>> {
        self.preset.as_deref().map(|p| mc::preset(p).map_err(err)).transpose()
    }

    fn model_name(&self, preset: Option<&ScenarioSpec>, ov: &Overrides) -> CliResult<String> {
        let name = ov.model.clone().or_else(|| self.model.clone());
        match (name, preset) {
            (Some(n), Some(p)) if n != p.model => {
                Err(err(format!("model `{n}` conflicts with preset `{}` (model `{}`)", p.name, p.model)))
            }
            (Some(n), _) => Ok(n),
            (None, Some(p)) => Ok(p.model.clone()),
            (None, None) => Err(err("no model given (use --model, `model` or `preset`)")),
        }
    }

    /// Applies `xi`, `theta`, `known_xi` and `fixed` to `base`.
    fn apply_parameters(&self, mut eta: ParameterVector) -> CliResult<ParameterVector> {
        let (d, p) = (eta.xi.len(), eta.theta.len());
        if let Some(xi) = &self.xi {
            if xi.len() != d {
                return Err(err(format!("xi needs {d} values, got {}", xi.len())));
            }
            eta.xi = xi.clone();
        }
        if let Some(theta) = &self.theta {
            if theta.len() != p {
                return Err(err(format!("theta needs {p} values, got {}", theta.len())));
            }
            eta.theta = theta.clone();
        }
        if let Some(known) = &self.known_xi {
            if known.len() != d {
                return Err(err(format!("known_xi needs {d} values, got {}", known.len())));
            }
            if self.xi.as_ref().is_some_and(|xi| xi != known) {
                return Err(err("xi and known_xi disagree"));
            }
            eta.xi = known.clone();
            eta = eta.with_known_xi();
        }
        for label in self.fixed.iter().flatten() {
            let k = (0..eta.dim()).find(|&k| eta.label(k) == *label).ok_or_else(|| err(format!("unknown parameter label `{label}`")))?;
            eta.estimate[k] = false;
        }
        if eta.num_estimated() == 0 {
            return Err(err("every parameter is fixed"));
        }
        Ok(eta)
    }

    fn tolerances(&self) -> Tolerances {
        let def = Tolerances::default();
        Tolerances::new(self.rtol.unwrap_or(def.rtol), self.atol.unwrap_or(def.atol))
    }

    fn search_box(&self) -> CliResult<Option<SearchBox>> {
        match (&self.search_lower, &self.search_upper) {
            (None, None) => Ok(None),
            (Some(l), Some(u)) if l.len() == u.len() => Ok(Some(SearchBox::new(l.clone(), u.clone()))),
            _ => Err(err("search_lower and search_upper must be given together with equal lengths")),
        }
    }

    pub fn fit_setup(&self, ov: &Overrides) -> CliResult<FitSetup> {
        for (key, set) in [("replications", self.replications.is_some()), ("noise_sd", self.noise_sd.is_some()), ("design", self.design.is_some()), ("estimators", self.estimators.is_some())] {
            if set {
                return Err(err(format!("`{key}` does not apply to fit")));
            }
        }
        let preset = self.preset_spec()?;
        let name = self.model_name(preset.as_ref(), ov)?;
        let entry = models::catalog_get(&name).map_err(err)?;
        let base = preset.as_ref().map(|p| p.truth.clone()).unwrap_or(entry.default_eta.clone());
        let template = self.apply_parameters(base)?;

        let level = ov.level.or(self.level).or(preset.as_ref().map(|p| p.level)).unwrap_or(0.95);
        let tol = self.tolerances();
        let accel = AccelConfig {
            bandwidth_constants: self
                .bandwidth_constants
                .clone()
                .or(preset.as_ref().map(|p| p.bandwidth_constants.clone()))
                .unwrap_or_else(|| AccelConfig::default().bandwidth_constants),
            bandwidths: self.bandwidths.clone(),
            degree: self.degree.or(preset.as_ref().map(|p| p.degree)).unwrap_or(1),
            eval_points: self.eval_points.unwrap_or(AccelConfig::default().eval_points),
            quadrature_points: self.quadrature_points.unwrap_or(AccelConfig::default().quadrature_points),
            tol,
            level,
            search: self.search_box()?,
            ..AccelConfig::default()
        };
        accel.validate().map_err(err)?;
        let defaults = NlsConfig::default();
        let nls = NlsConfig {
            max_iterations: self.max_iterations.unwrap_or(defaults.max_iterations),
            tol,
            quadrature_points: accel.quadrature_points,
            level,
            ..defaults
        };
        nls.validate().map_err(err)?;
        if let Some(s) = self.time_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(err("time_scale must be positive"));
            }
        }
        let model: Arc<dyn OdeModel> = match self.time_scale {
            Some(s) => Arc::new(TimeScaled::new(entry.model.clone(), s)),
            None => entry.model.clone(),
        };
        Ok(FitSetup { model, template, method: self.method.unwrap_or(Method::Accel), accel, nls, time_scale: self.time_scale })
    }

    /// Scenario for `simulate` and `mc`: the preset (if any) with every
    /// given key applied on top.
    pub fn scenario(&self, ov: &Overrides) -> CliResult<ScenarioSpec> {
        for (key, set) in [("time_scale", self.time_scale.is_some()), ("method", self.method.is_some()), ("bandwidths", self.bandwidths.is_some()), ("search_lower", self.search_lower.is_some())] {
            if set {
                return Err(err(format!("`{key}` applies to fit only")));
            }
        }
        let preset = self.preset_spec()?;
        let name = self.model_name(preset.as_ref(), ov)?;
        let entry = models::catalog_get(&name).map_err(err)?;
        let mut spec = match preset {
            Some(p) => p,
            None => ScenarioSpec {
                name: self.name.clone().unwrap_or_else(|| name.clone()),
                model: name.clone(),
                truth: entry.default_eta.clone(),
                design: self.design.clone().ok_or_else(|| err("`design` is required without a preset"))?,
                noise_sd: self.noise_sd.clone().ok_or_else(|| err("`noise_sd` is required without a preset"))?,
                replications: 500,
                seed: 0,
                estimators: vec![Estimator::Accel, Estimator::Nls],
                level: 0.95,
                bandwidth_constants: AccelConfig::default().bandwidth_constants,
                degree: 1,
            },
        };
        spec.truth = self.apply_parameters(spec.truth)?;
        if let Some(n) = &self.name {
            spec.name = n.clone();
        }
        if let Some(d) = &self.design {
            spec.design = d.clone();
        }
        if let Some(s) = &self.noise_sd {
            spec.noise_sd = s.clone();
        }
        if let Some(r) = self.replications {
            spec.replications = r;
        }
        if let Some(e) = &self.estimators {
            spec.estimators = e.clone();
        }
        if let Some(c) = &self.bandwidth_constants {
            spec.bandwidth_constants = c.clone();
        }
        if let Some(g) = self.degree {
            spec.degree = g;
        }
        spec.seed = ov.seed.or(self.seed).unwrap_or(spec.seed);
        spec.level = ov.level.or(self.level).unwrap_or(spec.level);
        for (key, set) in [("eval_points", self.eval_points.is_some()), ("quadrature_points", self.quadrature_points.is_some()), ("rtol", self.rtol.is_some()), ("atol", self.atol.is_some()), ("max_iterations", self.max_iterations.is_some())] {
            if set {
                return Err(err(format!("`{key}` is not supported for simulation studies")));
            }
        }
        spec.validate().map_err(err)?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::parse("model = \"linear\"\nbandwith = 1.0\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("bandwith"), "{e}");
    }

    #[test]
    fn wrong_types_are_rejected() {
        assert!(RunConfig::parse("degree = \"two\"").is_err());
        assert!(RunConfig::parse("design = { kind = \"spiral\" }").is_err());
    }

    #[test]
    fn preset_with_overrides() {
        let cfg = RunConfig::parse("preset = \"linear_A_n21\"\nreplications = 7\ntheta = [-2.0]\n").unwrap();
        let spec = cfg.scenario(&Overrides { seed: Some(9), ..Default::default() }).unwrap();
        assert_eq!(spec.replications, 7);
        assert_eq!(spec.truth.theta, vec![-2.0]);
        assert_eq!(spec.seed, 9);
        assert_eq!(spec.design.n(), 21);
    }

    #[test]
    fn scenario_without_preset_needs_design() {
        let cfg = RunConfig::parse("model = \"linear\"\nnoise_sd = [0.1]\n").unwrap();
        assert!(cfg.scenario(&Overrides::default()).is_err());
        let cfg = RunConfig::parse("model = \"linear\"\nnoise_sd = [0.1]\ndesign = { kind = \"equidistant\", start = 0.0, end = 1.0, n = 5 }\n").unwrap();
        assert_eq!(cfg.scenario(&Overrides::default()).unwrap().design.n(), 5);
    }

    #[test]
    fn model_conflict_and_missing_model() {
        let cfg = RunConfig::parse("preset = \"lotka_n21\"").unwrap();
        assert!(cfg.scenario(&Overrides { model: Some("linear".into()), ..Default::default() }).is_err());
        assert!(RunConfig::default().fit_setup(&Overrides::default()).is_err());
    }

    #[test]
    fn known_xi_and_fixed_labels() {
        let cfg = RunConfig::parse("model = \"nitrogen_oxide\"\nknown_xi = [0.0]\nfixed = [\"theta2\"]\n").unwrap();
        let setup = cfg.fit_setup(&Overrides::default()).unwrap();
        assert_eq!(setup.template.xi, vec![0.0]);
        assert_eq!(setup.template.estimate, vec![false, true, false]);
        let bad = RunConfig::parse("model = \"linear\"\nfixed = [\"theta9\"]\n").unwrap();
        assert!(bad.fit_setup(&Overrides::default()).is_err());
    }

    #[test]
    fn fit_rejects_study_keys_and_bad_level() {
        let cfg = RunConfig::parse("model = \"linear\"\nreplications = 3\n").unwrap();
        assert!(cfg.fit_setup(&Overrides::default()).is_err());
        let cfg = RunConfig::parse("model = \"linear\"\nlevel = 1.5\n").unwrap();
        assert!(cfg.fit_setup(&Overrides::default()).is_err());
    }
}

//! Local polynomial kernel regression for the curve `x̂(t)` and its
//! derivative `x̂'(t)`.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;

/// Local designs whose condition number exceeds this are rejected.
pub const MAX_LOCAL_CONDITION: f64 = 1e12;

/// Default number of equispaced evaluation points on `[0, T]`.
pub const DEFAULT_EVAL_POINTS: usize = 201;

/// Symmetric smoothing kernel with compact support `[-support, support]`.
#[derive(Clone, Copy)]
pub struct Kernel {
    pub name: &'static str,
    pub support: f64,
    eval: fn(f64) -> f64,
}

impl std::fmt::Debug for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kernel").field("name", &self.name).field("support", &self.support).finish()
    }
}

fn epanechnikov(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

impl Kernel {
    pub fn new(name: &'static str, support: f64, eval: fn(f64) -> f64) -> Self {
        Self { name, support, eval }
    }

    /// `K(u) = 3/4 (1 - u²)` on `|u| ≤ 1`.
    pub fn epanechnikov() -> Self {
        Self::new("epanechnikov", 1.0, epanechnikov)
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        (self.eval)(u)
    }
}

impl Default for Kernel {
    fn default() -> Self {
        Self::epanechnikov()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherConfig {
    pub degree: usize,
    pub bandwidth: f64,
    pub eval_grid: Vec<f64>,
}

impl SmootherConfig {
    pub fn new(degree: usize, bandwidth: f64, eval_grid: Vec<f64>) -> Self {
        Self { degree, bandwidth, eval_grid }
    }

    fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::InvalidArgument("smoother degree must be at least 1".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if self.eval_grid.len() < 2 || self.eval_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("eval grid must be strictly increasing with ≥ 2 points".into()));
        }
        Ok(())
    }
}

/// `m` equispaced points on `[0, t_end]`.
pub fn uniform_grid(t_end: f64, m: usize) -> Vec<f64> {
    assert!(m >= 2);
    let h = t_end / (m - 1) as f64;
    let mut g: Vec<f64> = (0..m).map(|k| k as f64 * h).collect();
    g[m - 1] = t_end;
    g
}

/// Fitted values and first derivatives of every state on the eval grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedCurve {
    pub eval_grid: Vec<f64>,
    /// `d × m`
    pub values: DMatrix<f64>,
    /// `d × m`
    pub derivatives: DMatrix<f64>,
    pub bandwidth: f64,
}

impl SmoothedCurve {
    pub fn dim_state(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.eval_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eval_grid.is_empty()
    }

    pub fn value_at(&self, k: usize) -> Vec<f64> {
        self.values.column(k).iter().copied().collect()
    }

    pub fn derivative_at(&self, k: usize) -> Vec<f64> {
        self.derivatives.column(k).iter().copied().collect()
    }

    pub fn t_end(&self) -> f64 {
        *self.eval_grid.last().unwrap()
    }
}

/// Local polynomial estimator of order `ℓ`: at each eval point `t` minimizes
/// `Σ_j |Y_j − ν U((t_j − t)/b)|² K((t_j − t)/b)` over `ν ∈ R^{d×(ℓ+1)}`, with
/// `U(u) = (1, u, u²/2!, …, u^ℓ/ℓ!)`. The fitted value is the first column of
/// `ν̂`, the derivative the second column divided by `b`.
pub fn local_poly_fit(data: &Dataset, config: &SmootherConfig, kernel: &Kernel) -> Result<SmoothedCurve> {
    config.validate()?;
    let d = data.dim_state();
    let m = config.eval_grid.len();
    let cols = config.degree + 1;
    let b = config.bandwidth;
    let times = data.times();
    let y = data.values();

    let factorials: Vec<f64> = (0..cols).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();

    let mut values = DMatrix::zeros(d, m);
    let mut derivatives = DMatrix::zeros(d, m);
    let mut support: Vec<(usize, f64, f64)> = Vec::with_capacity(times.len());

    for (k, &t) in config.eval_grid.iter().enumerate() {
        support.clear();
        for (j, &tj) in times.iter().enumerate() {
            let u = (tj - t) / b;
            if u.abs() > kernel.support {
                continue;
            }
            let w = kernel.eval(u);
            if w > 0.0 {
                support.push((j, u, w.sqrt()));
            }
        }
        if support.len() < cols {
            return Err(Error::SingularLocalDesign { t, bandwidth: b });
        }
        let design = DMatrix::from_fn(support.len(), cols, |r, c| {
            let (_, u, sw) = support[r];
            sw * u.powi(c as i32) / factorials[c]
        });
        if linalg::condition_number(&design) > MAX_LOCAL_CONDITION {
            return Err(Error::SingularLocalDesign { t, bandwidth: b });
        }
        let rhs = DMatrix::from_fn(support.len(), d, |r, i| {
            let (j, _, sw) = support[r];
            sw * y[(i, j)]
        });
        let coef = linalg::lstsq(&design, &rhs).ok_or(Error::SingularLocalDesign { t, bandwidth: b })?;
        for i in 0..d {
            values[(i, k)] = coef[(0, i)];
            derivatives[(i, k)] = coef[(1, i)] / b;
        }
    }

    Ok(SmoothedCurve { eval_grid: config.eval_grid.clone(), values, derivatives, bandwidth: b })
}

/// Candidate bandwidths `c_j · n^{-1/3}`.
pub fn bandwidth_set(n: usize, grid_constants: &[f64]) -> Vec<f64> {
    let scale = (n as f64).powf(-1.0 / 3.0);
    grid_constants.iter().map(|c| c * scale).collect()
}

//! Built-in systems with analytic first and second derivatives. All of them
//! are linear in the rate parameters, `F(x; θ) = g(x) θ`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ode::{OdeModel, ParameterVector, SecondDerivatives, ThetaLinear};

/// `x' = θ x`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Linear;

/// Classical predator–prey system.
#[derive(Debug, Default, Clone, Copy)]
pub struct LotkaVolterra;

/// `2NO + O₂ ⇌ 2NO₂`, pressure fall `x(t)` in minutes.
#[derive(Debug, Default, Clone, Copy)]
pub struct NitrogenOxide;

/// Barnes' variant of the predator–prey system.
#[derive(Debug, Default, Clone, Copy)]
pub struct Barnes;

/// Thermal isomerization of α-pinene, five species.
#[derive(Debug, Default, Clone, Copy)]
pub struct AlphaPinene;

const NO_A: f64 = 126.2;
const NO_B: f64 = 91.9;

impl ThetaLinear for Linear {
    fn g(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0];
    }
}

impl OdeModel for Linear {
    fn name(&self) -> &str {
        "linear"
    }
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_param(&self) -> usize {
        1
    }
    fn analytic_derivatives(&self) -> bool {
        true
    }
    fn theta_linear(&self) -> Option<&dyn ThetaLinear> {
        Some(self)
    }
    fn rhs(&self, _t: f64, x: &[f64], theta: &[f64], dx: &mut [f64]) {
        dx[0] = theta[0] * x[0];
    }
    fn jac_state(&self, _t: f64, _x: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = theta[0];
    }
    fn jac_param(&self, _t: f64, x: &[f64], _theta: &[f64], out: &mut [f64]) {
        self.g(x, out);
    }
    fn hessians(&self, _t: f64, _x: &[f64], _theta: &[f64], out: &mut SecondDerivatives) {
        out.clear();
        out.xp[0] = 1.0;
    }
}

impl ThetaLinear for LotkaVolterra {
    fn g(&self, x: &[f64], out: &mut [f64]) {
        let (x1, x2) = (x[0], x[1]);
        out.copy_from_slice(&[x1, -x1 * x2, 0.0, 0.0, 0.0, 0.0, -x2, x1 * x2]);
    }
}

impl OdeModel for LotkaVolterra {
    fn name(&self) -> &str {
        "lotka_volterra"
    }
    fn dim_state(&self) -> usize {
        2
    }
    fn dim_param(&self) -> usize {
        4
    }
    fn analytic_derivatives(&self) -> bool {
        true
    }
    fn theta_linear(&self) -> Option<&dyn ThetaLinear> {
        Some(self)
    }
    fn rhs(&self, _t: f64, x: &[f64], th: &[f64], dx: &mut [f64]) {
        dx[0] = th[0] * x[0] - th[1] * x[0] * x[1];
        dx[1] = -th[2] * x[1] + th[3] * x[0] * x[1];
    }
    fn jac_state(&self, _t: f64, x: &[f64], th: &[f64], out: &mut [f64]) {
        out[0] = th[0] - th[1] * x[1];
        out[1] = -th[1] * x[0];
        out[2] = th[3] * x[1];
        out[3] = -th[2] + th[3] * x[0];
    }
    fn jac_param(&self, _t: f64, x: &[f64], _th: &[f64], out: &mut [f64]) {
        self.g(x, out);
    }
    fn hessians(&self, _t: f64, x: &[f64], th: &[f64], h: &mut SecondDerivatives) {
        h.clear();
        // xx[(i*2 + j)*2 + k]
        h.xx[1] = -th[1];
        h.xx[2] = -th[1];
        h.xx[5] = th[3];
        h.xx[6] = th[3];
        // xp[(i*2 + j)*4 + k]
        h.xp[0] = 1.0;
        h.xp[1] = -x[1];
        h.xp[4 + 1] = -x[0];
        h.xp[8 + 3] = x[1];
        h.xp[12 + 2] = -1.0;
        h.xp[12 + 3] = x[0];
    }
}

impl ThetaLinear for NitrogenOxide {
    fn g(&self, x: &[f64], out: &mut [f64]) {
        let x = x[0];
        out[0] = (NO_A - x) * (NO_B - x) * (NO_B - x);
        out[1] = -x * x;
    }
}

impl OdeModel for NitrogenOxide {
    fn name(&self) -> &str {
        "nitrogen_oxide"
    }
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_param(&self) -> usize {
        2
    }
    fn analytic_derivatives(&self) -> bool {
        true
    }
    fn theta_linear(&self) -> Option<&dyn ThetaLinear> {
        Some(self)
    }
    fn rhs(&self, _t: f64, x: &[f64], th: &[f64], dx: &mut [f64]) {
        let x = x[0];
        dx[0] = th[0] * (NO_A - x) * (NO_B - x).powi(2) - th[1] * x * x;
    }
    fn jac_state(&self, _t: f64, x: &[f64], th: &[f64], out: &mut [f64]) {
        let x = x[0];
        let da = -(NO_B - x).powi(2) - 2.0 * (NO_A - x) * (NO_B - x);
        out[0] = th[0] * da - 2.0 * th[1] * x;
    }
    fn jac_param(&self, _t: f64, x: &[f64], _th: &[f64], out: &mut [f64]) {
        self.g(x, out);
    }
    fn hessians(&self, _t: f64, x: &[f64], th: &[f64], h: &mut SecondDerivatives) {
        let x = x[0];
        let da = -(NO_B - x).powi(2) - 2.0 * (NO_A - x) * (NO_B - x);
        let dda = 4.0 * (NO_B - x) + 2.0 * (NO_A - x);
        h.clear();
        h.xx[0] = th[0] * dda - 2.0 * th[1];
        h.xp[0] = da;
        h.xp[1] = -2.0 * x;
    }
}

impl ThetaLinear for Barnes {
    fn g(&self, x: &[f64], out: &mut [f64]) {
        let (x1, x2) = (x[0], x[1]);
        out.copy_from_slice(&[x1, -x1 * x2, 0.0, 0.0, x1 * x2, -x2]);
    }
}

impl OdeModel for Barnes {
    fn name(&self) -> &str {
        "barnes"
    }
    fn dim_state(&self) -> usize {
        2
    }
    fn dim_param(&self) -> usize {
        3
    }
    fn analytic_derivatives(&self) -> bool {
        true
    }
    fn theta_linear(&self) -> Option<&dyn ThetaLinear> {
        Some(self)
    }
    fn rhs(&self, _t: f64, x: &[f64], th: &[f64], dx: &mut [f64]) {
        dx[0] = th[0] * x[0] - th[1] * x[0] * x[1];
        dx[1] = th[1] * x[0] * x[1] - th[2] * x[1];
    }
    fn jac_state(&self, _t: f64, x: &[f64], th: &[f64], out: &mut [f64]) {
        out[0] = th[0] - th[1] * x[1];
        out[1] = -th[1] * x[0];
        out[2] = th[1] * x[1];
        out[3] = th[1] * x[0] - th[2];
    }
    fn jac_param(&self, _t: f64, x: &[f64], _th: &[f64], out: &mut [f64]) {
        self.g(x, out);
    }
    fn hessians(&self, _t: f64, x: &[f64], th: &[f64], h: &mut SecondDerivatives) {
        h.clear();
        h.xx[1] = -th[1];
        h.xx[2] = -th[1];
        h.xx[5] = th[1];
        h.xx[6] = th[1];
        // xp[(i*2 + j)*3 + k]
        h.xp[0] = 1.0;
        h.xp[1] = -x[1];
        h.xp[3 + 1] = -x[0];
        h.xp[6 + 1] = x[1];
        h.xp[9 + 1] = x[0];
        h.xp[9 + 2] = -1.0;
    }
}

impl ThetaLinear for AlphaPinene {
    fn g(&self, x: &[f64], out: &mut [f64]) {
        let (x1, x3, x5) = (x[0], x[2], x[4]);
        #[rustfmt::skip]
        out.copy_from_slice(&[
            -x1, -x1, 0.0, 0.0, 0.0,
            x1, 0.0, 0.0, 0.0, 0.0,
            0.0, x1, -x3, -x3, x5,
            0.0, 0.0, x3, 0.0, 0.0,
            0.0, 0.0, 0.0, x3, -x5,
        ]);
    }
}

impl OdeModel for AlphaPinene {
    fn name(&self) -> &str {
        "alpha_pinene"
    }
    fn dim_state(&self) -> usize {
        5
    }
    fn dim_param(&self) -> usize {
        5
    }
    fn analytic_derivatives(&self) -> bool {
        true
    }
    fn theta_linear(&self) -> Option<&dyn ThetaLinear> {
        Some(self)
    }
    fn rhs(&self, _t: f64, x: &[f64], th: &[f64], dx: &mut [f64]) {
        dx[0] = -(th[0] + th[1]) * x[0];
        dx[1] = th[0] * x[0];
        dx[2] = th[1] * x[0] - (th[2] + th[3]) * x[2] + th[4] * x[4];
        dx[3] = th[2] * x[2];
        dx[4] = th[3] * x[2] - th[4] * x[4];
    }
    fn jac_state(&self, _t: f64, _x: &[f64], th: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = -(th[0] + th[1]);
        out[5] = th[0];
        out[10] = th[1];
        out[12] = -(th[2] + th[3]);
        out[14] = th[4];
        out[17] = th[2];
        out[22] = th[3];
        out[24] = -th[4];
    }
    fn jac_param(&self, _t: f64, x: &[f64], _th: &[f64], out: &mut [f64]) {
        self.g(x, out);
    }
    fn hessians(&self, _t: f64, _x: &[f64], _th: &[f64], h: &mut SecondDerivatives) {
        h.clear();
        // xp[(i*5 + j)*5 + k]
        let mut set = |i: usize, j: usize, k: usize, v: f64| h.xp[(i * 5 + j) * 5 + k] = v;
        set(0, 0, 0, -1.0);
        set(0, 0, 1, -1.0);
        set(1, 0, 0, 1.0);
        set(2, 0, 1, 1.0);
        set(2, 2, 2, -1.0);
        set(2, 2, 3, -1.0);
        set(2, 4, 4, 1.0);
        set(3, 2, 2, 1.0);
        set(4, 2, 3, 1.0);
        set(4, 4, 4, -1.0);
    }
}

/// Model names accepted by [`catalog_get`].
pub const MODEL_NAMES: [&str; 5] = ["linear", "lotka_volterra", "nitrogen_oxide", "barnes", "alpha_pinene"];

/// Observation times of the α-pinene data, shifted so the first
/// observation sits at the origin.
pub const ALPHA_PINENE_TIMES: [f64; 8] = [0.0, 1830.0, 3690.0, 6570.0, 9450.0, 13800.0, 21390.0, 35190.0];

/// Per-state noise standard deviations for the α-pinene study, to be
/// multiplied by the factor `a`.
pub const ALPHA_PINENE_SIGMA: [f64; 5] = [44.6833, 36.4111, 4.9570, 1.6339, 12.4147];

#[derive(Clone)]
pub struct ModelCatalogEntry {
    pub name: &'static str,
    pub model: Arc<dyn OdeModel>,
    pub default_eta: ParameterVector,
    pub default_horizon: f64,
}

impl std::fmt::Debug for ModelCatalogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelCatalogEntry")
            .field("name", &self.name)
            .field("default_eta", &self.default_eta)
            .field("default_horizon", &self.default_horizon)
            .finish()
    }
}

pub fn catalog_get(name: &str) -> Result<ModelCatalogEntry> {
    let entry = match name {
        "linear" => ModelCatalogEntry {
            name: "linear",
            model: Arc::new(Linear),
            default_eta: ParameterVector::new(vec![0.5], vec![-1.0]),
            default_horizon: 1.0,
        },
        "lotka_volterra" => ModelCatalogEntry {
            name: "lotka_volterra",
            model: Arc::new(LotkaVolterra),
            default_eta: ParameterVector::new(vec![1.0, 0.5], vec![0.5; 4]),
            default_horizon: 10.0,
        },
        "nitrogen_oxide" => ModelCatalogEntry {
            name: "nitrogen_oxide",
            model: Arc::new(NitrogenOxide),
            default_eta: ParameterVector::new(vec![0.0], vec![0.4577e-5, 0.2797e-3]),
            default_horizon: 40.0,
        },
        "barnes" => ModelCatalogEntry {
            name: "barnes",
            model: Arc::new(Barnes),
            default_eta: ParameterVector::new(vec![1.0, 0.3], vec![0.86, 2.079, 1.624]).with_known_xi(),
            default_horizon: 5.0,
        },
        "alpha_pinene" => ModelCatalogEntry {
            name: "alpha_pinene",
            model: Arc::new(AlphaPinene),
            default_eta: ParameterVector::new(
                vec![88.35, 7.3, 2.3, 0.4, 1.75],
                vec![5.926e-5, 2.963e-5, 2.047e-5, 2.744e-4, 3.997e-5],
            )
            .with_known_xi(),
            default_horizon: ALPHA_PINENE_TIMES[7],
        },
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    Ok(entry)
}

/// θ-linear coefficient matrix `g(x)` of a catalog model, as `d` rows of
/// length `p`.
pub fn g_of(name: &str, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let entry = catalog_get(name)?;
    let (d, p) = (entry.model.dim_state(), entry.model.dim_param());
    if x.len() != d {
        return Err(Error::DimensionMismatch(format!("`{name}` has {d} states, got {}", x.len())));
    }
    let lin = entry.model.theta_linear().expect("catalog models are linear in theta");
    let mut flat = vec![0.0; d * p];
    lin.g(x, &mut flat);
    Ok(flat.chunks(p).map(|r| r.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{integrate, Tolerances};

    #[test]
    fn catalog_defaults() {
        let no = catalog_get("nitrogen_oxide").unwrap();
        assert_eq!(no.default_eta.theta, vec![4.577e-6, 2.797e-4]);
        assert_eq!(no.default_eta.xi, vec![0.0]);
        let lv = catalog_get("lotka_volterra").unwrap();
        assert_eq!(lv.default_eta.xi, vec![1.0, 0.5]);
        assert_eq!(lv.default_eta.theta, vec![0.5; 4]);
        assert_eq!(lv.default_horizon, 10.0);
        let ap = catalog_get("alpha_pinene").unwrap();
        assert_eq!(ap.default_eta.xi, vec![88.35, 7.3, 2.3, 0.4, 1.75]);
        assert_eq!(ap.default_eta.num_estimated(), 5);
        let b = catalog_get("barnes").unwrap();
        assert_eq!(b.default_eta.theta, vec![0.86, 2.079, 1.624]);
    }

    #[test]
    fn unknown_model() {
        assert!(matches!(catalog_get("lorenz"), Err(Error::UnknownModel(_))));
    }

    #[test]
    fn nitrogen_g_at_zero() {
        let g = g_of("nitrogen_oxide", &[0.0]).unwrap();
        // 126.2 * 91.9^2
        assert!((g[0][0] - 1_065_835.982).abs() < 1e-6);
        assert_eq!(g[0][1], 0.0);
    }

    #[test]
    fn lotka_g_at_ones() {
        let g = g_of("lotka_volterra", &[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![vec![1.0, -1.0, 0.0, 0.0], vec![0.0, 0.0, -1.0, 1.0]]);
    }

    #[test]
    fn g_dimension_checked() {
        assert!(g_of("barnes", &[1.0]).is_err());
    }

    #[test]
    fn zero_theta_gives_zero_rhs() {
        for name in MODEL_NAMES {
            let e = catalog_get(name).unwrap();
            let p = e.model.dim_param();
            let mut dx = vec![1.0; e.model.dim_state()];
            e.model.rhs(0.0, &e.default_eta.xi, &vec![0.0; p], &mut dx);
            assert!(dx.iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn nitrogen_solution_is_monotone() {
        let e = catalog_get("nitrogen_oxide").unwrap();
        let traj = integrate(e.model.as_ref(), &e.default_eta, 40.0, &Tolerances::default()).unwrap();
        let vals: Vec<f64> = (0..=400).map(|k| traj.eval(k as f64 * 0.1)[0]).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
    }
}

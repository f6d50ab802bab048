//! Forward sensitivities `s = ∂x/∂η` and second derivatives `z = ∂²x/∂η²`,
//! integrated together with the state as one augmented system.
//!
//! With `q = d + p`, the augmented state is laid out as
//! `[x (d) | s (d·q, row-major) | z (d·q·q)]`, where `s[i*q + k]` is
//! `∂x_i/∂η_k` and `z[(i*q + k)*q + l]` is `∂²x_i/∂η_k∂η_l`.

use std::cell::{Cell, RefCell};

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ode::{dopri5, DenseOutput, OdeModel, ParameterVector, SecondDerivatives, Tolerances};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityOrder {
    First,
    Second,
}

thread_local! {
    static SECOND_ORDER_SOLVES: Cell<u64> = const { Cell::new(0) };
}

/// Number of second-order solves performed on the current thread.
pub fn second_order_solve_count() -> u64 {
    SECOND_ORDER_SOLVES.with(|c| c.get())
}

/// Sensitivities at a single time.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityPoint {
    pub x: Vec<f64>,
    /// `d × q`
    pub s: DMatrix<f64>,
    /// `z[i]` is the `q × q` Hessian of `x_i`; present for second order
    pub z: Option<Vec<DMatrix<f64>>>,
}

#[derive(Debug, Clone)]
pub struct SensitivitySolution {
    dense: DenseOutput,
    dim_state: usize,
    dim_eta: usize,
    order: SensitivityOrder,
}

impl SensitivitySolution {
    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_eta(&self) -> usize {
        self.dim_eta
    }

    pub fn order(&self) -> SensitivityOrder {
        self.order
    }

    pub fn t_end(&self) -> f64 {
        self.dense.t_end()
    }

    /// Integrator step nodes shared by `x`, `s` and `z`.
    pub fn grid(&self) -> &[f64] {
        self.dense.nodes()
    }

    pub fn dense(&self) -> &DenseOutput {
        &self.dense
    }

    /// Raw augmented state at `t`.
    pub fn eval_raw(&self, t: f64, out: &mut [f64]) {
        self.dense.eval_into(t, out)
    }

    pub fn eval(&self, t: f64) -> SensitivityPoint {
        let y = self.dense.eval(t);
        self.unpack(&y)
    }

    pub fn unpack(&self, y: &[f64]) -> SensitivityPoint {
        let (d, q) = (self.dim_state, self.dim_eta);
        let x = y[..d].to_vec();
        let s = DMatrix::from_row_slice(d, q, &y[d..d + d * q]);
        let z = match self.order {
            SensitivityOrder::First => None,
            SensitivityOrder::Second => {
                let off = d + d * q;
                Some((0..d).map(|i| DMatrix::from_row_slice(q, q, &y[off + i * q * q..off + (i + 1) * q * q])).collect())
            }
        };
        SensitivityPoint { x, s, z }
    }
}

struct Work {
    fx: Vec<f64>,
    fp: Vec<f64>,
    h: SecondDerivatives,
    hs: Vec<f64>,
}

/// Integrates `x`, `s` (and `z` for second order) over `[0, t_end]` in one
/// adaptive pass. `s(0) = [I | 0]`, `z(0) = 0`.
pub fn solve_sensitivities(
    model: &dyn OdeModel,
    eta: &ParameterVector,
    t_end: f64,
    order: SensitivityOrder,
    tol: &Tolerances,
) -> Result<SensitivitySolution> {
    eta.check_against(model)?;
    let d = model.dim_state();
    let p = model.dim_param();
    let q = d + p;
    let second = order == SensitivityOrder::Second;
    let size = d + d * q + if second { d * q * q } else { 0 };

    let mut y0 = vec![0.0; size];
    y0[..d].copy_from_slice(&eta.xi);
    for i in 0..d {
        y0[d + i * q + i] = 1.0;
    }
    let theta = eta.theta.clone();
    let work = RefCell::new(Work {
        fx: vec![0.0; d * d],
        fp: vec![0.0; d * p],
        h: SecondDerivatives::zeros(d, p),
        hs: vec![0.0; d * d * q],
    });

    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let mut w = work.borrow_mut();
        let Work { fx, fp, h, hs } = &mut *w;
        let x = &y[..d];
        let s = &y[d..d + d * q];
        model.rhs(t, x, &theta, &mut dy[..d]);
        model.jac_state(t, x, &theta, fx);
        model.jac_param(t, x, &theta, fp);

        let (_, rest) = dy.split_at_mut(d);
        let (ds, dz) = rest.split_at_mut(d * q);
        for i in 0..d {
            for k in 0..q {
                let mut acc = (0..d).map(|j| fx[i * d + j] * s[j * q + k]).sum::<f64>();
                if k >= d {
                    acc += fp[i * p + k - d];
                }
                ds[i * q + k] = acc;
            }
        }
        if !second {
            return;
        }

        let z = &y[d + d * q..];
        model.hessians(t, x, &theta, h);
        // hs[(i*d + j)*q + l] = d(F_x[i][j])/dη_l along the trajectory
        for i in 0..d {
            for j in 0..d {
                for l in 0..q {
                    let mut acc = (0..d).map(|m| h.xx(i, j, m) * s[m * q + l]).sum::<f64>();
                    if l >= d {
                        acc += h.xp(i, j, l - d);
                    }
                    hs[(i * d + j) * q + l] = acc;
                }
            }
        }
        for i in 0..d {
            for k in 0..q {
                for l in 0..q {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += fx[i * d + j] * z[(j * q + k) * q + l] + hs[(i * d + j) * q + l] * s[j * q + k];
                    }
                    if k >= d {
                        let kk = k - d;
                        acc += (0..d).map(|m| h.xp(i, m, kk) * s[m * q + l]).sum::<f64>();
                        if l >= d {
                            acc += h.pp(i, kk, l - d);
                        }
                    }
                    dz[(i * q + k) * q + l] = acc;
                }
            }
        }
    };

    let dense = dopri5(rhs, &y0, t_end, tol)?;
    if second {
        SECOND_ORDER_SOLVES.with(|c| c.set(c.get() + 1));
    }
    Ok(SensitivitySolution { dense, dim_state: d, dim_eta: q, order })
}

/// `Ψ_n` and `dΨ_n/dη` restricted to the estimated components, together with
/// the residual sum of squares at `η`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatingFunctionValue {
    pub psi: DVector<f64>,
    pub dpsi: DMatrix<f64>,
    pub rss: f64,
    /// indices into `η` of the rows and columns of `psi` and `dpsi`
    pub indices: Vec<usize>,
}

fn check_data(model: &dyn OdeModel, data: &Dataset) -> Result<()> {
    if data.dim_state() != model.dim_state() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} states, model `{}` has {}",
            data.dim_state(),
            model.name(),
            model.dim_state()
        )));
    }
    if !(data.t_end() > 0.0) {
        return Err(Error::InvalidArgument("observation times must extend beyond 0".into()));
    }
    Ok(())
}

/// `Ψ_n(η) = Σ_j s(t_j)ᵀ (Y_j − x(η, t_j))` and
/// `dΨ_n/dη = Σ_j [z(t_j)·(Y_j − x(η, t_j)) − s(t_j)ᵀ s(t_j)]`, from one
/// second-order solve.
pub fn estimating_function(
    model: &dyn OdeModel,
    eta: &ParameterVector,
    data: &Dataset,
    tol: &Tolerances,
) -> Result<EstimatingFunctionValue> {
    check_data(model, data)?;
    let sol = solve_sensitivities(model, eta, data.t_end(), SensitivityOrder::Second, tol)?;
    Ok(estimating_function_from(&sol, eta, data))
}

/// Evaluates `Ψ_n` from an existing solution; `dpsi` is left at zero when the
/// solution is first order.
pub fn estimating_function_from(sol: &SensitivitySolution, eta: &ParameterVector, data: &Dataset) -> EstimatingFunctionValue {
    let d = sol.dim_state();
    let q = sol.dim_eta();
    let idx = eta.estimated_indices();
    let r_dim = idx.len();
    let mut psi = DVector::zeros(r_dim);
    let mut dpsi = DMatrix::zeros(r_dim, r_dim);
    let mut rss = 0.0;
    let mut y = vec![0.0; sol.dense.dim()];
    let second = sol.order == SensitivityOrder::Second;
    for (j, &t) in data.times().iter().enumerate() {
        sol.eval_raw(t, &mut y);
        let s = &y[d..d + d * q];
        for i in 0..d {
            let r = data.values()[(i, j)] - y[i];
            rss += r * r;
            for (a, &k) in idx.iter().enumerate() {
                psi[a] += s[i * q + k] * r;
                for (b, &l) in idx.iter().enumerate() {
                    let mut v = -s[i * q + k] * s[i * q + l];
                    if second {
                        v += y[d + d * q + (i * q + k) * q + l] * r;
                    }
                    dpsi[(a, b)] += v;
                }
            }
        }
    }
    EstimatingFunctionValue { psi, dpsi, rss, indices: idx }
}

/// `R_n(η) = Σ_ij (Y_ij − x_i(η, t_j))²`.
pub fn residual_sum_of_squares(model: &dyn OdeModel, eta: &ParameterVector, data: &Dataset, tol: &Tolerances) -> Result<f64> {
    check_data(model, data)?;
    let traj = crate::ode::integrate(model, eta, data.t_end(), tol)?;
    let mut x = vec![0.0; model.dim_state()];
    let mut rss = 0.0;
    for (j, &t) in data.times().iter().enumerate() {
        traj.eval_into(t, &mut x);
        for (i, xi) in x.iter().enumerate() {
            rss += (data.values()[(i, j)] - xi).powi(2);
        }
    }
    Ok(rss)
}

#![allow(dead_code)]

use accel_ode::models::{self, ModelCatalogEntry, MODEL_NAMES};
use accel_ode::ode::integrate;
use accel_ode::sensitivity::{self, SensitivityOrder};
use accel_ode::{Dataset, OdeModel, ParameterVector, Tolerances};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tight() -> Tolerances {
    Tolerances::new(1e-12, 1e-14)
}

pub fn catalog() -> Vec<ModelCatalogEntry> {
    MODEL_NAMES.iter().map(|n| models::catalog_get(n).unwrap()).collect()
}

/// Relative step `rel · |v|`, or `rel` when `v` is zero.
pub fn step(v: f64, rel: f64) -> f64 {
    if v == 0.0 {
        rel
    } else {
        rel * v.abs()
    }
}

pub fn perturbed(eta: &ParameterVector, k: usize, h: f64) -> ParameterVector {
    let mut e = eta.clone();
    e.set(k, eta.get(k) + h);
    e
}

pub fn random_times(t_end: f64, m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t: Vec<f64> = (0..m).map(|_| rng.random_range(0.05 * t_end..=t_end)).collect();
    t.sort_by(f64::total_cmp);
    t
}

fn states_at(model: &dyn OdeModel, eta: &ParameterVector, t_end: f64, times: &[f64]) -> Vec<Vec<f64>> {
    let traj = integrate(model, eta, t_end, &tight()).unwrap();
    times.iter().map(|&t| traj.eval(t)).collect()
}

/// Largest error of a derivative column over all times, relative to the
/// column's own magnitude at that time. The magnitude is floored at `1e-3`
/// times the column's peak and at `noise`, the round-off level of the
/// difference quotient, so a column that is identically zero must be
/// matched to within that noise.
pub fn column_error(analytic: &[Vec<f64>], reference: &[Vec<f64>], noise: f64) -> f64 {
    let peak = reference.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for (a, r) in analytic.iter().zip(reference) {
        let diff = a.iter().zip(r).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let mag = r.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3 * peak).max(noise);
        worst = worst.max(diff / mag);
    }
    worst
}

/// Worst first- and second-order column errors of the integrated
/// sensitivities against central differences of `x` at `times`.
pub fn sensitivity_fd_errors(model: &dyn OdeModel, eta: &ParameterVector, t_end: f64, times: &[f64]) -> (f64, f64) {
    let d = model.dim_state();
    let q = eta.dim();
    let sol = sensitivity::solve_sensitivities(model, eta, t_end, SensitivityOrder::Second, &tight()).unwrap();
    let points: Vec<_> = times.iter().map(|&t| sol.eval(t)).collect();
    let x_scale = states_at(model, eta, t_end, times).iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut s_err = 0.0f64;
    for k in 0..q {
        let h = step(eta.get(k), 1e-5);
        let plus = states_at(model, &perturbed(eta, k, h), t_end, times);
        let minus = states_at(model, &perturbed(eta, k, -h), t_end, times);
        let fd: Vec<Vec<f64>> = plus.iter().zip(&minus).map(|(p, m)| (0..d).map(|i| (p[i] - m[i]) / (2.0 * h)).collect()).collect();
        let an: Vec<Vec<f64>> = points.iter().map(|p| (0..d).map(|i| p.s[(i, k)]).collect()).collect();
        s_err = s_err.max(column_error(&an, &fd, 1e-8 * x_scale / h));
    }

    let mut z_err = 0.0f64;
    for k in 0..q {
        for l in k..q {
            let hk = step(eta.get(k), 1e-3);
            let hl = step(eta.get(l), 1e-3);
            let fd: Vec<Vec<f64>> = if k == l {
                let p = states_at(model, &perturbed(eta, k, hk), t_end, times);
                let c = states_at(model, eta, t_end, times);
                let m = states_at(model, &perturbed(eta, k, -hk), t_end, times);
                (0..times.len()).map(|j| (0..d).map(|i| (p[j][i] - 2.0 * c[j][i] + m[j][i]) / (hk * hk)).collect()).collect()
            } else {
                let at = |a: f64, b: f64| states_at(model, &perturbed(&perturbed(eta, k, a), l, b), t_end, times);
                let (pp, pm, mp, mm) = (at(hk, hl), at(hk, -hl), at(-hk, hl), at(-hk, -hl));
                (0..times.len())
                    .map(|j| (0..d).map(|i| (pp[j][i] - pm[j][i] - mp[j][i] + mm[j][i]) / (4.0 * hk * hl)).collect())
                    .collect()
            };
            let an: Vec<Vec<f64>> =
                points.iter().map(|p| (0..d).map(|i| p.z.as_ref().unwrap()[i][(k, l)]).collect()).collect();
            z_err = z_err.max(column_error(&an, &fd, 1e-8 * x_scale / (hk * hl)));
        }
    }
    (s_err, z_err)
}

pub fn rss(model: &dyn OdeModel, eta: &ParameterVector, data: &Dataset) -> f64 {
    sensitivity::residual_sum_of_squares(model, eta, data, &tight()).unwrap()
}

fn rel_norm(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm
}

/// Relative errors of `Ψ_n` against `−½ ∇R_n` and of `dΨ_n/dη` against the
/// central-difference Jacobian of `Ψ_n`.
pub fn psi_fd_errors(model: &dyn OdeModel, eta: &ParameterVector, data: &Dataset) -> (f64, f64) {
    let v = sensitivity::estimating_function(model, eta, data, &tight()).unwrap();
    let idx = eta.estimated_indices();
    let mut grad = Vec::new();
    let mut jac = vec![0.0; idx.len() * idx.len()];
    for (b, &k) in idx.iter().enumerate() {
        let h = step(eta.get(k), 1e-5);
        let rp = rss(model, &perturbed(eta, k, h), data);
        let rm = rss(model, &perturbed(eta, k, -h), data);
        grad.push(-0.5 * (rp - rm) / (2.0 * h));

        let h2 = step(eta.get(k), 1e-4);
        let pp = sensitivity::estimating_function(model, &perturbed(eta, k, h2), data, &tight()).unwrap().psi;
        let pm = sensitivity::estimating_function(model, &perturbed(eta, k, -h2), data, &tight()).unwrap().psi;
        for a in 0..idx.len() {
            jac[a * idx.len() + b] = (pp[a] - pm[a]) / (2.0 * h2);
        }
    }
    let analytic_jac: Vec<f64> = (0..idx.len()).flat_map(|a| (0..idx.len()).map(move |b| (a, b))).map(|(a, b)| v.dpsi[(a, b)]).collect();
    (rel_norm(v.psi.as_slice(), &grad), rel_norm(&analytic_jac, &jac))
}

/// Noisy observations of `model` at `eta` on an equispaced grid.
pub fn noisy_data(model: &dyn OdeModel, eta: &ParameterVector, t_end: f64, n: usize, sigma: f64, seed: u64) -> Dataset {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let times: Vec<f64> = (0..n).map(|j| t_end * j as f64 / (n - 1) as f64).collect();
    let x = states_at(model, eta, t_end, &times);
    let rows: Vec<Vec<f64>> =
        (0..model.dim_state()).map(|i| x.iter().map(|xj| xj[i] + noise.sample(&mut rng)).collect()).collect();
    Dataset::from_rows(times, &rows).unwrap()
}

pub fn noiseless_data(model: &dyn OdeModel, eta: &ParameterVector, times: Vec<f64>) -> Dataset {
    let t_end = times.iter().copied().fold(0.0, f64::max);
    let x = states_at(model, eta, t_end, &times);
    let rows: Vec<Vec<f64>> = (0..model.dim_state()).map(|i| x.iter().map(|xj| xj[i]).collect()).collect();
    Dataset::from_rows(times, &rows).unwrap()
}

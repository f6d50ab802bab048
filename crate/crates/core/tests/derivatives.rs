mod common;

use accel_ode::models::{self, Linear, LotkaVolterra};
use accel_ode::ode::{dopri5, integrate, OdeModel, SecondDerivatives};
use accel_ode::sensitivity::{self, SensitivityOrder};
use accel_ode::{Dataset, ParameterVector, Tolerances};
use common::*;
use proptest::prelude::*;

/// A state near the default trajectory, away from zero.
fn probe_state(entry: &models::ModelCatalogEntry) -> Vec<f64> {
    let traj = integrate(entry.model.as_ref(), &entry.default_eta, entry.default_horizon, &tight()).unwrap();
    traj.eval(0.4 * entry.default_horizon).iter().map(|v| v + 0.1 * v.abs().max(1.0)).collect()
}

#[test]
fn rhs_equals_g_theta() {
    for entry in catalog() {
        let m = entry.model.as_ref();
        let (d, p) = (m.dim_state(), m.dim_param());
        let x = probe_state(&entry);
        let theta = &entry.default_eta.theta;
        let mut f = vec![0.0; d];
        m.rhs(0.0, &x, theta, &mut f);
        let g = models::g_of(m.name(), &x).unwrap();
        for i in 0..d {
            let gt: f64 = (0..p).map(|k| g[i][k] * theta[k]).sum();
            assert!((f[i] - gt).abs() <= 1e-12 * f[i].abs().max(1e-12), "{} row {i}", m.name());
        }
    }
}

/// Analytic Jacobians and Hessians against the trait's finite-difference
/// defaults, reached through a wrapper that only forwards `rhs`.
#[test]
fn analytic_derivatives_match_finite_differences() {
    struct RhsOnly<'a>(&'a dyn OdeModel);
    impl OdeModel for RhsOnly<'_> {
        fn name(&self) -> &str {
            "rhs_only"
        }
        fn dim_state(&self) -> usize {
            self.0.dim_state()
        }
        fn dim_param(&self) -> usize {
            self.0.dim_param()
        }
        fn rhs(&self, t: f64, x: &[f64], theta: &[f64], dx: &mut [f64]) {
            self.0.rhs(t, x, theta, dx)
        }
    }
    // `floor` is the natural size of the block, so an all-zero Hessian is
    // compared against the difference-quotient noise rather than itself.
    // Second differences of `rhs` are only good to a few parts in 1e4.
    let close = |a: &[f64], b: &[f64], floor: f64, what: &str, name: &str| {
        let scale = b.iter().fold(floor, |m, v| m.max(v.abs()));
        let rel = if what.len() == 2 { 1e-3 } else { 1e-5 };
        for (k, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= rel * scale, "{name} {what}[{k}]: {x} vs {y}");
        }
    };
    for entry in catalog() {
        let m = entry.model.as_ref();
        assert!(m.analytic_derivatives());
        let fd = RhsOnly(m);
        let (d, p) = (m.dim_state(), m.dim_param());
        let x = probe_state(&entry);
        let th = &entry.default_eta.theta;
        let (mut a, mut b) = (vec![0.0; d * d], vec![0.0; d * d]);
        m.jac_state(0.0, &x, th, &mut a);
        fd.jac_state(0.0, &x, th, &mut b);
        close(&a, &b, 0.0, "jac_state", m.name());
        let x_norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let fx_scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())) / x_norm;
        let (mut a, mut b) = (vec![0.0; d * p], vec![0.0; d * p]);
        m.jac_param(0.0, &x, th, &mut a);
        fd.jac_param(0.0, &x, th, &mut b);
        close(&a, &b, 0.0, "jac_param", m.name());
        let fp_scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())) / x_norm;

        let mut ha = SecondDerivatives::zeros(d, p);
        let mut hb = SecondDerivatives::zeros(d, p);
        m.hessians(0.0, &x, th, &mut ha);
        fd.hessians(0.0, &x, th, &mut hb);
        close(&ha.xx, &hb.xx, fx_scale, "xx", m.name());
        close(&ha.xp, &hb.xp, fp_scale, "xp", m.name());
        assert!(ha.pp.iter().all(|v| *v == 0.0), "{} is linear in theta", m.name());
    }
}

#[test]
fn catalog_sensitivities_match_finite_differences() {
    for (seed, entry) in catalog().into_iter().enumerate() {
        let times = random_times(entry.default_horizon, 10, seed as u64);
        let (s, z) = sensitivity_fd_errors(entry.model.as_ref(), &entry.default_eta, entry.default_horizon, &times);
        assert!(s < 1e-4, "{} s error {s}", entry.name);
        assert!(z < 1e-3, "{} z error {z}", entry.name);
    }
}

#[test]
fn schwarz_symmetry_on_catalog() {
    for entry in catalog() {
        let sol = sensitivity::solve_sensitivities(
            entry.model.as_ref(),
            &entry.default_eta,
            entry.default_horizon,
            SensitivityOrder::Second,
            &Tolerances::default(),
        )
        .unwrap();
        for &t in sol.grid() {
            for z in sol.eval(t).z.unwrap() {
                let asym = (&z - z.transpose()).amax();
                assert!(asym <= 1e-6 * z.amax().max(1e-300), "{} at t={t}: {asym}", entry.name);
            }
        }
    }
}

/// Integrating `x` first and then `s` with `x(t)` interpolated from the
/// dense output gives the same sensitivities as the coupled system.
#[test]
fn coupled_and_two_stage_sensitivities_agree() {
    let m = LotkaVolterra;
    let eta = ParameterVector::new(vec![1.0, 0.5], vec![0.5; 4]);
    let (d, p, q) = (2, 4, 6);
    let tol = tight();
    let traj = integrate(&m, &eta, 10.0, &tol).unwrap();
    let mut s0 = vec![0.0; d * q];
    s0[0] = 1.0;
    s0[q + 1] = 1.0;
    let rhs = |t: f64, s: &[f64], ds: &mut [f64]| {
        let x = traj.eval(t);
        let mut fx = vec![0.0; d * d];
        let mut fp = vec![0.0; d * p];
        m.jac_state(t, &x, &eta.theta, &mut fx);
        m.jac_param(t, &x, &eta.theta, &mut fp);
        for i in 0..d {
            for k in 0..q {
                let mut acc: f64 = (0..d).map(|j| fx[i * d + j] * s[j * q + k]).sum();
                if k >= d {
                    acc += fp[i * p + k - d];
                }
                ds[i * q + k] = acc;
            }
        }
    };
    let two_stage = dopri5(rhs, &s0, 10.0, &tol).unwrap();
    let coupled = sensitivity::solve_sensitivities(&m, &eta, 10.0, SensitivityOrder::First, &tol).unwrap();
    for t in [1.0, 3.3, 7.1, 10.0] {
        let a = coupled.eval(t).s;
        let b = two_stage.eval(t);
        for i in 0..d {
            for k in 0..q {
                assert!((a[(i, k)] - b[i * q + k]).abs() < 1e-7 * (1.0 + a.amax()), "t={t} ({i},{k})");
            }
        }
    }
}

#[test]
fn psi_matches_least_squares_gradient() {
    let cases: Vec<(Box<dyn OdeModel>, ParameterVector, ParameterVector, f64)> = vec![
        (Box::new(Linear), ParameterVector::new(vec![0.5], vec![-1.0]), ParameterVector::new(vec![0.55], vec![-0.9]), 1.0),
        (
            Box::new(LotkaVolterra),
            ParameterVector::new(vec![1.0, 0.5], vec![0.5; 4]),
            ParameterVector::new(vec![1.05, 0.48], vec![0.52, 0.47, 0.53, 0.49]),
            10.0,
        ),
    ];
    for (seed, (m, truth, at, t_end)) in cases.into_iter().enumerate() {
        let data = noisy_data(m.as_ref(), &truth, t_end, 15, 0.05, seed as u64);
        let (psi, dpsi) = psi_fd_errors(m.as_ref(), &at, &data);
        assert!(psi < 1e-4, "{} psi {psi}", m.name());
        assert!(dpsi < 1e-3, "{} dpsi {dpsi}", m.name());
    }
}

fn split(data: &Dataset, mask: &[bool]) -> (Dataset, Dataset) {
    (data.filter(|j| mask[j]).unwrap(), data.filter(|j| !mask[j]).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn psi_is_additive_over_disjoint_subsets(mask in proptest::collection::vec(any::<bool>(), 12), seed in 0u64..1000) {
        prop_assume!(mask.iter().any(|m| *m) && mask.iter().any(|m| !*m));
        let truth = ParameterVector::new(vec![0.5], vec![-1.0]);
        let data = noisy_data(&Linear, &truth, 1.0, 12, 0.05, seed);
        let (a, b) = split(&data, &mask);
        let at = ParameterVector::new(vec![0.52], vec![-0.95]);
        let tol = tight();
        // evaluate all three on the full horizon so they share one solution
        let sol = sensitivity::solve_sensitivities(&Linear, &at, 1.0, SensitivityOrder::Second, &tol).unwrap();
        let whole = sensitivity::estimating_function_from(&sol, &at, &data);
        let pa = sensitivity::estimating_function_from(&sol, &at, &a);
        let pb = sensitivity::estimating_function_from(&sol, &at, &b);
        for k in 0..2 {
            prop_assert!((whole.psi[k] - pa.psi[k] - pb.psi[k]).abs() < 1e-12);
        }
        prop_assert!((whole.dpsi - pa.dpsi - pb.dpsi).amax() < 1e-12);
    }

    #[test]
    fn one_step_keeps_known_components(xi in 0.2f64..2.0, th in -1.5f64..-0.5, seed in 0u64..1000) {
        let truth = ParameterVector::new(vec![0.5], vec![-1.0]);
        let data = noisy_data(&Linear, &truth, 1.0, 21, 0.05, seed);
        let start = ParameterVector::new(vec![xi], vec![th]).with_known_xi();
        let out = accel_ode::accel::one_step(&Linear, &start, &data, &Tolerances::default()).unwrap();
        prop_assert_eq!(out.eta.xi[0].to_bits(), xi.to_bits());
        prop_assert!(out.eta.theta[0].is_finite());
    }
}

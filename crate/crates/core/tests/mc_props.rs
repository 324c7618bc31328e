//! Monte Carlo estimators on instances with known answers.

use ere_core::mc::{mc_cost, mc_p1_diag, simulate_closed_loop, simulate_phi, spike_test, McConfig};
use ere_core::ode::integrate_p2;
use ere_core::problem::builtin;
use ere_core::solver::solve_equilibrium;
use ere_core::{Mat, MatrixPath, ProblemInstance};

/// Scalar instance with `dX = aX dt + cX dW` when the gain is zero.
fn scalar(a: f64, c: f64, q: f64, g1: f64, steps: usize) -> ProblemInstance {
    let src = format!(
        r#"
[dims]
n = 1
m = 1
k = 1

[grid]
horizon = 1.0
steps = {steps}

[coefficients]
A = {{ const = [[{a}]] }}
B = {{ const = [[0.0]] }}
C = {{ const = [[{c}]] }}
D = {{ const = [[0.0]] }}
A_hat = {{ const = [[0.0]] }}
B_hat = {{ const = [[0.0]] }}
C_hat = {{ const = [[0.0]] }}
D_hat = {{ const = [[0.0]] }}
H = [[0.0]]

[weights]
delta = 0.5
Q = {{ const = [[{q}]] }}
R = {{ const = [[1.0]] }}
M = {{ const = [[0.0]] }}
N = {{ const = [[0.0]] }}
G1 = {{ const = [[{g1}]] }}
G2 = {{ const = [[1.0]] }}

[weights.caps]
Q = [[{q}]]
R = [[1.0]]
M = [[0.0]]
N = [[0.0]]
G1 = [[{g1}]]
G2 = [[1.0]]
"#
    );
    ProblemInstance::from_toml_str(&src).unwrap()
}

fn zero_gain(p: &ProblemInstance) -> MatrixPath {
    MatrixPath::constant(p.grid, Mat::zeros(p.dims.k, p.dims.n))
}

fn cfg(p: &ProblemInstance, paths: usize, antithetic: bool) -> McConfig {
    McConfig::new(paths, 7, p.grid, antithetic).unwrap()
}

#[test]
fn zero_initial_state_costs_nothing() {
    let p = builtin("discounted_2x2").unwrap().with_steps(50).unwrap();
    let (sol, _) = solve_equilibrium(&p, 1e-10, 200).unwrap();
    let r = mc_cost(&p, &sol.theta, 0, &[0.0, 0.0], &cfg(&p, 1000, true)).unwrap();
    assert_eq!(r.estimate[(0, 0)], 0.0);
    assert_eq!(r.stderr[(0, 0)], 0.0);
}

#[test]
fn zero_weights_give_zero_estimates() {
    let p = scalar(0.3, 0.4, 0.0, 0.0, 40);
    let theta = zero_gain(&p);
    let p2 = integrate_p2(&p, &theta).unwrap();
    let r = mc_p1_diag(&p, &theta, &p2, 0, &cfg(&p, 1000, false)).unwrap();
    assert_eq!(r.estimate[(0, 0)], 0.0);
    assert_eq!(r.max_abs_z(), Some(0.0));
    let r = mc_cost(&p, &theta, 3, &[1.5], &cfg(&p, 1000, false)).unwrap();
    assert_eq!(r.estimate[(0, 0)], 0.0);
}

#[test]
fn deterministic_running_cost_is_exact() {
    // X ≡ 1, so 𝒥 = ½·Q·T.
    let p = scalar(0.0, 0.0, 1.0, 0.0, 20);
    let r = mc_cost(&p, &zero_gain(&p), 0, &[1.0], &cfg(&p, 200, false)).unwrap();
    assert!((r.estimate[(0, 0)] - 0.5).abs() < 1e-14, "{}", r.estimate[(0, 0)]);
    assert_eq!(r.stderr[(0, 0)], 0.0);
}

#[test]
fn geometric_second_moment_matches_closed_form() {
    // P₁(0,0) = E[Φ(T)²] = exp((2a + c²)T).
    let (a, c) = (-0.4, 0.5);
    let p = scalar(a, c, 0.0, 1.0, 50);
    let theta = zero_gain(&p);
    let p2 = integrate_p2(&p, &theta).unwrap();
    let exact = ((2.0 * a + c * c) * 1.0f64).exp();
    let r = mc_p1_diag(&p, &theta, &p2, 0, &cfg(&p, 40_000, true)).unwrap();
    let target = r.target.clone().unwrap()[(0, 0)];
    assert!((target - exact).abs() < 1e-8, "ODE {target} vs {exact}");
    let z = (r.estimate[(0, 0)] - exact) / r.stderr[(0, 0)];
    assert!(z.abs() <= 4.0, "z {z}");

    let paths = simulate_phi(&p, &theta, 0, &cfg(&p, 2000, false)).unwrap();
    assert_eq!(paths.terminal.len(), 2000);
    let mean: f64 = paths.terminal.iter().map(|m| m[(0, 0)].powi(2)).sum::<f64>() / 2000.0;
    assert!((mean - exact).abs() < 0.1, "{mean}");
}

/// Plain Euler–Maruyama has weak error of order one.
#[test]
fn plain_euler_weak_error_is_first_order() {
    let (a, c) = (-1.5, 0.3);
    let exact = ((2.0 * a + c * c) * 1.0f64).exp();
    let errs: Vec<f64> = [10, 20, 40]
        .iter()
        .map(|&n| {
            let p = scalar(a, c, 0.0, 1.0, n);
            let theta = zero_gain(&p);
            let p2 = integrate_p2(&p, &theta).unwrap();
            let mc = McConfig::new(200_000, 11, p.grid, true).unwrap().with_levels(1);
            let r = mc_p1_diag(&p, &theta, &p2, 0, &mc).unwrap();
            r.estimate[(0, 0)] - exact
        })
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..2.5).contains(&ratio), "errors {errs:?}");
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let p = builtin("smoke_3x2x2").unwrap().with_steps(40).unwrap();
    let (sol, _) = solve_equilibrium(&p, 1e-10, 200).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let c = cfg(&p, 3000, true);
            (
                mc_cost(&p, &sol.theta, 4, &[1.0, -1.0, 0.5], &c).unwrap(),
                mc_p1_diag(&p, &sol.theta, &sol.p2, 4, &c).unwrap(),
            )
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn antithetic_pairs_do_not_inflate_the_error() {
    let p = builtin("discounted_2x2").unwrap().with_steps(40).unwrap();
    let (sol, _) = solve_equilibrium(&p, 1e-10, 200).unwrap();
    let x0 = [1.0, 1.0];
    let plain = mc_cost(&p, &sol.theta, 0, &x0, &cfg(&p, 20_000, false)).unwrap();
    let anti = mc_cost(&p, &sol.theta, 0, &x0, &cfg(&p, 20_000, true)).unwrap();
    assert!(anti.stderr[(0, 0)] <= 1.05 * plain.stderr[(0, 0)]);
}

#[test]
fn closed_loop_identity_holds() {
    let p = builtin("discounted_2x2").unwrap().with_steps(100).unwrap();
    let (sol, _) = solve_equilibrium(&p, 1e-10, 200).unwrap();
    let r = simulate_closed_loop(&p, &sol.theta, &sol.p2, &[1.0, 1.0], 0, &cfg(&p, 2000, true)).unwrap();
    assert_eq!(r.passed, Some(true), "{r:?}");
}

#[test]
fn null_spike_has_zero_quotients() {
    let p = builtin("discounted_2x2").unwrap().with_steps(40).unwrap();
    let (sol, _) = solve_equilibrium(&p, 1e-10, 200).unwrap();
    let r = spike_test(&p, &sol, 0, &[1.0, 1.0], &[0.0, 0.0], &[0.2, 0.1, 0.05], &cfg(&p, 500, true)).unwrap();
    assert!(r.estimate.as_slice().iter().all(|&d| d == 0.0), "{:?}", r.estimate);
    assert_eq!(r.passed, Some(true));
}

#[test]
fn spike_ladder_must_resolve_the_grid() {
    let p = builtin("discounted_2x2").unwrap().with_steps(40).unwrap();
    let (sol, _) = solve_equilibrium(&p, 1e-10, 200).unwrap();
    let c = cfg(&p, 500, true);
    assert!(spike_test(&p, &sol, 0, &[1.0, 1.0], &[1.0, 0.0], &[0.01], &c).is_err());
    assert!(spike_test(&p, &sol, 39, &[1.0, 1.0], &[1.0, 0.0], &[0.2], &c).is_err());
}

#[test]
fn too_few_paths_are_rejected() {
    let p = builtin("discounted_2x2").unwrap();
    assert!(McConfig::new(10, 0, p.grid, false).is_err());
    let c = McConfig::new(1000, 0, p.grid, false).unwrap().with_levels(4);
    let (sol, _) = solve_equilibrium(&p, 1e-10, 200).unwrap();
    assert!(mc_cost(&p, &sol.theta, 0, &[1.0, 1.0], &c).is_err());
}

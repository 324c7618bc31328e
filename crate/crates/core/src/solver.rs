//! Equilibrium gain by backward-windowed Picard iteration, plus the a priori
//! bounds on the value field and the gain.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{MatrixPath, Strategy, TimeGrid};
use crate::matrix::{spectral_norm, Mat};
use crate::ode::{advance_slice, diag_with, LyapWork, Precomputed, StageTable};
use crate::problem::ProblemInstance;

/// Initial window length as a fraction of the horizon.
const WINDOW_FRACTION: usize = 8;
/// Smallest window as a fraction of the horizon.
const MIN_WINDOW_FRACTION: usize = 1024;
/// Residuals are compared this many iterations apart to detect divergence.
const DECAY_LAG: usize = 10;
const POLISH_ITERATIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Certificates {
    /// Bound on `sup_t |V(t)|`.
    pub cv_bound: f64,
    /// Bound on `sup_t |Θ(t)|`.
    pub cstar_bound: f64,
    pub sup_value: f64,
    pub sup_theta: f64,
}

impl Certificates {
    pub fn holds(&self, slack: f64) -> bool {
        self.sup_value <= self.cv_bound + slack && self.sup_theta <= self.cstar_bound + slack
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub theta: Strategy,
    pub p1_diag: MatrixPath,
    pub p2: MatrixPath,
    pub value: MatrixPath,
    /// Entrywise sup-norm of `Γ[Θ] − Θ` over the grid.
    pub residual: f64,
    pub certificates: Certificates,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowReport {
    pub index: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub accepted: bool,
    pub iterations: usize,
    /// `‖Γ[Θ_j] − Θ_j‖` per iteration.
    pub residuals: Vec<f64>,
    /// Successive residual ratios.
    pub contraction: Vec<f64>,
    /// Largest distance of an iterate from the window seed.
    pub max_seed_distance: f64,
    /// Why the window was abandoned, if it was.
    pub failure: Option<String>,
}

impl WindowReport {
    /// Geometric-mean decay rate of the residuals.
    pub fn contraction_estimate(&self) -> Option<f64> {
        let r = &self.residuals;
        if r.len() < 2 || r[0] == 0.0 {
            return None;
        }
        Some((r[r.len() - 1] / r[0]).powf(1.0 / (r.len() - 1) as f64))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveDiagnostics {
    pub windows: Vec<WindowReport>,
    pub polish_iterations: usize,
    pub final_residual: f64,
}

impl fmt::Display for SolveDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "windows: {} ({} accepted)",
            self.windows.len(),
            self.windows.iter().filter(|w| w.accepted).count()
        )?;
        for w in &self.windows {
            write!(
                f,
                "window {:4} [{:.6}, {:.6}] {} iterations {:3}",
                w.index,
                w.t_lo,
                w.t_hi,
                if w.accepted { "accepted" } else { "rejected" },
                w.iterations
            )?;
            match w.contraction_estimate() {
                Some(c) => write!(f, " contraction {c:.4e}")?,
                None => write!(f, " contraction -")?,
            }
            write!(f, " seed-distance {:.4e}", w.max_seed_distance)?;
            if let Some(reason) = &w.failure {
                write!(f, " ({reason})")?;
            }
            writeln!(f)?;
            let hist: Vec<String> = w.residuals.iter().map(|r| format!("{r:.3e}")).collect();
            writeln!(f, "  residuals: {}", hist.join(" "))?;
        }
        writeln!(f, "polish iterations: {}", self.polish_iterations)?;
        writeln!(f, "final residual: {:.6e}", self.final_residual)
    }
}

fn node_sup(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> f64 {
    grid.nodes().into_iter().map(f).fold(0.0, f64::max)
}

fn trapezoid(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> f64 {
    let h = grid.h();
    let vals: Vec<f64> = grid.nodes().into_iter().map(f).collect();
    let inner: f64 = vals[1..vals.len() - 1].iter().sum();
    h * (inner + 0.5 * (vals[0] + vals[vals.len() - 1]))
}

fn g_hat(p: &ProblemInstance) -> f64 {
    spectral_norm(&p.weights.caps.g1).max(spectral_norm(&p.weights.caps.g2))
}

/// A priori bound on `sup_t |P₁(t,t) + P₂(t)ᵀG₂(t)P₂(t)|`.
pub fn cv_bound(p: &ProblemInstance) -> f64 {
    let c = &p.coeffs;
    let w = &p.weights;
    let g = g_hat(p);
    let n = p.dims.n as f64;
    let delta = w.delta;
    let q_hat = spectral_norm(&w.caps.q);
    let m_hat = spectral_norm(&w.caps.m);
    let n_hat = spectral_norm(&w.caps.n);
    let h = spectral_norm(&c.h);
    let lead = g
        + g * h * h
        + trapezoid(&p.grid, |s| {
            let ah = spectral_norm(&c.a_hat.eval(s));
            q_hat + g * g * ah * ah
        });
    let exponent = trapezoid(&p.grid, |s| {
        let a = spectral_norm(&c.a.eval(s));
        let cc = spectral_norm(&c.c.eval(s));
        let ch = spectral_norm(&c.c_hat.eval(s));
        let dh = spectral_norm(&c.d_hat.eval(s));
        2.0 * a
            + cc * cc
            + (n / delta) * (1.0 + m_hat + n_hat * cc * cc + 2.0 * g * ch + 2.0 * g * cc * dh)
    });
    lead * exponent.exp()
}

/// A priori bound on `sup_t |Θ(t)|`, with sup-norms taken over the grid
/// nodes.
pub fn cstar_bound(p: &ProblemInstance) -> f64 {
    let c = &p.coeffs;
    let grid = &p.grid;
    let cv = cv_bound(p);
    let delta = p.weights.delta;
    let n = p.dims.n as f64;
    let g = g_hat(p);
    let n_hat = spectral_norm(&p.weights.caps.n);
    let sup = |f: &crate::problem::TimeFn| node_sup(grid, |t| spectral_norm(&f.eval(t)));
    let (b, cc, d, dh, bh) = (sup(&c.b), sup(&c.c), sup(&c.d), sup(&c.d_hat), sup(&c.b_hat));
    cv / delta * (b + cc * d)
        + n * cv / (delta * delta) * (1.0 + n_hat * cc * d + g * b + g * d * dh)
        + g * g * bh * bh / delta
}

/// `V(t_i) = P₁(t_i, t_i) + P₂(t_i)ᵀ G₂(t_i) P₂(t_i)`.
pub fn equilibrium_value(p: &ProblemInstance, p1_diag: &MatrixPath, p2: &MatrixPath) -> MatrixPath {
    let grid = p1_diag.grid;
    let values = p1_diag
        .values
        .iter()
        .zip(&p2.values)
        .enumerate()
        .map(|(i, (p1, w))| {
            let mut v = p.weights.g2.eval(grid.node(i)).congruence(w);
            v += p1;
            v.symmetrize_mut();
            v
        })
        .collect();
    MatrixPath { grid, values }
}

fn gains_from(pre: &Precomputed, p1: &[Mat], p2: &[Mat]) -> Result<Vec<Mat>> {
    (0..p1.len())
        .into_par_iter()
        .map(|i| pre.gain(i, &p1[i], &p2[i]))
        .collect()
}

/// One application of the map `Θ ↦ Γ[Θ]` on the whole grid.
pub fn gamma_map(p: &ProblemInstance, theta: &Strategy) -> Result<Strategy> {
    let pre = Precomputed::new(p);
    let (next, _, _) = gamma_full(&pre, &theta.values)?;
    Ok(MatrixPath {
        grid: p.grid,
        values: next,
    })
}

/// `(Γ[Θ], P₁ diagonal, P₂)` for a full gain path.
fn gamma_full(pre: &Precomputed, theta: &[Mat]) -> Result<(Vec<Mat>, Vec<Mat>, Vec<Mat>)> {
    let table = StageTable::build(pre, theta)?;
    let p1 = diag_with(pre, &table)?;
    let next = gains_from(pre, &p1, &table.p2)?;
    Ok((next, p1, table.p2))
}

fn sup_diff(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).max_abs()).fold(0.0, f64::max)
}

/// Solves for the equilibrium gain; see [`solve_with_diagnostics`].
pub fn solve_equilibrium(
    p: &ProblemInstance,
    tol: f64,
    max_iters: usize,
) -> Result<(RiccatiSolution, SolveDiagnostics)> {
    let (res, diag) = solve_with_diagnostics(p, tol, max_iters);
    res.map(|sol| (sol, diag))
}

/// Backward-windowed Picard iteration.
///
/// The gain is seeded with its terminal value. Windows `[t_lo, t_a]` to the
/// left of the accepted region are iterated with the accepted tail frozen;
/// a window is accepted once `‖Γ[Θ_j] − Θ_j‖ ≤ tol` and the iterate `Θ_j`
/// itself is kept. Windows that stall, diverge or fail numerically are
/// halved down to `T/1024`. Diagnostics are returned even on failure.
pub fn solve_with_diagnostics(
    p: &ProblemInstance,
    tol: f64,
    max_iters: usize,
) -> (Result<RiccatiSolution>, SolveDiagnostics) {
    let mut diag = SolveDiagnostics::default();
    let res = solve_inner(p, tol, max_iters, &mut diag);
    (res, diag)
}

fn solve_inner(
    p: &ProblemInstance,
    tol: f64,
    max_iters: usize,
    diag: &mut SolveDiagnostics,
) -> Result<RiccatiSolution> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    if max_iters == 0 {
        return Err(Error::Invalid("max_iters must be at least 1".into()));
    }
    let pre = Precomputed::new(p);
    let grid = p.grid;
    let last = grid.steps;
    let seed = pre.terminal_gain()?;
    let mut theta = vec![seed; last + 1];
    let mut table = StageTable::empty(&pre);
    // Per node: slice state advanced down to `reached`.
    let mut cache: Vec<Option<(usize, Mat)>> = vec![None; last + 1];

    let w_max = (last / WINDOW_FRACTION).max(1);
    let w_min = (last / MIN_WINDOW_FRACTION).max(1);
    let mut width = w_max;
    let mut a = last;
    while a > 0 {
        let lo = a.saturating_sub(width);
        let start = theta[a].clone();
        for th in &mut theta[lo..a] {
            *th = start.clone();
        }
        let mut report = WindowReport {
            index: diag.windows.len(),
            t_lo: grid.node(lo),
            t_hi: grid.node(a),
            accepted: false,
            iterations: 0,
            residuals: Vec::new(),
            contraction: Vec::new(),
            max_seed_distance: 0.0,
            failure: None,
        };
        let outcome = run_window(
            &pre, &mut theta, &mut table, &mut cache, lo, a, tol, max_iters, &start, &mut report,
        );
        match outcome {
            Ok(true) => {
                report.accepted = true;
                diag.windows.push(report);
                a = lo;
                width = (2 * width).min(w_max);
            }
            Ok(false) | Err(_) => {
                let err = outcome.err();
                if let Some(e) = &err {
                    report.failure = Some(e.to_string());
                }
                diag.windows.push(report);
                if width == w_min {
                    return Err(match err {
                        Some(Error::Overflow { context, node, time, threshold }) => Error::Overflow {
                            context: format!("{context}, window [{}, {}]", grid.node(lo), grid.node(a)),
                            node,
                            time,
                            threshold,
                        },
                        Some(Error::NotPositiveDefinite { context, pivot }) => Error::NotPositiveDefinite {
                            context: format!("{context}, window [{}, {}]", grid.node(lo), grid.node(a)),
                            pivot,
                        },
                        Some(other) => other,
                        None => Error::NoContraction {
                            t_lo: grid.node(lo),
                            t_hi: grid.node(a),
                        },
                    });
                }
                width = (width / 2).max(w_min);
            }
        }
    }

    // Full recomputation: reproduces the window results bit for bit.
    let (mut next, mut p1, mut p2) = gamma_full(&pre, &theta)?;
    let mut residual = sup_diff(&next, &theta);
    while residual > tol && diag.polish_iterations < POLISH_ITERATIONS {
        theta = next;
        let out = gamma_full(&pre, &theta)?;
        next = out.0;
        p1 = out.1;
        p2 = out.2;
        residual = sup_diff(&next, &theta);
        diag.polish_iterations += 1;
    }
    diag.final_residual = residual;

    let theta = MatrixPath { grid, values: theta };
    let p1_diag = MatrixPath { grid, values: p1 };
    let p2 = MatrixPath { grid, values: p2 };
    let value = equilibrium_value(p, &p1_diag, &p2);
    let certificates = Certificates {
        cv_bound: cv_bound(p),
        cstar_bound: cstar_bound(p),
        sup_value: value.sup_norm(),
        sup_theta: theta.sup_norm(),
    };
    Ok(RiccatiSolution {
        theta,
        p1_diag,
        p2,
        value,
        residual,
        certificates,
    })
}

/// Iterates one window on nodes `lo..a`. `Ok(false)` when the iteration
/// stalls or diverges.
#[allow(clippy::too_many_arguments)]
fn run_window(
    pre: &Precomputed,
    theta: &mut [Mat],
    table: &mut StageTable,
    cache: &mut [Option<(usize, Mat)>],
    lo: usize,
    a: usize,
    tol: f64,
    max_iters: usize,
    start: &Mat,
    report: &mut WindowReport,
) -> Result<bool> {
    let last = pre.grid.steps;
    // Bring the frozen part of each slice down to the window edge.
    let extended: Vec<Result<(usize, Mat)>> = (lo..a)
        .into_par_iter()
        .map_init(
            || LyapWork::new(pre.n),
            |ws, i| {
                let (reached, mut state) = cache[i]
                    .clone()
                    .unwrap_or_else(|| (last, pre.g1[i].clone()));
                advance_slice(pre, table, i, &mut state, reached, a, ws, |_, _| {})?;
                Ok((a, state))
            },
        )
        .collect();
    for (i, e) in (lo..a).zip(extended) {
        cache[i] = Some(e?);
    }

    for it in 0..max_iters {
        for j in (lo..a).rev() {
            table.fill_step(pre, theta, j, None)?;
        }
        let table_ref = &*table;
        let cache_ref = &*cache;
        let p1: Vec<Mat> = (lo..a)
            .into_par_iter()
            .map_init(
                || LyapWork::new(pre.n),
                |ws, i| {
                    let mut state = cache_ref[i].as_ref().expect("cached slice").1.clone();
                    advance_slice(pre, table_ref, i, &mut state, a, i, ws, |_, _| {})?;
                    Ok(state)
                },
            )
            .collect::<Result<_>>()?;
        let next: Vec<Mat> = (lo..a)
            .into_par_iter()
            .map(|i| pre.gain(i, &p1[i - lo], &table_ref.p2[i]))
            .collect::<Result<_>>()?;
        let d = sup_diff(&next, &theta[lo..a]);
        let seed_dist = theta[lo..a]
            .iter()
            .map(|t| (t - start).max_abs())
            .fold(0.0, f64::max);
        report.max_seed_distance = report.max_seed_distance.max(seed_dist);
        if let Some(prev) = report.residuals.last() {
            report.contraction.push(if *prev > 0.0 { d / prev } else { 0.0 });
        }
        report.residuals.push(d);
        report.iterations = it + 1;
        if !d.is_finite() {
            return Err(Error::Overflow {
                context: "gain iterate".into(),
                node: lo,
                time: pre.grid.node(lo),
                threshold: crate::ode::OVERFLOW_THRESHOLD,
            });
        }
        if d <= tol {
            return Ok(true);
        }
        if it >= DECAY_LAG && d >= report.residuals[it - DECAY_LAG] {
            report.failure = Some("residuals not decaying".into());
            return Ok(false);
        }
        theta[lo..a].clone_from_slice(&next);
    }
    report.failure = Some("iteration budget exhausted".into());
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::builtin;

    #[test]
    fn zero_dynamics_bound_formula() {
        let mut p = builtin("classical_reduction").unwrap();
        let z2 = crate::problem::TimeFn::Const(Mat::zeros(2, 2));
        p.coeffs.a = z2.clone();
        p.coeffs.c = z2;
        p.coeffs.a_hat = crate::problem::TimeFn::Const(Mat::zeros(1, 2));
        p.coeffs.c_hat = crate::problem::TimeFn::Const(Mat::zeros(1, 1));
        p.coeffs.d_hat = crate::problem::TimeFn::Const(Mat::zeros(1, 1));
        p.weights.caps.m = Mat::scalar(1e-300);
        p.weights.caps.n = Mat::scalar(1e-300);
        p.weights.delta = 1.0;
        let g = 1.0;
        let q_hat = spectral_norm(&p.weights.caps.q);
        let expect = (g + 0.0 + q_hat) * (2.0f64).exp();
        assert!((cv_bound(&p) - expect).abs() < 1e-12 * expect);
    }
}

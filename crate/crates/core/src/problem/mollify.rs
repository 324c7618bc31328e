//! Smoothing of weights in `t` by convolution with a compactly supported
//! bump, after extending them by their boundary values.

use crate::grid::TimeGrid;
use crate::matrix::Mat;

use super::{Kernel, KernelTable, ProblemInstance, TimeFn};

const BUMP_NODES: usize = 64;

/// Midpoint nodes on `(−1, 1)` with normalized weights of the bump
/// `exp(1/(u² − 1))`.
fn bump_rule() -> Vec<(f64, f64)> {
    let du = 2.0 / BUMP_NODES as f64;
    let raw: Vec<(f64, f64)> = (0..BUMP_NODES)
        .map(|q| {
            let u = -1.0 + (q as f64 + 0.5) * du;
            (u, (1.0 / (u * u - 1.0)).exp())
        })
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(u, w)| (u, w / total)).collect()
}

/// `Σ_q w_q f(t − ε u_q)`, written as a correction to `f(t)` so that a
/// locally constant `f` is reproduced bit for bit.
fn convolve(f: impl Fn(f64) -> Mat, t: f64, eps: f64, rule: &[(f64, f64)]) -> Mat {
    let centre = f(t);
    let mut acc = Mat::zeros(centre.rows(), centre.cols());
    for &(u, w) in rule {
        let mut d = f(t - eps * u);
        d -= &centre;
        acc.axpy(w, &d);
    }
    acc += &centre;
    acc
}

fn convolve_scalar(f: impl Fn(f64) -> f64, t: f64, eps: f64, rule: &[(f64, f64)]) -> f64 {
    let centre = f(t);
    let acc: f64 = rule.iter().map(|&(u, w)| w * (f(t - eps * u) - centre)).sum();
    centre + acc
}

/// Mollifies a one-time weight, sampled on the grid's nodes and midpoints.
///
/// Outside `[0, T]` the path is frozen at its end values. Constant paths are
/// returned unchanged.
pub fn mollify_matrix_path(g: &TimeFn, eps: f64, grid: &TimeGrid) -> TimeFn {
    if g.is_constant() || !(eps > 0.0 && eps.is_finite()) {
        return g.clone();
    }
    let rule = bump_rule();
    let horizon = grid.horizon;
    let ext = |t: f64| g.eval(t.clamp(0.0, horizon));
    let nodes = grid.half_nodes();
    let values = nodes.iter().map(|&t| convolve(ext, t, eps, &rule)).collect();
    TimeFn::Table { nodes, values }
}

/// Mollifies a two-time kernel in `t` for each fixed `s`.
///
/// The kernel is extended by `q(0, s)` below `t = 0` and frozen at `q(s, s)`
/// above the diagonal before convolving. The result is tabulated at grid
/// nodes in `t` and at nodes and midpoints in `s`. Kernels that do not
/// depend on `t` are returned unchanged.
pub fn mollify_kernel(q: &Kernel, eps: f64, grid: &TimeGrid) -> Kernel {
    if q.is_t_independent() || !(eps > 0.0 && eps.is_finite()) {
        return q.clone();
    }
    let rule = bump_rule();
    let t_nodes = grid.nodes();
    let s_nodes = grid.half_nodes();
    let values = t_nodes
        .iter()
        .map(|&t| {
            s_nodes
                .iter()
                .map(|&s| {
                    let t = t.min(s);
                    match q.separable() {
                        Some((Some(law), base)) => {
                            let factor = convolve_scalar(
                                |r| law.value(s - r.clamp(0.0, s)),
                                t,
                                eps,
                                &rule,
                            );
                            base.eval(s).scale(factor)
                        }
                        _ => convolve(|r| q.eval(r, s), t, eps, &rule),
                    }
                })
                .collect()
        })
        .collect();
    Kernel::Table(KernelTable {
        t_nodes,
        s_nodes,
        values,
    })
}

/// Replaces every weight of the instance by its mollification.
pub fn mollify_instance(p: &ProblemInstance, eps: f64) -> ProblemInstance {
    let mut out = p.clone();
    let g = &p.grid;
    let w = &mut out.weights;
    w.q = mollify_kernel(&p.weights.q, eps, g);
    w.r = mollify_kernel(&p.weights.r, eps, g);
    w.m = mollify_kernel(&p.weights.m, eps, g);
    w.n = mollify_kernel(&p.weights.n, eps, g);
    w.g1 = mollify_matrix_path(&p.weights.g1, eps, g);
    w.g2 = mollify_matrix_path(&p.weights.g2, eps, g);
    out.smoothness.differentiable_weights = true;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{discounted_kernel, Discount};

    fn ramp() -> TimeFn {
        TimeFn::Table {
            nodes: vec![0.0, 0.5, 1.0],
            values: vec![Mat::scalar(1.0), Mat::scalar(1.0), Mat::scalar(2.0)],
        }
    }

    #[test]
    fn rule_is_normalized_and_symmetric() {
        let r = bump_rule();
        let s: f64 = r.iter().map(|x| x.1).sum();
        assert!((s - 1.0).abs() < 1e-14);
        let first: f64 = r.iter().map(|(u, w)| u * w).sum();
        assert!(first.abs() < 1e-15);
    }

    #[test]
    fn constant_table_is_reproduced_exactly() {
        let c = Mat::from_rows(&[[0.3, 0.1], [0.1, 0.7]]);
        let g = TimeFn::Table {
            nodes: vec![0.0, 0.4, 1.0],
            values: vec![c.clone(), c.clone(), c.clone()],
        };
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let out = mollify_matrix_path(&g, 0.1, &grid);
        assert_eq!(out, g);
    }

    #[test]
    fn flat_stretches_stay_exact() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let out = mollify_matrix_path(&ramp(), 0.1, &grid);
        for t in grid.half_nodes().into_iter().filter(|&t| t <= 0.35) {
            assert_eq!(out.eval(t)[(0, 0)], 1.0);
        }
    }

    #[test]
    fn monotone_and_bounded() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let out = mollify_matrix_path(&ramp(), 0.125, &grid);
        let TimeFn::Table { values, .. } = out else { panic!() };
        for w in values.windows(2) {
            assert!(w[1][(0, 0)] >= w[0][(0, 0)]);
        }
        assert!(values.iter().all(|v| (1.0..=2.0).contains(&v[(0, 0)])));
    }

    #[test]
    fn sup_distance_shrinks() {
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let mut prev = f64::INFINITY;
        for eps in [0.125, 0.0625, 0.03125] {
            let out = mollify_matrix_path(&ramp(), eps, &grid);
            let d = grid
                .half_nodes()
                .iter()
                .map(|&t| (out.eval(t)[(0, 0)] - ramp().eval(t)[(0, 0)]).abs())
                .fold(0.0, f64::max);
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn t_independent_kernel_unchanged() {
        let k = Kernel::OfS(ramp());
        let grid = TimeGrid::new(1.0, 10).unwrap();
        assert_eq!(mollify_kernel(&k, 0.1, &grid), k);
    }

    #[test]
    fn mollified_kernel_keeps_order_and_cap() {
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let k = discounted_kernel(Discount::Exp { rate: 2.0 }, TimeFn::Const(Mat::scalar(1.5)));
        let m = mollify_kernel(&k, 0.0625, &grid);
        for s in grid.half_nodes() {
            let mut prev = f64::NEG_INFINITY;
            for t in grid.nodes().into_iter().filter(|&t| t <= s) {
                let v = m.eval(t, s)[(0, 0)];
                assert!(v >= prev - 1e-15);
                assert!(v <= 1.5 + 1e-15);
                prev = v;
            }
        }
    }
}

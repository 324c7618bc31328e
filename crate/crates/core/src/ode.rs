//! Backward RK4 integrators for the two matrix ODE families driven by a
//! fixed feedback gain, and the forward second-moment representation of the
//! diagonal.
//!
//! Step `j` runs from node `j + 1` down to node `j`. Its four RK4 stages sit
//! at `s_{j+1}`, the midpoint (twice) and `s_j`. Gains at the midpoint come
//! from a cubic through nodes `j..=j+3`, so everything a step needs is known
//! once the nodes to its right are fixed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{MatrixPath, Strategy, TimeGrid};
use crate::matrix::{Mat, SymMat};
use crate::problem::{Discount, Kernel, ProblemInstance};

/// Entries beyond this magnitude are treated as blow-up.
pub const OVERFLOW_THRESHOLD: f64 = 1e12;

const CUBIC_MID: [f64; 4] = [0.3125, 0.9375, -0.3125, 0.0625];
const QUADRATIC_MID: [f64; 3] = [0.375, 0.75, -0.125];

/// Value at the midpoint of `[t_j, t_{j+1}]` from nodes `j, j+1, ...`.
pub(crate) fn causal_mid(values: &[Mat], j: usize) -> Mat {
    let last = values.len() - 1;
    let weights: &[f64] = if j + 3 <= last {
        &CUBIC_MID
    } else if j + 2 <= last {
        &QUADRATIC_MID
    } else {
        &[0.5, 0.5]
    };
    let mut out = values[j].scale(weights[0]);
    for (q, w) in weights.iter().enumerate().skip(1) {
        out.axpy(*w, &values[j + q]);
    }
    out
}

/// How a weight kernel enters the stage data.
enum KernelPlan<'a> {
    /// `λ(s − t)·base(s)` with the base sampled on nodes and midpoints.
    Separable {
        law: Option<Discount>,
        base: Vec<Mat>,
    },
    General(&'a Kernel),
}

impl KernelPlan<'_> {
    fn new<'a>(k: &'a Kernel, half: &[f64]) -> KernelPlan<'a> {
        match k {
            Kernel::Const(m) => KernelPlan::Separable {
                law: None,
                base: vec![m.clone(); half.len()],
            },
            Kernel::Table(_) => KernelPlan::General(k),
            _ => {
                let (law, base) = k.separable().expect("separable kernel");
                KernelPlan::Separable {
                    law,
                    base: half.iter().map(|&s| base.eval(s)).collect(),
                }
            }
        }
    }

    fn factor(&self, u: f64) -> f64 {
        match self {
            KernelPlan::Separable { law: Some(l), .. } => l.value(u),
            _ => 1.0,
        }
    }
}

/// Gain-independent samples of an instance on nodes and midpoints.
pub(crate) struct Precomputed<'a> {
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    half: Vec<f64>,
    a: Vec<Mat>,
    b: Vec<Mat>,
    c: Vec<Mat>,
    d: Vec<Mat>,
    a_hat: Vec<Mat>,
    b_hat: Vec<Mat>,
    c_hat: Vec<Mat>,
    d_hat: Vec<Mat>,
    kernels: [KernelPlan<'a>; 4],
    pub g1: Vec<Mat>,
    pub g2: Vec<Mat>,
    pub h: Mat,
    r_diag: Vec<Mat>,
    n_diag: Vec<Mat>,
}

impl<'a> Precomputed<'a> {
    pub fn new(p: &'a ProblemInstance) -> Self {
        let grid = p.grid;
        let half = grid.half_nodes();
        let nodes = grid.nodes();
        let sample = |f: &crate::problem::TimeFn| half.iter().map(|&s| f.eval(s)).collect();
        let c = &p.coeffs;
        let w = &p.weights;
        Precomputed {
            grid,
            n: p.dims.n,
            m: p.dims.m,
            a: sample(&c.a),
            b: sample(&c.b),
            c: sample(&c.c),
            d: sample(&c.d),
            a_hat: sample(&c.a_hat),
            b_hat: sample(&c.b_hat),
            c_hat: sample(&c.c_hat),
            d_hat: sample(&c.d_hat),
            kernels: [
                KernelPlan::new(&w.q, &half),
                KernelPlan::new(&w.r, &half),
                KernelPlan::new(&w.m, &half),
                KernelPlan::new(&w.n, &half),
            ],
            g1: nodes.iter().map(|&t| w.g1.eval(t)).collect(),
            g2: nodes.iter().map(|&t| w.g2.eval(t)).collect(),
            h: c.h.clone(),
            r_diag: nodes.iter().map(|&t| w.r.eval(t, t)).collect(),
            n_diag: nodes.iter().map(|&t| w.n.eval(t, t)).collect(),
            half,
        }
    }

    /// Raw coefficients at half-grid index `q`.
    pub fn coeffs_at(&self, q: usize) -> NodeCoeffs {
        NodeCoeffs {
            b: self.b[q].clone(),
            d: self.d[q].clone(),
            b_hat: self.b_hat[q].clone(),
            c_hat: self.c_hat[q].clone(),
            d_hat: self.d_hat[q].clone(),
        }
    }

    /// `(A_Θ, C_Θ, Â_Θ)` at half-grid index `q`.
    pub fn closed_loop(&self, q: usize, theta: &Mat) -> (Mat, Mat, Mat) {
        (
            &self.a[q] + &(&self.b[q] * theta),
            &self.c[q] + &(&self.d[q] * theta),
            &self.a_hat[q] + &(&self.b_hat[q] * theta),
        )
    }

    /// Right-hand side of the backward-state equation,
    /// `−[Y A_Θ + Â_Θ + Ĉ Y + D̂ Y C_Θ]`.
    pub fn p2_rhs(&self, q: usize, y: &Mat, a_th: &Mat, c_th: &Mat, ah_th: &Mat) -> Mat {
        let mut f = y * a_th;
        f += ah_th;
        f += &(&self.c_hat[q] * y);
        f += &(&(&self.d_hat[q] * y) * c_th);
        f.scale(-1.0)
    }

    /// Equilibrium gain formula at node `i` for given `P₁(t_i, t_i)` and `P₂(t_i)`.
    pub fn gain(&self, i: usize, p1: &Mat, p2: &Mat) -> Result<Mat> {
        let q = 2 * i;
        let (b, c, d) = (&self.b[q], &self.c[q], &self.d[q]);
        let (b_hat, d_hat) = (&self.b_hat[q], &self.d_hat[q]);
        let g2 = &self.g2[i];
        let mut inner = self.n_diag[i].congruence(p2);
        inner += p1;
        let mut bracket = inner.congruence(d);
        bracket += &self.r_diag[i];
        let mut rhs = b.tr_mul(p1);
        rhs += &d.tr_mul(&(&inner * c));
        let mut lead = b_hat.transpose();
        lead += &b.tr_mul(&p2.transpose());
        lead += &d.tr_mul(&(&p2.transpose() * &d_hat.transpose()));
        rhs += &(&(&lead * g2) * p2);
        let s = SymMat::from_mat(&bracket)?;
        let x = crate::matrix::spd_solve(&s, &rhs).map_err(|e| match e {
            Error::NotPositiveDefinite { pivot, .. } => Error::NotPositiveDefinite {
                context: format!(
                    "gain bracket R + Dᵀ(P₁ + P₂ᵀNP₂)D at t = {}",
                    self.grid.node(i)
                ),
                pivot,
            },
            other => other,
        })?;
        Ok(x.scale(-1.0))
    }

    /// Gain at `T` from the terminal data.
    pub fn terminal_gain(&self) -> Result<Mat> {
        let last = self.grid.steps;
        self.gain(last, &self.g1[last], &self.h)
    }
}

pub(crate) struct NodeCoeffs {
    pub b: Mat,
    pub d: Mat,
    pub b_hat: Mat,
    pub c_hat: Mat,
    pub d_hat: Mat,
}

/// Closed-loop data of one backward step at its four RK4 stages.
pub(crate) struct StepStages {
    half_idx: [usize; 4],
    pub theta: [Mat; 4],
    pub a_th: [Mat; 4],
    pub c_th: [Mat; 4],
    /// `P₂` at the stages.
    pub w: [Mat; 4],
    /// `P₂·C_Θ` at the stages.
    pub v: [Mat; 4],
    /// Separable weight parts `[stage][kernel]`; `None` for tabulated kernels.
    sep: [[Option<Mat>; 4]; 4],
}

/// Stage data of every step for one gain path.
pub(crate) struct StageTable {
    pub steps: Vec<Option<StepStages>>,
    pub p2: Vec<Mat>,
}

impl StageTable {
    pub fn empty(pre: &Precomputed) -> Self {
        let len = pre.grid.len();
        let mut p2 = vec![Mat::zeros(pre.m, pre.n); len];
        p2[len - 1] = pre.h.clone();
        StageTable {
            steps: (0..pre.grid.steps).map(|_| None).collect(),
            p2,
        }
    }

    /// Computes step `j` from the gains and `P₂(t_{j+1})`, stores its
    /// stages and `P₂(t_j)`. With `p2_given` the node value is taken from
    /// there instead of being integrated.
    pub fn fill_step(
        &mut self,
        pre: &Precomputed,
        theta: &[Mat],
        j: usize,
        p2_given: Option<&Mat>,
    ) -> Result<()> {
        let h = pre.grid.h();
        let q = [2 * j + 2, 2 * j + 1, 2 * j + 1, 2 * j];
        let mid = causal_mid(theta, j);
        let th = [theta[j + 1].clone(), mid.clone(), mid, theta[j].clone()];
        let cl: [(Mat, Mat, Mat); 4] = std::array::from_fn(|s| pre.closed_loop(q[s], &th[s]));
        let a_th: [Mat; 4] = std::array::from_fn(|s| cl[s].0.clone());
        let c_th: [Mat; 4] = std::array::from_fn(|s| cl[s].1.clone());
        let ah_th: [Mat; 4] = std::array::from_fn(|s| cl[s].2.clone());
        let y = self.p2[j + 1].clone();
        let k1 = pre.p2_rhs(q[0], &y, &a_th[0], &c_th[0], &ah_th[0]);
        let mut y2 = y.clone();
        y2.axpy(-0.5 * h, &k1);
        let k2 = pre.p2_rhs(q[1], &y2, &a_th[1], &c_th[1], &ah_th[1]);
        let mut y3 = y.clone();
        y3.axpy(-0.5 * h, &k2);
        let k3 = pre.p2_rhs(q[2], &y3, &a_th[2], &c_th[2], &ah_th[2]);
        let mut y4 = y.clone();
        y4.axpy(-h, &k3);
        let k4 = pre.p2_rhs(q[3], &y4, &a_th[3], &c_th[3], &ah_th[3]);
        let next = match p2_given {
            Some(v) => v.clone(),
            None => {
                let mut next = y.clone();
                next.axpy(-h / 6.0, &k1);
                next.axpy(-h / 3.0, &k2);
                next.axpy(-h / 3.0, &k3);
                next.axpy(-h / 6.0, &k4);
                next
            }
        };
        if !next.is_finite() || next.max_abs() > OVERFLOW_THRESHOLD {
            return Err(Error::Overflow {
                context: "P2".into(),
                node: j,
                time: pre.grid.node(j),
                threshold: OVERFLOW_THRESHOLD,
            });
        }
        let w = [y, y2, y3, y4];
        let v: [Mat; 4] = std::array::from_fn(|s| &w[s] * &c_th[s]);
        let sep = std::array::from_fn(|s| {
            std::array::from_fn(|kk| match &pre.kernels[kk] {
                KernelPlan::Separable { base, .. } => {
                    let b = &base[q[s]];
                    Some(match kk {
                        0 => b.clone(),
                        1 => b.congruence(&th[s]),
                        2 => b.congruence(&w[s]),
                        _ => b.congruence(&v[s]),
                    })
                }
                KernelPlan::General(_) => None,
            })
        });
        self.p2[j] = next;
        self.steps[j] = Some(StepStages {
            half_idx: q,
            theta: th,
            a_th,
            c_th,
            w,
            v,
            sep,
        });
        Ok(())
    }

    pub fn build(pre: &Precomputed, theta: &[Mat]) -> Result<Self> {
        let mut table = StageTable::empty(pre);
        for j in (0..pre.grid.steps).rev() {
            table.fill_step(pre, theta, j, None)?;
        }
        Ok(table)
    }

    /// Stage data from a given `P₂` path.
    pub fn build_with_p2(pre: &Precomputed, theta: &[Mat], p2: &[Mat]) -> Result<Self> {
        let mut table = StageTable::empty(pre);
        table.p2 = p2.to_vec();
        for j in (0..pre.grid.steps).rev() {
            table.fill_step(pre, theta, j, Some(&p2[j]))?;
        }
        Ok(table)
    }

    fn step(&self, j: usize) -> &StepStages {
        self.steps[j].as_ref().expect("stage data filled")
    }
}

/// Scratch matrices for the Lyapunov right-hand side.
pub(crate) struct LyapWork {
    pa: Mat,
    pc: Mat,
    cpc: Mat,
    kern: [Mat; 4],
    k: [Mat; 4],
    y: Mat,
}

impl LyapWork {
    pub fn new(n: usize) -> Self {
        LyapWork {
            pa: Mat::zeros(n, n),
            pc: Mat::zeros(n, n),
            cpc: Mat::zeros(n, n),
            kern: std::array::from_fn(|_| Mat::zeros(n, n)),
            k: std::array::from_fn(|_| Mat::zeros(n, n)),
            y: Mat::zeros(n, n),
        }
    }
}

/// `out = −[P A + Aᵀ P + Cᵀ P C + K]`.
#[allow(clippy::too_many_arguments)]
fn lyap_rhs(p: &Mat, a: &Mat, c: &Mat, kern: &Mat, pa: &mut Mat, pc: &mut Mat, cpc: &mut Mat, out: &mut Mat) {
    let n = p.rows();
    p.mul_to(a, pa);
    p.mul_to(c, pc);
    c.tr_mul_to(pc, cpc);
    let (pa, cpc, kern) = (pa.as_slice(), cpc.as_slice(), kern.as_slice());
    let o = out.as_mut_slice();
    for i in 0..n {
        for j in 0..n {
            let ij = i * n + j;
            o[ij] = -(pa[ij] + pa[j * n + i] + cpc[ij] + kern[ij]);
        }
    }
}

/// Sum of the weight terms of the `P₁(t, ·)` equation at the stages of step `j`.
fn stage_weights(pre: &Precomputed, st: &StepStages, t: f64, out: &mut [Mat; 4]) {
    for (s, o) in out.iter_mut().enumerate() {
        o.fill(0.0);
        let sigma = pre.half[st.half_idx[s]];
        for (kk, plan) in pre.kernels.iter().enumerate() {
            match &st.sep[s][kk] {
                Some(part) => o.axpy(plan.factor(sigma - t), part),
                None => {
                    let KernelPlan::General(kernel) = plan else { unreachable!() };
                    let raw = kernel.eval(t, sigma);
                    let part = match kk {
                        0 => raw,
                        1 => raw.congruence(&st.theta[s]),
                        2 => raw.congruence(&st.w[s]),
                        _ => raw.congruence(&st.v[s]),
                    };
                    *o += &part;
                }
            }
        }
    }
}

/// Advances the slice `P₁(t_{t_idx}, ·)` from node `from` down to node `to`,
/// calling `visit(node, value)` after each step.
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance_slice(
    pre: &Precomputed,
    table: &StageTable,
    t_idx: usize,
    state: &mut Mat,
    from: usize,
    to: usize,
    ws: &mut LyapWork,
    mut visit: impl FnMut(usize, &Mat),
) -> Result<()> {
    let h = pre.grid.h();
    let t = pre.grid.node(t_idx);
    let LyapWork { pa, pc, cpc, kern, k, y } = ws;
    for j in (to..from).rev() {
        let st = table.step(j);
        stage_weights(pre, st, t, kern);
        lyap_rhs(state, &st.a_th[0], &st.c_th[0], &kern[0], pa, pc, cpc, &mut k[0]);
        y.copy_from(state);
        y.axpy(-0.5 * h, &k[0]);
        lyap_rhs(y, &st.a_th[1], &st.c_th[1], &kern[1], pa, pc, cpc, &mut k[1]);
        y.copy_from(state);
        y.axpy(-0.5 * h, &k[1]);
        lyap_rhs(y, &st.a_th[2], &st.c_th[2], &kern[2], pa, pc, cpc, &mut k[2]);
        y.copy_from(state);
        y.axpy(-h, &k[2]);
        lyap_rhs(y, &st.a_th[3], &st.c_th[3], &kern[3], pa, pc, cpc, &mut k[3]);
        state.axpy(-h / 6.0, &k[0]);
        state.axpy(-h / 3.0, &k[1]);
        state.axpy(-h / 3.0, &k[2]);
        state.axpy(-h / 6.0, &k[3]);
        state.symmetrize_mut();
        if !state.is_finite() || state.max_abs() > OVERFLOW_THRESHOLD {
            return Err(Error::Overflow {
                context: format!("P1 slice t = {t}"),
                node: j,
                time: pre.grid.node(j),
                threshold: OVERFLOW_THRESHOLD,
            });
        }
        visit(j, state);
    }
    Ok(())
}

/// `P₁(t_i, t_i)` for one node.
pub(crate) fn diag_entry(pre: &Precomputed, table: &StageTable, i: usize, ws: &mut LyapWork) -> Result<Mat> {
    let mut state = pre.g1[i].clone();
    advance_slice(pre, table, i, &mut state, pre.grid.steps, i, ws, |_, _| {})?;
    Ok(state)
}

fn check_strategy(p: &ProblemInstance, theta: &Strategy) -> Result<()> {
    if theta.grid != p.grid {
        return Err(Error::Invalid("strategy grid differs from the instance grid".into()));
    }
    let shape = (p.dims.k, p.dims.n);
    if theta.shape() != shape {
        return Err(Error::dim("strategy", shape, theta.shape()));
    }
    Ok(())
}

fn check_p2(p: &ProblemInstance, p2: &MatrixPath) -> Result<()> {
    if p2.grid != p.grid {
        return Err(Error::Invalid("P2 grid differs from the instance grid".into()));
    }
    let shape = (p.dims.m, p.dims.n);
    if p2.shape() != shape {
        return Err(Error::dim("P2", shape, p2.shape()));
    }
    Ok(())
}

/// Backward RK4 for `P₂` with `P₂(T) = H`.
pub fn integrate_p2(p: &ProblemInstance, theta: &Strategy) -> Result<MatrixPath> {
    check_strategy(p, theta)?;
    let pre = Precomputed::new(p);
    let table = StageTable::build(&pre, &theta.values)?;
    Ok(MatrixPath {
        grid: p.grid,
        values: table.p2,
    })
}

/// One slice `s ↦ P₁(t_i, s)` on nodes `s_j`, `j ≥ t_idx`.
#[derive(Clone, Debug, PartialEq)]
pub struct P1Slice {
    pub t_idx: usize,
    /// `values[j − t_idx] = P₁(t_{t_idx}, s_j)`.
    pub values: Vec<Mat>,
}

/// Backward RK4 for `P₁(t_i, ·)` from `P₁(t_i, T) = G₁(t_i)`.
pub fn integrate_p1_slice(
    p: &ProblemInstance,
    theta: &Strategy,
    p2: &MatrixPath,
    t_idx: usize,
) -> Result<P1Slice> {
    check_strategy(p, theta)?;
    check_p2(p, p2)?;
    if t_idx > p.grid.steps {
        return Err(Error::Invalid(format!("node index {t_idx} outside the grid")));
    }
    let pre = Precomputed::new(p);
    let table = StageTable::build_with_p2(&pre, &theta.values, &p2.values)?;
    slice_with(&pre, &table, t_idx)
}

fn slice_with(pre: &Precomputed, table: &StageTable, t_idx: usize) -> Result<P1Slice> {
    let last = pre.grid.steps;
    let mut values = vec![Mat::zeros(pre.n, pre.n); last + 1 - t_idx];
    let mut state = pre.g1[t_idx].clone();
    values[last - t_idx] = state.clone();
    let mut ws = LyapWork::new(pre.n);
    advance_slice(pre, table, t_idx, &mut state, last, t_idx, &mut ws, |j, v| {
        values[j - t_idx] = v.clone();
    })?;
    Ok(P1Slice { t_idx, values })
}

/// `P₁(t_i, t_i)` at every node; slices run in parallel.
pub fn diag_p1(p: &ProblemInstance, theta: &Strategy, p2: &MatrixPath) -> Result<MatrixPath> {
    check_strategy(p, theta)?;
    check_p2(p, p2)?;
    let pre = Precomputed::new(p);
    let table = StageTable::build_with_p2(&pre, &theta.values, &p2.values)?;
    let values = diag_with(&pre, &table)?;
    Ok(MatrixPath {
        grid: p.grid,
        values,
    })
}

pub(crate) fn diag_with(pre: &Precomputed, table: &StageTable) -> Result<Vec<Mat>> {
    (0..pre.grid.len())
        .into_par_iter()
        .map_init(|| LyapWork::new(pre.n), |ws, i| diag_entry(pre, table, i, ws))
        .collect()
}

/// Every slice of the triangle `0 ≤ t_i ≤ s_j ≤ T`.
pub fn p1_triangle(p: &ProblemInstance, theta: &Strategy, p2: &MatrixPath) -> Result<Vec<P1Slice>> {
    check_strategy(p, theta)?;
    check_p2(p, p2)?;
    let pre = Precomputed::new(p);
    let table = StageTable::build_with_p2(&pre, &theta.values, &p2.values)?;
    (0..p.grid.len())
        .into_par_iter()
        .map(|i| slice_with(&pre, &table, i))
        .collect()
}

/// Lagrange interpolation at `j + f`, `0 ≤ f < 1`, through up to four
/// nodes around the step, shifted inwards at the ends of the grid.
pub(crate) fn lagrange_at(values: &[Mat], j: usize, f: f64) -> Mat {
    let last = values.len() - 1;
    let np = 4.min(values.len());
    let lo = j.saturating_sub(1).min(last + 1 - np);
    let x = j as f64 + f - lo as f64;
    let mut out = Mat::zeros(values[0].rows(), values[0].cols());
    for a in 0..np {
        let mut w = 1.0;
        for b in 0..np {
            if a != b {
                w *= (x - b as f64) / (a as f64 - b as f64);
            }
        }
        out.axpy(w, &values[lo + a]);
    }
    out
}

/// `Θ` and `P₂` at `t_j + (r/R)·h` for `r = 0..R`, in time order. Between
/// nodes `Θ` is a cubic interpolant and `P₂` a cubic Hermite interpolant
/// with slopes from its equation.
pub(crate) fn refined_values(pre: &Precomputed, theta: &[Mat], p2: &[Mat], per_step: usize) -> (Vec<Mat>, Vec<Mat>) {
    let last = pre.grid.steps;
    let h = pre.grid.h();
    let slope: Vec<Mat> = (0..=last)
        .map(|i| {
            let (a, c, ah) = pre.closed_loop(2 * i, &theta[i]);
            pre.p2_rhs(2 * i, &p2[i], &a, &c, &ah)
        })
        .collect();
    let mut th = Vec::with_capacity(per_step * last + 1);
    let mut w = Vec::with_capacity(per_step * last + 1);
    for j in 0..=last {
        th.push(theta[j].clone());
        w.push(p2[j].clone());
        if j == last {
            break;
        }
        for r in 1..per_step {
            let f = r as f64 / per_step as f64;
            th.push(lagrange_at(theta, j, f));
            let (f2, f3) = (f * f, f * f * f);
            let mut m = p2[j].scale(2.0 * f3 - 3.0 * f2 + 1.0);
            m.axpy(-2.0 * f3 + 3.0 * f2, &p2[j + 1]);
            m.axpy(h * (f3 - 2.0 * f2 + f), &slope[j]);
            m.axpy(h * (f3 - f2), &slope[j + 1]);
            w.push(m);
        }
    }
    (th, w)
}

/// Recomputes `P₁(t_i, t_i)` forward in time from the second moment
/// `Z = E[vec Φ (vec Φ)ᵀ]` of the closed-loop fundamental matrix.
pub fn lyapunov_forward_check(p: &ProblemInstance, theta: &Strategy, t_idx: usize) -> Result<SymMat> {
    check_strategy(p, theta)?;
    let grid = p.grid;
    if t_idx > grid.steps {
        return Err(Error::Invalid(format!("node index {t_idx} outside the grid")));
    }
    let pre = Precomputed::new(p);
    let p2 = StageTable::build(&pre, &theta.values)?.p2;
    let n = pre.n;
    let nn = n * n;
    let t = grid.node(t_idx);
    let h = grid.h();
    let last = grid.steps;

    // Interpolated midpoints, independent of the backward stage construction.
    let (th_half, p2_half) = refined_values(&pre, &theta.values, &p2, 2);

    let weight = |q: usize, th: &Mat, c_th: &Mat, w: &Mat| -> Mat {
        let sigma = pre.half[q];
        let ws = &p.weights;
        let mut k = ws.q.eval(t, sigma);
        k += &ws.r.eval(t, sigma).congruence(th);
        k += &ws.m.eval(t, sigma).congruence(w);
        k += &ws.n.eval(t, sigma).congruence(&(w * c_th));
        k
    };
    let kron = |x: &Mat| -> Mat {
        let mut out = Mat::zeros(nn, nn);
        for b in 0..n {
            for i in 0..n {
                for j in 0..n {
                    out[(b * n + i, b * n + j)] = x[(i, j)];
                }
            }
        }
        out
    };
    let contract = |z: &Mat, x: &Mat| -> Mat {
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        acc += x[(a, b)] * z[(i * n + a, j * n + b)];
                    }
                }
                out[(i, j)] = acc;
            }
        }
        out
    };
    // (dZ, dJ) at a stage.
    let rhs = |z: &Mat, big_a: &Mat, big_c: &Mat, k: &Mat| -> (Mat, Mat) {
        let az = big_a * z;
        let mut dz = &az + &az.transpose();
        dz += &(&(big_c * z) * &big_c.transpose());
        (dz, contract(z, k))
    };

    let mut vec_id = Mat::zeros(nn, 1);
    for i in 0..n {
        vec_id[(i * n + i, 0)] = 1.0;
    }
    let mut z = &vec_id * &vec_id.transpose();
    let mut acc = Mat::zeros(n, n);
    for j in t_idx..last {
        let [k0, km, k1] = [2 * j, 2 * j + 1, 2 * j + 2].map(|q| {
            let (_, c, _) = pre.closed_loop(q, &th_half[q]);
            weight(q, &th_half[q], &c, &p2_half[q])
        });
        let (a0, c0, _) = pre.closed_loop(2 * j, &th_half[2 * j]);
        let (am, cm, _) = pre.closed_loop(2 * j + 1, &th_half[2 * j + 1]);
        let (a1, c1, _) = pre.closed_loop(2 * j + 2, &th_half[2 * j + 2]);
        let (ba0, bc0) = (kron(&a0), kron(&c0));
        let (bam, bcm) = (kron(&am), kron(&cm));
        let (ba1, bc1) = (kron(&a1), kron(&c1));
        let (z1, j1) = rhs(&z, &ba0, &bc0, &k0);
        let (z2, j2) = rhs(&(&z + &z1.scale(0.5 * h)), &bam, &bcm, &km);
        let (z3, j3) = rhs(&(&z + &z2.scale(0.5 * h)), &bam, &bcm, &km);
        let (z4, j4) = rhs(&(&z + &z3.scale(h)), &ba1, &bc1, &k1);
        z.axpy(h / 6.0, &z1);
        z.axpy(h / 3.0, &z2);
        z.axpy(h / 3.0, &z3);
        z.axpy(h / 6.0, &z4);
        z.symmetrize_mut();
        acc.axpy(h / 6.0, &j1);
        acc.axpy(h / 3.0, &j2);
        acc.axpy(h / 3.0, &j3);
        acc.axpy(h / 6.0, &j4);
        if !z.is_finite() || z.max_abs() > OVERFLOW_THRESHOLD {
            return Err(Error::Overflow {
                context: "forward second moment".into(),
                node: j + 1,
                time: grid.node(j + 1),
                threshold: OVERFLOW_THRESHOLD,
            });
        }
    }
    acc += &contract(&z, &pre.g1[t_idx]);
    SymMat::from_mat(&acc)
}

//! Monte Carlo cross-checks of a feedback gain: the fundamental matrix, the
//! diagonal `P₁(t,t)`, the backward-state identity, the cost functional and
//! the spike-variation test of the equilibrium property.
//!
//! Paths use Euler–Maruyama on the instance grid. Each path, or antithetic
//! pair, draws from its own ChaCha stream keyed by the seed and its index,
//! and sums are merged in fixed blocks in index order, so results do not
//! depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{MatrixPath, Strategy, TimeGrid};
use crate::matrix::Mat;
use crate::ode::{refined_values, integrate_p1_slice, integrate_p2, Precomputed, OVERFLOW_THRESHOLD};
use crate::problem::ProblemInstance;
use crate::solver::RiccatiSolution;

const MIN_PATHS: usize = 100;
const BLOCK: usize = 256;
/// Largest tolerated fraction of excluded paths.
const EXCLUSION_BUDGET: f64 = 0.01;
const DEFAULT_LEVELS: usize = 3;
const MAX_LEVELS: usize = 3;

/// Richardson weights for step sizes `h/2^(L−1), …, h/2, h`, finest first.
fn level_weights(levels: usize) -> &'static [f64] {
    match levels {
        1 => &[1.0],
        2 => &[2.0, -1.0],
        _ => &[8.0 / 3.0, -2.0, 1.0 / 3.0],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McConfig {
    pub paths: usize,
    pub seed: u64,
    pub grid: TimeGrid,
    /// Pair every path with its sign-flipped twin.
    pub antithetic: bool,
    /// Number of step sizes `h, h/2, …` combined by Richardson
    /// extrapolation in the cost and `P₁` estimates, all driven by the same
    /// Brownian path. One means plain Euler–Maruyama on the grid; each extra
    /// level cancels one more order of the weak error in `h`.
    pub levels: usize,
}

impl McConfig {
    pub fn new(paths: usize, seed: u64, grid: TimeGrid, antithetic: bool) -> Result<Self> {
        if paths < MIN_PATHS {
            return Err(Error::Invalid(format!(
                "monte carlo needs at least {MIN_PATHS} paths, got {paths}"
            )));
        }
        Ok(McConfig {
            paths,
            seed,
            grid,
            antithetic,
            levels: DEFAULT_LEVELS,
        })
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }

    fn check(&self, p: &ProblemInstance) -> Result<()> {
        if self.paths < MIN_PATHS {
            return Err(Error::Invalid(format!(
                "monte carlo needs at least {MIN_PATHS} paths, got {}",
                self.paths
            )));
        }
        if !(1..=MAX_LEVELS).contains(&self.levels) {
            return Err(Error::Invalid(format!(
                "extrapolation levels must lie in 1..={MAX_LEVELS}, got {}",
                self.levels
            )));
        }
        if self.grid != p.grid {
            return Err(Error::Invalid("monte carlo grid differs from the instance grid".into()));
        }
        Ok(())
    }

    /// Independent sampling units: paths, or antithetic pairs.
    fn units(&self) -> usize {
        if self.antithetic {
            self.paths.div_ceil(2)
        } else {
            self.paths
        }
    }

    fn per_unit(&self) -> usize {
        if self.antithetic {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McReport {
    pub label: String,
    pub estimate: Mat,
    pub stderr: Mat,
    pub paths_used: usize,
    pub excluded: usize,
    pub target: Option<Mat>,
    pub z: Option<Mat>,
    /// Verdict of tests that carry their own acceptance rule.
    pub passed: Option<bool>,
    pub notes: Vec<(String, f64)>,
}

impl McReport {
    /// Attaches a comparison value and the entrywise z-scores against it.
    pub fn with_target(mut self, target: Mat) -> Result<Self> {
        if target.shape() != self.estimate.shape() {
            return Err(Error::dim("monte carlo target", self.estimate.shape(), target.shape()));
        }
        let (r, c) = target.shape();
        let mut z = Mat::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                let d = self.estimate[(i, j)] - target[(i, j)];
                let se = self.stderr[(i, j)];
                z[(i, j)] = if se > 0.0 {
                    d / se
                } else if d == 0.0 {
                    0.0
                } else {
                    d.signum() * f64::INFINITY
                };
            }
        }
        self.target = Some(target);
        self.z = Some(z);
        Ok(self)
    }

    pub fn max_abs_z(&self) -> Option<f64> {
        self.z.as_ref().map(|z| z.as_slice().iter().fold(0.0, |m: f64, v| m.max(v.abs())))
    }

    pub fn note(&self, key: &str) -> Option<f64> {
        self.notes.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn from_summary(label: &str, s: &Summary, rows: usize, cols: usize) -> Self {
        McReport {
            label: label.into(),
            estimate: Mat::new(rows, cols, s.mean.clone()).unwrap_or_else(|_| Mat::zeros(rows, cols)),
            stderr: Mat::new(rows, cols, s.stderr()).unwrap_or_else(|_| Mat::zeros(rows, cols)),
            paths_used: s.paths_used,
            excluded: s.excluded,
            target: None,
            z: None,
            passed: None,
            notes: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// sampling engine

/// Running mean and centred sum of squares over sampling units.
#[derive(Clone, Debug)]
struct Moments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
    }
}

struct Summary {
    mean: Vec<f64>,
    m2: Vec<f64>,
    units: usize,
    paths_used: usize,
    excluded: usize,
}

impl Summary {
    fn stderr(&self) -> Vec<f64> {
        let n = self.units as f64;
        self.m2
            .iter()
            .map(|s| if self.units > 1 { (s / (n - 1.0) / n).sqrt() } else { 0.0 })
            .collect()
    }
}

/// Scaled Brownian increments of one sampling unit.
fn draw_increments(cfg: &McConfig, unit: usize, dw: &mut [f64], dt: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(unit as u64);
    let sq = dt.sqrt();
    for x in dw.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *x = sq * g;
    }
}

/// Outputs of one unit: one vector per path, `None` if any path was
/// excluded.
fn run_unit<W>(
    cfg: &McConfig,
    unit: usize,
    ws: &mut W,
    dw: &mut [f64],
    dt: f64,
    f: &(impl Fn(&mut W, &[f64]) -> Option<Vec<f64>> + Sync),
) -> Option<Vec<Vec<f64>>> {
    draw_increments(cfg, unit, dw, dt);
    let ok = |v: Vec<f64>| v.iter().all(|x| x.is_finite()).then_some(v);
    let a = ok(f(ws, dw)?)?;
    if !cfg.antithetic {
        return Some(vec![a]);
    }
    dw.iter_mut().for_each(|x| *x = -*x);
    let b = ok(f(ws, dw)?)?;
    Some(vec![a, b])
}

fn check_exclusions(cfg: &McConfig, excluded: usize, what: &str) -> Result<()> {
    let total = cfg.units() * cfg.per_unit();
    if excluded as f64 > EXCLUSION_BUDGET * total as f64 {
        return Err(Error::MonteCarlo(format!(
            "{what}: {excluded} of {total} paths exceeded {OVERFLOW_THRESHOLD:e} or became non-finite"
        )));
    }
    Ok(())
}

/// Means and standard errors of `len` path outputs driven by `steps`
/// increments of variance `dt`; antithetic pairs are averaged into one
/// sample.
fn summarize<W, I, F>(
    cfg: &McConfig,
    steps: usize,
    dt: f64,
    len: usize,
    what: &str,
    init: I,
    f: F,
) -> Result<Summary>
where
    I: Fn() -> W + Sync,
    F: Fn(&mut W, &[f64]) -> Option<Vec<f64>> + Sync,
{
    let units = cfg.units();
    let blocks = units.div_ceil(BLOCK);
    let parts: Vec<(Moments, usize)> = (0..blocks)
        .into_par_iter()
        .map_init(
            || (init(), vec![0.0; steps], vec![0.0; len]),
            |(ws, dw, avg), b| {
                let mut mom = Moments::new(len);
                let mut excluded = 0;
                for u in b * BLOCK..((b + 1) * BLOCK).min(units) {
                    match run_unit(cfg, u, ws, dw, dt, &f) {
                        Some(outs) => {
                            avg.fill(0.0);
                            let w = 1.0 / outs.len() as f64;
                            for o in &outs {
                                for (a, x) in avg.iter_mut().zip(o) {
                                    *a += w * x;
                                }
                            }
                            mom.push(avg);
                        }
                        None => excluded += cfg.per_unit(),
                    }
                }
                (mom, excluded)
            },
        )
        .collect();
    let mut total = Moments::new(len);
    let mut excluded = 0;
    for (m, e) in &parts {
        total.merge(m);
        excluded += e;
    }
    check_exclusions(cfg, excluded, what)?;
    if total.count == 0 {
        return Err(Error::MonteCarlo(format!("{what}: every path was excluded")));
    }
    Ok(Summary {
        units: total.count,
        paths_used: total.count * cfg.per_unit(),
        excluded,
        mean: total.mean,
        m2: total.m2,
    })
}

// ---------------------------------------------------------------------------
// small vector kernels on row-major matrices

fn mv(a: &Mat, x: &[f64], out: &mut [f64]) {
    let c = a.cols();
    for (o, row) in out.iter_mut().zip(a.as_slice().chunks_exact(c)) {
        *o = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

fn quad(k: &Mat, x: &[f64]) -> f64 {
    let c = k.cols();
    k.as_slice()
        .chunks_exact(c)
        .zip(x)
        .map(|(row, xi)| xi * row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>())
        .sum()
}

/// `out = a·b` for square row-major `n×n` blocks.
fn mm(a: &[f64], b: &[f64], out: &mut [f64], n: usize) {
    for (arow, orow) in a.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        orow.fill(0.0);
        for (&aik, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

/// `out = ΦᵀKΦ` using `tmp` for `KΦ`.
fn sandwich(k: &Mat, phi: &[f64], tmp: &mut [f64], out: &mut [f64], n: usize) {
    mm(k.as_slice(), phi, tmp, n);
    out.fill(0.0);
    for (prow, trow) in phi.chunks_exact(n).zip(tmp.chunks_exact(n)) {
        for (i, &pri) in prow.iter().enumerate() {
            for (o, &t) in out[i * n..(i + 1) * n].iter_mut().zip(trow) {
                *o += pri * t;
            }
        }
    }
}

fn blown_up(x: &[f64]) -> bool {
    x.iter().any(|v| v.is_nan() || v.abs() > OVERFLOW_THRESHOLD)
}

fn check_node(p: &ProblemInstance, t_idx: usize) -> Result<()> {
    if t_idx > p.grid.steps {
        return Err(Error::Invalid(format!("node index {t_idx} outside the grid")));
    }
    Ok(())
}

fn check_gain(p: &ProblemInstance, theta: &Strategy) -> Result<()> {
    if theta.grid != p.grid {
        return Err(Error::Invalid("strategy grid differs from the instance grid".into()));
    }
    if theta.shape() != (p.dims.k, p.dims.n) {
        return Err(Error::dim("strategy", (p.dims.k, p.dims.n), theta.shape()));
    }
    Ok(())
}

fn check_vector(field: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::dim(field, (len, 1), (v.len(), 1)));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid(format!("{field} has non-finite entries")));
    }
    Ok(())
}

/// Closed-loop drift and diffusion at nodes `j ≥ t_idx`, indexed by `j − t_idx`.
struct ClosedLoop {
    a_th: Vec<Mat>,
    c_th: Vec<Mat>,
}

impl ClosedLoop {
    fn new(pre: &Precomputed, theta: &Strategy, t_idx: usize) -> Self {
        let (a_th, c_th) = (t_idx..=pre.grid.steps)
            .map(|j| {
                let (a, c, _) = pre.closed_loop(2 * j, &theta.values[j]);
                (a, c)
            })
            .unzip();
        ClosedLoop { a_th, c_th }
    }
}

// ---------------------------------------------------------------------------
// fundamental matrix

/// Per-path samples of the closed-loop fundamental matrix `Φ(t, ·)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiPaths {
    pub t_idx: usize,
    /// `Φ(t, T)` per path in path order; antithetic twins are adjacent.
    pub terminal: Vec<Mat>,
    /// `∫_t^T Φ(t, s) ds` per path, trapezoid in time.
    pub running: Vec<Mat>,
    pub excluded: usize,
}

/// Simulates `Φ(t, s) = I + ∫ A_Θ Φ dr + ∫ C_Θ Φ dW` from node `t_idx`.
pub fn simulate_phi(p: &ProblemInstance, theta: &Strategy, t_idx: usize, cfg: &McConfig) -> Result<PhiPaths> {
    cfg.check(p)?;
    check_gain(p, theta)?;
    check_node(p, t_idx)?;
    let pre = Precomputed::new(p);
    let cl = ClosedLoop::new(&pre, theta, t_idx);
    let n = p.dims.n;
    let h = p.grid.h();
    let steps = p.grid.steps - t_idx;
    let path = |ws: &mut (Mat, Mat), dw: &[f64]| -> Option<Vec<f64>> {
        let (phi, tmp) = ws;
        let mut phi_now = Mat::identity(n);
        let mut running = Mat::identity(n).scale(0.5 * h);
        for (i, &w) in dw.iter().enumerate() {
            cl.a_th[i].mul_to(&phi_now, phi);
            phi.scale_mut(h);
            cl.c_th[i].mul_to(&phi_now, tmp);
            phi.axpy(w, tmp);
            phi_now += &*phi;
            let weight = if i + 1 == steps { 0.5 * h } else { h };
            running.axpy(weight, &phi_now);
            if blown_up(phi_now.as_slice()) {
                return None;
            }
        }
        if steps == 0 {
            running.fill(0.0);
        }
        let mut out = phi_now.as_slice().to_vec();
        out.extend_from_slice(running.as_slice());
        Some(out)
    };
    let init = || (Mat::zeros(n, n), Mat::zeros(n, n));
    let units: Vec<Option<Vec<Vec<f64>>>> = (0..cfg.units())
        .into_par_iter()
        .map_init(
            || (init(), vec![0.0; steps]),
            |(ws, dw), u| run_unit(cfg, u, ws, dw, h, &path),
        )
        .collect();
    let excluded = units.iter().filter(|u| u.is_none()).count() * cfg.per_unit();
    check_exclusions(cfg, excluded, "fundamental matrix")?;
    let mut terminal = Vec::new();
    let mut running = Vec::new();
    for out in units.into_iter().flatten().flatten() {
        let (a, b) = out.split_at(n * n);
        terminal.push(Mat::new(n, n, a.to_vec())?);
        running.push(Mat::new(n, n, b.to_vec())?);
    }
    Ok(PhiPaths {
        t_idx,
        terminal,
        running,
        excluded,
    })
}

// ---------------------------------------------------------------------------
// closed-loop lanes on a refined grid

/// Closed-loop data from a fixed initial time on the refined points
/// `σ_q = t + q·h/R`, `R = 2^(levels−1)`.
struct Lane {
    n: usize,
    /// Finest spacing `h/R`.
    dt: f64,
    per_step: usize,
    levels: usize,
    a_th: Vec<Mat>,
    c_th: Vec<Mat>,
    /// `Q + ΘᵀRΘ + P₂ᵀMP₂ + C_ΘᵀP₂ᵀNP₂C_Θ` at `(t, σ_q)`.
    kern: Vec<Mat>,
    g1: Mat,
    /// Copy with compile-time dimension for small states.
    fixed: Fixed,
}

impl Lane {
    fn new(p: &ProblemInstance, theta: &Strategy, p2: &MatrixPath, t_idx: usize, levels: usize) -> Self {
        let pre = Precomputed::new(p);
        let per_step = 1 << (levels - 1);
        let (th, y) = refined_values(&pre, &theta.values, &p2.values, per_step);
        let grid = p.grid;
        let t = grid.node(t_idx);
        let (co, w) = (&p.coeffs, &p.weights);
        let mut lane = Lane {
            n: p.dims.n,
            dt: grid.h() / per_step as f64,
            per_step,
            levels,
            a_th: Vec::new(),
            c_th: Vec::new(),
            kern: Vec::new(),
            g1: w.g1.eval(t),
            fixed: Fixed::Dynamic,
        };
        for q in per_step * t_idx..=per_step * grid.steps {
            let s = if q == per_step * grid.steps {
                grid.horizon
            } else {
                q as f64 * grid.h() / per_step as f64
            };
            let a = &co.a.eval(s) + &(&co.b.eval(s) * &th[q]);
            let c = &co.c.eval(s) + &(&co.d.eval(s) * &th[q]);
            let mut k = w.q.eval(t, s);
            k += &w.r.eval(t, s).congruence(&th[q]);
            k += &w.m.eval(t, s).congruence(&y[q]);
            k += &w.n.eval(t, s).congruence(&(&y[q] * &c));
            lane.a_th.push(a);
            lane.c_th.push(c);
            lane.kern.push(k);
        }
        lane.fixed = Fixed::new(&lane);
        lane
    }

    /// Finest increments per path and their variance.
    fn draws(&self) -> (usize, f64) {
        (self.kern.len() - 1, self.dt)
    }

    fn work(&self) -> LaneWork {
        let nn = self.n * self.n;
        let fine = self.kern.len() - 1;
        LaneWork {
            x: vec![0.0; self.n],
            ax: vec![0.0; self.n],
            cx: vec![0.0; self.n],
            phi: vec![0.0; nn],
            step: vec![0.0; nn],
            tmp: vec![0.0; nn],
            f0: vec![0.0; nn],
            f1: vec![0.0; nn],
            sample: vec![0.0; nn],
            coarse: (1..self.levels).map(|k| vec![0.0; fine >> k]).collect(),
        }
    }

    /// Combines level estimates, finest first, with Richardson weights.
    /// `level(stride, dw, ws, out)` fills `out` for one step size.
    fn extrapolate(
        &self,
        dw: &[f64],
        ws: &mut LaneWork,
        out: &mut [f64],
        level: impl Fn(&Lane, usize, &[f64], &mut LaneWork, &mut [f64]) -> Option<()>,
    ) -> Option<()> {
        debug_assert_eq!(dw.len() % self.per_step, 0);
        let mut coarse = std::mem::take(&mut ws.coarse);
        let mut sample = std::mem::take(&mut ws.sample);
        out.fill(0.0);
        let mut ok = true;
        for (k, &wk) in level_weights(self.levels).iter().enumerate() {
            let incs: &[f64] = if k == 0 {
                dw
            } else {
                let (done, rest) = coarse.split_at_mut(k - 1);
                let prev: &[f64] = if k == 1 { dw } else { &done[k - 2] };
                coarsen(prev, &mut rest[0]);
                &rest[0]
            };
            let sample = &mut sample[..out.len()];
            if level(self, 1 << k, incs, ws, sample).is_none() {
                ok = false;
                break;
            }
            for (o, v) in out.iter_mut().zip(sample.iter()) {
                *o += wk * v;
            }
        }
        ws.coarse = coarse;
        ws.sample = sample;
        ok.then_some(())
    }

    /// `∫ XᵀKX ds + X(T)ᵀG₁X(T)` along Euler–Maruyama with steps of
    /// `stride` refined points.
    fn quadratic_cost(&self, x0: &[f64], stride: usize, dw: &[f64], ws: &mut LaneWork) -> Option<f64> {
        let dt = self.dt * stride as f64;
        match &self.fixed {
            Fixed::N1(f) => return f.cost(x0, stride, dt, dw),
            Fixed::N2(f) => return f.cost(x0, stride, dt, dw),
            Fixed::N3(f) => return f.cost(x0, stride, dt, dw),
            Fixed::N4(f) => return f.cost(x0, stride, dt, dw),
            Fixed::Dynamic => {}
        }
        let n = self.n;
        let LaneWork { x, ax, cx, .. } = ws;
        x.copy_from_slice(x0);
        let mut l0 = quad(&self.kern[0], x);
        let mut run = 0.0;
        for (i, &w) in dw.iter().enumerate() {
            let q = i * stride;
            mv(&self.a_th[q], x, ax);
            mv(&self.c_th[q], x, cx);
            for r in 0..n {
                x[r] += dt * ax[r] + w * cx[r];
            }
            if blown_up(x) {
                return None;
            }
            let l1 = quad(&self.kern[q + stride], x);
            run += 0.5 * dt * (l0 + l1);
            l0 = l1;
        }
        Some(run + quad(&self.g1, x))
    }

    /// `ΦᵀG₁Φ + ∫ ΦᵀKΦ ds` along Euler–Maruyama, row-major into `out`.
    fn p1_sample(&self, stride: usize, dw: &[f64], ws: &mut LaneWork, out: &mut [f64]) -> Option<()> {
        let dt = self.dt * stride as f64;
        match &self.fixed {
            Fixed::N1(f) => return f.p1(stride, dt, dw, out),
            Fixed::N2(f) => return f.p1(stride, dt, dw, out),
            Fixed::N3(f) => return f.p1(stride, dt, dw, out),
            Fixed::N4(f) => return f.p1(stride, dt, dw, out),
            Fixed::Dynamic => {}
        }
        let n = self.n;
        let nn = n * n;
        let LaneWork { phi, step, tmp, f0, f1, .. } = ws;
        phi.fill(0.0);
        for i in 0..n {
            phi[i * n + i] = 1.0;
        }
        out.fill(0.0);
        sandwich(&self.kern[0], phi, tmp, f0, n);
        for (i, &w) in dw.iter().enumerate() {
            let q = i * stride;
            mm(self.a_th[q].as_slice(), phi, step, n);
            mm(self.c_th[q].as_slice(), phi, tmp, n);
            for r in 0..nn {
                phi[r] += dt * step[r] + w * tmp[r];
            }
            if blown_up(phi) {
                return None;
            }
            sandwich(&self.kern[q + stride], phi, tmp, f1, n);
            for r in 0..nn {
                out[r] += 0.5 * dt * (f0[r] + f1[r]);
            }
            std::mem::swap(f0, f1);
        }
        sandwich(&self.g1, phi, tmp, f1, n);
        for r in 0..nn {
            out[r] += f1[r];
        }
        Some(())
    }
}

type Block<const N: usize> = [[f64; N]; N];

fn block<const N: usize>(m: &Mat) -> Block<N> {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// Lane data as fixed-size arrays so that the per-step kernels unroll.
struct FixedLane<const N: usize> {
    a_th: Vec<Block<N>>,
    c_th: Vec<Block<N>>,
    kern: Vec<Block<N>>,
    g1: Block<N>,
}

fn fixed_mv<const N: usize>(a: &Block<N>, x: &[f64; N]) -> [f64; N] {
    std::array::from_fn(|i| (0..N).map(|k| a[i][k] * x[k]).sum())
}

fn fixed_mm<const N: usize>(a: &Block<N>, b: &Block<N>) -> Block<N> {
    let mut out = [[0.0; N]; N];
    for i in 0..N {
        for k in 0..N {
            let aik = a[i][k];
            for j in 0..N {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn fixed_quad<const N: usize>(k: &Block<N>, x: &[f64; N]) -> f64 {
    (0..N).map(|i| x[i] * (0..N).map(|j| k[i][j] * x[j]).sum::<f64>()).sum()
}

/// `ΦᵀKΦ`.
fn fixed_sandwich<const N: usize>(k: &Block<N>, phi: &Block<N>) -> Block<N> {
    let kp = fixed_mm(k, phi);
    let mut out = [[0.0; N]; N];
    for r in 0..N {
        for i in 0..N {
            let pri = phi[r][i];
            for j in 0..N {
                out[i][j] += pri * kp[r][j];
            }
        }
    }
    out
}

impl<const N: usize> FixedLane<N> {
    fn new(l: &Lane) -> Self {
        FixedLane {
            a_th: l.a_th.iter().map(block).collect(),
            c_th: l.c_th.iter().map(block).collect(),
            kern: l.kern.iter().map(block).collect(),
            g1: block(&l.g1),
        }
    }

    fn cost(&self, x0: &[f64], stride: usize, dt: f64, dw: &[f64]) -> Option<f64> {
        let mut x: [f64; N] = std::array::from_fn(|i| x0[i]);
        let mut l0 = fixed_quad(&self.kern[0], &x);
        let mut run = 0.0;
        for (i, &w) in dw.iter().enumerate() {
            let q = i * stride;
            let ax = fixed_mv(&self.a_th[q], &x);
            let cx = fixed_mv(&self.c_th[q], &x);
            for r in 0..N {
                x[r] += dt * ax[r] + w * cx[r];
            }
            if blown_up(&x) {
                return None;
            }
            let l1 = fixed_quad(&self.kern[q + stride], &x);
            run += 0.5 * dt * (l0 + l1);
            l0 = l1;
        }
        Some(run + fixed_quad(&self.g1, &x))
    }

    fn p1(&self, stride: usize, dt: f64, dw: &[f64], out: &mut [f64]) -> Option<()> {
        let mut phi: Block<N> = std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }));
        let mut acc = [[0.0; N]; N];
        let mut f0 = self.kern[0];
        for (i, &w) in dw.iter().enumerate() {
            let q = i * stride;
            let ap = fixed_mm(&self.a_th[q], &phi);
            let cp = fixed_mm(&self.c_th[q], &phi);
            for r in 0..N {
                for c in 0..N {
                    phi[r][c] += dt * ap[r][c] + w * cp[r][c];
                }
            }
            if phi.iter().any(|row| blown_up(row)) {
                return None;
            }
            let f1 = fixed_sandwich(&self.kern[q + stride], &phi);
            for r in 0..N {
                for c in 0..N {
                    acc[r][c] += 0.5 * dt * (f0[r][c] + f1[r][c]);
                }
            }
            f0 = f1;
        }
        let g = fixed_sandwich(&self.g1, &phi);
        for r in 0..N {
            for c in 0..N {
                out[r * N + c] = acc[r][c] + g[r][c];
            }
        }
        Some(())
    }
}

enum Fixed {
    Dynamic,
    N1(FixedLane<1>),
    N2(FixedLane<2>),
    N3(FixedLane<3>),
    N4(FixedLane<4>),
}

impl Fixed {
    fn new(l: &Lane) -> Self {
        match l.n {
            1 => Fixed::N1(FixedLane::new(l)),
            2 => Fixed::N2(FixedLane::new(l)),
            3 => Fixed::N3(FixedLane::new(l)),
            4 => Fixed::N4(FixedLane::new(l)),
            _ => Fixed::Dynamic,
        }
    }
}

struct LaneWork {
    x: Vec<f64>,
    ax: Vec<f64>,
    cx: Vec<f64>,
    phi: Vec<f64>,
    step: Vec<f64>,
    tmp: Vec<f64>,
    f0: Vec<f64>,
    f1: Vec<f64>,
    sample: Vec<f64>,
    /// Increments summed to each coarser level.
    coarse: Vec<Vec<f64>>,
}

/// Sums adjacent pairs of increments into increments of twice the step.
fn coarsen(fine: &[f64], coarse: &mut [f64]) {
    for (c, pair) in coarse.iter_mut().zip(fine.chunks_exact(2)) {
        *c = pair[0] + pair[1];
    }
}

// ---------------------------------------------------------------------------
// diagonal of P₁

/// Monte Carlo estimate of
/// `P₁(t,t) = E[Φᵀ G₁(t) Φ + ∫ Φᵀ(Q + ΘᵀRΘ + P₂ᵀMP₂ + C_ΘᵀP₂ᵀNP₂C_Θ)Φ ds]`
/// with its z-scores against the ODE value.
pub fn mc_p1_diag(
    p: &ProblemInstance,
    theta: &Strategy,
    p2: &MatrixPath,
    t_idx: usize,
    cfg: &McConfig,
) -> Result<McReport> {
    cfg.check(p)?;
    check_gain(p, theta)?;
    check_node(p, t_idx)?;
    let target = integrate_p1_slice(p, theta, p2, t_idx)?.values[0].clone();
    let lane = Lane::new(p, theta, p2, t_idx, cfg.levels);
    let n = p.dims.n;
    let (draws, dt) = lane.draws();
    let path = |ws: &mut LaneWork, dw: &[f64]| -> Option<Vec<f64>> {
        let mut out = vec![0.0; n * n];
        lane.extrapolate(dw, ws, &mut out, |l, stride, incs, ws, o| l.p1_sample(stride, incs, ws, o))?;
        let mut m = Mat::new(n, n, out).ok()?;
        m.symmetrize_mut();
        Some(m.as_slice().to_vec())
    };
    let s = summarize(cfg, draws, dt, n * n, "P1 diagonal", || lane.work(), path)?;
    let t = p.grid.node(t_idx);
    McReport::from_summary(&format!("mc_p1_diag t={t}"), &s, n, n).with_target(target)
}

// ---------------------------------------------------------------------------
// backward-state identity

/// Compares `Ȳ = P₂X̄` with a pathwise backward Euler evaluation of the
/// backward equation from `HX̄(T)` with driver `Z = P₂C_ΘX̄`.
///
/// The estimate is `sup_s E|ΔY(s)|²`; the report passes when it stays below
/// `10·h·sup_s E|Ȳ(s)|² + 3·stderr`.
pub fn simulate_closed_loop(
    p: &ProblemInstance,
    theta: &Strategy,
    p2: &MatrixPath,
    x0: &[f64],
    t_idx: usize,
    cfg: &McConfig,
) -> Result<McReport> {
    cfg.check(p)?;
    check_gain(p, theta)?;
    check_node(p, t_idx)?;
    let (n, m) = (p.dims.n, p.dims.m);
    check_vector("x0", x0, n)?;
    if p2.grid != p.grid || p2.shape() != (m, n) {
        return Err(Error::dim("P2", (m, n), p2.shape()));
    }
    let pre = Precomputed::new(p);
    let grid = p.grid;
    let h = grid.h();
    let last = grid.steps;
    let nodes = last - t_idx + 1;
    struct Node {
        a_th: Mat,
        c_th: Mat,
        ah_th: Mat,
        p2: Mat,
        p2c: Mat,
        c_hat: Mat,
        d_hat: Mat,
    }
    let data: Vec<Node> = (t_idx..=last)
        .map(|j| {
            let (a_th, c_th, ah_th) = pre.closed_loop(2 * j, &theta.values[j]);
            let raw = pre.coeffs_at(2 * j);
            let p2j = p2.values[j].clone();
            Node {
                p2c: &p2j * &c_th,
                a_th,
                c_th,
                ah_th,
                p2: p2j,
                c_hat: raw.c_hat,
                d_hat: raw.d_hat,
            }
        })
        .collect();
    let hmat = pre.h.clone();
    struct Work {
        xs: Vec<f64>,
        ax: Vec<f64>,
        cx: Vec<f64>,
        ya: Vec<f64>,
        yb: Vec<f64>,
        z: Vec<f64>,
        t1: Vec<f64>,
        t2: Vec<f64>,
    }
    let path = |ws: &mut Work, dw: &[f64]| -> Option<Vec<f64>> {
        ws.xs[..n].copy_from_slice(x0);
        for i in 0..nodes - 1 {
            let (cur, next) = ws.xs[i * n..(i + 2) * n].split_at_mut(n);
            mv(&data[i].a_th, cur, &mut ws.ax);
            mv(&data[i].c_th, cur, &mut ws.cx);
            for r in 0..n {
                next[r] = cur[r] + h * ws.ax[r] + dw[i] * ws.cx[r];
            }
            if blown_up(next) {
                return None;
            }
        }
        let mut out = vec![0.0; 2 * nodes];
        let xl = &ws.xs[(nodes - 1) * n..nodes * n];
        mv(&hmat, xl, &mut ws.yb);
        for i in (0..nodes).rev() {
            let x = &ws.xs[i * n..(i + 1) * n];
            if i + 1 < nodes {
                // Y_i = Y_{i+1} + h[Â_Θ X_i + Ĉ Y_{i+1} + D̂ Z_i] − Z_i ΔW_i
                let d = &data[i];
                mv(&d.p2c, x, &mut ws.z);
                mv(&d.ah_th, x, &mut ws.t1);
                mv(&d.c_hat, &ws.yb, &mut ws.t2);
                for r in 0..m {
                    ws.t1[r] += ws.t2[r];
                }
                mv(&d.d_hat, &ws.z, &mut ws.t2);
                for r in 0..m {
                    ws.yb[r] += h * (ws.t1[r] + ws.t2[r]) - ws.z[r] * dw[i];
                }
            }
            mv(&data[i].p2, x, &mut ws.ya);
            let diff: f64 = ws.ya.iter().zip(&ws.yb).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i] = diff;
            out[nodes + i] = ws.ya.iter().map(|a| a * a).sum();
        }
        Some(out)
    };
    let s = summarize(
        cfg,
        nodes - 1,
        h,
        2 * nodes,
        "closed loop",
        || Work {
            xs: vec![0.0; nodes * n],
            ax: vec![0.0; n],
            cx: vec![0.0; n],
            ya: vec![0.0; m],
            yb: vec![0.0; m],
            z: vec![0.0; m],
            t1: vec![0.0; m],
            t2: vec![0.0; m],
        },
        path,
    )?;
    let se = s.stderr();
    let (worst, mismatch) = s.mean[..nodes]
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let scale = s.mean[nodes..].iter().fold(0.0f64, |a, &v| a.max(v));
    let bound = 10.0 * h * scale + 3.0 * se[worst];
    Ok(McReport {
        label: format!("closed_loop t={}", grid.node(t_idx)),
        estimate: Mat::scalar(mismatch),
        stderr: Mat::scalar(se[worst]),
        paths_used: s.paths_used,
        excluded: s.excluded,
        target: None,
        z: None,
        passed: Some(mismatch <= bound),
        notes: vec![
            ("sup_mean_square_y".into(), scale),
            ("bound".into(), bound),
            ("worst_time".into(), grid.node(t_idx + worst)),
        ],
    })
}

// ---------------------------------------------------------------------------
// cost functional and spike variations

/// Node data for cost evaluation from a fixed initial time.
struct CostData {
    t_idx: usize,
    h: f64,
    /// Relative nodes up to which every arm uses the expanded running cost,
    /// so that arms differ only through the spike.
    window: usize,
    theta: Vec<Mat>,
    a_th: Vec<Mat>,
    c_th: Vec<Mat>,
    b: Vec<Mat>,
    d: Vec<Mat>,
    p2: Vec<Mat>,
    p2c: Vec<Mat>,
    p2d: Vec<Mat>,
    q: Vec<Mat>,
    r: Vec<Mat>,
    mw: Vec<Mat>,
    nw: Vec<Mat>,
    /// Combined running weight of the unperturbed feedback.
    k_all: Vec<Mat>,
    g1: Mat,
    g2: Mat,
    /// Deterministic `Y(t)` without perturbation.
    y_t: Vec<f64>,
    x0: Vec<f64>,
}

impl CostData {
    fn new(p: &ProblemInstance, theta: &Strategy, p2: &MatrixPath, t_idx: usize, x0: &[f64]) -> Self {
        let pre = Precomputed::new(p);
        let grid = p.grid;
        let t = grid.node(t_idx);
        let w = &p.weights;
        let mut d = CostData {
            t_idx,
            h: grid.h(),
            window: 0,
            theta: Vec::new(),
            a_th: Vec::new(),
            c_th: Vec::new(),
            b: Vec::new(),
            d: Vec::new(),
            p2: Vec::new(),
            p2c: Vec::new(),
            p2d: Vec::new(),
            q: Vec::new(),
            r: Vec::new(),
            mw: Vec::new(),
            nw: Vec::new(),
            k_all: Vec::new(),
            g1: w.g1.eval(t),
            g2: w.g2.eval(t),
            y_t: vec![0.0; p.dims.m],
            x0: x0.to_vec(),
        };
        for j in t_idx..=grid.steps {
            let s = grid.node(j);
            let (a_th, c_th, _) = pre.closed_loop(2 * j, &theta.values[j]);
            let raw = pre.coeffs_at(2 * j);
            let y = &p2.values[j];
            let p2c = y * &c_th;
            let mut k = w.q.eval(t, s);
            k += &w.r.eval(t, s).congruence(&theta.values[j]);
            k += &w.m.eval(t, s).congruence(y);
            k += &w.n.eval(t, s).congruence(&p2c);
            d.k_all.push(k);
            d.p2c.push(p2c);
            d.p2d.push(y * &raw.d);
            d.theta.push(theta.values[j].clone());
            d.a_th.push(a_th);
            d.c_th.push(c_th);
            d.b.push(raw.b);
            d.d.push(raw.d);
            d.p2.push(y.clone());
            d.q.push(w.q.eval(t, s));
            d.r.push(w.r.eval(t, s));
            d.mw.push(w.m.eval(t, s));
            d.nw.push(w.n.eval(t, s));
        }
        mv(&p2.values[t_idx], x0, &mut d.y_t);
        d
    }

    fn steps(&self) -> usize {
        self.theta.len() - 1
    }
}

/// A control bump `v` on the first `len` steps after the initial time, with
/// the matching deterministic shift `φ` of the backward state.
struct Spike<'a> {
    v: &'a [f64],
    len: usize,
    /// `φ` at nodes `0..=len` relative to the initial time.
    phi: Vec<Vec<f64>>,
}

impl<'a> Spike<'a> {
    /// Backward Heun for `φ' = −Ĉφ − (P₂B + B̂ + D̂P₂D)v` on the spike
    /// interval, with `φ = 0` from its right end on.
    fn new(p: &ProblemInstance, cd: &CostData, v: &'a [f64], len: usize) -> Self {
        let pre = Precomputed::new(p);
        let m = p.dims.m;
        let forcing: Vec<(Mat, Vec<f64>)> = (0..=len)
            .map(|i| {
                let raw = pre.coeffs_at(2 * (cd.t_idx + i));
                let mut g = &cd.p2[i] * &raw.b;
                g += &raw.b_hat;
                g += &(&raw.d_hat * &cd.p2d[i]);
                let mut gv = vec![0.0; m];
                mv(&g, v, &mut gv);
                (raw.c_hat, gv)
            })
            .collect();
        let rhs = |i: usize, y: &[f64]| -> Vec<f64> {
            let (c_hat, gv) = &forcing[i];
            let mut out = vec![0.0; m];
            mv(c_hat, y, &mut out);
            out.iter().zip(gv).map(|(a, b)| -(a + b)).collect()
        };
        let h = cd.h;
        let mut phi = vec![vec![0.0; m]; len + 1];
        for i in (0..len).rev() {
            let k1 = rhs(i + 1, &phi[i + 1]);
            let pred: Vec<f64> = phi[i + 1].iter().zip(&k1).map(|(y, k)| y - h * k).collect();
            let k2 = rhs(i, &pred);
            phi[i] = (0..m).map(|r| phi[i + 1][r] - 0.5 * h * (k1[r] + k2[r])).collect();
        }
        Spike { v, len, phi }
    }
}

struct CostWork {
    x: Vec<f64>,
    xn: Vec<f64>,
    t1: Vec<f64>,
    t2: Vec<f64>,
    u: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl CostWork {
    fn new(p: &ProblemInstance) -> Self {
        let (n, m, k) = (p.dims.n, p.dims.m, p.dims.k);
        CostWork {
            x: vec![0.0; n],
            xn: vec![0.0; n],
            t1: vec![0.0; n.max(m).max(k)],
            t2: vec![0.0; n.max(m).max(k)],
            u: vec![0.0; k],
            y: vec![0.0; m],
            z: vec![0.0; m],
        }
    }
}

/// Running cost at relative node `i` for state `x`.
fn running_cost(cd: &CostData, i: usize, x: &[f64], spike: Option<&Spike>, on: bool, ws: &mut CostWork) -> f64 {
    if !on && i > cd.window {
        return quad(&cd.k_all[i], x);
    }
    let (k, m) = (ws.u.len(), ws.y.len());
    mv(&cd.theta[i], x, &mut ws.u);
    mv(&cd.p2[i], x, &mut ws.y);
    mv(&cd.p2c[i], x, &mut ws.z);
    if let Some(sp) = spike.filter(|_| on) {
        for r in 0..k {
            ws.u[r] += sp.v[r];
        }
        mv(&cd.p2d[i], sp.v, &mut ws.t1[..m]);
        for r in 0..m {
            ws.z[r] += ws.t1[r];
        }
    }
    if let Some(sp) = spike {
        if i <= sp.len {
            for r in 0..m {
                ws.y[r] += sp.phi[i][r];
            }
        }
    }
    quad(&cd.q[i], x) + quad(&cd.r[i], &ws.u) + quad(&cd.mw[i], &ws.y) + quad(&cd.nw[i], &ws.z)
}

/// Cost of one path; `None` if the state blew up.
fn cost_path(cd: &CostData, dw: &[f64], spike: Option<&Spike>, ws: &mut CostWork) -> Option<f64> {
    let h = cd.h;
    let n = cd.x0.len();
    let mut x = std::mem::take(&mut ws.x);
    let mut xn = std::mem::take(&mut ws.xn);
    x.copy_from_slice(&cd.x0);
    let mut running = 0.0;
    let mut ok = true;
    for (i, &w) in dw.iter().enumerate() {
        let on = spike.is_some_and(|s| i < s.len);
        let l0 = running_cost(cd, i, &x, spike, on, ws);
        mv(&cd.a_th[i], &x, &mut ws.t1[..n]);
        mv(&cd.c_th[i], &x, &mut ws.t2[..n]);
        for r in 0..n {
            xn[r] = x[r] + h * ws.t1[r] + w * ws.t2[r];
        }
        if let Some(sp) = spike.filter(|_| on) {
            mv(&cd.b[i], sp.v, &mut ws.t1[..n]);
            mv(&cd.d[i], sp.v, &mut ws.t2[..n]);
            for (r, xr) in xn.iter_mut().enumerate().take(n) {
                *xr += h * ws.t1[r] + w * ws.t2[r];
            }
        }
        if blown_up(&xn) {
            ok = false;
            break;
        }
        let l1 = running_cost(cd, i + 1, &xn, spike, on, ws);
        running += 0.5 * h * (l0 + l1);
        std::mem::swap(&mut x, &mut xn);
    }
    let mut y_t = cd.y_t.clone();
    if let Some(sp) = spike {
        for (y, f) in y_t.iter_mut().zip(&sp.phi[0]) {
            *y += f;
        }
    }
    let total = 0.5 * (running + quad(&cd.g1, &x) + quad(&cd.g2, &y_t));
    ws.x = x;
    ws.xn = xn;
    ok.then_some(total)
}

/// Monte Carlo estimate of the cost `𝒥(t, x₀; Θ)` of the feedback
/// `u = ΘX`, including the `⟨G₂(t)Y(t), Y(t)⟩` term.
pub fn mc_cost(
    p: &ProblemInstance,
    theta_used: &Strategy,
    t_idx: usize,
    x0: &[f64],
    cfg: &McConfig,
) -> Result<McReport> {
    cfg.check(p)?;
    check_gain(p, theta_used)?;
    check_node(p, t_idx)?;
    check_vector("x0", x0, p.dims.n)?;
    let p2 = integrate_p2(p, theta_used)?;
    let lane = Lane::new(p, theta_used, &p2, t_idx, cfg.levels);
    let t = p.grid.node(t_idx);
    // Y(t) = P₂(t)x₀ is deterministic.
    let mut y_t = vec![0.0; p.dims.m];
    mv(&p2.values[t_idx], x0, &mut y_t);
    let terminal_y = quad(&p.weights.g2.eval(t), &y_t);
    let (draws, dt) = lane.draws();
    let s = summarize(cfg, draws, dt, 1, "cost", || lane.work(), |ws, dw| {
        let mut j = [0.0];
        lane.extrapolate(dw, ws, &mut j, |l, stride, incs, ws, o| {
            o[0] = l.quadratic_cost(x0, stride, incs, ws)?;
            Some(())
        })?;
        Some(vec![0.5 * (j[0] + terminal_y)])
    })?;
    Ok(McReport::from_summary(&format!("mc_cost t={t}"), &s, 1, 1))
}

/// Weights of the least-squares intercept of `y` against `x`.
fn intercept_weights(x: &[f64]) -> Vec<f64> {
    let k = x.len() as f64;
    if x.len() == 1 {
        return vec![1.0];
    }
    let mean = x.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    x.iter().map(|v| 1.0 / k - mean * (v - mean) / sxx).collect()
}

/// Spike-variation test of the equilibrium property from `(t, x₀)`.
///
/// For each `ε` the control `ΘX + v·1_[t,t+ε)` is compared with `ΘX` on
/// common random numbers. Per path the difference quotients are
/// extrapolated linearly to `ε = 0`. The estimate row holds the mean
/// quotients followed by the extrapolated limit, which passes when it is at
/// least `−(3·stderr + 2h)`.
pub fn spike_test(
    p: &ProblemInstance,
    sol: &RiccatiSolution,
    t_idx: usize,
    x0: &[f64],
    v: &[f64],
    eps_ladder: &[f64],
    cfg: &McConfig,
) -> Result<McReport> {
    cfg.check(p)?;
    check_gain(p, &sol.theta)?;
    check_node(p, t_idx)?;
    check_vector("x0", x0, p.dims.n)?;
    check_vector("v", v, p.dims.k)?;
    if eps_ladder.is_empty() {
        return Err(Error::Invalid("spike test needs at least one ε".into()));
    }
    let grid = p.grid;
    let h = grid.h();
    let t = grid.node(t_idx);
    let mut lens = Vec::with_capacity(eps_ladder.len());
    for &eps in eps_ladder {
        if eps.is_nan() || eps < 2.0 * h * (1.0 - 1e-12) {
            return Err(Error::Invalid(format!(
                "spike ladder too coarse: ε = {eps} is below two grid steps ({})",
                2.0 * h
            )));
        }
        if t + eps > grid.horizon * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "spike [{t}, {}] leaves the horizon {}",
                t + eps,
                grid.horizon
            )));
        }
        lens.push(((eps / h).round() as usize).min(grid.steps - t_idx));
    }
    let mut cd = CostData::new(p, &sol.theta, &sol.p2, t_idx, x0);
    cd.window = lens.iter().copied().max().unwrap_or(0);
    let spikes: Vec<Spike> = lens.iter().map(|&l| Spike::new(p, &cd, v, l)).collect();
    let actual: Vec<f64> = lens.iter().map(|&l| l as f64 * h).collect();
    let weights = intercept_weights(&actual);
    let arms = spikes.len();
    let s = summarize(
        cfg,
        cd.steps(),
        cd.h,
        arms + 1,
        "spike test",
        || CostWork::new(p),
        |ws, dw| {
            let base = cost_path(&cd, dw, None, ws)?;
            let mut out = Vec::with_capacity(arms + 1);
            for (sp, eps) in spikes.iter().zip(&actual) {
                out.push((cost_path(&cd, dw, Some(sp), ws)? - base) / eps);
            }
            out.push(out.iter().zip(&weights).map(|(d, w)| d * w).sum());
            Some(out)
        },
    )?;
    let mut report = McReport::from_summary(&format!("spike t={t}"), &s, 1, arms + 1);
    let limit = report.estimate[(0, arms)];
    let se = report.stderr[(0, arms)];
    let margin = limit + 3.0 * se + 2.0 * h;
    report.passed = Some(margin >= 0.0);
    report.notes = vec![("limit".into(), limit), ("margin".into(), margin)];
    report
        .notes
        .extend(actual.iter().enumerate().map(|(i, e)| (format!("eps_{i}"), *e)));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 * 0.37 + 1e6).collect();
        let mut all = Moments::new(1);
        xs.iter().for_each(|x| all.push(&[*x]));
        let mut a = Moments::new(1);
        let mut b = Moments::new(1);
        xs[..11].iter().for_each(|x| a.push(&[*x]));
        xs[11..].iter().for_each(|x| b.push(&[*x]));
        a.merge(&b);
        assert!((a.mean[0] - all.mean[0]).abs() < 1e-8);
        assert!((a.m2[0] - all.m2[0]).abs() / all.m2[0] < 1e-10);
    }

    #[test]
    fn fixed_kernels_match_dynamic() {
        use crate::problem::builtin;
        use crate::solver::solve_equilibrium;
        for name in ["discounted_2x2", "smoke_3x2x2"] {
            let p = builtin(name).unwrap().with_steps(40).unwrap();
            let (sol, _) = solve_equilibrium(&p, 1e-10, 200).unwrap();
            let fast = Lane::new(&p, &sol.theta, &sol.p2, 5, 2);
            assert!(!matches!(fast.fixed, Fixed::Dynamic));
            let mut slow = Lane::new(&p, &sol.theta, &sol.p2, 5, 2);
            slow.fixed = Fixed::Dynamic;
            let (draws, dt) = fast.draws();
            let dw: Vec<f64> = (0..draws).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3 * dt.sqrt()).collect();
            let x0: Vec<f64> = (0..p.dims.n).map(|i| 1.0 - 0.4 * i as f64).collect();
            let nn = p.dims.n * p.dims.n;
            for stride in [1, 2] {
                let (mut wa, mut wb) = (fast.work(), slow.work());
                let incs: Vec<f64> = dw.chunks(stride).map(|c| c.iter().sum()).collect();
                let a = fast.quadratic_cost(&x0, stride, &incs, &mut wa).unwrap();
                let b = slow.quadratic_cost(&x0, stride, &incs, &mut wb).unwrap();
                assert!((a - b).abs() <= 1e-12 * b.abs(), "{name} cost {a} vs {b}");
                let (mut pa, mut pb) = (vec![0.0; nn], vec![0.0; nn]);
                fast.p1_sample(stride, &incs, &mut wa, &mut pa).unwrap();
                slow.p1_sample(stride, &incs, &mut wb, &mut pb).unwrap();
                for (x, y) in pa.iter().zip(&pb) {
                    assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{name} p1 {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn intercept_of_ladder() {
        let w = intercept_weights(&[0.2, 0.1, 0.05]);
        assert!((w[0] + 0.5).abs() < 1e-12);
        assert!((w[1] - 0.5).abs() < 1e-12);
        assert!((w[2] - 1.0).abs() < 1e-12);
        let line: f64 = [0.2, 0.1, 0.05].iter().zip(&w).map(|(x, c)| c * (3.0 - 2.0 * x)).sum();
        assert!((line - 3.0).abs() < 1e-12);
    }

    #[test]
    fn quad_and_mv() {
        let k = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(quad(&k, &[1.0, -1.0]), 1.0 - 2.0 - 3.0 + 4.0);
        let mut out = [0.0; 2];
        mv(&k, &[1.0, 1.0], &mut out);
        assert_eq!(out, [3.0, 7.0]);
    }
}

use std::fmt::{self, Write as _};

use crate::matrix::{min_eigenvalue_sym, Mat, SymMat};

use super::{Kernel, ProblemInstance, TimeFn};

/// Eigenvalue slack tolerated before a definiteness or ordering check fails.
const EIG_TOL: f64 = 1e-10;

/// Above this second-to-first difference ratio a sampled path is reported
/// as possibly non-smooth.
const KINK_SCORE: f64 = 0.25;

/// Grids larger than this are sampled at 513 uniform points instead of nodes
/// and midpoints.
const MAX_SAMPLES: usize = 513;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    /// A failed check blocks solving.
    Error,
    /// A failed check is reported but does not block.
    Warning,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub assumption: &'static str,
    pub name: String,
    pub severity: Severity,
    pub passed: bool,
    /// Worst eigenvalue margin (or score) over the samples.
    pub margin: f64,
    /// Sample point `(t, s)` where the margin is attained; `s` is absent
    /// for one-time quantities.
    pub witness: Option<(f64, Option<f64>)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    /// Sup-norms of every coefficient and weight over the samples.
    pub sup_norms: Vec<(String, f64)>,
    pub samples: usize,
}

impl ValidationReport {
    pub fn assumption_passed(&self, assumption: &str) -> bool {
        self.checks
            .iter()
            .filter(|c| c.assumption == assumption)
            .all(|c| c.passed)
    }

    pub fn h2_passed(&self) -> bool {
        self.assumption_passed("H2")
    }

    pub fn h3_passed(&self) -> bool {
        self.assumption_passed("H3")
    }

    /// True when no check with [`Severity::Error`] failed.
    pub fn blocking_ok(&self) -> bool {
        self.checks
            .iter()
            .all(|c| c.passed || c.severity == Severity::Warning)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples per axis: {}", self.samples)?;
        for a in ["H1", "H2", "H3", "H4", "H5"] {
            let status = if self.assumption_passed(a) { "pass" } else { "FAIL" };
            writeln!(f, "{a}: {status}")?;
        }
        writeln!(f)?;
        for c in &self.checks {
            let mut line = format!(
                "[{}] {} {}: margin {:.6e}",
                c.assumption,
                if c.passed { "ok  " } else if c.severity == Severity::Warning { "warn" } else { "FAIL" },
                c.name,
                c.margin
            );
            if let Some((t, s)) = c.witness {
                match s {
                    Some(s) => write!(line, " at (t, s) = ({t:.6}, {s:.6})")?,
                    None => write!(line, " at t = {t:.6}")?,
                }
            }
            if !c.passed {
                line.push_str(" -- violated");
            }
            writeln!(f, "{line}")?;
        }
        writeln!(f)?;
        for (name, v) in &self.sup_norms {
            writeln!(f, "sup |{name}| = {v:.6e}")?;
        }
        Ok(())
    }
}

fn sample_times(p: &ProblemInstance) -> Vec<f64> {
    let g = p.grid;
    if 2 * g.steps < MAX_SAMPLES {
        g.half_nodes()
    } else {
        let t = g.horizon;
        (0..MAX_SAMPLES)
            .map(|i| if i + 1 == MAX_SAMPLES { t } else { t * i as f64 / (MAX_SAMPLES - 1) as f64 })
            .collect()
    }
}

fn min_eig(m: &Mat) -> f64 {
    SymMat::from_mat(m)
        .and_then(|s| min_eigenvalue_sym(&s))
        .unwrap_or(f64::NAN)
}

/// Running minimum with its location.
struct Worst {
    margin: f64,
    at: Option<(f64, Option<f64>)>,
}

impl Worst {
    fn new() -> Self {
        Worst { margin: f64::INFINITY, at: None }
    }

    fn see(&mut self, margin: f64, at: (f64, Option<f64>)) {
        if self.margin.is_nan() {
            return;
        }
        if margin.is_nan() || margin < self.margin {
            self.margin = margin;
            self.at = Some(at);
        }
    }

    fn check(self, assumption: &'static str, name: String, severity: Severity, threshold: f64) -> Check {
        Check {
            assumption,
            name,
            severity,
            passed: self.margin >= threshold,
            margin: self.margin,
            witness: self.at,
        }
    }
}

/// Samples the kernel on the triangle, one row of `t ≤ s` values per `s`.
fn sample_kernel(k: &Kernel, ts: &[f64]) -> Vec<Vec<Mat>> {
    ts.iter()
        .enumerate()
        .map(|(j, &s)| ts[..=j].iter().map(|&t| k.eval(t, s)).collect())
        .collect()
}

/// Largest second difference relative to the largest first difference,
/// with the index of the middle sample where the second difference peaks.
fn kink_score(values: &[Mat]) -> (f64, usize) {
    let mut d1 = 0.0_f64;
    let mut d2 = 0.0_f64;
    let mut at = 0;
    for w in values.windows(2) {
        d1 = d1.max((&w[1] - &w[0]).max_abs());
    }
    for (i, w) in values.windows(3).enumerate() {
        let mut second = &w[2] - &w[1];
        second -= &(&w[1] - &w[0]);
        if second.max_abs() > d2 {
            d2 = second.max_abs();
            at = i + 1;
        }
    }
    if d1 == 0.0 {
        (0.0, 0)
    } else {
        (d2 / d1, at)
    }
}

/// Checks the boundedness, definiteness, monotonicity and smoothness
/// assumptions on sampled points. Violations are reported, never raised.
pub fn validate_assumptions(p: &ProblemInstance) -> ValidationReport {
    let ts = sample_times(p);
    let delta = p.weights.delta;
    let mut report = ValidationReport {
        samples: ts.len(),
        ..Default::default()
    };
    let c = &p.coeffs;
    let w = &p.weights;

    // H1: boundedness on the samples.
    let coeffs: [(&str, &TimeFn); 8] = [
        ("A", &c.a),
        ("B", &c.b),
        ("C", &c.c),
        ("D", &c.d),
        ("A_hat", &c.a_hat),
        ("B_hat", &c.b_hat),
        ("C_hat", &c.c_hat),
        ("D_hat", &c.d_hat),
    ];
    let mut finite = Worst::new();
    let mut coeff_samples = Vec::new();
    for (name, f) in coeffs {
        let vals: Vec<Mat> = ts.iter().map(|&t| f.eval(t)).collect();
        let mut sup = 0.0_f64;
        for (v, &t) in vals.iter().zip(&ts) {
            let nv = if v.is_finite() { v.spectral_norm() } else { f64::INFINITY };
            sup = sup.max(nv);
            finite.see(if nv.is_finite() { 0.0 } else { -1.0 }, (t, None));
        }
        report.sup_norms.push((name.to_string(), sup));
        coeff_samples.push((name, vals));
    }
    report.sup_norms.push(("H".into(), c.h.spectral_norm()));

    let kernels: [(&str, &Kernel, &Mat, bool); 4] = [
        ("Q", &w.q, &w.caps.q, false),
        ("R", &w.r, &w.caps.r, true),
        ("M", &w.m, &w.caps.m, false),
        ("N", &w.n, &w.caps.n, false),
    ];
    let mut h2 = Vec::new();
    let mut h3 = Vec::new();
    let mut weight_rows = Vec::new();
    for (name, k, cap, strict) in kernels {
        let table = sample_kernel(k, &ts);
        let mut sup = 0.0_f64;
        let mut definite = Worst::new();
        let mut monotone = Worst::new();
        let mut capped = Worst::new();
        for (j, row) in table.iter().enumerate() {
            let s = ts[j];
            for (i, v) in row.iter().enumerate() {
                let t = ts[i];
                let nv = if v.is_finite() { v.spectral_norm() } else { f64::INFINITY };
                sup = sup.max(nv);
                finite.see(if nv.is_finite() { 0.0 } else { -1.0 }, (t, Some(s)));
                let shift = if strict { delta } else { 0.0 };
                definite.see(min_eig(v) - shift, (t, Some(s)));
                capped.see(min_eig(&(cap - v)), (t, Some(s)));
                if i > 0 {
                    monotone.see(min_eig(&(v - &row[i - 1])), (ts[i - 1], Some(s)));
                }
            }
        }
        report.sup_norms.push((format!("{name}(t,s)"), sup));
        let label = if strict {
            format!("{name}(t,s) ≥ δI")
        } else {
            format!("{name}(t,s) ⪰ 0")
        };
        h2.push(definite.check("H2", label, Severity::Error, -EIG_TOL));
        h3.push(monotone.check("H3", format!("{name}(t,s) nondecreasing in t"), Severity::Warning, -EIG_TOL));
        h3.push(capped.check("H3", format!("{name}(t,s) ⪯ {name}_hat"), Severity::Warning, -EIG_TOL));
        let mut cap_pd = Worst::new();
        cap_pd.see(min_eig(cap), (0.0, None));
        cap_pd.at = None;
        h3.push(cap_pd.check("H3", format!("{name}_hat ≻ 0"), Severity::Warning, f64::MIN_POSITIVE));
        weight_rows.push((name, table.last().cloned().unwrap_or_default()));
    }

    let paths: [(&str, &TimeFn, &Mat, bool); 2] = [
        ("G1", &w.g1, &w.caps.g1, false),
        ("G2", &w.g2, &w.caps.g2, true),
    ];
    for (name, g, cap, strict) in paths {
        let vals: Vec<Mat> = ts.iter().map(|&t| g.eval(t)).collect();
        let mut sup = 0.0_f64;
        let mut definite = Worst::new();
        let mut monotone = Worst::new();
        let mut capped = Worst::new();
        for (i, v) in vals.iter().enumerate() {
            let t = ts[i];
            let nv = if v.is_finite() { v.spectral_norm() } else { f64::INFINITY };
            sup = sup.max(nv);
            finite.see(if nv.is_finite() { 0.0 } else { -1.0 }, (t, None));
            let shift = if strict { delta } else { 0.0 };
            definite.see(min_eig(v) - shift, (t, None));
            capped.see(min_eig(&(cap - v)), (t, None));
            if i > 0 {
                monotone.see(min_eig(&(v - &vals[i - 1])), (ts[i - 1], None));
            }
        }
        report.sup_norms.push((format!("{name}(t)"), sup));
        let label = if strict {
            format!("{name}(t) ≥ δI")
        } else {
            format!("{name}(t) ⪰ 0")
        };
        h2.push(definite.check("H2", label, Severity::Error, -EIG_TOL));
        h3.push(monotone.check("H3", format!("{name}(t) nondecreasing"), Severity::Warning, -EIG_TOL));
        h3.push(capped.check("H3", format!("{name}(t) ⪯ {name}_hat"), Severity::Warning, -EIG_TOL));
        let mut cap_pd = Worst::new();
        cap_pd.see(min_eig(cap), (0.0, None));
        cap_pd.at = None;
        h3.push(cap_pd.check("H3", format!("{name}_hat ≻ 0"), Severity::Warning, f64::MIN_POSITIVE));
        weight_rows.push((name, vals));
    }

    report
        .checks
        .push(finite.check("H1", "coefficients and weights finite".into(), Severity::Error, 0.0));
    report.checks.extend(h2);
    report.checks.extend(h3);

    // H4/H5: declarations plus a difference-quotient kink heuristic.
    report.checks.push(Check {
        assumption: "H4",
        name: "continuity of coefficients declared".into(),
        severity: Severity::Warning,
        passed: p.smoothness.continuous_coefficients,
        margin: f64::from(u8::from(p.smoothness.continuous_coefficients)),
        witness: None,
    });
    for (name, vals) in &coeff_samples {
        report.checks.push(kink_check("H4", name, vals, &ts));
    }
    report.checks.push(Check {
        assumption: "H5",
        name: "differentiability of weights in t declared".into(),
        severity: Severity::Warning,
        passed: p.smoothness.differentiable_weights,
        margin: f64::from(u8::from(p.smoothness.differentiable_weights)),
        witness: None,
    });
    for (name, vals) in &weight_rows {
        report.checks.push(kink_check("H5", name, vals, &ts));
    }
    report
}

fn kink_check(assumption: &'static str, name: &str, vals: &[Mat], ts: &[f64]) -> Check {
    let (score, at) = kink_score(vals);
    Check {
        assumption,
        name: format!("{name} looks smooth (kink score)"),
        severity: Severity::Warning,
        passed: score <= KINK_SCORE,
        margin: KINK_SCORE - score,
        witness: (score > KINK_SCORE).then(|| (ts[at], None)),
    }
}

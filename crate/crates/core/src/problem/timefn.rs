use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;

/// A matrix-valued function of one time variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeFn {
    Const(Mat),
    /// Piecewise-linear interpolation through `(nodes[i], values[i])`,
    /// held constant outside the node range.
    Table { nodes: Vec<f64>, values: Vec<Mat> },
    /// `Σ_k c_k t^k`.
    Poly(Vec<Mat>),
    /// `e^{-rate·(anchor − t)}·base`; the anchor defaults to the horizon.
    ExpDiscount {
        rate: f64,
        base: Mat,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anchor: Option<f64>,
    },
}

impl TimeFn {
    pub fn eval(&self, t: f64) -> Mat {
        match self {
            TimeFn::Const(m) => m.clone(),
            TimeFn::Table { nodes, values } => interp_table(nodes, values, t),
            TimeFn::Poly(coeffs) => {
                let mut acc = coeffs[coeffs.len() - 1].clone();
                for c in coeffs.iter().rev().skip(1) {
                    acc.scale_mut(t);
                    acc += c;
                }
                acc
            }
            TimeFn::ExpDiscount { rate, base, anchor } => {
                base.scale((-rate * (anchor.unwrap_or(0.0) - t)).exp())
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            TimeFn::Const(_) => true,
            TimeFn::Poly(c) => c.len() == 1,
            TimeFn::Table { values, .. } => values.windows(2).all(|w| w[0] == w[1]),
            TimeFn::ExpDiscount { rate, .. } => *rate == 0.0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TimeFn::Const(m) | TimeFn::ExpDiscount { base: m, .. } => m.shape(),
            TimeFn::Table { values, .. } => values.first().map_or((0, 0), Mat::shape),
            TimeFn::Poly(c) => c.first().map_or((0, 0), Mat::shape),
        }
    }

    /// Checks internal consistency and the expected shape.
    pub fn check(&self, field: &str, shape: (usize, usize)) -> Result<()> {
        let mats: Vec<&Mat> = match self {
            TimeFn::Const(m) | TimeFn::ExpDiscount { base: m, .. } => vec![m],
            TimeFn::Table { nodes, values } => {
                check_nodes(field, nodes)?;
                if nodes.len() != values.len() {
                    return Err(Error::Dimension {
                        field: field.into(),
                        expected: format!("{} table values", nodes.len()),
                        found: format!("{}", values.len()),
                    });
                }
                values.iter().collect()
            }
            TimeFn::Poly(c) => {
                if c.is_empty() {
                    return Err(Error::Invalid(format!("{field}: polynomial has no coefficients")));
                }
                c.iter().collect()
            }
        };
        if let TimeFn::ExpDiscount { rate, anchor, .. } = self {
            if !rate.is_finite() || anchor.is_some_and(|a| !a.is_finite()) {
                return Err(Error::Invalid(format!("{field}: non-finite discount parameters")));
            }
        }
        for m in mats {
            if m.shape() != shape {
                return Err(Error::dim(field, shape, m.shape()));
            }
        }
        Ok(())
    }

    pub(crate) fn bind_horizon(&mut self, horizon: f64) {
        if let TimeFn::ExpDiscount { anchor, .. } = self {
            anchor.get_or_insert(horizon);
        }
    }
}

fn check_nodes(field: &str, nodes: &[f64]) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::Invalid(format!("{field}: table has no nodes")));
    }
    if nodes.iter().any(|x| !x.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid(format!(
            "{field}: table nodes must be finite and strictly increasing"
        )));
    }
    Ok(())
}

/// Locates `x` in sorted `nodes`: returns `(i, w)` with `x ≈ (1−w)·nodes[i] + w·nodes[i+1]`,
/// clamped so that `w ∈ [0, 1]`.
fn bracket(nodes: &[f64], x: f64) -> (usize, f64) {
    let last = nodes.len() - 1;
    if last == 0 || x <= nodes[0] {
        return (0, 0.0);
    }
    if x >= nodes[last] {
        return (last - 1, 1.0);
    }
    let i = nodes.partition_point(|&v| v <= x) - 1;
    let w = (x - nodes[i]) / (nodes[i + 1] - nodes[i]);
    (i, w)
}

fn lerp(a: &Mat, b: &Mat, w: f64) -> Mat {
    if w == 0.0 {
        return a.clone();
    }
    if w == 1.0 {
        return b.clone();
    }
    let mut out = a.scale(1.0 - w);
    out.axpy(w, b);
    out
}

fn interp_table(nodes: &[f64], values: &[Mat], t: f64) -> Mat {
    if nodes.len() == 1 {
        return values[0].clone();
    }
    let (i, w) = bracket(nodes, t);
    lerp(&values[i], &values[i + 1], w)
}

/// Scalar discount law `λ(u)` for `u = s − t ∈ [0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Discount {
    /// `e^{−rate·u}`
    Exp { rate: f64 },
    /// `1/(1 + rate·u)`
    Hyperbolic { rate: f64 },
}

impl Discount {
    pub fn eval(&self, u: f64, horizon: f64) -> Result<f64> {
        if !(0.0..=horizon).contains(&u) {
            return Err(Error::Domain(format!(
                "discount evaluated at u = {u} outside [0, {horizon}]"
            )));
        }
        Ok(self.value(u))
    }

    pub(crate) fn value(&self, u: f64) -> f64 {
        match *self {
            Discount::Exp { rate } => (-rate * u).exp(),
            Discount::Hyperbolic { rate } => 1.0 / (1.0 + rate * u),
        }
    }

    pub fn rate(&self) -> f64 {
        match *self {
            Discount::Exp { rate } | Discount::Hyperbolic { rate } => rate,
        }
    }
}

/// Rectangular table `values[i][j] = K(t_nodes[i], s_nodes[j])` with
/// bilinear interpolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTable {
    pub t_nodes: Vec<f64>,
    pub s_nodes: Vec<f64>,
    pub values: Vec<Vec<Mat>>,
}

/// A symmetric weight `K(t, s)` on the triangle `0 ≤ t ≤ s ≤ T`.
///
/// Outside the triangle the kernel is extended by freezing `t` into
/// `[0, s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Const(Mat),
    OfS(TimeFn),
    ExpDiscount { rate: f64, base: TimeFn },
    HyperbolicDiscount { rate: f64, base: TimeFn },
    Table(KernelTable),
}

/// Builds `K(t, s) = λ(s − t)·base(s)`.
pub fn discounted_kernel(lambda: Discount, base: TimeFn) -> Kernel {
    match lambda {
        Discount::Exp { rate } => Kernel::ExpDiscount { rate, base },
        Discount::Hyperbolic { rate } => Kernel::HyperbolicDiscount { rate, base },
    }
}

impl Kernel {
    pub fn eval(&self, t: f64, s: f64) -> Mat {
        let t = t.clamp(0.0, s.max(0.0));
        match self {
            Kernel::Const(m) => m.clone(),
            Kernel::OfS(f) => f.eval(s),
            Kernel::ExpDiscount { .. } | Kernel::HyperbolicDiscount { .. } => {
                let (law, base) = self.separable().expect("discounted kernel");
                base.eval(s).scale(law.map_or(1.0, |l| l.value(s - t)))
            }
            Kernel::Table(tab) => {
                let (j, ws) = bracket(&tab.s_nodes, s);
                let j1 = (j + 1).min(tab.s_nodes.len() - 1);
                let row = |i: usize| lerp(&tab.values[i][j], &tab.values[i][j1], ws);
                if tab.t_nodes.len() == 1 {
                    return row(0);
                }
                let (i, wt) = bracket(&tab.t_nodes, t);
                if wt == 0.0 {
                    row(i)
                } else if wt == 1.0 {
                    row(i + 1)
                } else {
                    lerp(&row(i), &row(i + 1), wt)
                }
            }
        }
    }

    /// Splits `K(t, s) = λ(s − t)·base(s)` when the kernel has that form;
    /// `None` for the law means `λ ≡ 1`.
    pub fn separable(&self) -> Option<(Option<Discount>, &TimeFn)> {
        match self {
            Kernel::OfS(f) => Some((None, f)),
            Kernel::ExpDiscount { rate, base } => Some((Some(Discount::Exp { rate: *rate }), base)),
            Kernel::HyperbolicDiscount { rate, base } => {
                Some((Some(Discount::Hyperbolic { rate: *rate }), base))
            }
            Kernel::Const(_) | Kernel::Table(_) => None,
        }
    }

    pub fn is_t_independent(&self) -> bool {
        match self {
            Kernel::Const(_) | Kernel::OfS(_) => true,
            Kernel::ExpDiscount { rate, .. } | Kernel::HyperbolicDiscount { rate, .. } => *rate == 0.0,
            Kernel::Table(tab) => tab
                .values
                .windows(2)
                .all(|w| w[0] == w[1]),
        }
    }

    pub fn check(&self, field: &str, dim: usize) -> Result<()> {
        let shape = (dim, dim);
        match self {
            Kernel::Const(m) => {
                if m.shape() != shape {
                    return Err(Error::dim(field, shape, m.shape()));
                }
            }
            Kernel::OfS(f) => f.check(field, shape)?,
            Kernel::ExpDiscount { rate, base } | Kernel::HyperbolicDiscount { rate, base } => {
                if !(rate.is_finite() && *rate >= 0.0) {
                    return Err(Error::Invalid(format!(
                        "{field}: discount rate must be finite and nonnegative"
                    )));
                }
                base.check(field, shape)?;
            }
            Kernel::Table(tab) => {
                check_nodes(field, &tab.t_nodes)?;
                check_nodes(field, &tab.s_nodes)?;
                if tab.values.len() != tab.t_nodes.len()
                    || tab.values.iter().any(|r| r.len() != tab.s_nodes.len())
                {
                    return Err(Error::Dimension {
                        field: field.into(),
                        expected: format!("{}x{} table", tab.t_nodes.len(), tab.s_nodes.len()),
                        found: "ragged table".into(),
                    });
                }
                for m in tab.values.iter().flatten() {
                    if m.shape() != shape {
                        return Err(Error::dim(field, shape, m.shape()));
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn bind_horizon(&mut self, horizon: f64) {
        match self {
            Kernel::OfS(f)
            | Kernel::ExpDiscount { base: f, .. }
            | Kernel::HyperbolicDiscount { base: f, .. } => f.bind_horizon(horizon),
            Kernel::Const(_) | Kernel::Table(_) => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_hits_nodes_exactly() {
        let values = vec![
            Mat::scalar(0.1),
            Mat::scalar(1.0 / 3.0),
            Mat::scalar(-2.7),
        ];
        let f = TimeFn::Table {
            nodes: vec![0.0, 0.3, 1.0],
            values: values.clone(),
        };
        assert_eq!(f.eval(0.0), values[0]);
        assert_eq!(f.eval(0.3), values[1]);
        assert_eq!(f.eval(1.0), values[2]);
        assert_eq!(f.eval(2.0), values[2]);
        assert!((f.eval(0.15)[(0, 0)] - (0.1 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn poly_and_discount() {
        let p = TimeFn::Poly(vec![Mat::scalar(1.0), Mat::scalar(2.0), Mat::scalar(3.0)]);
        assert_eq!(p.eval(2.0)[(0, 0)], 17.0);
        let e = TimeFn::ExpDiscount {
            rate: 1.0,
            base: Mat::identity(2),
            anchor: Some(1.0),
        };
        assert_eq!(e.eval(1.0), Mat::identity(2));
        assert!((e.eval(0.0)[(0, 0)] - (-1.0f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn discounted_kernel_examples() {
        let flat = discounted_kernel(Discount::Exp { rate: 0.0 }, TimeFn::Const(Mat::identity(2)));
        assert!(flat.is_t_independent());
        assert_eq!(flat.eval(0.3, 0.9), Mat::identity(2));
        let k = discounted_kernel(Discount::Exp { rate: 1.0 }, TimeFn::Const(Mat::identity(2)));
        let v = k.eval(0.0, 1.0);
        assert!((v[(0, 0)] - (-1.0f64).exp()).abs() < 1e-16);
        assert_eq!(v[(0, 1)], 0.0);
    }

    #[test]
    fn discount_domain() {
        let d = Discount::Hyperbolic { rate: 2.0 };
        assert_eq!(d.eval(0.5, 1.0).unwrap(), 0.5);
        assert!(matches!(d.eval(-0.1, 1.0), Err(Error::Domain(_))));
        assert!(matches!(d.eval(1.5, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn kernel_freezes_above_diagonal() {
        let k = discounted_kernel(Discount::Exp { rate: 0.7 }, TimeFn::Const(Mat::scalar(2.0)));
        assert_eq!(k.eval(0.9, 0.5), k.eval(0.5, 0.5));
        assert_eq!(k.eval(-1.0, 0.5), k.eval(0.0, 0.5));
    }

    #[test]
    fn kernel_table_bilinear() {
        let tab = KernelTable {
            t_nodes: vec![0.0, 1.0],
            s_nodes: vec![0.0, 1.0],
            values: vec![
                vec![Mat::scalar(0.0), Mat::scalar(1.0)],
                vec![Mat::scalar(2.0), Mat::scalar(3.0)],
            ],
        };
        let k = Kernel::Table(tab);
        assert_eq!(k.eval(0.0, 1.0)[(0, 0)], 1.0);
        assert_eq!(k.eval(1.0, 1.0)[(0, 0)], 3.0);
        assert!((k.eval(0.5, 1.0)[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((k.eval(0.25, 0.5)[(0, 0)] - 1.0).abs() < 1e-15);
    }
}

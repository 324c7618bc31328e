//! Problem instances: coefficients, two-time weights, horizon and dimensions.

mod builtin;
mod mollify;
mod timefn;
mod validate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::matrix::Mat;

pub use builtin::{builtin, BUILTIN_NAMES};
pub use mollify::{mollify_instance, mollify_kernel, mollify_matrix_path};
pub use timefn::{discounted_kernel, Discount, Kernel, KernelTable, TimeFn};
pub use validate::{validate_assumptions, Check, Severity, ValidationReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// forward state
    pub n: usize,
    /// backward state
    pub m: usize,
    /// control
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSet {
    #[serde(rename = "A")]
    pub a: TimeFn,
    #[serde(rename = "B")]
    pub b: TimeFn,
    #[serde(rename = "C")]
    pub c: TimeFn,
    #[serde(rename = "D")]
    pub d: TimeFn,
    #[serde(rename = "A_hat")]
    pub a_hat: TimeFn,
    #[serde(rename = "B_hat")]
    pub b_hat: TimeFn,
    #[serde(rename = "C_hat")]
    pub c_hat: TimeFn,
    #[serde(rename = "D_hat")]
    pub d_hat: TimeFn,
    #[serde(rename = "H")]
    pub h: Mat,
}

/// Upper bounds required by the monotonicity assumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caps {
    #[serde(rename = "Q")]
    pub q: Mat,
    #[serde(rename = "R")]
    pub r: Mat,
    #[serde(rename = "M")]
    pub m: Mat,
    #[serde(rename = "N")]
    pub n: Mat,
    #[serde(rename = "G1")]
    pub g1: Mat,
    #[serde(rename = "G2")]
    pub g2: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightKernelSet {
    pub delta: f64,
    #[serde(rename = "Q")]
    pub q: Kernel,
    #[serde(rename = "R")]
    pub r: Kernel,
    #[serde(rename = "M")]
    pub m: Kernel,
    #[serde(rename = "N")]
    pub n: Kernel,
    #[serde(rename = "G1")]
    pub g1: TimeFn,
    #[serde(rename = "G2")]
    pub g2: TimeFn,
    pub caps: Caps,
}

/// User declarations that coefficients are continuous and weights are
/// differentiable in `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothness {
    #[serde(default)]
    pub continuous_coefficients: bool,
    #[serde(default)]
    pub differentiable_weights: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemInstance {
    pub dims: Dims,
    pub grid: TimeGrid,
    #[serde(rename = "coefficients")]
    pub coeffs: CoefficientSet,
    pub weights: WeightKernelSet,
    #[serde(default)]
    pub smoothness: Smoothness,
}

impl ProblemInstance {
    /// Parses a problem file. Errors carry the offending field and, where it
    /// can be located, the line.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let mut p: ProblemInstance = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|sp| line_of(src, sp.start));
            let field = line
                .and_then(|l| key_on_line(src, l))
                .unwrap_or_else(|| "problem".into());
            Error::Parse {
                line,
                field,
                message: e.message().trim().to_string(),
            }
        })?;
        p.check().map_err(|e| attach_location(src, e))?;
        p.bind_horizon();
        Ok(p)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("problem instances always serialize")
    }

    /// Dimensional and parameter consistency.
    pub fn check(&self) -> Result<()> {
        let Dims { n, m, k } = self.dims;
        if n == 0 || m == 0 || k == 0 {
            return Err(Error::Invalid("dimensions must be positive".into()));
        }
        TimeGrid::new(self.grid.horizon, self.grid.steps)?;
        let c = &self.coeffs;
        c.a.check("coefficients.A", (n, n))?;
        c.b.check("coefficients.B", (n, k))?;
        c.c.check("coefficients.C", (n, n))?;
        c.d.check("coefficients.D", (n, k))?;
        c.a_hat.check("coefficients.A_hat", (m, n))?;
        c.b_hat.check("coefficients.B_hat", (m, k))?;
        c.c_hat.check("coefficients.C_hat", (m, m))?;
        c.d_hat.check("coefficients.D_hat", (m, m))?;
        if c.h.shape() != (m, n) {
            return Err(Error::dim("coefficients.H", (m, n), c.h.shape()));
        }
        let w = &self.weights;
        if !(w.delta.is_finite() && w.delta > 0.0) {
            return Err(Error::Invalid(format!(
                "weights.delta must be positive, got {}",
                w.delta
            )));
        }
        w.q.check("weights.Q", n)?;
        w.r.check("weights.R", k)?;
        w.m.check("weights.M", m)?;
        w.n.check("weights.N", m)?;
        w.g1.check("weights.G1", (n, n))?;
        w.g2.check("weights.G2", (m, m))?;
        let caps = [
            ("weights.caps.Q", &w.caps.q, n),
            ("weights.caps.R", &w.caps.r, k),
            ("weights.caps.M", &w.caps.m, m),
            ("weights.caps.N", &w.caps.n, m),
            ("weights.caps.G1", &w.caps.g1, n),
            ("weights.caps.G2", &w.caps.g2, m),
        ];
        for (field, cap, d) in caps {
            if cap.shape() != (d, d) {
                return Err(Error::dim(field, (d, d), cap.shape()));
            }
        }
        Ok(())
    }

    fn bind_horizon(&mut self) {
        let t = self.grid.horizon;
        let c = &mut self.coeffs;
        for f in [
            &mut c.a, &mut c.b, &mut c.c, &mut c.d, &mut c.a_hat, &mut c.b_hat, &mut c.c_hat,
            &mut c.d_hat,
        ] {
            f.bind_horizon(t);
        }
        let w = &mut self.weights;
        for k in [&mut w.q, &mut w.r, &mut w.m, &mut w.n] {
            k.bind_horizon(t);
        }
        w.g1.bind_horizon(t);
        w.g2.bind_horizon(t);
    }

    /// Same instance on a grid with `steps` steps.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        let mut p = self.clone();
        p.grid = TimeGrid::new(self.grid.horizon, steps)?;
        Ok(p)
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn key_on_line(src: &str, line: usize) -> Option<String> {
    let text = src.lines().nth(line - 1)?.trim();
    if text.starts_with('[') {
        return Some(text.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    }
    let key = text.split('=').next()?.trim();
    (!key.is_empty()).then(|| key.to_string())
}

/// Best-effort line of `section.key` in a problem file: the key inside its
/// `[section]` table, or a `[section.key]` header.
fn locate_field(src: &str, field: &str) -> Option<usize> {
    let (section, key) = field.rsplit_once('.')?;
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            let header = h.trim_end_matches(']').trim();
            if header == field || header.starts_with(&format!("{field}.")) {
                return Some(i + 1);
            }
            current = header.to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn attach_location(src: &str, e: Error) -> Error {
    match e {
        Error::Dimension {
            field,
            expected,
            found,
        } => Error::Parse {
            line: locate_field(src, &field),
            message: format!("dimension mismatch: expected {expected}, found {found}"),
            field,
        },
        Error::Invalid(message) => Error::Parse {
            line: None,
            field: "problem".into(),
            message,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_round_trip() {
        for name in BUILTIN_NAMES {
            let p = builtin(name).unwrap();
            let text = p.to_toml_string();
            let back = ProblemInstance::from_toml_str(&text).unwrap();
            assert_eq!(back, p, "{name}");
        }
    }

    #[test]
    fn dimension_error_names_field_and_line() {
        let src = builtin::source("classical_reduction").unwrap();
        let broken = src.replacen("B = { const = [[1.0, 0.0], [0.0, 1.0]] }", "B = { const = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }", 1);
        assert_ne!(broken, src);
        match ProblemInstance::from_toml_str(&broken) {
            Err(Error::Parse { line, field, message }) => {
                assert_eq!(field, "coefficients.B");
                assert!(message.contains("2x3"), "{message}");
                let l = line.unwrap();
                assert!(broken.lines().nth(l - 1).unwrap().trim_start().starts_with("B ="));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_line() {
        let err = ProblemInstance::from_toml_str("[dims]\nn = 2\nm = \n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: Some(3), .. }), "{err:?}");
    }

    #[test]
    fn unknown_field_rejected() {
        let src = builtin::source("classical_reduction").unwrap();
        let broken = src.replacen("[dims]", "[dims]\nq = 1", 1);
        assert!(matches!(
            ProblemInstance::from_toml_str(&broken),
            Err(Error::Parse { .. })
        ));
    }
}

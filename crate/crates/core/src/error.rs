use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite ({context}): pivot {pivot:e} below threshold")]
    NotPositiveDefinite { context: String, pivot: f64 },

    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("overflow in {context} at node {node} (t = {time}): entry exceeded {threshold:e}")]
    Overflow {
        context: String,
        node: usize,
        time: f64,
        threshold: f64,
    },

    #[error("no contraction on window [{t_lo}, {t_hi}] after shrinking to the minimum window")]
    NoContraction { t_lo: f64, t_hi: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {field}: expected {expected}, found {found}")]
    Dimension {
        field: String,
        expected: String,
        found: String,
    },

    #[error("{}", format_parse(.line, .field, .message))]
    Parse {
        line: Option<usize>,
        field: String,
        message: String,
    },

    #[error("assumption {assumption} violated: {detail}")]
    Assumption { assumption: String, detail: String },

    #[error("monte carlo: {0}")]
    MonteCarlo(String),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

fn format_parse(line: &Option<usize>, field: &str, message: &str) -> String {
    match line {
        Some(l) => format!("parse error at line {l}, field `{field}`: {message}"),
        None => format!("parse error in field `{field}`: {message}"),
    }
}

impl Error {
    pub(crate) fn dim(field: impl Into<String>, expected: (usize, usize), found: (usize, usize)) -> Self {
        Error::Dimension {
            field: field.into(),
            expected: format!("{}x{}", expected.0, expected.1),
            found: format!("{}x{}", found.0, found.1),
        }
    }
}

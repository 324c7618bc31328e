use crate::error::{Error, Result};

use super::ProblemInstance;

pub const BUILTIN_NAMES: [&str; 4] = [
    "example1",
    "classical_reduction",
    "discounted_2x2",
    "smoke_3x2x2",
];

pub(crate) fn source(name: &str) -> Option<&'static str> {
    Some(match name {
        "example1" => include_str!("../../problems/example1.toml"),
        "classical_reduction" => include_str!("../../problems/classical_reduction.toml"),
        "discounted_2x2" => include_str!("../../problems/discounted_2x2.toml"),
        "smoke_3x2x2" => include_str!("../../problems/smoke_3x2x2.toml"),
        _ => return None,
    })
}

/// One of the bundled instances by name.
pub fn builtin(name: &str) -> Result<ProblemInstance> {
    let src = source(name).ok_or_else(|| {
        Error::Invalid(format!(
            "unknown built-in `{name}` (available: {})",
            BUILTIN_NAMES.join(", ")
        ))
    })?;
    ProblemInstance::from_toml_str(src)
}

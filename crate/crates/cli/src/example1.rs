//! The scalar reduced system of the degenerate example:
//! `P₁' = P₁² − 2e·P₂²`, `P₂' = P₂P₁` on `[0, 2]` with `P₁(2) = P₂(2) = 1`,
//! integrated backward and compared with `P(s) = 1/(s − 1)`.

use std::fmt::Write as _;

use ere_core::csvio::format_value;

const HORIZON: f64 = 2.0;
/// Entry size treated as a blow-up.
const BLOW_UP: f64 = 1e12;

/// Backward solution on the nodes `s_i = i·h`, truncated at a blow-up.
#[derive(Clone, Debug)]
pub struct ReducedPath {
    pub h: f64,
    /// `(s, P₁, P₂)` from `s = 2` downward.
    pub nodes: Vec<(f64, f64, f64)>,
    /// First node at which an entry left the finite range.
    pub blow_up: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Example1Outcome {
    /// `P₁ > P` on the checked range and a blow-up inside `(1.0, 1.2)`.
    Confirmed { blow_up: f64 },
    /// The first condition that does not hold.
    Violated(String),
}

fn rhs(y: [f64; 2]) -> [f64; 2] {
    let e = std::f64::consts::E;
    [y[0] * y[0] - 2.0 * e * y[1] * y[1], y[1] * y[0]]
}

fn comparison(s: f64) -> f64 {
    1.0 / (s - 1.0)
}

/// Classical RK4 backward from `s = 2` with `steps` steps.
pub fn integrate_reduced(steps: usize) -> ReducedPath {
    let steps = steps.max(1);
    let h = HORIZON / steps as f64;
    let mut y = [1.0, 1.0];
    let mut nodes = vec![(HORIZON, y[0], y[1])];
    let mut blow_up = None;
    for i in (0..steps).rev() {
        let step = |y: [f64; 2], k: [f64; 2], c: f64| [y[0] - c * h * k[0], y[1] - c * h * k[1]];
        let k1 = rhs(y);
        let k2 = rhs(step(y, k1, 0.5));
        let k3 = rhs(step(y, k2, 0.5));
        let k4 = rhs(step(y, k3, 1.0));
        for c in 0..2 {
            y[c] -= h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        let s = i as f64 * h;
        if !y.iter().all(|v| v.abs() <= BLOW_UP) {
            blow_up = Some(s);
            break;
        }
        nodes.push((s, y[0], y[1]));
    }
    ReducedPath { h, nodes, blow_up }
}

impl ReducedPath {
    /// `s,p1,p2,comparison`; the comparison column is empty for `s ≤ 1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,p1,p2,comparison\n");
        for &(s, p1, p2) in self.nodes.iter().rev() {
            let cmp = if s > 1.0 { format_value(comparison(s)) } else { String::new() };
            let _ = writeln!(out, "{},{},{},{cmp}", format_value(s), format_value(p1), format_value(p2));
        }
        out
    }

    /// Value of `P₁` at the node nearest to `s`, if it was reached.
    pub fn p1_at(&self, s: f64) -> Option<f64> {
        self.nodes
            .iter()
            .find(|n| (n.0 - s).abs() <= 0.5 * self.h)
            .map(|n| n.1)
    }

    /// Checks `P₁ > 1/(s − 1)` on `(1 + 4h, 2)` and a blow-up in `(1.0, 1.2)`.
    pub fn outcome(&self) -> Example1Outcome {
        let lo = 1.0 + 4.0 * self.h;
        for &(s, p1, _) in &self.nodes {
            if s > lo && s < HORIZON - 0.5 * self.h && p1 <= comparison(s) {
                return Example1Outcome::Violated(format!(
                    "P1({s:.4}) = {p1:.6} is not above 1/(s-1) = {:.6}",
                    comparison(s)
                ));
            }
        }
        match self.blow_up {
            Some(s) if s > 1.0 && s < 1.2 => Example1Outcome::Confirmed { blow_up: s },
            Some(s) => Example1Outcome::Violated(format!("blow-up at s = {s:.4}, outside (1.0, 1.2)")),
            None => {
                let last = self.nodes.last().map_or(f64::NAN, |n| n.1);
                Example1Outcome::Violated(format!("no blow-up on [0, 2]; P1(0) = {last:.6}"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terminal_values_are_echoed() {
        let path = integrate_reduced(400);
        assert_eq!(path.nodes[0], (2.0, 1.0, 1.0));
        assert!(path.to_csv().lines().last().unwrap().ends_with(",1.0000000000000000e0,1.0000000000000000e0,1.0000000000000000e0"));
    }

    #[test]
    fn scalar_rk4_is_fourth_order() {
        let coarse = integrate_reduced(100).p1_at(1.0).unwrap();
        let mid = integrate_reduced(200).p1_at(1.0).unwrap();
        let fine = integrate_reduced(400).p1_at(1.0).unwrap();
        let ratio = (coarse - mid) / (mid - fine);
        assert!((ratio - 16.0).abs() < 2.0, "ratio {ratio}");
    }

    #[test]
    fn comparison_column_blank_left_of_one() {
        let text = integrate_reduced(4).to_csv();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].ends_with(','));
        assert!(!lines[4].ends_with(','));
    }
}

//! CSV form of grid paths and of the `P₁` triangle.
//!
//! A path file has the header `t,<name>_0_0,<name>_0_1,...` followed by one
//! line per grid node with the entries in row-major order. Numbers are
//! written with 17 significant digits so that reading them back is exact.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{MatrixPath, TimeGrid};
use crate::matrix::Mat;
use crate::ode::P1Slice;

/// Relative tolerance on node times when recognising a uniform grid.
const GRID_TOL: f64 = 1e-9;

pub fn format_value(x: f64) -> String {
    format!("{x:.16e}")
}

fn entry_names(name: &str, rows: usize, cols: usize) -> impl Iterator<Item = String> + '_ {
    (0..rows).flat_map(move |i| (0..cols).map(move |j| format!("{name}_{i}_{j}")))
}

fn push_row(out: &mut String, lead: &[f64], m: &Mat) {
    let mut first = true;
    for x in lead.iter().chain(m.as_slice()) {
        if !first {
            out.push(',');
        }
        first = false;
        out.push_str(&format_value(*x));
    }
    out.push('\n');
}

/// Renders a path with entry columns named `<name>_i_j`.
pub fn path_to_csv(name: &str, path: &MatrixPath) -> String {
    let (rows, cols) = path.shape();
    let mut out = String::from("t");
    for e in entry_names(name, rows, cols) {
        let _ = write!(out, ",{e}");
    }
    out.push('\n');
    for (i, m) in path.values.iter().enumerate() {
        push_row(&mut out, &[path.grid.node(i)], m);
    }
    out
}

fn parse_err(line: usize, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        line: Some(line),
        field: field.into(),
        message: message.into(),
    }
}

/// Splits `<name>_i_j` into its parts.
fn split_entry(col: &str) -> Option<(&str, usize, usize)> {
    let (rest, j) = col.rsplit_once('_')?;
    let (name, i) = rest.rsplit_once('_')?;
    Some((name, i.parse().ok()?, j.parse().ok()?))
}

/// Shape and entry name from header columns that must read
/// `<name>_0_0, <name>_0_1, ...` in row-major order.
fn entry_shape(cols: &[&str]) -> Result<(String, usize, usize)> {
    let Some(&last) = cols.last() else {
        return Err(parse_err(1, "header", "no entry columns"));
    };
    let (name, r, c) = split_entry(last)
        .ok_or_else(|| parse_err(1, "header", format!("cannot read entry column `{last}`")))?;
    let (rows, ncols) = (r + 1, c + 1);
    if rows * ncols != cols.len() {
        return Err(parse_err(
            1,
            "header",
            format!("{} entry columns do not form a {rows}x{ncols} matrix", cols.len()),
        ));
    }
    for (got, want) in cols.iter().zip(entry_names(name, rows, ncols)) {
        if *got != want {
            return Err(parse_err(1, "header", format!("expected column `{want}`, found `{got}`")));
        }
    }
    Ok((name.to_string(), rows, ncols))
}

fn parse_fields(text: &str, line: usize, header: &[&str]) -> Result<Vec<f64>> {
    let fields: Vec<&str> = text.split(',').map(str::trim).collect();
    if fields.len() != header.len() {
        return Err(parse_err(
            line,
            "row",
            format!("expected {} fields, found {}", header.len(), fields.len()),
        ));
    }
    fields
        .iter()
        .zip(header)
        .map(|(f, col)| {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(line, *col, format!("`{f}` is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line, *col, "value is not finite"))
            }
        })
        .collect()
}

fn data_lines(src: &str) -> impl Iterator<Item = (usize, &str)> {
    src.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Grid whose nodes are `times`, if they are uniform from 0.
fn infer_grid(times: &[(usize, f64)]) -> Result<TimeGrid> {
    if times.len() < 3 {
        return Err(parse_err(1, "t", "a path needs at least 3 nodes"));
    }
    let horizon = times[times.len() - 1].1;
    let grid = TimeGrid::new(horizon, times.len() - 1)
        .map_err(|e| parse_err(times[times.len() - 1].0, "t", e.to_string()))?;
    for (i, &(line, t)) in times.iter().enumerate() {
        if (t - grid.node(i)).abs() > GRID_TOL * horizon {
            return Err(parse_err(
                line,
                "t",
                format!("node {i} at t = {t} is off the uniform grid (expected {})", grid.node(i)),
            ));
        }
    }
    Ok(grid)
}

/// Parses a path file; returns the entry name and the path.
pub fn read_path_csv(src: &str) -> Result<(String, MatrixPath)> {
    let header_line = src.lines().next().ok_or_else(|| parse_err(1, "header", "empty file"))?;
    let header: Vec<&str> = header_line.split(',').map(str::trim).collect();
    if header[0] != "t" {
        return Err(parse_err(1, "header", "first column must be `t`"));
    }
    let (name, rows, cols) = entry_shape(&header[1..])?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (line, text) in data_lines(src) {
        let v = parse_fields(text, line, &header)?;
        times.push((line, v[0]));
        values.push(Mat::new(rows, cols, v[1..].to_vec())?);
    }
    let grid = infer_grid(&times)?;
    Ok((name, MatrixPath::new(grid, values)?))
}

/// Long-format triangle: one line per `(t_i, s_j)` with `i ≤ j`.
pub fn triangle_to_csv(grid: &TimeGrid, slices: &[P1Slice]) -> String {
    let n = slices.first().map_or(0, |s| s.values[0].rows());
    let mut out = String::from("t,s");
    for e in entry_names("p1", n, n) {
        let _ = write!(out, ",{e}");
    }
    out.push('\n');
    for slice in slices {
        let t = grid.node(slice.t_idx);
        for (k, m) in slice.values.iter().enumerate() {
            push_row(&mut out, &[t, grid.node(slice.t_idx + k)], m);
        }
    }
    out
}

/// One line of a triangle file.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleRow {
    pub t: f64,
    pub s: f64,
    pub value: Mat,
}

/// Parses a triangle file and checks that every row lies on `0 ≤ t ≤ s`.
pub fn read_triangle_csv(src: &str) -> Result<Vec<TriangleRow>> {
    let header_line = src.lines().next().ok_or_else(|| parse_err(1, "header", "empty file"))?;
    let header: Vec<&str> = header_line.split(',').map(str::trim).collect();
    if header.len() < 3 || header[0] != "t" || header[1] != "s" {
        return Err(parse_err(1, "header", "columns must start with `t,s`"));
    }
    let (_, rows, cols) = entry_shape(&header[2..])?;
    let mut out = Vec::new();
    for (line, text) in data_lines(src) {
        let v = parse_fields(text, line, &header)?;
        if !(0.0 <= v[0] && v[0] <= v[1]) {
            return Err(parse_err(line, "s", format!("point ({}, {}) is off the triangle", v[0], v[1])));
        }
        out.push(TriangleRow {
            t: v[0],
            s: v[1],
            value: Mat::new(rows, cols, v[2..].to_vec())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MatrixPath {
        let grid = TimeGrid::new(0.7, 5).unwrap();
        let values = (0..6)
            .map(|i| Mat::from_rows(&[[0.1 * i as f64, 1.0 / 3.0], [-2e-17, 1e300]]))
            .collect();
        MatrixPath::new(grid, values).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = sample();
        let text = path_to_csv("theta", &p);
        assert!(text.starts_with("t,theta_0_0,theta_0_1,theta_1_0,theta_1_1\n"));
        let (name, back) = read_path_csv(&text).unwrap();
        assert_eq!(name, "theta");
        assert_eq!(back, p);
        assert_eq!(path_to_csv("theta", &back), text);
    }

    #[test]
    fn rejects_bad_number_with_line() {
        let text = path_to_csv("v", &sample()).replacen("3.3333333333333331e-1", "abc", 2);
        match read_path_csv(&text) {
            Err(Error::Parse { line: Some(2), field, .. }) => assert_eq!(field, "v_0_1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_non_uniform_times() {
        let text = "t,a_0_0\n0,1\n0.5,1\n0.6,1\n";
        assert!(matches!(read_path_csv(text), Err(Error::Parse { line: Some(3), .. })));
    }

    #[test]
    fn rejects_scrambled_header() {
        let text = "t,a_0_1,a_0_0\n0,1,1\n0.5,1,1\n1,1,1\n";
        assert!(read_path_csv(text).is_err());
    }

    #[test]
    fn triangle_round_trip() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let slices: Vec<P1Slice> = (0..3)
            .map(|i| P1Slice {
                t_idx: i,
                values: (i..3).map(|j| Mat::scalar((i * 10 + j) as f64)).collect(),
            })
            .collect();
        let text = triangle_to_csv(&grid, &slices);
        let rows = read_triangle_csv(&text).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[4].t, 1.0 / 2.0 * 1.0);
        assert_eq!(rows[4].value[(0, 0)], 12.0);
    }
}

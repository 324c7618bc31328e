//! Commands of the `ere-lab` driver. Each command reads a problem, writes its
//! artifacts into the output directory and maps its outcome to an exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ere_core::csvio::{format_value, path_to_csv, read_path_csv, triangle_to_csv};
use ere_core::mc::{mc_cost, mc_p1_diag, simulate_closed_loop, spike_test, McConfig, McReport};
use ere_core::ode::{integrate_p2, p1_triangle};
use ere_core::problem::{builtin, mollify_instance, validate_assumptions};
use ere_core::solver::{equilibrium_value, solve_with_diagnostics, RiccatiSolution};
use ere_core::{Error, Mat, MatrixPath, ProblemInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

mod example1;

pub use example1::{integrate_reduced, Example1Outcome, ReducedPath};

/// Outcome classes and their process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Usage = 1,
    Validation = 2,
    NoContraction = 3,
    BlowUp = 4,
    VerifyFail = 5,
    ExportCap = 6,
}

impl Exit {
    pub fn code(self) -> u8 {
        self as u8
    }
}

/// A failed command: its outcome class and a one-line explanation.
#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub message: String,
}

impl Failure {
    fn new(exit: Exit, message: impl Into<String>) -> Self {
        Failure {
            exit,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let exit = match &e {
            Error::Parse { .. } | Error::Dimension { .. } | Error::Invalid(_) | Error::Domain(_) => Exit::Usage,
            Error::Assumption { .. } => Exit::Validation,
            Error::NoContraction { .. } | Error::NoConvergence { .. } => Exit::NoContraction,
            Error::Overflow { .. } | Error::NotPositiveDefinite { .. } => Exit::BlowUp,
            Error::MonteCarlo(_) => Exit::VerifyFail,
        };
        Failure::new(exit, e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(Exit::Usage, format!("{}: {e}", path.display()))
}

pub type CmdResult = std::result::Result<String, Failure>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Validate,
    Solve,
    Verify,
    Example1,
    ExportTriangle,
}

/// Settings shared by every command.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: Command,
    /// A problem file, or `builtin:<name>`.
    pub input: String,
    pub out: PathBuf,
    pub grid: Option<usize>,
    pub tol: f64,
    pub max_iters: usize,
    pub paths: usize,
    pub seed: u64,
    pub override_assumptions: bool,
    pub mollify: Option<f64>,
    pub antithetic: bool,
    /// Largest number of triangle rows `export-triangle` may write.
    pub export_cap: usize,
}

impl RunConfig {
    pub fn new(command: Command, input: impl Into<String>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            command,
            input: input.into(),
            out: out.into(),
            grid: None,
            tol: 1e-10,
            max_iters: 200,
            paths: 100_000,
            seed: 0,
            override_assumptions: false,
            mollify: None,
            antithetic: false,
            export_cap: 5_000_000,
        }
    }

    fn check(&self) -> std::result::Result<(), Failure> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Failure::new(Exit::Usage, format!("--tol must be positive, got {}", self.tol)));
        }
        if let Some(n) = self.grid {
            if n < 2 {
                return Err(Failure::new(Exit::Usage, format!("--grid must be at least 2, got {n}")));
            }
        }
        if let Some(eps) = self.mollify {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Failure::new(Exit::Usage, format!("--mollify must be positive, got {eps}")));
            }
        }
        fs::create_dir_all(&self.out).map_err(|e| io_failure(&self.out, e))
    }
}

/// Runs the configured command.
pub fn run(cfg: &RunConfig) -> CmdResult {
    cfg.check()?;
    match cfg.command {
        Command::Validate => cmd_validate(cfg),
        Command::Solve => cmd_solve(cfg),
        Command::Verify => cmd_verify(cfg),
        Command::Example1 => cmd_example1(cfg),
        Command::ExportTriangle => cmd_export_triangle(cfg),
    }
}

/// Reads the instance and applies the grid override and mollification.
pub fn load_instance(cfg: &RunConfig) -> std::result::Result<ProblemInstance, Failure> {
    let mut p = match cfg.input.strip_prefix("builtin:") {
        Some(name) => builtin(name)?,
        None => {
            let path = Path::new(&cfg.input);
            let src = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            ProblemInstance::from_toml_str(&src)?
        }
    };
    if let Some(n) = cfg.grid {
        p = p.with_steps(n)?;
    }
    if let Some(eps) = cfg.mollify {
        p = mollify_instance(&p, eps);
    }
    Ok(p)
}

fn write(cfg: &RunConfig, name: &str, contents: &str) -> std::result::Result<(), Failure> {
    let path = cfg.out.join(name);
    fs::write(&path, contents).map_err(|e| io_failure(&path, e))
}

fn read_path(cfg: &RunConfig, name: &str, p: &ProblemInstance) -> std::result::Result<MatrixPath, Failure> {
    let path = cfg.out.join(name);
    let src = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
    let (_, m) = read_path_csv(&src).map_err(|e| Failure::new(Exit::Usage, format!("{name}: {e}")))?;
    if m.grid.steps != p.grid.steps || (m.grid.horizon - p.grid.horizon).abs() > 1e-12 * p.grid.horizon {
        return Err(Failure::new(
            Exit::Usage,
            format!("{name} was written on a different grid than the instance"),
        ));
    }
    Ok(MatrixPath { grid: p.grid, values: m.values })
}

pub fn cmd_validate(cfg: &RunConfig) -> CmdResult {
    let p = load_instance(cfg)?;
    let report = validate_assumptions(&p);
    write(cfg, "validation.txt", &report.to_string())?;
    if !report.blocking_ok() {
        let first = report.failures().next().map(|c| c.name.clone()).unwrap_or_default();
        return Err(Failure::new(Exit::Validation, format!("assumption check failed: {first}")));
    }
    Ok(format!("validation passed ({} checks)", report.checks.len()))
}

fn certificates_text(sol: &RiccatiSolution) -> String {
    let c = &sol.certificates;
    let mut s = String::new();
    let _ = writeln!(s, "cv_bound {}", format_value(c.cv_bound));
    let _ = writeln!(s, "cstar_bound {}", format_value(c.cstar_bound));
    let _ = writeln!(s, "sup_value {}", format_value(c.sup_value));
    let _ = writeln!(s, "sup_theta {}", format_value(c.sup_theta));
    let _ = writeln!(s, "residual {}", format_value(sol.residual));
    let _ = writeln!(s, "holds {}", c.holds(0.0));
    s
}

pub fn cmd_solve(cfg: &RunConfig) -> CmdResult {
    let p = load_instance(cfg)?;
    let report = validate_assumptions(&p);
    write(cfg, "validation.txt", &report.to_string())?;
    if !report.blocking_ok() && !cfg.override_assumptions {
        let first = report.failures().next().map(|c| c.name.clone()).unwrap_or_default();
        return Err(Failure::new(
            Exit::Validation,
            format!("assumption check failed: {first} (use --override-assumptions to solve anyway)"),
        ));
    }
    let (sol, diag) = solve_with_diagnostics(&p, cfg.tol, cfg.max_iters);
    write(cfg, "diagnostics.txt", &diag.to_string())?;
    let sol = sol?;
    write(cfg, "theta.csv", &path_to_csv("theta", &sol.theta))?;
    write(cfg, "p1_diag.csv", &path_to_csv("p1", &sol.p1_diag))?;
    write(cfg, "p2.csv", &path_to_csv("p2", &sol.p2))?;
    write(cfg, "value.csv", &path_to_csv("v", &sol.value))?;
    write(cfg, "certificates.txt", &certificates_text(&sol))?;
    Ok(format!(
        "solved: residual {:.3e}, sup|V| {:.6} (bound {:.6}), sup|Θ| {:.6} (bound {:.6})",
        sol.residual,
        sol.certificates.sup_value,
        sol.certificates.cv_bound,
        sol.certificates.sup_theta,
        sol.certificates.cstar_bound
    ))
}

/// Node indices `round(k·N/parts)` for `k < parts`.
fn spread_nodes(steps: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|k| ((k * steps) as f64 / parts as f64).round() as usize)
        .collect()
}

/// Size of the spike perturbation.
const SPIKE_SIZE: f64 = 1.0;
/// Fraction of the verification paths spent on each spike test.
const SPIKE_PATH_DIVISOR: usize = 10;

/// One line of `verify.csv`.
struct VerifyRow {
    check: String,
    t: f64,
    entry: String,
    estimate: f64,
    stderr: f64,
    target: Option<f64>,
    z: Option<f64>,
    passed: bool,
}

fn z_rows(check: &str, t: f64, r: &McReport) -> Vec<VerifyRow> {
    let (rows, cols) = r.estimate.shape();
    let mut out = Vec::new();
    for i in 0..rows {
        for j in i.min(cols)..cols {
            let z = r.z.as_ref().map(|z| z[(i, j)]);
            out.push(VerifyRow {
                check: check.into(),
                t,
                entry: format!("{i}_{j}"),
                estimate: r.estimate[(i, j)],
                stderr: r.stderr[(i, j)],
                target: r.target.as_ref().map(|m| m[(i, j)]),
                z,
                passed: z.is_some_and(|z| z.abs() <= 3.0),
            });
        }
    }
    out
}

fn verify_csv(rows: &[VerifyRow]) -> String {
    let mut s = String::from("check,t,entry,estimate,stderr,target,z,passed\n");
    let opt = |x: Option<f64>| x.map(format_value).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.check,
            format_value(r.t),
            r.entry,
            format_value(r.estimate),
            format_value(r.stderr),
            opt(r.target),
            opt(r.z),
            r.passed
        );
    }
    s
}

/// Unit directions for the spike test, drawn from the seed.
fn spike_directions(k: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                break v.iter().map(|x| SPIKE_SIZE * x / norm).collect();
            }
        })
        .collect()
}

/// Spike lengths `0.2T, 0.1T, 0.05T`, keeping those of at least two steps.
fn spike_ladder(p: &ProblemInstance) -> Vec<f64> {
    let h = p.grid.h();
    [0.2, 0.1, 0.05]
        .iter()
        .map(|f| f * p.grid.horizon)
        .filter(|&e| e >= 2.0 * h)
        .collect()
}

pub fn cmd_verify(cfg: &RunConfig) -> CmdResult {
    let p = load_instance(cfg)?;
    let theta = read_path(cfg, "theta.csv", &p)?;
    let p1_target = read_path(cfg, "p1_diag.csv", &p)?;
    let value = read_path(cfg, "value.csv", &p)?;
    let p2 = integrate_p2(&p, &theta)?;
    let steps = p.grid.steps;
    let n = p.dims.n;
    let mc = McConfig::new(cfg.paths, cfg.seed, p.grid, cfg.antithetic)?;
    let spike_mc = McConfig::new((cfg.paths / SPIKE_PATH_DIVISOR).max(100), cfg.seed, p.grid, cfg.antithetic)?;
    let x0 = vec![1.0; n];
    let mut rows = Vec::new();

    for i in spread_nodes(steps, 5) {
        let r = mc_p1_diag(&p, &theta, &p2, i, &mc)?.with_target(p1_target.values[i].clone())?;
        rows.extend(z_rows("p1_diag", p.grid.node(i), &r));
    }

    let r = simulate_closed_loop(&p, &theta, &p2, &x0, 0, &mc)?;
    rows.push(VerifyRow {
        check: "closed_loop".into(),
        t: 0.0,
        entry: "sup_mean_square".into(),
        estimate: r.estimate[(0, 0)],
        stderr: r.stderr[(0, 0)],
        target: r.note("bound"),
        z: None,
        passed: r.passed == Some(true),
    });

    let nodes = spread_nodes(steps, 3);
    for &i in &nodes {
        let half_v = 0.5 * value.values[i].congruence(&Mat::column(&x0))[(0, 0)];
        let r = mc_cost(&p, &theta, i, &x0, &mc)?.with_target(Mat::scalar(half_v))?;
        rows.extend(z_rows("cost", p.grid.node(i), &r));
    }

    let ladder = spike_ladder(&p);
    if ladder.is_empty() {
        return Err(Failure::new(Exit::Usage, "grid too coarse for the spike ladder"));
    }
    let sol = RiccatiSolution {
        value: equilibrium_value(&p, &p1_target, &p2),
        theta: theta.clone(),
        p1_diag: p1_target.clone(),
        p2: p2.clone(),
        residual: f64::NAN,
        certificates: ere_core::solver::Certificates {
            cv_bound: f64::NAN,
            cstar_bound: f64::NAN,
            sup_value: f64::NAN,
            sup_theta: f64::NAN,
        },
    };
    for (d, v) in spike_directions(p.dims.k, 2, cfg.seed).iter().enumerate() {
        for &i in &nodes {
            let r = spike_test(&p, &sol, i, &x0, v, &ladder, &spike_mc)?;
            let last = r.estimate.cols() - 1;
            rows.push(VerifyRow {
                check: format!("spike_dir{d}"),
                t: p.grid.node(i),
                entry: "limit".into(),
                estimate: r.estimate[(0, last)],
                stderr: r.stderr[(0, last)],
                target: Some(-(2.0 * p.grid.h())),
                z: None,
                passed: r.passed == Some(true),
            });
        }
    }

    write(cfg, "verify.csv", &verify_csv(&rows))?;
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} t={:.4} {}", r.check, r.t, r.entry))
        .collect();
    if failed.is_empty() {
        Ok(format!("verify passed ({} checks)", rows.len()))
    } else {
        Err(Failure::new(
            Exit::VerifyFail,
            format!("{} of {} checks failed, first: {}", failed.len(), rows.len(), failed[0]),
        ))
    }
}

pub fn cmd_example1(cfg: &RunConfig) -> CmdResult {
    let steps = cfg.grid.unwrap_or(400);
    let path = integrate_reduced(steps);
    write(cfg, "example1.csv", &path.to_csv())?;
    match path.outcome() {
        Example1Outcome::Confirmed { blow_up } => Err(Failure::new(
            Exit::BlowUp,
            format!("blow-up at s = {blow_up:.6} with P1 above 1/(s-1) on the checked range"),
        )),
        Example1Outcome::Violated(reason) => Err(Failure::new(Exit::VerifyFail, reason)),
    }
}

pub fn cmd_export_triangle(cfg: &RunConfig) -> CmdResult {
    let p = load_instance(cfg)?;
    let rows = (p.grid.len() * (p.grid.len() + 1)) / 2;
    if rows > cfg.export_cap {
        return Err(Failure::new(
            Exit::ExportCap,
            format!("triangle has {rows} rows, above the cap of {}", cfg.export_cap),
        ));
    }
    let theta = read_path(cfg, "theta.csv", &p)?;
    let p2 = integrate_p2(&p, &theta)?;
    let slices = p1_triangle(&p, &theta, &p2)?;
    write(cfg, "p1_triangle.csv", &triangle_to_csv(&p.grid, &slices))?;
    Ok(format!("wrote {rows} triangle rows"))
}

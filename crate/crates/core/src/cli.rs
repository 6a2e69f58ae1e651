//! Command-line front end: problem files, subcommands and CSV outputs.
//!
//! A problem file is a TOML document:
//!
//! ```toml
//! seed = 0
//!
//! [domain]            # lengths in the units of the load positions
//! origin = [0.0, 0.0]
//! width = 1.0
//! height = 1.0
//!
//! [grid]
//! n = 64              # nodes along the longer side
//!
//! [load]
//! kind = "points"     # "points", "sampled" or "quadratic"
//! points = [{ x = [0.25, 0.0], v = [0.0, 1.0] }]
//!
//! [lambda]
//! values = [10.0, 100.0]
//!
//! [solver]
//! schedule = [0.1, 0.01, 0.001]
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 when a solve stops on a
//! failed line search.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use toml::Spanned;

use crate::airy::{
    balance_check, boundary_data_from_traction, BoundaryData, BoundaryLoad, PointLoad, BALANCE_TOL,
};
use crate::constructions::{laminate_1d, LaminateSpec, NestedLaminate};
use crate::density::{f_lambda, g_lambda, qc_envelope, EnergyParams};
use crate::envelope::{rsgl_split, rsym_iterate, LaminationGrid};
use crate::error::{Error, Result};
use crate::grid::{stress_divergence_residual, Grid2D, ScalarField};
use crate::solver::{
    lambda_sweep, minimize_finite_lambda, minimize_limit, write_eigen_maps, Objective, SolveConfig,
    SolveReport, StopReason,
};
use crate::sym2::Sym2;

/// Outer lamination count of the default nested laminate.
pub const LAMINATE_K_OUT: usize = 8;
/// Inner-fade width of the default nested laminate.
pub const LAMINATE_RAMP: f64 = 1.0;

#[derive(Parser, Debug)]
#[command(
    name = "michell",
    version,
    about = "Relaxed compliance and Michell limit solvers on 2D grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Problem file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the problem file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 guarantees bit-identical outputs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed of the single random generator (overrides the problem file).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tabulate F_λ, its envelope and lamination values over diagonal ξ.
    Envelope {
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Samples per axis.
        #[arg(long, default_value_t = 21)]
        grid: usize,
        /// Half-width of the sampled range in units of √λ.
        #[arg(long, default_value_t = 1.5)]
        range: f64,
        /// Lamination depth of the numeric envelope column.
        #[arg(long, default_value_t = 1)]
        depth: usize,
    },
    /// Emit the nested laminate field and its inner 1D profile.
    Laminate {
        #[arg(long, default_value_t = 4.0)]
        lambda: f64,
        /// Grid nodes per side of the emitted field.
        #[arg(long, default_value_t = 257)]
        grid: usize,
        /// Diagonal entries of the target Hessian.
        #[arg(long, num_args = 2, value_names = ["A", "D"], default_values_t = [1.0, 0.5])]
        xi: Vec<f64>,
        /// Inner oscillation count.
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, default_value_t = 0.05)]
        eps_margin: f64,
    },
    /// Convert the problem's load into clamped boundary data.
    Boundary {
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Minimize at one λ, or the limit functional when λ is omitted.
    Solve {
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Run the λ sweep and write the convergence table.
    Sweep {
        /// Comma-separated λ list (overrides the problem file).
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Run the invariant suite and print pass/fail counts.
    Verify,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::LineSearch { .. } => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Envelope {
            lambda,
            grid,
            range,
            depth,
        } => {
            let out = out_dir(cli, None)?;
            let table = envelope_table(*lambda, *grid, *range, *depth)?;
            write(&out.join("envelope.csv"), &table)?;
            println!("wrote {}", out.join("envelope.csv").display());
            Ok(0)
        }
        Command::Laminate {
            lambda,
            grid,
            xi,
            k,
            eps_margin,
        } => {
            let out = out_dir(cli, None)?;
            let xi = Sym2::diag(xi[0], xi[1]);
            let (field, profile, energy) = laminate_outputs(xi, *lambda, *k, *eps_margin, *grid)?;
            write(&out.join("laminate_field.csv"), &field.to_csv())?;
            write(&out.join("laminate_profile.csv"), &profile)?;
            let p = EnergyParams::new(*lambda)?;
            println!(
                "averaged F_lambda = {energy:.6}, envelope = {:.6}, F_lambda(xi) = {:.6}",
                qc_envelope(xi, &p),
                f_lambda(xi, &p)
            );
            Ok(0)
        }
        Command::Boundary { grid } => {
            let cfg = load_problem(cli, *grid)?;
            let out = out_dir(cli, Some(&cfg))?;
            write(
                &out.join("boundary_data.csv"),
                &cfg.data.to_csv(&cfg.grid.boundary_curve()),
            )?;
            println!("wrote {}", out.join("boundary_data.csv").display());
            Ok(0)
        }
        Command::Solve { lambda, grid } => {
            let cfg = load_problem(cli, *grid)?;
            let out = out_dir(cli, Some(&cfg))?;
            let (u, rep) = match lambda {
                Some(l) => {
                    let sc = SolveConfig {
                        lambda: Some(*l),
                        ..cfg.solver.clone()
                    };
                    minimize_finite_lambda(&cfg.data, &cfg.grid, &sc)?
                }
                None => minimize_limit(&cfg.data, &cfg.grid, &cfg.solver)?,
            };
            u.write_csv(&out.join("solution.csv"))?;
            write_eigen_maps(&u, &out, "solution")?;
            write(&out.join("report.csv"), &report_csv(&rep))?;
            println!(
                "energy {:e} after {} iterations ({:?})",
                rep.energy, rep.iterations, rep.stop
            );
            Ok(stop_code(&rep))
        }
        Command::Sweep { lambda, grid } => {
            let cfg = load_problem(cli, *grid)?;
            let out = out_dir(cli, Some(&cfg))?;
            let lambdas = lambda.clone().unwrap_or_else(|| cfg.lambdas.clone());
            if lambdas.is_empty() {
                return Err(Error::InvalidParameter("no lambda values given".into()));
            }
            let rows: Vec<(f64, BoundaryData)> =
                lambdas.iter().map(|&l| (l, cfg.data.clone())).collect();
            let table = lambda_sweep(&rows, &cfg.grid, &cfg.solver)?;
            write(&out.join("sweep.csv"), &table.to_csv())?;
            table.limit_field.write_csv(&out.join("limit.csv"))?;
            write_eigen_maps(&table.limit_field, &out, "limit")?;
            print!("{}", table.to_csv());
            let mut code = stop_code(&table.limit_report);
            for r in table.rows {
                if let Err(e) = r {
                    eprintln!("error: {e}");
                    code = code.max(exit_code(&e));
                }
            }
            Ok(code)
        }
        Command::Verify => {
            let seed = cli.seed.unwrap_or(0);
            let checks = verify_suite(seed);
            let passed = checks.iter().filter(|c| c.passed).count();
            for c in &checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag} {}: {}", c.name, c.detail);
            }
            println!("{passed}/{} checks passed", checks.len());
            Ok(if passed == checks.len() { 0 } else { 1 })
        }
    }
}

fn stop_code(rep: &SolveReport) -> i32 {
    if rep.stop == StopReason::StepUnderflow || !rep.energy.is_finite() {
        2
    } else {
        0
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn out_dir(cli: &Cli, cfg: Option<&ProblemConfig>) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.map(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_problem(cli: &Cli, grid_override: Option<usize>) -> Result<ProblemConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("this subcommand needs --config".into()))?;
    let mut cfg = ProblemConfig::from_file(path, grid_override)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.solver.seed = s;
    }
    Ok(cfg)
}

fn report_csv(rep: &SolveReport) -> String {
    format!(
        "energy,initial_energy,grad_norm,iterations,wall_s,high_branch_frac,stop\n{:e},{:e},{:e},{},{:e},{:e},{:?}\n",
        rep.energy,
        rep.initial_energy,
        rep.grad_norm,
        rep.iterations,
        rep.wall_s,
        rep.high_branch_frac(),
        rep.stop
    )
}

/// `a,d,f_lambda,qc_envelope,g_lambda,rsym` over diagonal `ξ = diag(a, d)`
/// with `|a|, |d| ≤ range·√λ`.
pub fn envelope_table(lambda: f64, n: usize, range: f64, depth: usize) -> Result<String> {
    let p = EnergyParams::new(lambda)?;
    if n < 2 || !(range > 0.0) {
        return Err(Error::InvalidParameter(
            "envelope table needs at least 2 samples and a positive range".into(),
        ));
    }
    let lg = LaminationGrid::for_lambda(lambda);
    let r = range * p.sqrt_lambda();
    let mut s = String::from("a,d,f_lambda,qc_envelope,g_lambda,rsym\n");
    for j in 0..n {
        for i in 0..n {
            let a = -r + 2.0 * r * i as f64 / (n - 1) as f64;
            let d = -r + 2.0 * r * j as f64 / (n - 1) as f64;
            let xi = Sym2::diag(a, d);
            let rs = rsym_iterate(|m| f_lambda(m, &p), xi, depth, &lg)?;
            s.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e}\n",
                a,
                d,
                f_lambda(xi, &p),
                qc_envelope(xi, &p),
                g_lambda(xi, &p),
                rs
            ));
        }
    }
    Ok(s)
}

/// Nested laminate field on an `n × n` grid, the CSV of its inner 1D
/// profile, and its averaged `F_λ` energy.
pub fn laminate_outputs(
    xi: Sym2,
    lambda: f64,
    k_in: usize,
    eps_margin: f64,
    n: usize,
) -> Result<(ScalarField, String, f64)> {
    let p = EnergyParams::new(lambda)?;
    let lam =
        NestedLaminate::from_rsgl(xi, lambda, LAMINATE_K_OUT, k_in, eps_margin, LAMINATE_RAMP)?;
    let field = lam.to_field(n)?;
    let energy = lam.average_energy(|m| f_lambda(m, &p), n.saturating_sub(1).max(1));
    // the inner split, seen along its lamination direction
    let (_, splits) = rsgl_split(xi, lambda)?;
    let mid = splits[0].children(xi).1;
    let inner = splits[1];
    let (x1, x2) = inner.children(mid);
    let spec = LaminateSpec::new(x1.a, x2.a, inner.t, k_in)?;
    let profile = laminate_1d(&spec, 64 * k_in)?;
    Ok((field, profile.to_csv(), energy))
}

/// Validated problem definition.
#[derive(Clone, Debug)]
pub struct ProblemConfig {
    pub grid: Grid2D,
    pub data: BoundaryData,
    pub lambdas: Vec<f64>,
    pub solver: SolveConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    domain: Option<Spanned<RawDomain>>,
    grid: Spanned<RawGrid>,
    load: Spanned<RawLoad>,
    lambda: Option<Spanned<RawLambda>>,
    solver: Option<Spanned<RawSolver>>,
    output: Option<RawOutput>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    origin: Option<[f64; 2]>,
    width: Option<f64>,
    height: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    n: Spanned<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPoint {
    x: [f64; 2],
    v: [f64; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoad {
    kind: Spanned<String>,
    points: Option<Spanned<Vec<RawPoint>>>,
    hessian: Option<Spanned<[f64; 3]>>,
    file: Option<Spanned<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLambda {
    values: Spanned<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    schedule: Option<Spanned<Vec<f64>>>,
    max_iters: Option<usize>,
    grad_tol: Option<f64>,
    armijo: Option<f64>,
    backtrack: Option<f64>,
    min_step: Option<f64>,
    memory: Option<usize>,
    perturbation: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ProblemConfig {
    pub fn from_file(path: &Path, grid_override: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, grid_override)
    }

    /// Parses and validates a problem document; `base` resolves relative
    /// file paths.
    pub fn parse(text: &str, base: &Path, grid_override: Option<usize>) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map_or(1, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        let at = |span: std::ops::Range<usize>, msg: String| Error::Config {
            line: line_of(text, span.start),
            msg,
        };

        let (origin, width, height) = match &raw.domain {
            Some(d) => {
                let r = d.get_ref();
                (
                    r.origin.unwrap_or([0.0, 0.0]),
                    r.width.unwrap_or(1.0),
                    r.height.unwrap_or(1.0),
                )
            }
            None => ([0.0, 0.0], 1.0, 1.0),
        };
        let domain_span = raw.domain.as_ref().map_or(0..0, |d| d.span());
        if !(width > 0.0 && height > 0.0) || !origin.iter().all(|v| v.is_finite()) {
            return Err(at(
                domain_span,
                "domain needs positive width and height".into(),
            ));
        }
        let n_span = raw.grid.get_ref().n.span();
        let n = grid_override.unwrap_or(*raw.grid.get_ref().n.get_ref());
        if n < 5 {
            return Err(at(
                n_span,
                format!("grid needs at least 5 nodes per side, got {n}"),
            ));
        }
        let grid =
            Grid2D::rectangle(origin, width, height, n).map_err(|e| at(n_span, e.to_string()))?;

        let load = raw.load.get_ref();
        let load_span = raw.load.span();
        let curve = grid.boundary_curve();
        let data = match load.kind.get_ref().as_str() {
            "points" => {
                let pts = load
                    .points
                    .as_ref()
                    .ok_or_else(|| at(load_span.clone(), "points load needs `points`".into()))?;
                let loads: Vec<PointLoad> = pts
                    .get_ref()
                    .iter()
                    .map(|p| PointLoad { x: p.x, v: p.v })
                    .collect();
                let bl = BoundaryLoad::Points(loads);
                boundary_data_from_traction(&bl, &curve)
                    .map_err(|e| at(pts.span(), e.to_string()))?
            }
            "sampled" => {
                let file = load
                    .file
                    .as_ref()
                    .ok_or_else(|| at(load_span.clone(), "sampled load needs `file`".into()))?;
                let p = base.join(file.get_ref());
                let body = std::fs::read_to_string(&p)
                    .map_err(|e| at(file.span(), format!("{}: {e}", p.display())))?;
                let g = parse_traction(&body).map_err(|e| at(file.span(), e.to_string()))?;
                let bl = BoundaryLoad::Sampled(g);
                boundary_data_from_traction(&bl, &curve)
                    .map_err(|e| at(file.span(), e.to_string()))?
            }
            "quadratic" => {
                let h = load.hessian.as_ref().ok_or_else(|| {
                    at(load_span.clone(), "quadratic load needs `hessian`".into())
                })?;
                let [a, b, d] = *h.get_ref();
                if ![a, b, d].iter().all(|v| v.is_finite()) {
                    return Err(at(h.span(), "hessian entries must be finite".into()));
                }
                BoundaryData::from_traces(
                    &grid,
                    |x, y| 0.5 * (a * x * x + 2.0 * b * x * y + d * y * y),
                    |x, y| [a * x + b * y, b * x + d * y],
                )
            }
            other => {
                return Err(at(
                    load.kind.span(),
                    format!("unknown load kind {other:?} (points, sampled, quadratic)"),
                ))
            }
        };

        let lambdas = match &raw.lambda {
            Some(l) => {
                let v = l.get_ref().values.get_ref().clone();
                let sp = l.get_ref().values.span();
                if v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                    return Err(at(sp, "lambda values must be positive".into()));
                }
                if v.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(at(sp, "lambda values must be strictly increasing".into()));
                }
                v
            }
            None => Vec::new(),
        };

        let seed = raw.seed.unwrap_or(0);
        let mut solver = SolveConfig {
            seed,
            ..SolveConfig::default()
        };
        if let Some(s) = &raw.solver {
            let r = s.get_ref();
            if let Some(v) = &r.schedule {
                solver.schedule = v.get_ref().clone();
                let only_schedule = SolveConfig {
                    schedule: solver.schedule.clone(),
                    ..SolveConfig::default()
                };
                only_schedule
                    .validate()
                    .map_err(|e| at(v.span(), e.to_string()))?;
            }
            macro_rules! take {
                ($($f:ident),*) => { $( if let Some(v) = r.$f { solver.$f = v; } )* };
            }
            take!(
                max_iters,
                grad_tol,
                armijo,
                backtrack,
                min_step,
                memory,
                perturbation
            );
            solver.validate().map_err(|e| at(s.span(), e.to_string()))?;
        }
        let out_dir = raw
            .output
            .and_then(|o| o.dir)
            .map(|d| base.join(d))
            .unwrap_or_else(|| base.join("out"));
        Ok(Self {
            grid,
            data,
            lambdas,
            solver,
            out_dir,
            seed,
        })
    }
}

/// Rows `gx,gy`, one per boundary vertex counterclockwise from the
/// lower-left corner; `#` lines are comments.
pub fn parse_traction(text: &str) -> Result<Vec<[f64; 2]>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#') && *l != "gx,gy")
        .map(|l| {
            let v: Vec<&str> = l.split(',').map(str::trim).collect();
            if v.len() != 2 {
                return Err(Error::Parse(format!("expected gx,gy in {l:?}")));
            }
            let f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
            };
            Ok([f(v[0])?, f(v[1])?])
        })
        .collect()
}

/// Outcome of one invariant check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn random_sym(rng: &mut ChaCha8Rng, scale: f64) -> Sym2 {
    Sym2::new(
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
    )
}

/// Fast invariant suite behind `verify`.
pub fn verify_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // density inequalities
    let mut bad = 0;
    for &lambda in &[1.0, 10.0, 100.0] {
        let p = EnergyParams::new(lambda).expect("positive");
        for _ in 0..20_000 {
            let xi = random_sym(&mut rng, 2.0 * p.sqrt_lambda());
            let (n, r) = (xi.norm(), xi.rho0());
            let g = g_lambda(xi, &p);
            let ok = n <= r * (1.0 + 1e-12) + 1e-300
                && r <= 2.0 * n * (1.0 + 1e-12)
                && 0.5 * r <= g * (1.0 + 1e-12) + 1e-300
                && qc_envelope(xi, &p) <= f_lambda(xi, &p) * (1.0 + 1e-12)
                && (r > p.sqrt_lambda() || g <= 2.0 * r * (1.0 + 1e-12));
            if !ok {
                bad += 1;
            }
        }
    }
    out.push(check(
        "density inequalities",
        bad == 0,
        format!("{bad} violations in 60000 samples"),
    ));

    // closed-form lamination matches the envelope
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let lambda: f64 = [1.0, 4.0, 100.0][rng.gen_range(0..3)];
        let sl = lambda.sqrt();
        let (a, d) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let s = rng.gen_range(0.05..0.9) * sl / (f64::abs(a) + f64::abs(d));
        let xi = Sym2::diag(a * s, d * s);
        let p = EnergyParams::new(lambda).expect("positive");
        if let Ok((v, _)) = rsgl_split(xi, lambda) {
            let e = qc_envelope(xi, &p);
            worst = worst.max((v - e).abs() / e.abs().max(1e-300));
        }
    }
    out.push(check(
        "two-level laminate equals envelope",
        worst <= 1e-12,
        format!("max rel err {worst:e}"),
    ));

    // discrete Airy identity
    let grid = Grid2D::unit_square(33).expect("valid grid");
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut u = ScalarField::from_fn(&grid, |x, y| {
            c[0] * (3.0 * x).sin() * y
                + c[1] * x * x * y
                + c[2] * (x * y).exp()
                + c[3] * (5.0 * y).cos()
        });
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let v = u.get(i as isize, j as isize) + 1e-3 * c[4] * rng.gen_range(-1.0..1.0);
                u.set(i, j, v);
            }
        }
        crate::grid::fill_free_ghosts(&mut u);
        if let Ok((div, scale)) = stress_divergence_residual(&u) {
            worst = worst.max(div / scale.max(1e-300));
        }
    }
    out.push(check(
        "discrete stress is divergence free",
        worst <= 1e-12,
        format!("max rel divergence {worst:e}"),
    ));

    // balance gate
    let curve = grid.boundary_curve();
    let pair = BoundaryLoad::Points(vec![
        PointLoad {
            x: [0.5, 0.0],
            v: [0.0, 1.0],
        },
        PointLoad {
            x: [0.5, 1.0],
            v: [0.0, -1.0],
        },
    ]);
    let lone = BoundaryLoad::Points(vec![PointLoad {
        x: [0.5, 0.0],
        v: [0.0, 1.0],
    }]);
    let ok =
        balance_check(&pair, &curve, BALANCE_TOL) && !balance_check(&lone, &curve, BALANCE_TOL);
    out.push(check(
        "balance validator",
        ok,
        "opposite pair accepted, single load rejected".into(),
    ));

    // objective gradients
    let g = Grid2D::unit_square(13).expect("valid grid");
    let data = BoundaryData::from_traces(
        &g,
        |x, y| x * x * y - 0.3 * y * y,
        |x, y| [2.0 * x * y, x * x - 0.6 * y],
    );
    let mut worst: f64 = 0.0;
    for obj in [
        Objective::finite(&g, &data, 50.0),
        Objective::limit(&g, &data),
    ]
    .into_iter()
    .flatten()
    {
        let x: Vec<f64> = (0..obj.len()).map(|_| rng.gen_range(-0.05..0.05)).collect();
        for eps in [1e-1, 1e-2, 1e-3] {
            let Ok((_, grad)) = obj.value_and_grad(&x, eps) else {
                worst = f64::INFINITY;
                continue;
            };
            for _ in 0..10 {
                let k = rng.gen_range(0..x.len());
                let h = 1e-6;
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[k] += h;
                xm[k] -= h;
                let fp = obj
                    .value_and_grad(&xp, eps)
                    .map(|v| v.0)
                    .unwrap_or(f64::NAN);
                let fm = obj
                    .value_and_grad(&xm, eps)
                    .map(|v| v.0)
                    .unwrap_or(f64::NAN);
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - grad[k]).abs() / grad[k].abs().max(fd.abs()).max(1e-3);
                worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            }
        }
    }
    out.push(check(
        "objective gradients",
        worst <= 1e-4,
        format!("max rel err {worst:e}"),
    ));

    // laminate certifies the envelope at a coarse resolution
    let xi = Sym2::diag(1.0, 0.5);
    let p = EnergyParams::new(4.0).expect("positive");
    let e = NestedLaminate::from_rsgl(xi, 4.0, LAMINATE_K_OUT, 32, 0.05, LAMINATE_RAMP)
        .map(|l| l.average_energy(|m| f_lambda(m, &p), 256));
    let (ok, detail) = match e {
        Ok(e) => (
            ((e - 5.0) / 5.0).abs() <= 0.05,
            format!("averaged energy {e:.5}"),
        ),
        Err(err) => (false, err.to_string()),
    };
    out.push(check("nested laminate energy", ok, detail));
    out
}

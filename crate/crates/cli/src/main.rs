//! Command-line surface: scattering solves, scaling studies, CSV emission,
//! and exponent fitting. The JSON report and CSV schemas are documented in
//! the repository README.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hodbf::fit::fit_exponent;
use hodbf::geometry::{load_cloud_csv, load_cloud_json, shape_generator, PointCloud, Shape};
use hodbf::kernels::{KernelSystem, PhysicalParams};
use hodbf::krylov::{
    far_field_pattern, solve_scattering, tfqmr_solve, ScatteringConfig, ScatteringOutcome,
    SolveFormat, SolverConfig,
};
use hodbf::serialize::{load_hodbf, save_hodbf};
use hodbf::types::{C64, CVec};
use serde_json::json;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "hodbf", version, about = "HOD-BF compressed scattering solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one plane-wave scattering problem and write result files.
    Solve(SolveArgs),
    /// Sweep problem sizes or frequencies and emit a CSV of run records.
    ScaleStudy(ScaleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Hodbf,
    Hodlr,
    Dense,
}

impl FormatArg {
    fn to_solve_format(self) -> SolveFormat {
        match self {
            FormatArg::Hodbf => SolveFormat::HodBf,
            FormatArg::Hodlr => SolveFormat::HodLr,
            FormatArg::Dense => SolveFormat::Dense,
        }
    }

    fn name(self) -> &'static str {
        match self {
            FormatArg::Hodbf => "hodbf",
            FormatArg::Hodlr => "hodlr",
            FormatArg::Dense => "dense",
        }
    }
}

#[derive(Args)]
struct GeometryArgs {
    /// Built-in shape generated on a cubic lattice.
    #[arg(long, default_value = "sphere")]
    shape: String,
    /// Sphere radius in meters.
    #[arg(long, default_value_t = 0.3)]
    radius: f64,
    /// Relative permittivity as `re,im` (imaginary part must be <= 0).
    #[arg(long, default_value = "2,0", value_parser = parse_complex)]
    eps: C64,
    /// Lattice pitch in meters.
    #[arg(long, default_value_t = 0.05)]
    spacing: f64,
    /// Plane-wave frequency in Hz.
    #[arg(long, default_value_t = 8.0e8)]
    freq: f64,
    /// Point-cloud file (.csv with x,y,z,eps_re,eps_im rows, or .json);
    /// overrides the shape flags.
    #[arg(long)]
    cloud: Option<PathBuf>,
    /// Cell volume for CSV clouds (JSON clouds carry their own).
    #[arg(long)]
    cell_volume: Option<f64>,
}

impl GeometryArgs {
    fn build_cloud(&self) -> Result<PointCloud> {
        if let Some(path) = &self.cloud {
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            return match ext {
                "json" => Ok(load_cloud_json(path)?),
                "csv" => {
                    let vc = self
                        .cell_volume
                        .ok_or_else(|| anyhow!("--cell-volume is required with a CSV cloud"))?;
                    Ok(load_cloud_csv(path, vc)?)
                }
                other => bail!("unsupported cloud extension `{other}` (expected csv or json)"),
            };
        }
        let shape = match self.shape.as_str() {
            "sphere" => Shape::Sphere { radius: self.radius, eps: self.eps },
            other => bail!("unsupported shape `{other}` (use --cloud for custom geometry)"),
        };
        Ok(shape_generator(&shape, self.spacing)?)
    }

    fn build_system(&self) -> Result<KernelSystem> {
        let cloud = self.build_cloud()?;
        let params = PhysicalParams::new(self.freq)?;
        Ok(KernelSystem::physical(params, cloud)?)
    }
}

#[derive(Args)]
struct ToleranceArgs {
    /// Construction (compression) tolerance.
    #[arg(long, default_value_t = 1e-4)]
    chi_con: f64,
    /// Factorization (inversion) tolerance; must be >= chi_con.
    #[arg(long, default_value_t = 1e-3)]
    chi_fact: f64,
    /// Iterative-solver relative residual target.
    #[arg(long, default_value_t = 1e-5)]
    chi_sol: f64,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    geometry: GeometryArgs,
    #[command(flatten)]
    tol: ToleranceArgs,
    /// Operator format for the forward matvec.
    #[arg(long, value_enum, default_value_t = FormatArg::Hodbf)]
    format: FormatArg,
    /// Factorize the compressed inverse and use it as a left preconditioner
    /// (hodbf format only).
    #[arg(long)]
    precond: bool,
    #[arg(long, default_value_t = 64)]
    leaf_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    /// Incidence direction as `x,y,z` (normalized internally).
    #[arg(long, default_value = "0,0,1", value_parser = parse_vec3)]
    direction: [f64; 3],
    /// Output CSV of solution coefficients (index, re, im).
    #[arg(long)]
    coeffs: Option<PathBuf>,
    /// Output JSON solve report (defaults to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Output CSV of the far-field pattern over a polar cut.
    #[arg(long)]
    far_field: Option<PathBuf>,
    /// Number of observation directions for --far-field.
    #[arg(long, default_value_t = 181)]
    far_field_count: usize,
    /// Save the constructed HOD-BF matrix to this file (hodbf format only).
    #[arg(long)]
    save_matrix: Option<PathBuf>,
    /// Load a previously saved HOD-BF matrix instead of reconstructing.
    #[arg(long)]
    load_matrix: Option<PathBuf>,
}

#[derive(Args)]
struct ScaleArgs {
    #[command(flatten)]
    geometry: GeometryArgs,
    #[command(flatten)]
    tol: ToleranceArgs,
    /// Comma-separated target point counts; sphere radius is derived from
    /// the lattice pitch for each (size sweep at fixed frequency).
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Comma-separated frequencies in Hz (frequency sweep at fixed size).
    #[arg(long, value_delimiter = ',')]
    freqs: Vec<f64>,
    /// Comma-separated formats to run at each sweep point.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "hodbf")]
    formats: Vec<FormatArg>,
    /// Skip the inverse factorization for hodbf runs.
    #[arg(long)]
    no_precond: bool,
    #[arg(long, default_value_t = 64)]
    leaf_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    /// Output CSV path; one row is appended (and flushed) per run.
    #[arg(long)]
    output: PathBuf,
}

fn parse_complex(s: &str) -> Result<C64, String> {
    let (re, im) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `re,im`, got `{s}`"))?;
    let re: f64 = re.trim().parse().map_err(|e| format!("bad real part: {e}"))?;
    let im: f64 = im.trim().parse().map_err(|e| format!("bad imaginary part: {e}"))?;
    Ok(C64::new(re, im))
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected `x,y,z`, got `{s}`"));
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.trim().parse().map_err(|e| format!("bad component: {e}"))?;
    }
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        return Err("direction must be nonzero".into());
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Any unit vector orthogonal to `d`, used as the plane-wave polarization.
fn orthogonal_unit(d: [f64; 3]) -> [f64; 3] {
    let trial = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let cross = [
        d[1] * trial[2] - d[2] * trial[1],
        d[2] * trial[0] - d[0] * trial[2],
        d[0] * trial[1] - d[1] * trial[0],
    ];
    let n = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    [cross[0] / n, cross[1] / n, cross[2] / n]
}

fn init_thread_pool() -> Result<()> {
    if let Ok(v) = std::env::var("HODBF_THREADS") {
        let n: usize = v.parse().context("HODBF_THREADS must be a positive integer")?;
        if n == 0 {
            bail!("HODBF_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn write_coeffs(path: &Path, x: &CVec) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "index,re,im")?;
    for (i, z) in x.iter().enumerate() {
        writeln!(w, "{i},{},{}", z.re, z.im)?;
    }
    Ok(())
}

fn write_far_field(path: &Path, sys: &KernelSystem, x: &CVec, count: usize) -> Result<()> {
    if count < 2 {
        bail!("--far-field-count must be at least 2");
    }
    let dirs: Vec<[f64; 3]> = (0..count)
        .map(|i| {
            let theta = std::f64::consts::PI * i as f64 / (count - 1) as f64;
            [theta.sin(), 0.0, theta.cos()]
        })
        .collect();
    let pattern = far_field_pattern(sys, x, &dirs)?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "theta_rad,re,im,abs")?;
    for (i, f) in pattern.iter().enumerate() {
        let theta = std::f64::consts::PI * i as f64 / (count - 1) as f64;
        writeln!(w, "{theta},{},{},{}", f.re, f.im, f.norm())?;
    }
    Ok(())
}

fn outcome_report_json(args: &SolveArgs, out: &ScatteringOutcome) -> serde_json::Value {
    json!({
        "n": out.n,
        "format": args.format.name(),
        "chi_con": args.tol.chi_con,
        "chi_fact": if args.precond { Some(args.tol.chi_fact) } else { None },
        "chi_sol": args.tol.chi_sol,
        "seed": args.seed,
        "preconditioned": args.precond,
        "construct_time_s": out.construct_time_s,
        "invert_time_s": if args.precond { Some(out.invert_time_s) } else { None },
        "solve_time_s": out.report.solve_time_s,
        "storage_units": out.storage_units,
        "max_rank": out.max_rank,
        "iterations": out.report.iterations,
        "converged": out.report.converged,
        "breakdown": out.report.breakdown,
        "matvec_count": out.report.matvec_count,
        "precond_count": out.report.precond_count,
        "est_residual": out.report.est_residual,
        "true_residual": out.report.true_residual,
    })
}

/// Solve through the save/load path: the forward HOD-BF matrix comes from a
/// file or is written to one, instead of living only in memory.
fn solve_with_serialized_matrix(args: &SolveArgs, sys: &KernelSystem, rhs: &CVec) -> Result<ScatteringOutcome> {
    if !matches!(args.format, FormatArg::Hodbf) {
        bail!("--save-matrix/--load-matrix require --format hodbf");
    }
    let (hb, construct_time_s) = match &args.load_matrix {
        Some(path) => (load_hodbf(path).context("loading matrix")?, 0.0),
        None => {
            let tree = sys.default_tree(args.leaf_size)?;
            let t0 = std::time::Instant::now();
            let hb = hodbf::hodbf::HodBfMatrix::construct(sys, &tree, args.tol.chi_con, args.seed)?;
            (hb, t0.elapsed().as_secs_f64())
        }
    };
    if hb.n() != sys.len() {
        bail!("loaded matrix has {} unknowns but the geometry has {}", hb.n(), sys.len());
    }
    if let Some(path) = &args.save_matrix {
        save_hodbf(&hb, path).context("saving matrix")?;
    }
    let stats = hb.stats();
    let (inv, invert_time_s) = if args.precond {
        let t1 = std::time::Instant::now();
        let inv = hb.invert(args.tol.chi_fact, args.seed.wrapping_add(1))?;
        (Some(inv), t1.elapsed().as_secs_f64())
    } else {
        (None, 0.0)
    };
    let solver = SolverConfig { tol: args.tol.chi_sol, max_iter: args.max_iter };
    let amul = |x: &CVec| hb.matvec(x);
    let (x, report) = match &inv {
        Some(inv) => {
            let pc = |r: &CVec| inv.apply_inverse(r);
            tfqmr_solve(&amul, Some(&pc), rhs, None, &solver)?
        }
        None => tfqmr_solve(&amul, None, rhs, None, &solver)?,
    };
    let inv_storage = inv.as_ref().map(|i| i.stats().storage_units).unwrap_or(0);
    Ok(ScatteringOutcome {
        x,
        report,
        n: hb.n(),
        construct_time_s,
        invert_time_s,
        storage_units: stats.storage_units + inv_storage,
        max_rank: stats.max_rank,
    })
}

fn cmd_solve(args: &SolveArgs) -> Result<()> {
    let sys = args.geometry.build_system()?;
    let pol = orthogonal_unit(args.direction);
    let rhs = sys.plane_wave_rhs(args.direction, pol)?;

    let outcome = if args.save_matrix.is_some() || args.load_matrix.is_some() {
        solve_with_serialized_matrix(args, &sys, &rhs)?
    } else {
        let cfg = ScatteringConfig {
            format: args.format.to_solve_format(),
            chi_con: args.tol.chi_con,
            chi_fact: args.tol.chi_fact,
            chi_sol: args.tol.chi_sol,
            leaf_size: args.leaf_size,
            seed: args.seed,
            max_iter: args.max_iter,
            use_precond: args.precond,
        };
        solve_scattering(&sys, &rhs, &cfg)?
    };

    if let Some(path) = &args.coeffs {
        write_coeffs(path, &outcome.x)?;
    }
    if let Some(path) = &args.far_field {
        write_far_field(path, &sys, &outcome.x, args.far_field_count)?;
    }
    let report = outcome_report_json(args, &outcome);
    match &args.report {
        Some(path) => {
            serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &report)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if !outcome.report.converged {
        bail!(
            "solver did not converge in {} iterations (true residual {:.3e})",
            outcome.report.iterations,
            outcome.report.true_residual
        );
    }
    Ok(())
}

/// One CSV row per run. Columns follow the RunRecord field order exactly;
/// unavailable fields are written as the literal `null`.
struct RunRecord {
    n: usize,
    format: &'static str,
    chi_con: f64,
    chi_fact: Option<f64>,
    chi_sol: f64,
    max_rank: Option<usize>,
    construct_time: Option<f64>,
    invert_time: Option<f64>,
    solve_time: Option<f64>,
    storage_units: Option<usize>,
    iterations: Option<usize>,
    /// "true", "false", or "error" for a failed sweep point.
    converged: &'static str,
    seed: u64,
}

const RUN_RECORD_HEADER: &str =
    "N,format,chi_con,chi_fact,chi_sol,max_rank,construct_time,invert_time,solve_time,storage_units,iterations,converged,seed";

impl RunRecord {
    fn to_csv_row(&self) -> String {
        fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "null".into(), |x| x.to_string())
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.format,
            self.chi_con,
            opt(&self.chi_fact),
            self.chi_sol,
            opt(&self.max_rank),
            opt(&self.construct_time),
            opt(&self.invert_time),
            opt(&self.solve_time),
            opt(&self.storage_units),
            opt(&self.iterations),
            self.converged,
            self.seed,
        )
    }
}

/// Sphere radius whose lattice discretization at pitch `spacing` holds
/// roughly `target` points.
fn radius_for_target(target: usize, spacing: f64) -> f64 {
    spacing * (3.0 * target as f64 / (4.0 * std::f64::consts::PI)).cbrt()
}

fn cmd_scale_study(args: &ScaleArgs) -> Result<()> {
    let size_sweep = !args.sizes.is_empty();
    let freq_sweep = !args.freqs.is_empty();
    if size_sweep == freq_sweep {
        bail!("provide exactly one of --sizes or --freqs");
    }
    let points = if size_sweep { args.sizes.len() } else { args.freqs.len() };
    if points < 3 {
        bail!("a scale study needs at least 3 sweep points");
    }
    if args.formats.is_empty() {
        bail!("at least one format is required");
    }

    let mut out = BufWriter::new(File::create(&args.output)?);
    writeln!(out, "{RUN_RECORD_HEADER}")?;
    out.flush()?;

    // per format: (N, construct_time), (N, storage), (N, max_rank)
    let mut fits: Vec<(&'static str, Vec<(f64, f64)>, Vec<(f64, f64)>, Vec<(f64, f64)>)> =
        args.formats.iter().map(|f| (f.name(), vec![], vec![], vec![])).collect();

    for i in 0..points {
        let geo = &args.geometry;
        let (radius, freq) = if size_sweep {
            (radius_for_target(args.sizes[i], geo.spacing), geo.freq)
        } else {
            (geo.radius, args.freqs[i])
        };
        let shape = Shape::Sphere { radius, eps: geo.eps };
        let cloud = shape_generator(&shape, geo.spacing)?;
        let sys = KernelSystem::physical(PhysicalParams::new(freq)?, cloud)?;
        let direction = [0.0, 0.0, 1.0];
        let rhs = sys.plane_wave_rhs(direction, [1.0, 0.0, 0.0])?;

        for (fi, format) in args.formats.iter().enumerate() {
            let precond = matches!(format, FormatArg::Hodbf) && !args.no_precond;
            let cfg = ScatteringConfig {
                format: format.to_solve_format(),
                chi_con: args.tol.chi_con,
                chi_fact: args.tol.chi_fact,
                chi_sol: args.tol.chi_sol,
                leaf_size: args.leaf_size,
                seed: args.seed,
                max_iter: args.max_iter,
                use_precond: precond,
            };
            let record = match solve_scattering(&sys, &rhs, &cfg) {
                Ok(o) => {
                    let (_, times, mems, ranks) = &mut fits[fi];
                    times.push((o.n as f64, o.construct_time_s));
                    mems.push((o.n as f64, o.storage_units as f64));
                    ranks.push((o.n as f64, o.max_rank as f64));
                    RunRecord {
                        n: o.n,
                        format: format.name(),
                        chi_con: cfg.chi_con,
                        chi_fact: precond.then_some(cfg.chi_fact),
                        chi_sol: cfg.chi_sol,
                        max_rank: Some(o.max_rank),
                        construct_time: Some(o.construct_time_s),
                        invert_time: precond.then_some(o.invert_time_s),
                        solve_time: Some(o.report.solve_time_s),
                        storage_units: Some(o.storage_units),
                        iterations: Some(o.report.iterations),
                        converged: if o.report.converged { "true" } else { "false" },
                        seed: cfg.seed,
                    }
                }
                Err(e) => {
                    eprintln!("sweep point {} ({}) failed: {e}", sys.len(), format.name());
                    RunRecord {
                        n: sys.len(),
                        format: format.name(),
                        chi_con: cfg.chi_con,
                        chi_fact: precond.then_some(cfg.chi_fact),
                        chi_sol: cfg.chi_sol,
                        max_rank: None,
                        construct_time: None,
                        invert_time: None,
                        solve_time: None,
                        storage_units: None,
                        iterations: None,
                        converged: "error",
                        seed: cfg.seed,
                    }
                }
            };
            writeln!(out, "{}", record.to_csv_row())?;
            out.flush()?;
        }
    }

    for (name, times, mems, ranks) in &fits {
        if times.len() >= 3 {
            println!(
                "{name}: construct_time exponent = {:.3}, storage exponent = {:.3}, max_rank exponent = {:.3}",
                fit_exponent(times)?,
                fit_exponent(mems)?,
                fit_exponent(ranks)?,
            );
        } else {
            println!("{name}: fewer than 3 successful points, no exponent fit");
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    init_thread_pool()?;
    let cli = Cli::parse();
    match &cli.cmd {
        Command::Solve(args) => cmd_solve(args),
        Command::ScaleStudy(args) => cmd_scale_study(args),
    }
}

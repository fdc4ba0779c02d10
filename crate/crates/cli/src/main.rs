use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use rwb::exact_ot::exact_distance;
use rwb::experiments::{records_to_csv, run_sweep_partial, ExperimentConfig, Scenario, SweepOutcome, CSV_HEADER};
use rwb::free_support::{free_support_from, kmeans_init, FreeSupportOptions, MassSolver};
use rwb::measures::{image_to_measure, load_measure, GrayImage, DEFAULT_PRUNE_THRESHOLD};
use rwb::{ibp_barycenter, sinkhorn_distance, BarycenterProblem, CostSpec, DiscreteMeasure, ObjectiveMethod, SinkhornParams};

#[derive(Parser, Debug)]
#[command(name = "rwb", version, about = "Robust Wasserstein distances and barycenters")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Distance between two measure files, printed as JSON.
    Dist(DistArgs),
    /// Barycenter of every measure CSV or PGM image in a directory.
    Barycenter(BarycenterArgs),
    /// Run an experiment scenario and write its record CSV.
    Simulate(SimulateArgs),
    /// Convert between measure CSV and PGM image files.
    Convert(ConvertArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Exact,
    Sinkhorn,
    Ibp,
    Free,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().unwrap().get_name())
    }
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Truncation level; `inf` gives the classical distance.
    #[arg(long, value_parser = parse_lambda, default_value = "inf", allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    p: f64,
}

impl CostArgs {
    fn spec(&self) -> Result<CostSpec> {
        CostSpec::new(self.p, self.lambda).map_err(Into::into)
    }
}

#[derive(Args, Debug)]
struct SolverArgs {
    /// Absolute entropic regularization; the default is relative to the cost scale.
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

impl SolverArgs {
    fn params(&self) -> SinkhornParams {
        let mut params = match self.epsilon {
            Some(e) => SinkhornParams::absolute(e),
            None => SinkhornParams::default(),
        };
        if let Some(m) = self.max_iter {
            params.max_iter = m;
        }
        if let Some(t) = self.tol {
            params.tol = t;
        }
        params
    }
}

#[derive(Args, Debug)]
struct DistArgs {
    #[arg(long)]
    mu: PathBuf,
    #[arg(long)]
    nu: PathBuf,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long, value_enum, default_value_t = Method::Exact)]
    method: Method,
    #[command(flatten)]
    solver: SolverArgs,
    /// Divide weights by their sum instead of rejecting unnormalized files.
    #[arg(long)]
    renormalize: bool,
}

#[derive(Args, Debug)]
struct BarycenterArgs {
    /// Directory of `.csv` measures or `.pgm` images (not mixed).
    #[arg(long)]
    inputs: PathBuf,
    /// Output measure CSV; image inputs also get a `.pgm` next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long, value_enum, default_value_t = Method::Free)]
    method: Method,
    #[command(flatten)]
    solver: SolverArgs,
    /// Support size (k-means centroids or grid points per the support spec).
    #[arg(long = "R", default_value_t = 40)]
    r: usize,
    /// `grid`, `kmeans` or `file:<path>`.
    #[arg(long, default_value = "kmeans")]
    support: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Outer iterations of the free-support loop.
    #[arg(long, default_value_t = 20)]
    outer_max: usize,
    #[arg(long, default_value_t = 1e-6)]
    outer_tol: f64,
    #[arg(long)]
    renormalize: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// ellipse_images, contamination, heavytail or pipeline1d.
    scenario: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Contamination ratios as `start:stop:step`.
    #[arg(long)]
    ratios: Option<String>,
    /// Comma-separated λ grid.
    #[arg(long)]
    lambdas: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    p: Option<f64>,
    #[arg(long = "R")]
    r: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// `.csv` measure or `.pgm` image.
    input: PathBuf,
    /// Target path; the extension picks the format.
    #[arg(long)]
    out: PathBuf,
    /// Image size for measure-to-image conversion (default: fit the support).
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    renormalize: bool,
}

/// Marks errors that come from bad input rather than a failed solve.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// A sweep that started and then failed; always a runtime failure.
#[derive(Debug)]
struct SweepFailed;

impl fmt::Display for SweepFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("sweep stopped early; partial records written")
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn parse_lambda(s: &str) -> std::result::Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "+inf" => Ok(f64::INFINITY),
        t => t.parse::<f64>().map_err(|e| format!("{s}: {e}")),
    }
}

fn parse_lambdas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| parse_lambda(t).map_err(invalid))
        .collect()
}

fn parse_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|t| t.trim().parse::<f64>().map_err(|e| invalid(format!("ratios `{s}`: {e}"))))
        .collect::<Result<_>>()?;
    let [a, b, step] = parts[..] else {
        return Err(invalid(format!("ratios must be start:stop:step, got `{s}`")));
    };
    if !(step > 0.0) || b < a {
        return Err(invalid(format!("ratios `{s}` describe an empty range")));
    }
    // count first so that 0:0.25:0.01 hits 0.25 exactly
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| ((a + k as f64 * step) * 1e12).round() / 1e12).collect())
}

fn read_measure(path: &Path, renormalize: bool) -> Result<DiscreteMeasure> {
    if !path.is_file() {
        return Err(invalid(format!("{}: no such file", path.display())));
    }
    let m = if is_pgm(path) {
        image_to_measure(&GrayImage::load(path)?)?
    } else {
        load_measure(path, renormalize)?
    };
    Ok(m)
}

fn is_pgm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn cmd_dist(args: &DistArgs) -> Result<()> {
    let mu = read_measure(&args.mu, args.renormalize).with_context(|| format!("reading {}", args.mu.display()))?;
    let nu = read_measure(&args.nu, args.renormalize).with_context(|| format!("reading {}", args.nu.display()))?;
    let spec = args.cost.spec()?;
    let out = match args.method {
        Method::Exact => {
            let r = exact_distance(&mu, &nu, &spec)?;
            json!({
                "distance": r.distance,
                "cost": r.cost,
                "method": "exact",
                "iterations": 0,
                "marginal_error": r.plan.marginal_error(),
            })
        }
        Method::Sinkhorn => {
            let r = sinkhorn_distance(&mu, &nu, &spec, &args.solver.params())?;
            json!({
                "distance": r.distance,
                "cost": r.cost,
                "method": "sinkhorn",
                "iterations": r.iterations,
                "marginal_error": r.marginal_error,
            })
        }
        m => return Err(invalid(format!("dist supports exact and sinkhorn, not {m}"))),
    };
    println!("{out}");
    Ok(())
}

struct Inputs {
    measures: Vec<DiscreteMeasure>,
    /// `(rows, cols)` when every input is an image of that size.
    image_shape: Option<(usize, usize)>,
}

fn read_inputs(dir: &Path, renormalize: bool) -> Result<Inputs> {
    if !dir.is_dir() {
        return Err(invalid(format!("{}: not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("csv") || e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(invalid(format!("{}: no .csv or .pgm inputs", dir.display())));
    }
    let images = paths.iter().filter(|p| is_pgm(p)).count();
    if images != 0 && images != paths.len() {
        return Err(invalid("inputs mix measure CSVs and images"));
    }
    let mut measures = Vec::with_capacity(paths.len());
    let mut shape = None;
    for p in &paths {
        if images > 0 {
            let img = GrayImage::load(p).with_context(|| format!("reading {}", p.display()))?;
            let s = (img.rows(), img.cols());
            if shape.is_some_and(|t| t != s) {
                return Err(invalid(format!("{}: image size differs from the other inputs", p.display())));
            }
            shape = Some(s);
            measures.push(image_to_measure(&img).with_context(|| format!("reading {}", p.display()))?);
        } else {
            measures.push(load_measure(p, renormalize).with_context(|| format!("reading {}", p.display()))?);
        }
    }
    Ok(Inputs {
        measures,
        image_shape: shape,
    })
}

/// Lattice with about `r` points over the bounding box of the inputs.
fn bounding_grid(problem: &BarycenterProblem, r: usize) -> Vec<Vec<f64>> {
    let d = problem.dim();
    let (pts, _) = problem.pooled();
    let lo: Vec<f64> = (0..d).map(|k| pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..d).map(|k| pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let per_axis = ((r.max(1) as f64).powf(1.0 / d as f64).round() as usize).max(1);
    let axis = |k: usize| -> Vec<f64> {
        if per_axis == 1 || hi[k] == lo[k] {
            return vec![0.5 * (lo[k] + hi[k])];
        }
        (0..per_axis)
            .map(|i| lo[k] + (hi[k] - lo[k]) * i as f64 / (per_axis - 1) as f64)
            .collect()
    };
    let mut grid = vec![vec![]];
    for k in 0..d {
        let a = axis(k);
        grid = grid
            .into_iter()
            .flat_map(|g: Vec<f64>| {
                a.iter().map(move |&x| {
                    let mut v = g.clone();
                    v.push(x);
                    v
                })
            })
            .collect();
    }
    grid
}

fn resolve_support(args: &BarycenterArgs, problem: &BarycenterProblem, shape: Option<(usize, usize)>) -> Result<Vec<Vec<f64>>> {
    if args.r == 0 {
        return Err(invalid("--R must be at least 1"));
    }
    let support = match args.support.as_str() {
        "grid" => match shape {
            Some((rows, cols)) => (0..rows)
                .flat_map(|r| (0..cols).map(move |c| vec![r as f64, c as f64]))
                .collect(),
            None => bounding_grid(problem, args.r),
        },
        "kmeans" => kmeans_init(problem, args.r, args.seed),
        s => match s.strip_prefix("file:") {
            Some(path) => read_measure(Path::new(path), true)?.points_vec(),
            None => return Err(invalid(format!("--support must be grid, kmeans or file:<path>, got `{s}`"))),
        },
    };
    if support.iter().any(|p| p.len() != problem.dim()) {
        return Err(invalid("support dimension differs from the inputs"));
    }
    Ok(support)
}

fn cmd_barycenter(args: &BarycenterArgs) -> Result<()> {
    let inputs = read_inputs(&args.inputs, args.renormalize)?;
    let spec = args.cost.spec()?;
    let problem = BarycenterProblem::uniform(inputs.measures, spec)?;
    let support = resolve_support(args, &problem, inputs.image_shape)?;
    let params = args.solver.params();
    let (barycenter, summary) = match args.method {
        Method::Ibp => {
            let res = ibp_barycenter(&problem, &support, &params)?;
            let m = res.measure(&support)?.prune(DEFAULT_PRUNE_THRESHOLD);
            let summary = json!({
                "method": "ibp",
                "objective": res.objective,
                "iterations": res.iterations,
                "marginal_error": res.marginal_error,
            });
            (m, summary)
        }
        Method::Free => {
            let options = FreeSupportOptions {
                mass_solver: MassSolver::Ibp(params),
                evaluation: ObjectiveMethod::Exact { cap: usize::MAX },
                outer_max: args.outer_max,
                outer_tol: args.outer_tol,
            };
            let res = free_support_from(&problem, &support, None, &options)?;
            let summary = json!({
                "method": "free",
                "objective": res.objective_trace.last().copied().unwrap_or(res.initial_objective),
                "initial_objective": res.initial_objective,
                "objective_trace": res.objective_trace,
                "iterations": res.outer_iterations,
                "converged": res.converged,
            });
            (res.barycenter.merge_duplicates(), summary)
        }
        m => return Err(invalid(format!("barycenter supports ibp and free, not {m}"))),
    };
    barycenter.save(&args.out)?;
    let mut summary = summary;
    summary["support_size"] = json!(barycenter.len());
    summary["out"] = json!(args.out.display().to_string());
    if let Some((rows, cols)) = inputs.image_shape {
        let pgm = args.out.with_extension("pgm");
        GrayImage::splat(&barycenter, rows, cols)?.save(&pgm)?;
        summary["image"] = json!(pgm.display().to_string());
    }
    println!("{summary}");
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let scenario: Scenario = args.scenario.parse().map_err(|e: rwb::Error| invalid(e.to_string()))?;
    let mut cfg = if args.paper_scale {
        ExperimentConfig::full_scale(scenario, args.seed)
    } else {
        ExperimentConfig::desk(scenario, args.seed)
    };
    if let Some(r) = &args.ratios {
        cfg.ratios = parse_range(r)?;
    }
    if let Some(l) = &args.lambdas {
        cfg.lambda_grid = parse_lambdas(l)?;
    }
    if let Some(p) = args.p {
        cfg.p = p;
    }
    if let Some(r) = args.r {
        cfg.r = r;
    }
    if args.epsilon.is_some() {
        cfg.epsilon = args.epsilon;
    }
    cfg.validate()?;

    let outcome = run_sweep_partial(&cfg);
    let csv = render_outcome(&outcome, scenario, cfg.seed);
    match &args.out {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    match outcome.error {
        Some(e) => Err(anyhow!(e).context(SweepFailed)),
        None => Ok(()),
    }
}

/// Record CSV, ending in a `failed` marker row when the sweep stopped early.
fn render_outcome(outcome: &SweepOutcome, scenario: Scenario, seed: u64) -> String {
    let mut csv = records_to_csv(&outcome.records);
    if csv.is_empty() {
        csv = format!("{CSV_HEADER}\n");
    }
    if let Some(e) = &outcome.error {
        let msg = e.to_string().replace([',', '\n'], ";");
        csv.push_str(&format!("{scenario},nan,,failed: {msg},nan,{seed}\n"));
    }
    csv
}

fn cmd_convert(args: &ConvertArgs) -> Result<()> {
    let m = read_measure(&args.input, args.renormalize).with_context(|| format!("reading {}", args.input.display()))?;
    if is_pgm(&args.out) {
        if m.dim() != 2 {
            return Err(invalid("only 2-D measures convert to images"));
        }
        let fit = |k: usize| m.points().map(|p| p[k].round().max(0.0) as usize + 1).max().unwrap_or(1);
        let rows = args.rows.unwrap_or_else(|| fit(0));
        let cols = args.cols.unwrap_or_else(|| fit(1));
        if rows == 0 || cols == 0 {
            return Err(invalid("image size must be positive"));
        }
        GrayImage::splat(&m, rows, cols)?.save(&args.out)?;
    } else {
        m.save(&args.out)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Dist(a) => cmd_dist(a),
        Command::Barycenter(a) => cmd_barycenter(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Convert(a) => cmd_convert(a),
    }
}

/// 2 for bad input, 1 for solver or I/O failures after validation.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<SweepFailed>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<rwb::Error>() {
            use rwb::Error::*;
            return match e {
                Parse { .. }
                | DimensionMismatch { .. }
                | EmptyMeasure
                | NegativeWeight { .. }
                | NonPositiveMass(_)
                | NotNormalized(_)
                | NonFinite(_)
                | ZeroImage
                | OracleCap { .. }
                | CandidateCap { .. }
                | InvalidParameter(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rwb::experiments::RunRecord;

    #[test]
    fn ratio_range_hits_the_endpoint() {
        let r = parse_range("0:0.25:0.01").unwrap();
        assert_eq!(r.len(), 26);
        assert_eq!(r[0], 0.0);
        assert_eq!(r[25], 0.25);
        assert_eq!(r[7], 0.07);
        assert!(parse_range("0:0.25").is_err());
        assert!(parse_range("0.3:0.1:0.1").is_err());
        assert!(parse_range("0:1:0").is_err());
    }

    #[test]
    fn lambda_lists_accept_inf() {
        assert_eq!(parse_lambdas("30, 40,inf").unwrap(), vec![30.0, 40.0, f64::INFINITY]);
        assert!(parse_lambdas("30,x").is_err());
    }

    #[test]
    fn failed_sweep_keeps_records_and_appends_marker() {
        let outcome = SweepOutcome {
            records: vec![RunRecord {
                scenario: Scenario::Heavytail,
                lambda: 30.0,
                ratio: None,
                metric: "w_to_true".into(),
                value: 1.5,
                seed: 4,
            }],
            error: Some(rwb::Error::Internal("pivot, stalled".into())),
        };
        let csv = render_outcome(&outcome, Scenario::Heavytail, 4);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("heavytail,nan,,failed: "));
        assert_eq!(lines[2].split(',').count(), 6);
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&invalid("bad")), 2);
        assert_eq!(exit_code(&anyhow!(rwb::Error::EmptyMeasure).context("reading x")), 2);
        assert_eq!(exit_code(&anyhow!(rwb::Error::NonFiniteScaling)), 1);
        assert_eq!(exit_code(&anyhow!(rwb::Error::InvalidParameter("x".into())).context(SweepFailed)), 1);
    }
}

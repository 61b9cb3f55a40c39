//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE`, a flat JSON object whose keys are
//! the long flag names with `_` for `-`. Flags given on the command line win.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::adapt::{Bandwidth, KernelShape, KernelSpec, WeightOptions, design_density, importance_weights, kde_fit};
use crate::design::{
    CandidateGrid, DesignCriterion, SolverOptions, max_sensitivity, prune_design, solve_optimal_design,
};
use crate::error::Error;
use crate::estimator::{
    Aggregation, CovariateMode, InitMode, OdiwiConfig, TargetDensity, naive_estimate, odiwi_estimate,
};
use crate::glm::{Family, FamilyKind, FeatureMap};
use crate::inference::{BootstrapOptions, Resample, bootstrap_ci};
use crate::io::{self, DesignArtifact, Metadata};
use crate::sim::{NAIVE, ODIWI, SimConfig, SummaryRow, run_experiment, simulate_replication, summarize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "odiwi",
    version,
    about = "Optimal-design importance weighting for two-stage exposure studies"
)]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "ODIWI_THREADS")]
    threads: Option<usize>,
    /// Flat JSON file of default flag values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte-Carlo comparison at a single exposure effect.
    Simulate(SimulateArgs),
    /// Monte-Carlo comparison over a grid of exposure effects.
    Sweep(SweepArgs),
    /// Fit both estimators to data files.
    Estimate(EstimateArgs),
    /// Locally optimal design for a one-exposure GLM.
    Design(DesignArgs),
    /// Importance weights of first-stage sites for a given design.
    Weights(WeightsArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct EstimatorFlags {
    /// Number of ODIWI iterations L.
    #[arg(long)]
    iters: Option<usize>,
    /// Number of initializations M.
    #[arg(long)]
    inits: Option<usize>,
    /// Momentum alpha in [0, 1].
    #[arg(long)]
    momentum: Option<f64>,
    /// uniform or dirichlet.
    #[arg(long)]
    init_mode: Option<String>,
    /// after_first or after_last.
    #[arg(long)]
    aggregation: Option<String>,
    /// D, A or E.
    #[arg(long)]
    criterion: Option<String>,
    /// gaussian, uniform or triangle.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    bandwidth_fraction: Option<f64>,
    #[arg(long)]
    clip_quantile: Option<f64>,
    #[arg(long)]
    grid_resolution: Option<usize>,
    /// ignore or median.
    #[arg(long)]
    covariate_mode: Option<String>,
    /// design or source.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    ridge: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct SimFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n_first: Option<usize>,
    #[arg(long)]
    n_second: Option<usize>,
    /// Number of geographic covariates d.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    sigma_eps: Option<f64>,
    #[arg(long)]
    beta0: Option<f64>,
    /// Second-stage covariate mean shift in standard deviations.
    #[arg(long)]
    shift: Option<f64>,
    /// Run replications on one thread.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    serial: Option<bool>,
    /// Metrics CSV; summary and trace CSVs are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct SimulateArgs {
    #[arg(long, allow_hyphen_values = true)]
    beta_x: Option<f64>,
    /// Also write the first replication's datasets to this directory.
    #[arg(long)]
    write_data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    sim: SimFlags,
    #[command(flatten)]
    #[serde(flatten)]
    est: EstimatorFlags,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct SweepArgs {
    /// Comma-separated exposure effects.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta_grid: Option<Vec<f64>>,
    #[command(flatten)]
    #[serde(flatten)]
    sim: SimFlags,
    #[command(flatten)]
    #[serde(flatten)]
    est: EstimatorFlags,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct EstimateArgs {
    #[arg(long)]
    first_stage: Option<PathBuf>,
    #[arg(long)]
    second_stage: Option<PathBuf>,
    /// logit or gaussian.
    #[arg(long)]
    family: Option<String>,
    /// Number of bootstrap replicates (at least 50).
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// Resample subjects only, keeping the monitoring sites fixed.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    second_stage_only: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// Result JSON; the trajectory CSV is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    est: EstimatorFlags,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct DesignArgs {
    /// Comma-separated coefficients, intercept first.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta: Option<Vec<f64>>,
    #[arg(long)]
    family: Option<String>,
    /// Gaussian error variance.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Exposure bounds `lo,hi`, or `lo1,hi1,lo2,hi2` for two exposures.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    range: Option<Vec<f64>>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Merge radius for pruning; defaults to 1% of the range width.
    #[arg(long)]
    merge_radius: Option<f64>,
    #[arg(long)]
    min_weight: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct WeightsArgs {
    #[arg(long)]
    first_stage: Option<PathBuf>,
    /// Design JSON as written by the design command.
    #[arg(long)]
    design: Option<PathBuf>,
    #[arg(long)]
    kernel: Option<String>,
    /// Target kernel bandwidth; defaults to 10% of the exposure range.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    clip_quantile: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Parses `argv` (including the program name), runs the command and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(line) => {
            println!("{line}");
            EXIT_OK
        }
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            if e.is_data_error() { EXIT_DATA } else { EXIT_NUMERICAL }
        }
    }
}

fn execute(cli: Cli) -> CliResult<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage("--threads must be positive");
        }
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let file = cli.config.as_deref().map(read_config).transpose()?;
    match cli.command {
        Command::Simulate(a) => simulate(merge(a, file)?),
        Command::Sweep(a) => sweep(merge(a, file)?),
        Command::Estimate(a) => estimate(merge(a, file)?),
        Command::Design(a) => design(merge(a, file)?),
        Command::Weights(a) => weights(merge(a, file)?),
    }
}

fn read_config(path: &Path) -> CliResult<Map<String, Value>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Run(Error::Io(format!("{}: {e}", path.display()))))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => usage(format!("{}: config must be a JSON object", path.display())),
        Err(e) => usage(format!("{}: {e}", path.display())),
    }
}

/// Fills flags missing from the command line with config-file values.
fn merge<T: Serialize + for<'de> Deserialize<'de>>(cli: T, file: Option<Map<String, Value>>) -> CliResult<T> {
    let Some(file) = file else { return Ok(cli) };
    let Value::Object(mut fields) = serde_json::to_value(&cli).expect("flag structs serialize") else {
        unreachable!("flag structs serialize to objects")
    };
    for (k, v) in file {
        match fields.get_mut(&k) {
            None => return usage(format!("unknown config key {k:?}")),
            Some(slot) if slot.is_null() => *slot = v,
            Some(_) => {}
        }
    }
    serde_json::from_value(Value::Object(fields)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn parse_family(s: Option<&str>) -> CliResult<FamilyKind> {
    s.unwrap_or("logit")
        .parse()
        .map_err(|e: Error| CliError::Usage(e.to_string()))
}

fn odiwi_config(f: &EstimatorFlags, base: OdiwiConfig) -> CliResult<OdiwiConfig> {
    let mut c = base;
    if let Some(v) = f.iters {
        c.iterations = v;
    }
    if let Some(v) = f.inits {
        c.num_inits = v;
    }
    if let Some(v) = f.momentum {
        c.momentum = v;
    }
    if let Some(v) = &f.init_mode {
        c.init_mode = match v.as_str() {
            "uniform" => InitMode::Uniform,
            "dirichlet" | "dirichlet_random" => InitMode::DirichletRandom,
            _ => return usage(format!("unknown init mode {v:?}")),
        };
    }
    if let Some(v) = &f.aggregation {
        c.aggregation = match v.as_str() {
            "after_first" | "after_first_iteration" => Aggregation::AfterFirstIteration,
            "after_last" | "after_last_iteration" => Aggregation::AfterLastIteration,
            _ => return usage(format!("unknown aggregation {v:?}")),
        };
    }
    if let Some(v) = &f.criterion {
        c.criterion = v.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = &f.kernel {
        c.kernel = v.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = f.bandwidth_fraction {
        c.bandwidth_fraction = v;
    }
    if let Some(v) = f.clip_quantile {
        c.clip_quantile = (v < 1.0).then_some(v);
    }
    if let Some(v) = f.grid_resolution {
        c.grid_resolution = v;
    }
    if let Some(v) = &f.covariate_mode {
        c.covariate_mode = match v.as_str() {
            "ignore" => CovariateMode::Ignore,
            "median" => CovariateMode::Median,
            _ => return usage(format!("unknown covariate mode {v:?}")),
        };
    }
    if let Some(v) = &f.target {
        c.target = match v.as_str() {
            "design" | "optimal_design" => TargetDensity::OptimalDesign,
            "source" => TargetDensity::Source,
            _ => return usage(format!("unknown target {v:?}")),
        };
    }
    if let Some(v) = f.ridge {
        c.ridge = v;
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn sim_config(f: &SimFlags, beta_x: f64) -> CliResult<SimConfig> {
    let Some(seed) = f.seed else {
        return usage("--seed is required");
    };
    let d = SimConfig::default();
    let c = SimConfig {
        n_first: f.n_first.unwrap_or(d.n_first),
        n_second: f.n_second.unwrap_or(d.n_second),
        covariate_dim: f.dim.unwrap_or(d.covariate_dim),
        gamma: None,
        sigma_eps: f.sigma_eps,
        snr: f.snr.unwrap_or(d.snr),
        beta0: f.beta0.unwrap_or(d.beta0),
        beta_x,
        replications: f.reps.unwrap_or(d.replications),
        shift: f.shift.unwrap_or(d.shift),
        seed,
    };
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configs serialize")
}

fn run_sim(
    cmd: &str,
    sim: &SimFlags,
    est: &EstimatorFlags,
    grid: &[f64],
    write_data: Option<&Path>,
) -> CliResult<String> {
    let out = required(&sim.out, "out")?.clone();
    let scfg = sim_config(sim, grid[0])?;
    let ocfg = odiwi_config(est, OdiwiConfig::single_chain(10))?;
    if let Some(dir) = write_data {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        let rep = simulate_replication(&scfg, 0)?;
        io::write_first_stage(&dir.join("first_stage.csv"), &rep.first)?;
        io::write_second_stage(&dir.join("second_stage.csv"), &rep.second.data)?;
    }
    let start = Instant::now();
    let result = run_experiment(&scfg, grid, &ocfg, !sim.serial.unwrap_or(false))?;
    let summary = summarize(&result.rows);
    let meta = Metadata::new(
        cmd,
        Some(scfg.seed),
        serde_json::json!({ "simulation": to_value(&scfg), "beta_grid": grid, "estimator": to_value(&ocfg) }),
    );
    io::write_metrics(&out, &result.rows, &meta)?;
    io::write_summary(&io::companion_path(&out, "_summary.csv"), &summary, &meta)?;
    io::write_traces(&io::companion_path(&out, "_trace.csv"), &result.traces, &meta)?;
    let cell = |est: &str| -> Option<&SummaryRow> { summary.iter().rev().find(|s| s.estimator == est) };
    let brief = match (cell(NAIVE), cell(ODIWI)) {
        (Some(n), Some(o)) => format!(
            "beta_x={}: mean |error| naive {:.4}, odiwi {:.4}",
            n.beta_x_true, n.mean_abs_error, o.mean_abs_error
        ),
        _ => String::new(),
    };
    Ok(format!(
        "{cmd}: {} rows in {:.1}s -> {}; {brief}",
        result.rows.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    ))
}

fn simulate(a: SimulateArgs) -> CliResult<String> {
    let b = a.beta_x.unwrap_or(SimConfig::default().beta_x);
    run_sim("simulate", &a.sim, &a.est, &[b], a.write_data.as_deref())
}

fn sweep(a: SweepArgs) -> CliResult<String> {
    let grid = a.beta_grid.clone().unwrap_or_else(|| vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    if grid.is_empty() || grid.iter().any(|b| !b.is_finite()) {
        return usage("--beta-grid needs finite values");
    }
    run_sim("sweep", &a.sim, &a.est, &grid, None)
}

#[derive(Serialize)]
struct EstimateArtifact<'a> {
    #[serde(flatten)]
    result: &'a crate::estimator::OdiwiResult,
    naive_beta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<BootstrapSummary>,
}

#[derive(Serialize)]
struct BootstrapSummary {
    replicates: usize,
    failures: usize,
    level: f64,
    std_error: f64,
    lower: f64,
    upper: f64,
}

fn estimate(a: EstimateArgs) -> CliResult<String> {
    let family = parse_family(a.family.as_deref())?;
    let out = required(&a.out, "out")?.clone();
    let mut cfg = odiwi_config(&a.est, OdiwiConfig::default())?;
    cfg.seed = a.seed.unwrap_or(0);
    let (first, r1) = io::load_first_stage(required(&a.first_stage, "first-stage")?)?;
    let (second, r2) = io::load_second_stage(required(&a.second_stage, "second-stage")?, Some(family))?;
    eprintln!("loaded {r1}");
    eprintln!("loaded {r2}");
    let naive = naive_estimate(&first, &second, family)?;
    let (result, boot) = match a.bootstrap {
        Some(b) => {
            let opts = BootstrapOptions {
                replicates: b,
                level: a.level.unwrap_or(0.95),
                seed: cfg.seed,
                resample: if a.second_stage_only.unwrap_or(false) {
                    Resample::SecondStageOnly
                } else {
                    Resample::BothStages
                },
                ..Default::default()
            };
            if b < crate::inference::MIN_REPLICATES || !(opts.level > 0.0 && opts.level < 1.0) {
                return usage(format!(
                    "--bootstrap needs at least {} replicates and --level in (0, 1)",
                    crate::inference::MIN_REPLICATES
                ));
            }
            let r = bootstrap_ci(&first, &second, family, &cfg, &opts)?;
            let summary = BootstrapSummary {
                replicates: b,
                failures: r.failures,
                level: r.level,
                std_error: r.std_error,
                lower: r.lower,
                upper: r.upper,
            };
            (r.point, Some((summary, r.replicates)))
        }
        None => (odiwi_estimate(&first, &second, family, &cfg)?, None),
    };
    let meta = Metadata::new(
        "estimate",
        Some(cfg.seed),
        serde_json::json!({
            "estimator": to_value(&cfg),
            "family": to_value(&family),
            "first_stage": r1,
            "second_stage": r2,
            "bootstrap": a.bootstrap,
            "level": a.level,
            "second_stage_only": a.second_stage_only.unwrap_or(false),
        }),
    );
    if let Some((_, reps)) = &boot {
        io::write_replicates(&io::companion_path(&out, "_replicates.csv"), reps, &meta)?;
    }
    let ee = result.exposure_effect();
    let naive_ee = naive.fit.beta[result.exposure_index];
    let artifact = EstimateArtifact {
        result: &result,
        naive_beta: naive.fit.beta.iter().copied().collect(),
        bootstrap: boot.map(|(s, _)| s),
    };
    io::write_json_with_metadata(&out, &artifact, &meta)?;
    io::write_trajectory(&io::companion_path(&out, "_trajectory.csv"), &result, &meta)?;
    let ci = artifact
        .bootstrap
        .as_ref()
        .map(|b| format!(", {:.0}% CI [{:.4}, {:.4}]", 100.0 * b.level, b.lower, b.upper))
        .unwrap_or_default();
    Ok(format!(
        "estimate: beta_x odiwi {ee:.6}{ci}, naive {naive_ee:.6} -> {}",
        out.display()
    ))
}

fn design(a: DesignArgs) -> CliResult<String> {
    let out = required(&a.out, "out")?.clone();
    let beta = required(&a.beta, "beta")?;
    let range = required(&a.range, "range")?;
    if range.len() != 2 && range.len() != 4 {
        return usage("--range takes lo,hi or lo1,hi1,lo2,hi2");
    }
    let bounds: Vec<(f64, f64)> = range.chunks(2).map(|c| (c[0], c[1])).collect();
    let p = bounds.len();
    if beta.len() != p + 1 {
        return usage(format!("--beta needs {} values for {p} exposure(s)", p + 1));
    }
    let family = match parse_family(a.family.as_deref())? {
        FamilyKind::BernoulliLogit => Family::bernoulli_logit(),
        FamilyKind::GaussianIdentity => {
            Family::gaussian(a.sigma2.unwrap_or(1.0)).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    let criterion: DesignCriterion = match &a.criterion {
        Some(s) => s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?,
        None => DesignCriterion::D,
    };
    let default_res = if p == 1 { 2001 } else { 101 };
    let grid = CandidateGrid::from_bounds(&bounds, a.resolution.unwrap_or(default_res))?;
    let map = FeatureMap::standard(p, 0);
    let beta_v = DVector::from_column_slice(beta);
    let opts = SolverOptions {
        criterion,
        tol: a.tol.unwrap_or(SolverOptions::default().tol),
        max_iter: a.max_iter.unwrap_or(SolverOptions::default().max_iter),
    };
    let opt = solve_optimal_design(&grid, &beta_v, &family, &map, &opts)?;
    let radius = a.merge_radius.unwrap_or(0.01 * grid.range_width());
    let pruned = prune_design(&opt.design, radius, a.min_weight.unwrap_or(1e-4), map.dim())?;
    let pruned_cert = max_sensitivity(&grid, &pruned, &beta_v, &family, &map)?;
    let meta = Metadata::new(
        "design",
        None,
        serde_json::json!({
            "beta": beta,
            "family": to_value(&family),
            "bounds": bounds,
            "resolution": grid.len(),
            "solver": to_value(&opts),
            "merge_radius": radius,
            "min_weight": a.min_weight.unwrap_or(1e-4),
        }),
    );
    #[derive(Serialize)]
    struct Out<'a> {
        #[serde(flatten)]
        design: DesignArtifact<'a>,
        pruned_certificate: f64,
    }
    let artifact = Out {
        design: DesignArtifact::new(&opt, &pruned),
        pruned_certificate: pruned_cert,
    };
    io::write_json_with_metadata(&out, &artifact, &meta)?;
    let pts: Vec<String> = pruned
        .support
        .iter()
        .zip(&pruned.weights)
        .map(|(x, w)| format!("{x:.4?}@{w:.4}"))
        .collect();
    Ok(format!(
        "design: {} points [{}], certificate {:.6} (bound {}) -> {}",
        pruned.len(),
        pts.join(" "),
        opt.certificate,
        map.dim(),
        out.display()
    ))
}

fn weights(a: WeightsArgs) -> CliResult<String> {
    let out = required(&a.out, "out")?.clone();
    let (first, report) = io::load_first_stage(required(&a.first_stage, "first-stage")?)?;
    let design = io::read_design(required(&a.design, "design")?)?;
    if design.exposure_dim() != first.exposure_dim() {
        return Err(Error::DimensionMismatch {
            expected: first.exposure_dim(),
            got: design.exposure_dim(),
            context: "design exposure dimension",
        }
        .into());
    }
    let shape: KernelShape = match &a.kernel {
        Some(s) => s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?,
        None => KernelShape::Gaussian,
    };
    let h = match a.bandwidth {
        Some(h) => h,
        None => {
            let x = &first.exposures;
            let width = (0..x.ncols())
                .map(|j| x.column(j).max() - x.column(j).min())
                .fold(0.0, f64::max);
            if !(width > 0.0) {
                return Err(Error::DegenerateRange.into());
            }
            0.1 * width
        }
    };
    let source = kde_fit(&first.exposures, shape, Bandwidth::Silverman)?;
    let target = design_density(
        &design,
        KernelSpec::new(shape, h).map_err(|e| CliError::Usage(e.to_string()))?,
    )?;
    let opts = WeightOptions {
        clip_quantile: match a.clip_quantile {
            Some(q) if q >= 1.0 => None,
            Some(q) => Some(q),
            None => WeightOptions::default().clip_quantile,
        },
        ..Default::default()
    };
    let w = importance_weights(&first.exposures, &target, &source, &opts)?;
    let meta = Metadata::new(
        "weights",
        None,
        serde_json::json!({
            "design": a.design,
            "kernel": to_value(&shape),
            "bandwidth": h,
            "weights": to_value(&opts),
            "first_stage": report,
        }),
    );
    io::write_weights(&out, &first.ids, &w.values, &meta)?;
    Ok(format!(
        "weights: {} sites, max {:.4}, effective sample size {:.1} -> {}",
        w.len(),
        w.max(),
        w.effective_sample_size(),
        out.display()
    ))
}

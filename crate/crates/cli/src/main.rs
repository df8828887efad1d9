use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pfmg::io::{CsvSink, VtkSink};
use pfmg::mgsolve::PreconditionerKind;
use pfmg::model::SplitKind;
use pfmg::nonlinear::SolverSettings;
use pfmg::scenarios::{make_lshape, make_multiple_fractures, run, EpsRule, NoiseField, RunObserver, Scenario};

#[derive(Parser, Debug)]
#[command(name = "pfmg", version, about = "Phase-field fracture with matrix-free geometric multigrid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a benchmark scenario.
    Run(RunArgs),
    /// Check the matrix-free operators against independent references.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(clap::Args, Debug, Default)]
struct RunArgs {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// multiple_fractures, multiple_fractures_random, lshape2d, lshape3d or lshape (with --dim)
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// `h` or `fixed:<value>`
    #[arg(long)]
    eps: Option<String>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long, value_enum)]
    precond: Option<PrecondArg>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Seed of the random modulus field.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a VTK snapshot every n steps (0 disables).
    #[arg(long = "vtk-every")]
    vtk_every: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Print the run summary to standard output.
    #[arg(long, value_enum)]
    summary: Option<SummaryFormat>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    None,
    Miehe,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PrecondArg {
    Full,
    Blockdiag,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SummaryFormat {
    Json,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct Config {
    scenario: Option<String>,
    levels: Option<usize>,
    dim: Option<usize>,
    eps: Option<String>,
    split: Option<SplitArg>,
    dt: Option<f64>,
    t_end: Option<f64>,
    seed: Option<u64>,
    threads: Option<usize>,
    #[serde(default)]
    solver: SolverConfig,
    #[serde(default)]
    output: OutputConfig,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct SolverConfig {
    preconditioner: Option<PrecondArg>,
    abs_tol: Option<f64>,
    rel_tol: Option<f64>,
    max_iters: Option<usize>,
    restart: Option<usize>,
    smoother_degree: Option<usize>,
    eig_iters: Option<usize>,
    coarse_tol: Option<f64>,
    coarse_max_degree: Option<usize>,
    active_set_c: Option<f64>,
    active_set_tol: Option<f64>,
    active_set_max_iters: Option<usize>,
    phi_bound_limit: Option<f64>,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct OutputConfig {
    dir: Option<PathBuf>,
    vtk_every: Option<usize>,
    csv: Option<String>,
}

#[derive(Serialize, Debug)]
struct Summary {
    scenario: String,
    levels: usize,
    dim: usize,
    n_dofs: usize,
    eps: f64,
    h: f64,
    steps_planned: usize,
    steps_completed: usize,
    total_active_set_iterations: usize,
    total_gmres_iterations: usize,
    mean_gmres_per_active_set_step: f64,
    threads: usize,
    wall_time_s: f64,
    completed: bool,
    failure: Option<String>,
}

fn parse_eps(s: &str) -> Result<EpsRule<f64>> {
    if s == "h" {
        return Ok(EpsRule::EqualsH);
    }
    let v = s
        .strip_prefix("fixed:")
        .ok_or_else(|| anyhow!("eps must be `h` or `fixed:<value>`, got `{s}`"))?;
    let v: f64 = v.parse().with_context(|| format!("invalid eps value `{v}`"))?;
    if !(v > 0.0 && v.is_finite()) {
        bail!("eps must be positive, got {v}");
    }
    Ok(EpsRule::Fixed(v))
}

/// Configuration with flags applied on top of the file.
fn merge(args: &RunArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<Config>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => Config::default(),
    };
    macro_rules! flag {
        ($($f:ident),*) => { $( if args.$f.is_some() { cfg.$f = args.$f.clone(); } )* };
    }
    flag!(scenario, levels, dim, eps, split, dt, t_end, seed, threads);
    if args.precond.is_some() {
        cfg.solver.preconditioner = args.precond;
    }
    if args.out.is_some() {
        cfg.output.dir = args.out.clone();
    }
    if args.vtk_every.is_some() {
        cfg.output.vtk_every = args.vtk_every;
    }
    Ok(cfg)
}

fn build_scenario(cfg: &Config) -> Result<Scenario<f64>> {
    let name = cfg.scenario.as_deref().unwrap_or("multiple_fractures");
    let mut s = match name {
        "multiple_fractures" | "multiple_fractures_random" => {
            if let Some(d) = cfg.dim.filter(|&d| d != 2) {
                bail!("{name} is two-dimensional, got dim {d}");
            }
            let noise = if name == "multiple_fractures_random" {
                Some(NoiseField {
                    seed: cfg.seed.unwrap_or(2),
                    ..NoiseField::default()
                })
            } else {
                if cfg.seed.is_some() {
                    bail!("seed applies only to multiple_fractures_random");
                }
                None
            };
            make_multiple_fractures(cfg.levels.unwrap_or(5), noise)?
        }
        "lshape" | "lshape2d" | "lshape3d" => {
            let dim = match (name, cfg.dim) {
                ("lshape2d", Some(d)) | ("lshape3d", Some(d)) if d != if name == "lshape2d" { 2 } else { 3 } => {
                    bail!("{name} conflicts with dim {d}")
                }
                ("lshape2d", _) => 2,
                ("lshape3d", _) => 3,
                (_, d) => d.unwrap_or(2),
            };
            if cfg.seed.is_some() {
                bail!("seed applies only to multiple_fractures_random");
            }
            let levels = cfg.levels.unwrap_or(if dim == 2 { 4 } else { 2 });
            make_lshape(levels, dim, EpsRule::EqualsH)?
        }
        other => bail!("unknown scenario `{other}`"),
    };
    if let Some(e) = &cfg.eps {
        s.eps_rule = parse_eps(e)?;
    }
    if let Some(split) = cfg.split {
        s.split = match split {
            SplitArg::None => SplitKind::NoSplit,
            SplitArg::Miehe => SplitKind::Miehe,
        };
    }
    if let Some(dt) = cfg.dt {
        s.dt = dt;
    }
    if let Some(t) = cfg.t_end {
        s.t_end = t;
    }
    s.validate()?;
    Ok(s)
}

fn build_settings(cfg: &SolverConfig) -> Result<SolverSettings> {
    let mut s = SolverSettings::default();
    macro_rules! set {
        ($src:ident => $($dst:ident).+) => { if let Some(v) = cfg.$src { s.$($dst).+ = v; } };
    }
    set!(abs_tol => linear.abs_tol);
    set!(rel_tol => linear.rel_tol);
    set!(max_iters => linear.max_iters);
    set!(restart => linear.restart);
    set!(smoother_degree => mg.smoother_degree);
    set!(eig_iters => mg.eig_iters);
    set!(coarse_tol => mg.coarse_tol);
    set!(coarse_max_degree => mg.coarse_max_degree);
    set!(active_set_c => active_set.c);
    set!(active_set_tol => active_set.eps_as);
    set!(active_set_max_iters => active_set.max_iters);
    set!(phi_bound_limit => phi_bound_limit);
    if let Some(p) = cfg.preconditioner {
        s.preconditioner = match p {
            PrecondArg::Full => PreconditionerKind::Full,
            PrecondArg::Blockdiag => PreconditionerKind::BlockDiag,
        };
    }
    s.linear.validate()?;
    s.active_set.validate()?;
    if s.mg.smoother_degree == 0 || s.mg.coarse_max_degree == 0 || !(s.mg.coarse_tol > 0.0 && s.mg.coarse_tol < 1.0) {
        bail!("multigrid degrees must be positive and coarse_tol in (0, 1)");
    }
    if !(s.phi_bound_limit > 0.0) {
        bail!("phi_bound_limit must be positive");
    }
    Ok(s)
}

fn run_command(args: &RunArgs) -> Result<ExitCode> {
    let cfg = merge(args)?;
    let scenario = build_scenario(&cfg)?;
    let settings = build_settings(&cfg.solver)?;
    let threads = cfg.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("creating thread pool")?;
    let out_dir = cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("output"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let csv_path = out_dir.join(cfg.output.csv.as_deref().unwrap_or("timesteps.csv"));
    let mut csv = CsvSink::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    let mut vtk = VtkSink::new(&out_dir, cfg.output.vtk_every.unwrap_or(0));

    let start = Instant::now();
    let outcome = pool.install(|| {
        let mut observers: [&mut dyn RunObserver<f64>; 2] = [&mut csv, &mut vtk];
        run(&scenario, &settings, &mut observers)
    })?;
    let wall = start.elapsed().as_secs_f64();

    let total_as: usize = outcome.records.iter().map(|r| r.active_set_iters).sum();
    let total_gmres: usize = outcome.records.iter().map(|r| r.gmres_total()).sum();
    let summary = Summary {
        scenario: scenario.name.clone(),
        levels: scenario.n_levels,
        dim: scenario.dim(),
        n_dofs: outcome.n_dofs,
        eps: outcome.eps,
        h: outcome.h,
        steps_planned: scenario.n_steps(),
        steps_completed: outcome.records.len(),
        total_active_set_iterations: total_as,
        total_gmres_iterations: total_gmres,
        mean_gmres_per_active_set_step: if total_as == 0 { 0.0 } else { total_gmres as f64 / total_as as f64 },
        threads: pool.current_num_threads(),
        wall_time_s: wall,
        completed: outcome.failure.is_none(),
        failure: outcome.failure.as_ref().map(|e| e.to_string()),
    };
    write_summary(&out_dir.join("summary.json"), &summary)?;
    if args.summary == Some(SummaryFormat::Json) {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    }
    match &outcome.failure {
        None => Ok(ExitCode::SUCCESS),
        Some(e) => {
            eprintln!("error: run stopped after {} steps: {e}", outcome.records.len());
            Ok(ExitCode::from(2))
        }
    }
}

fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn verify_command(seed: u64) -> Result<ExitCode> {
    let mut ok = true;
    for r in pfmg::verify::run_all(seed)? {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {} (error {:.3e}, tolerance {:.0e})", r.name, r.error, r.tolerance);
        ok &= r.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run_command(args),
        Command::Verify { seed } => verify_command(*seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! The `dispatch` command line.
//!
//! Every flag can also come from an environment variable (`DISPATCH_CASE`,
//! `DISPATCH_SCENARIO`, ...) or from a TOML config file given by `--config`
//! / `DISPATCH_CONFIG` whose keys are the flag names. Flags win over the
//! environment, which wins over the config file.
//!
//! Exit codes: 0 success, 2 input error, 3 infeasible network, 4 no
//! convergence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use tcl_dispatch_core::mdp::EffectiveCost;
use tcl_dispatch_core::stats::{apparent_power, empirical_moments, sample_replicate};
use tcl_dispatch_core::{
    aggregate_moments, ks_distance_normal, solve_mdp, validate_radial, Clock, Coordinator, Error as CoreError,
    Executor, GridModel, ScenarioSpec, TreeOrder,
};

use crate::error::{ExportError, IngestError};
use crate::exec::{RayonExecutor, WallClock};
use crate::export::{self, StatsRow};
use crate::manifest::{write_timing, RunManifest, Timing, Tolerances};
use crate::matpower::parse_matpower;
use crate::scenario_file::{load_scenario, parse_variant, variant_name};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dispatch", version, about = "Network-constrained control of load ensembles")]
pub struct Cli {
    /// TOML file supplying defaults for any flag.
    #[arg(long, global = true, env = "DISPATCH_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the coupled ensemble/network problem.
    Run(RunArgs),
    /// Solve one ensemble's MDP at zero network prices.
    Mdp(MdpArgs),
    /// Compare finite-ensemble samples with the large-ensemble limit.
    Stats(StatsArgs),
    /// Recheck the hashes recorded in an output bundle.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, env = "DISPATCH_CASE")]
    pub case: Option<PathBuf>,
    #[arg(long, env = "DISPATCH_SCENARIO")]
    pub scenario: Option<PathBuf>,
    /// std2 or hybrid; defaults to the scenario's choice.
    #[arg(long, env = "DISPATCH_VARIANT")]
    pub variant: Option<String>,
    #[arg(long, env = "DISPATCH_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "DISPATCH_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, env = "DISPATCH_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MdpArgs {
    #[arg(long, env = "DISPATCH_CASE")]
    pub case: Option<PathBuf>,
    #[arg(long, env = "DISPATCH_SCENARIO")]
    pub scenario: Option<PathBuf>,
    #[arg(long, env = "DISPATCH_BUS")]
    pub bus: Option<usize>,
    #[arg(long, env = "DISPATCH_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "DISPATCH_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Grid the scenario refers to.
    #[arg(long, env = "DISPATCH_CASE")]
    pub case: Option<PathBuf>,
    #[arg(long, env = "DISPATCH_SCENARIO")]
    pub scenario: Option<PathBuf>,
    #[arg(long, env = "DISPATCH_BUS")]
    pub bus: Option<usize>,
    /// Time index of the distribution, `0..=T`.
    #[arg(long, env = "DISPATCH_T")]
    pub t: Option<usize>,
    /// Devices per sample.
    #[arg(long, env = "DISPATCH_N")]
    pub n: Option<usize>,
    #[arg(long, env = "DISPATCH_REPLICATES")]
    pub replicates: Option<usize>,
    #[arg(long, env = "DISPATCH_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "DISPATCH_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, env = "DISPATCH_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, env = "DISPATCH_OUT")]
    pub out: Option<PathBuf>,
}

/// Lowest-precedence defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub case: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub variant: Option<String>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub bus: Option<usize>,
    pub t: Option<usize>,
    pub n: Option<usize>,
    pub replicates: Option<usize>,
}

/// Error carrying the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Core(c) => c.into(),
            other => Failure::input(other.to_string()),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match e {
            CoreError::Infeasible { .. } => EXIT_INFEASIBLE,
            CoreError::Diverged { .. } | CoreError::NetworkSolve { .. } | CoreError::RootFind { .. } => {
                EXIT_NOT_CONVERGED
            }
            _ => EXIT_INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ExportError> for Failure {
    fn from(e: ExportError) -> Self {
        Failure::input(e.to_string())
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cli: Cli) -> Result<i32, Failure> {
    let config = match &cli.config {
        Some(path) => {
            let text = read_text(path)?;
            toml::from_str::<ConfigFile>(&text)
                .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Run(a) => cmd_run(a, config),
        Command::Mdp(a) => cmd_mdp(a, config),
        Command::Stats(a) => cmd_stats(a, config),
        Command::Verify(a) => cmd_verify(a, config),
    }
}

fn required<T>(value: Option<T>, fallback: Option<T>, flag: &str) -> Result<T, Failure> {
    value
        .or(fallback)
        .ok_or_else(|| Failure::input(format!("--{flag} is required (flag, environment or config)")))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    String::from_utf8(read_bytes(path)?).map_err(|_| Failure::input(format!("{}: not UTF-8", path.display())))
}

fn make_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

struct Loaded {
    model: GridModel,
    order: TreeOrder,
    scenario: ScenarioSpec,
    manifest: RunManifest,
}

fn load(command: &str, case: &Path, scenario: &Path, seed: Option<u64>) -> Result<Loaded, Failure> {
    let case_bytes = read_bytes(case)?;
    let scen_bytes = read_bytes(scenario)?;
    let case_text = std::str::from_utf8(&case_bytes).map_err(|_| Failure::input("case file is not UTF-8"))?;
    let scen_text = std::str::from_utf8(&scen_bytes).map_err(|_| Failure::input("scenario file is not UTF-8"))?;
    let model = parse_matpower(case_text).map_err(|e| Failure::from(e).with_context(case))?;
    let order = validate_radial(&model)?;
    let spec = load_scenario(scen_text, &model, seed).map_err(|e| Failure::from(e).with_context(scenario))?;
    let mut manifest = RunManifest::new(command);
    manifest.add_input("case", case, &case_bytes);
    manifest.add_input("scenario", scenario, &scen_bytes);
    manifest.seed = spec.seed;
    Ok(Loaded {
        model,
        order,
        scenario: spec,
        manifest,
    })
}

impl Failure {
    fn with_context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn executor(threads: Option<usize>) -> Result<RayonExecutor, Failure> {
    RayonExecutor::new(threads.unwrap_or(0)).map_err(|e| Failure::input(format!("thread pool: {e}")))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn cmd_run(a: RunArgs, cfg: ConfigFile) -> Result<i32, Failure> {
    let case = required(a.case, cfg.case, "case")?;
    let scenario = required(a.scenario, cfg.scenario, "scenario")?;
    let out = required(a.out, cfg.out, "out")?;
    let mut loaded = load("run", &case, &scenario, a.seed.or(cfg.seed))?;
    if let Some(v) = a.variant.or(cfg.variant) {
        loaded.scenario.algorithm.variant =
            parse_variant(&v).ok_or_else(|| Failure::input(format!("unknown variant {v:?} (std2 or hybrid)")))?;
    }
    let exec = executor(a.threads.or(cfg.threads))?;
    let clock = WallClock::default();
    let started = unix_now();

    let coordinator = Coordinator::new(&loaded.model, &loaded.order, &loaded.scenario)?;
    let solution = coordinator.run_with(&exec, &clock)?;
    let total_ms = clock.now_ms();

    make_dir(&out)?;
    let spec = &loaded.scenario;
    let buses: Vec<usize> = spec.ensembles.iter().map(|(b, _)| *b).collect();
    let keyed: Vec<(usize, &_)> = buses.iter().copied().zip(&solution.trajectories).collect();
    let mut files = export::write_trajectories(&out, &keyed)?;
    files.push(export::write_consumption(&out, &spec.ensembles, &solution.trajectories)?);
    files.extend(export::write_dispatch(&out, &loaded.model, &loaded.order, &solution.dispatch)?);
    files.push(export::write_duals(&out, &buses, &solution.duals)?);
    let iteration_files = export::write_iterations(&out, &solution.duals.history)?;
    files.push(iteration_files[0].clone());

    let mut manifest = loaded.manifest;
    manifest.variant = Some(variant_name(spec.algorithm.variant).into());
    manifest.tolerances = Some(Tolerances {
        tol_primal: spec.algorithm.tol_primal,
        tol_dual: spec.algorithm.tol_dual,
        max_iter: spec.algorithm.max_iter,
        step: spec.algorithm.step,
    });
    manifest.converged = Some(solution.converged);
    manifest.iterations = Some(solution.iterations);
    manifest.add_outputs(&files)?;
    manifest.write(&out)?;
    write_timing(
        &out,
        &Timing {
            started_unix: started,
            total_ms,
            step1_ms: solution.step1_ms,
            step2_ms: solution.step2_ms,
        },
    )?;

    let last = solution.duals.history.last();
    println!(
        "{} {} after {} iterations: objective {:.9}, primal residual {:.3e}, dual change {:.3e}",
        variant_name(spec.algorithm.variant),
        if solution.converged { "converged" } else { "did not converge" },
        solution.iterations,
        solution.objective,
        last.map_or(0.0, |r| r.primal_max),
        last.map_or(0.0, |r| r.dual_change),
    );
    Ok(if solution.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn ensemble_index(spec: &ScenarioSpec, bus: usize) -> Result<usize, Failure> {
    spec.ensembles
        .iter()
        .position(|(b, _)| *b == bus)
        .ok_or_else(|| Failure::input(format!("bus {bus} hosts no ensemble")))
}

fn cmd_mdp(a: MdpArgs, cfg: ConfigFile) -> Result<i32, Failure> {
    let case = required(a.case, cfg.case, "case")?;
    let scenario = required(a.scenario, cfg.scenario, "scenario")?;
    let bus = required(a.bus, cfg.bus, "bus")?;
    let out = required(a.out, cfg.out, "out")?;
    let loaded = load("mdp", &case, &scenario, a.seed.or(cfg.seed))?;
    let k = ensemble_index(&loaded.scenario, bus)?;
    let spec = &loaded.scenario.ensembles[k].1;
    let traj = solve_mdp(
        spec,
        &EffectiveCost {
            values: spec.energy_cost.clone(),
        },
    )?;

    make_dir(&out)?;
    let mut files = export::write_trajectories(&out, &[(bus, &traj)])?;
    files.push(export::write_mdp_summary(&out, &[(bus, &traj)])?);
    let mut manifest = loaded.manifest;
    manifest.add_outputs(&files)?;
    manifest.write(&out)?;
    println!(
        "bus {bus}: objective {:.9}, mean spread {:.6}",
        traj.objective,
        traj.mean_spread()
    );
    Ok(EXIT_OK)
}

/// Samples and moments behind one `stats.csv` row.
pub fn stats_row<E: Executor>(rho: &[f64], s: &[f64], n: usize, replicates: usize, seed: u64, exec: &E) -> StatsRow {
    let m = aggregate_moments(rho, s, n);
    let samples = exec.map_indexed(replicates, |r| sample_replicate(rho, s, n, seed, r as u64));
    let (empirical_mean, empirical_var) = empirical_moments(&samples);
    StatsRow {
        n,
        analytic_mean: m.mean,
        analytic_var: m.variance,
        empirical_mean,
        empirical_var,
        ks_distance: ks_distance_normal(&samples, m.mean, m.variance.sqrt()),
    }
}

fn cmd_stats(a: StatsArgs, cfg: ConfigFile) -> Result<i32, Failure> {
    let case = required(a.case, cfg.case, "case")?;
    let scenario = required(a.scenario, cfg.scenario, "scenario")?;
    let bus = required(a.bus, cfg.bus, "bus")?;
    let t = required(a.t, cfg.t, "t")?;
    let n = required(a.n, cfg.n, "n")?;
    let replicates = required(a.replicates, cfg.replicates, "replicates")?;
    let out = required(a.out, cfg.out, "out")?;
    if n == 0 {
        return Err(Failure::input("--n must be at least 1"));
    }
    if replicates == 0 {
        return Err(Failure::input("--replicates must be at least 1"));
    }
    let loaded = load("stats", &case, &scenario, a.seed.or(cfg.seed))?;
    let k = ensemble_index(&loaded.scenario, bus)?;
    let spec = &loaded.scenario.ensembles[k].1;
    if t > spec.horizon() {
        return Err(Failure::input(format!("--t {t} is past the horizon {}", spec.horizon())));
    }
    let traj = solve_mdp(
        spec,
        &EffectiveCost {
            values: spec.energy_cost.clone(),
        },
    )?;
    let rho: Vec<f64> = traj.rho[t].iter().copied().collect();
    let s = apparent_power(&spec.p, &spec.q);
    let seed = loaded.scenario.seed.unwrap_or(0);
    let row = stats_row(&rho, &s, n, replicates, seed, &executor(a.threads.or(cfg.threads))?);

    make_dir(&out)?;
    let files = vec![export::write_stats(&out, &[row])?];
    let mut manifest = loaded.manifest;
    manifest.seed = Some(seed);
    manifest.add_outputs(&files)?;
    manifest.write(&out)?;
    println!(
        "bus {bus}, t {t}, n {n}: variance {:.6e} analytic vs {:.6e} empirical, KS {:.4}",
        row.analytic_var, row.empirical_var, row.ks_distance
    );
    Ok(EXIT_OK)
}

fn cmd_verify(a: VerifyArgs, cfg: ConfigFile) -> Result<i32, Failure> {
    let out = required(a.out, cfg.out, "out")?;
    let manifest = RunManifest::read(&out)?;
    let bad = manifest.verify(&out);
    if bad.is_empty() {
        println!("all {} inputs and {} outputs match", manifest.inputs.len(), manifest.outputs.len());
        Ok(EXIT_OK)
    } else {
        for b in &bad {
            eprintln!("mismatch: {b}");
        }
        Err(Failure::input(format!("{} recorded hashes do not match", bad.len())))
    }
}

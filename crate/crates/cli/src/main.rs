//! Command line front end: single solves, the problem registry, and
//! benchmark campaigns with performance profiles.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sketchtr_core::bench::{
    alpha_grid, load_campaign, performance_profile, profile_input, run_campaign, solvers_present,
    Aggregation, CampaignConfig,
};
use sketchtr_core::problems::{get_problem, registry};
use sketchtr_core::solver::{run_on_problem, summarize, SolverConfig};

#[derive(Parser)]
#[command(name = "sketchtr", version, about = "Randomized-subspace trust-region solver for derivative-free least squares")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one solver on one registered problem and report the outcome.
    Solve(SolveArgs),
    /// Inspect the built-in test problems.
    Problems {
        #[command(subcommand)]
        command: ProblemsCommand,
    },
    /// Run benchmark campaigns and compute performance profiles.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Args)]
struct SolveArgs {
    /// Problem name from `sketchtr problems list`.
    #[arg(long)]
    problem: String,
    /// Problem dimension.
    #[arg(long)]
    n: usize,
    /// Solver arm to run.
    #[arg(long, value_enum, default_value_t = SolverArg::Sketch)]
    solver: SolverArg,
    /// RNG seed (only the sketching arm draws random subsets).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation budget as a multiple of n + 1.
    #[arg(long, default_value_t = 100)]
    budget: usize,
    /// Stop as soon as the objective falls to this value.
    #[arg(long)]
    target_f: Option<f64>,
    /// Write the per-iteration history CSV to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum SolverArg {
    Sketch,
    Baseline,
}

#[derive(Copy, Clone, ValueEnum)]
enum AggArg {
    Median,
    Worst,
}

impl From<AggArg> for Aggregation {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Median => Aggregation::Median,
            AggArg::Worst => Aggregation::Worst,
        }
    }
}

#[derive(Subcommand)]
enum ProblemsCommand {
    /// Print every registered problem with its dimension rule.
    List,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Execute the solver x problem x seed grid described by a config file.
    Run {
        /// Campaign config file; `key = value` lines, see the README for the schema.
        #[arg(long)]
        config: PathBuf,
        /// Directory for per-cell results, summary JSON, and profile CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute a performance profile from stored campaign results.
    Profile {
        /// Directory holding a finished (or resumable) campaign.
        #[arg(long)]
        dir: PathBuf,
        /// Accuracy level of the convergence test.
        #[arg(long, default_value_t = 1e-3)]
        tau: f64,
        /// How per-seed metrics are pooled within each problem.
        #[arg(long, value_enum, default_value_t = AggArg::Median)]
        agg: AggArg,
        /// Write the profile CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve(args) => solve(args),
        Command::Problems {
            command: ProblemsCommand::List,
        } => {
            for (name, rule) in registry() {
                println!("{name:<26} {rule}");
            }
            Ok(())
        }
        Command::Bench { command } => match command {
            BenchCommand::Run { config, out } => bench_run(&config, &out),
            BenchCommand::Profile { dir, tau, agg, out } => {
                bench_profile(&dir, tau, agg.into(), out.as_deref())
            }
        },
    }
}

fn solve(args: SolveArgs) -> Result<()> {
    let spec = get_problem(&args.problem, args.n)?;
    let mut cfg = match args.solver {
        SolverArg::Sketch => SolverConfig::defaults(args.n),
        SolverArg::Baseline => SolverConfig::baseline_defaults(args.n),
    };
    cfg.seed = args.seed;
    cfg.max_evals = args.budget * (args.n + 1);
    cfg.target_f = args.target_f;

    let history = run_on_problem(&spec, &cfg)?;
    print!("{}", summarize(&history));
    if let Some(path) = args.out {
        fs::write(&path, history.csv_string())
            .with_context(|| format!("writing {}", path.display()))?;
        println!("history written to {}", path.display());
    }
    Ok(())
}

fn bench_run(config: &Path, out: &Path) -> Result<()> {
    let text =
        fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = CampaignConfig::parse(&text)?;
    let results = run_campaign(&cfg, out)?;
    let failed: Vec<_> = results.iter().filter(|r| r.error.is_some()).collect();
    println!(
        "{} cells finished into {} ({} failed)",
        results.len(),
        out.display(),
        failed.len()
    );
    for r in &failed {
        eprintln!("  {}: {}", r.key(), r.error.as_deref().unwrap_or("unknown"));
    }
    Ok(())
}

fn bench_profile(dir: &Path, tau: f64, agg: Aggregation, out: Option<&Path>) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        bail!("tau must lie strictly between 0 and 1, got {tau}");
    }
    let results = load_campaign(dir)?;
    if results.is_empty() {
        bail!("no cell results under {}", dir.display());
    }
    let solvers = summary_solver_order(dir).unwrap_or_else(|| solvers_present(&results));
    let input = profile_input(&results, &solvers, tau, agg);
    let table = performance_profile(&input, &alpha_grid());
    if !table.excluded.is_empty() {
        eprintln!(
            "excluded (no solver converged): {}",
            table.excluded.join(", ")
        );
    }
    let csv = table.to_csv();
    match out {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("profile written to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Column order for recomputed profiles. The summary stores solvers in config
/// order; falling back to first-seen order only matters for partial campaigns.
fn summary_solver_order(dir: &Path) -> Option<Vec<String>> {
    let text = fs::read_to_string(dir.join("summary.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("solvers")?
        .as_array()?
        .iter()
        .map(|s| s.as_str().map(str::to_string))
        .collect()
}

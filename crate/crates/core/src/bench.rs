//! Campaign running, convergence metrics, and performance profiles.
//!
//! A campaign is a grid of (solver preset, problem, seed) cells. Each cell
//! runs to an evaluation budget (stopping early once the tightest accuracy
//! target is met), writes its per-iteration history CSV plus a JSON sidecar,
//! and the merged summary feeds the profile computation. Reruns of an
//! identical config skip completed cells.

use std::collections::BTreeMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use thiserror::Error;

use crate::problems::get_problem;
use crate::solver::{run_on_problem, RunHistory, SolverConfig};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("campaign: {0}")]
    Campaign(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Named solver setups selectable from a campaign config or the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SolverPreset {
    /// Randomized basis sketching with default constants.
    Sketch,
    /// Deterministic full-space control.
    Baseline,
}

impl SolverPreset {
    pub fn name(&self) -> &'static str {
        match self {
            SolverPreset::Sketch => "sketch",
            SolverPreset::Baseline => "baseline",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, BenchError> {
        match s {
            "sketch" => Ok(SolverPreset::Sketch),
            "baseline" => Ok(SolverPreset::Baseline),
            other => Err(BenchError::Config(format!(
                "unknown solver `{other}` (expected `sketch` or `baseline`)"
            ))),
        }
    }

    /// Instantiates the preset for one cell.
    pub fn build(&self, n: usize, seed: u64, max_evals: usize) -> SolverConfig {
        let mut cfg = match self {
            SolverPreset::Sketch => SolverConfig::defaults(n),
            SolverPreset::Baseline => SolverConfig::baseline_defaults(n),
        };
        cfg.seed = seed;
        cfg.max_evals = max_evals;
        cfg
    }
}

/// Parsed campaign description.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub solvers: Vec<SolverPreset>,
    /// (registry name, dimension) pairs.
    pub problems: Vec<(String, usize)>,
    pub seeds: Vec<u64>,
    /// Evaluation budget per run, as a multiple of `n + 1`.
    pub budget_multiplier: usize,
    /// Accuracy tolerances, each in (0, 1).
    pub taus: Vec<f64>,
    /// Stop each run once the tightest tau target is reached.
    pub stop_at_target: bool,
}

impl CampaignConfig {
    /// Parses the key/value text format:
    ///
    /// ```text
    /// # comment
    /// solvers = sketch, baseline
    /// problems = extended-rosenbrock:20, broyden-tridiagonal:50
    /// seeds = 0..30          # half-open range, or a comma list 0,1,2
    /// budget = 100           # evaluations per run, times (n+1)
    /// taus = 1e-3, 1e-5
    /// stop_at_target = true  # optional, defaults to true
    /// ```
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut solvers = None;
        let mut problems = None;
        let mut seeds = None;
        let mut budget = None;
        let mut taus = None;
        let mut stop_at_target = true;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                BenchError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "solvers" => {
                    let list: Result<Vec<_>, _> = value
                        .split(',')
                        .map(|s| SolverPreset::from_name(s.trim()))
                        .collect();
                    solvers = Some(list?);
                }
                "problems" => {
                    let mut list = Vec::new();
                    for item in value.split(',') {
                        let item = item.trim();
                        let (name, dim) = item.split_once(':').ok_or_else(|| {
                            BenchError::Config(format!(
                                "problem `{item}` must be written as name:dimension"
                            ))
                        })?;
                        let n: usize = dim.trim().parse().map_err(|_| {
                            BenchError::Config(format!("bad dimension in `{item}`"))
                        })?;
                        list.push((name.trim().to_string(), n));
                    }
                    problems = Some(list);
                }
                "seeds" => {
                    seeds = Some(parse_seeds(value)?);
                }
                "budget" => {
                    budget = Some(value.parse().map_err(|_| {
                        BenchError::Config(format!("bad budget multiplier `{value}`"))
                    })?);
                }
                "taus" => {
                    let mut list = Vec::new();
                    for item in value.split(',') {
                        let tau: f64 = item.trim().parse().map_err(|_| {
                            BenchError::Config(format!("bad tolerance `{}`", item.trim()))
                        })?;
                        list.push(tau);
                    }
                    taus = Some(list);
                }
                "stop_at_target" => {
                    stop_at_target = value.parse().map_err(|_| {
                        BenchError::Config(format!("bad boolean `{value}` for stop_at_target"))
                    })?;
                }
                other => {
                    return Err(BenchError::Config(format!("unknown key `{other}`")));
                }
            }
        }

        let cfg = CampaignConfig {
            solvers: solvers.ok_or_else(|| BenchError::Config("missing `solvers`".into()))?,
            problems: problems.ok_or_else(|| BenchError::Config("missing `problems`".into()))?,
            seeds: seeds.ok_or_else(|| BenchError::Config("missing `seeds`".into()))?,
            budget_multiplier: budget
                .ok_or_else(|| BenchError::Config("missing `budget`".into()))?,
            taus: taus.ok_or_else(|| BenchError::Config("missing `taus`".into()))?,
            stop_at_target,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.solvers.is_empty()
            || self.problems.is_empty()
            || self.seeds.is_empty()
            || self.taus.is_empty()
        {
            return Err(BenchError::Config(
                "solvers, problems, seeds, and taus must all be nonempty".into(),
            ));
        }
        if self.budget_multiplier == 0 {
            return Err(BenchError::Config("budget multiplier must be positive".into()));
        }
        for &tau in &self.taus {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(BenchError::Config(format!(
                    "tolerance {tau} is outside (0, 1)"
                )));
            }
        }
        for (name, n) in &self.problems {
            get_problem(name, *n).map_err(|e| BenchError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Canonical one-line-per-field rendering, hashed for resume checks.
    fn canonical(&self) -> String {
        let solvers: Vec<&str> = self.solvers.iter().map(|s| s.name()).collect();
        let problems: Vec<String> = self
            .problems
            .iter()
            .map(|(name, n)| format!("{name}:{n}"))
            .collect();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let taus: Vec<String> = self.taus.iter().map(|t| format_tau(*t)).collect();
        format!(
            "solvers={}\nproblems={}\nseeds={}\nbudget={}\ntaus={}\nstop_at_target={}\n",
            solvers.join(","),
            problems.join(","),
            seeds.join(","),
            self.budget_multiplier,
            taus.join(","),
            self.stop_at_target
        )
    }

    pub fn content_hash(&self) -> String {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        self.canonical().hash(&mut hasher);
        format!("{:016x}", hasher.finish())
    }
}

/// Seed lists: `0..30` (half-open) or `0,1,5`.
fn parse_seeds(value: &str) -> Result<Vec<u64>, BenchError> {
    if let Some((lo, hi)) = value.split_once("..") {
        let lo: u64 = lo
            .trim()
            .parse()
            .map_err(|_| BenchError::Config(format!("bad seed range start `{lo}`")))?;
        let hi: u64 = hi
            .trim()
            .parse()
            .map_err(|_| BenchError::Config(format!("bad seed range end `{hi}`")))?;
        if hi <= lo {
            return Err(BenchError::Config(format!(
                "seed range {lo}..{hi} is empty"
            )));
        }
        Ok((lo..hi).collect())
    } else {
        value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| BenchError::Config(format!("bad seed `{}`", s.trim())))
            })
            .collect()
    }
}

/// Stable tau rendering used in filenames, JSON keys, and CSV names.
pub fn format_tau(tau: f64) -> String {
    format!("{tau:e}")
}

/// Normalized evaluations to the accuracy target: the first cumulative
/// evaluation count at which the best objective satisfies
/// `f <= f_star + tau (f0 - f_star)`, divided by `n + 1`. Infinity when the
/// run never got there; zero when the start already meets the target
/// (`f0 <= f_star`).
pub fn convergence_metric(
    history: &RunHistory,
    f0: f64,
    f_star: f64,
    tau: f64,
    n: usize,
) -> f64 {
    if f0 <= f_star {
        return 0.0;
    }
    let target = f_star + tau * (f0 - f_star);
    match history.first_eval_reaching(target) {
        Some(count) => count as f64 / (n + 1) as f64,
        None => f64::INFINITY,
    }
}

/// Same test applied to a raw improvements curve (used when summarizing
/// stored runs without reconstructing full histories).
pub fn convergence_metric_from_improvements(
    improvements: &[(usize, f64)],
    f0: f64,
    f_star: f64,
    tau: f64,
    n: usize,
) -> f64 {
    if f0 <= f_star {
        return 0.0;
    }
    let target = f_star + tau * (f0 - f_star);
    improvements
        .iter()
        .find(|&&(_, f)| f <= target)
        .map(|&(count, _)| count as f64 / (n + 1) as f64)
        .unwrap_or(f64::INFINITY)
}

/// Seed-collapsing modes for the per-problem metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Median,
    Worst,
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::Median => "median",
            Aggregation::Worst => "worst",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, BenchError> {
        match s {
            "median" => Ok(Aggregation::Median),
            "worst" => Ok(Aggregation::Worst),
            other => Err(BenchError::Config(format!(
                "unknown aggregation `{other}` (expected `median` or `worst`)"
            ))),
        }
    }
}

/// Collapses per-seed metric values. Infinities participate: a median with
/// more than half the runs unconverged is infinite, and `Worst` is infinite
/// as soon as any run is.
pub fn aggregate(values: &[f64], agg: Aggregation) -> f64 {
    assert!(!values.is_empty(), "cannot aggregate zero runs");
    match agg {
        Aggregation::Worst => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Median => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mid = sorted.len() / 2;
            if sorted.len() % 2 == 1 {
                sorted[mid]
            } else {
                0.5 * (sorted[mid - 1] + sorted[mid])
            }
        }
    }
}

/// Metric table feeding a profile: rows are problems, columns solvers.
#[derive(Debug, Clone)]
pub struct ProfileInput {
    pub solvers: Vec<String>,
    /// (problem label, per-solver aggregated N), columns aligned with
    /// `solvers`.
    pub rows: Vec<(String, Vec<f64>)>,
}

/// Profile curves over a shared alpha grid.
#[derive(Debug, Clone)]
pub struct ProfileTable {
    pub alphas: Vec<f64>,
    pub solvers: Vec<String>,
    /// `values[s][a]`: fraction of problems solver `s` solved within factor
    /// `alphas[a]` of the per-problem best.
    pub values: Vec<Vec<f64>>,
    /// Problems dropped because no solver produced a finite metric.
    pub excluded: Vec<String>,
}

/// Geometric grid of 64 factors from 1 to 64.
pub fn alpha_grid() -> Vec<f64> {
    let count = 64;
    (0..count)
        .map(|i| 64f64.powf(i as f64 / (count - 1) as f64))
        .collect()
}

/// Fraction of problems each solver solves within a factor `alpha` of the
/// best solver, per alpha. Problems where every solver failed are excluded
/// from the denominator and reported.
pub fn performance_profile(input: &ProfileInput, alphas: &[f64]) -> ProfileTable {
    let s = input.solvers.len();
    let mut excluded = Vec::new();
    let mut rows = Vec::new();
    for (label, ns) in &input.rows {
        assert_eq!(ns.len(), s, "row width mismatch for {label}");
        let best = ns.iter().copied().fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            rows.push((ns.clone(), best));
        } else {
            excluded.push(label.clone());
        }
    }

    let denom = rows.len().max(1) as f64;
    let values = (0..s)
        .map(|col| {
            alphas
                .iter()
                .map(|&alpha| {
                    let solved = rows
                        .iter()
                        .filter(|(ns, best)| ns[col] <= alpha * best)
                        .count();
                    solved as f64 / denom
                })
                .collect()
        })
        .collect();

    ProfileTable {
        alphas: alphas.to_vec(),
        solvers: input.solvers.clone(),
        values,
        excluded,
    }
}

impl ProfileTable {
    /// CSV with an alpha column followed by one column per solver.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("alpha");
        for s in &self.solvers {
            out.push(',');
            out.push_str(s);
        }
        out.push('\n');
        for (a, &alpha) in self.alphas.iter().enumerate() {
            out.push_str(&format!("{alpha:.17e}"));
            for col in &self.values {
                out.push_str(&format!(",{:.17e}", col[a]));
            }
            out.push('\n');
        }
        out
    }
}

/// One (solver, problem, seed) cell's outcome, as stored in its sidecar.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub problem: String,
    pub n: usize,
    pub solver: String,
    pub seed: u64,
    pub status: String,
    pub f0: f64,
    pub f_star: f64,
    pub final_f: f64,
    pub total_evals: usize,
    pub improvements: Vec<(usize, f64)>,
    /// Populated instead of the fields above when the run failed.
    pub error: Option<String>,
}

impl CellResult {
    /// File stem used for this cell's history CSV and JSON sidecar.
    pub fn key(&self) -> String {
        cell_key(&self.problem, self.n, &self.solver, self.seed)
    }

    fn to_json(&self) -> serde_json::Value {
        if let Some(err) = &self.error {
            return serde_json::json!({
                "problem": self.problem,
                "n": self.n,
                "solver": self.solver,
                "seed": self.seed,
                "error": err,
            });
        }
        fn num(v: f64) -> serde_json::Value {
            serde_json::Number::from_f64(v)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null)
        }
        let improvements: Vec<serde_json::Value> = self
            .improvements
            .iter()
            .map(|&(count, f)| serde_json::json!([count, num(f)]))
            .collect();
        serde_json::json!({
            "problem": self.problem,
            "n": self.n,
            "solver": self.solver,
            "seed": self.seed,
            "status": self.status,
            "f0": num(self.f0),
            "f_star": num(self.f_star),
            "final_f": num(self.final_f),
            "total_evals": self.total_evals,
            "improvements": improvements,
        })
    }

    fn from_json(v: &serde_json::Value) -> Result<Self, BenchError> {
        let get = |k: &str| {
            v.get(k)
                .ok_or_else(|| BenchError::Campaign(format!("cell JSON missing `{k}`")))
        };
        let problem = get("problem")?
            .as_str()
            .unwrap_or_default()
            .to_string();
        let n = get("n")?.as_u64().unwrap_or(0) as usize;
        let solver = get("solver")?.as_str().unwrap_or_default().to_string();
        let seed = get("seed")?.as_u64().unwrap_or(0);
        if let Some(err) = v.get("error").and_then(|e| e.as_str()) {
            return Ok(CellResult {
                problem,
                n,
                solver,
                seed,
                status: String::new(),
                f0: f64::NAN,
                f_star: f64::NAN,
                final_f: f64::NAN,
                total_evals: 0,
                improvements: Vec::new(),
                error: Some(err.to_string()),
            });
        }
        let improvements = get("improvements")?
            .as_array()
            .map(|arr| {
                arr.iter()
                    .filter_map(|pair| {
                        let count = pair.get(0)?.as_u64()? as usize;
                        let f = pair.get(1)?.as_f64()?;
                        Some((count, f))
                    })
                    .collect()
            })
            .unwrap_or_default();
        Ok(CellResult {
            problem,
            n,
            solver,
            seed,
            status: get("status")?.as_str().unwrap_or_default().to_string(),
            f0: get("f0")?.as_f64().unwrap_or(f64::NAN),
            f_star: get("f_star")?.as_f64().unwrap_or(f64::NAN),
            final_f: get("final_f")?.as_f64().unwrap_or(f64::NAN),
            total_evals: get("total_evals")?.as_u64().unwrap_or(0) as usize,
            improvements,
            error: None,
        })
    }
}

fn cell_key(problem: &str, n: usize, solver: &str, seed: u64) -> String {
    format!("{problem}-n{n}-{solver}-seed{seed}")
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), BenchError> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents.as_bytes())?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs (or resumes) a campaign into `out_dir`. Returns the completed cell
/// results in deterministic key order.
pub fn run_campaign(cfg: &CampaignConfig, out_dir: &Path) -> Result<Vec<CellResult>, BenchError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;

    let hash = cfg.content_hash();
    let lock_path = out_dir.join("campaign.lock");
    if lock_path.exists() {
        let existing = fs::read_to_string(&lock_path)?;
        if existing.trim() != hash {
            return Err(BenchError::Campaign(format!(
                "{} already holds a campaign with config hash {}, not {}",
                out_dir.display(),
                existing.trim(),
                hash
            )));
        }
    } else {
        write_atomic(&lock_path, &format!("{hash}\n"))?;
    }
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);

    // The full cell grid, in deterministic order.
    struct Cell {
        problem: String,
        n: usize,
        preset: SolverPreset,
        seed: u64,
    }
    let mut cells = Vec::new();
    for (name, n) in &cfg.problems {
        for preset in &cfg.solvers {
            for &seed in &cfg.seeds {
                cells.push(Cell {
                    problem: name.clone(),
                    n: *n,
                    preset: *preset,
                    seed,
                });
            }
        }
    }

    let min_tau = cfg.taus.iter().copied().fold(f64::INFINITY, f64::min);
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|cell| {
            let key = cell_key(&cell.problem, cell.n, cell.preset.name(), cell.seed);
            let json_path = out_dir.join(format!("{key}.json"));
            let csv_path = out_dir.join(format!("{key}.csv"));
            if json_path.exists() && csv_path.exists() {
                // Resumed cell: trust the stored sidecar.
                if let Ok(text) = fs::read_to_string(&json_path) {
                    if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
                        if let Ok(res) = CellResult::from_json(&value) {
                            return Ok(res);
                        }
                    }
                }
            }
            run_cell(
                &cell.problem,
                cell.n,
                cell.preset,
                cell.seed,
                cfg,
                min_tau,
                &csv_path,
                &json_path,
            )
        })
        .collect::<Result<Vec<_>, BenchError>>()?;

    let mut ordered = results;
    ordered.sort_by(|a, b| a.key().cmp(&b.key()));

    write_summary(cfg, &ordered, out_dir)?;
    write_profiles(cfg, &ordered, out_dir)?;

    let finished = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "started_unix": started,
        "finished_unix": finished,
        "threads": rayon::current_num_threads(),
    });
    write_atomic(&out_dir.join("campaign-meta.json"), &meta.to_string())?;

    Ok(ordered)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    problem: &str,
    n: usize,
    preset: SolverPreset,
    seed: u64,
    cfg: &CampaignConfig,
    min_tau: f64,
    csv_path: &Path,
    json_path: &Path,
) -> Result<CellResult, BenchError> {
    let spec = match get_problem(problem, n) {
        Ok(spec) => spec,
        Err(e) => {
            let res = CellResult {
                problem: problem.to_string(),
                n,
                solver: preset.name().to_string(),
                seed,
                status: String::new(),
                f0: f64::NAN,
                f_star: f64::NAN,
                final_f: f64::NAN,
                total_evals: 0,
                improvements: Vec::new(),
                error: Some(e.to_string()),
            };
            write_atomic(json_path, &res.to_json().to_string())?;
            return Ok(res);
        }
    };
    let budget = cfg.budget_multiplier * (n + 1);
    let mut solver_cfg = preset.build(n, seed, budget);
    if cfg.stop_at_target {
        let f0 = spec.value(&spec.x0);
        if f0 > spec.f_star {
            solver_cfg.target_f = Some(spec.f_star + min_tau * (f0 - spec.f_star));
        }
    }

    let res = match run_on_problem(&spec, &solver_cfg) {
        Ok(history) => {
            write_atomic(csv_path, &history.csv_string())?;
            CellResult {
                problem: problem.to_string(),
                n,
                solver: preset.name().to_string(),
                seed,
                status: history_status(&history),
                f0: history.f0,
                f_star: spec.f_star,
                final_f: history.final_f,
                total_evals: history.total_evals,
                improvements: history.improvements.clone(),
                error: None,
            }
        }
        Err(e) => CellResult {
            problem: problem.to_string(),
            n,
            solver: preset.name().to_string(),
            seed,
            status: String::new(),
            f0: f64::NAN,
            f_star: spec.f_star,
            final_f: f64::NAN,
            total_evals: 0,
            improvements: Vec::new(),
            error: Some(e.to_string()),
        },
    };
    write_atomic(json_path, &res.to_json().to_string())?;
    Ok(res)
}

fn history_status(history: &RunHistory) -> String {
    // RunHistory serializes its status inside to_json; reuse that wording.
    let v: serde_json::Value =
        serde_json::from_str(&history.to_json()).expect("history JSON is well formed");
    v.get("status")
        .and_then(|s| s.as_str())
        .unwrap_or("unknown")
        .to_string()
}

fn write_summary(
    cfg: &CampaignConfig,
    results: &[CellResult],
    out_dir: &Path,
) -> Result<(), BenchError> {
    let mut cells = BTreeMap::new();
    for res in results {
        let mut v = res.to_json();
        if res.error.is_none() {
            let mut metrics = serde_json::Map::new();
            for &tau in &cfg.taus {
                let metric = convergence_metric_from_improvements(
                    &res.improvements,
                    res.f0,
                    res.f_star,
                    tau,
                    res.n,
                );
                let entry = serde_json::Number::from_f64(metric)
                    .map(serde_json::Value::Number)
                    .unwrap_or(serde_json::Value::Null);
                metrics.insert(format_tau(tau), entry);
            }
            v.as_object_mut()
                .expect("cell JSON is an object")
                .insert("metrics".into(), serde_json::Value::Object(metrics));
        }
        cells.insert(res.key(), v);
    }
    let solvers: Vec<&str> = cfg.solvers.iter().map(|s| s.name()).collect();
    let problems: Vec<serde_json::Value> = cfg
        .problems
        .iter()
        .map(|(name, n)| serde_json::json!([name, n]))
        .collect();
    let taus: Vec<String> = cfg.taus.iter().map(|t| format_tau(*t)).collect();
    let summary = serde_json::json!({
        "config_hash": cfg.content_hash(),
        "solvers": solvers,
        "problems": problems,
        "seeds": cfg.seeds,
        "budget": cfg.budget_multiplier,
        "taus": taus,
        "stop_at_target": cfg.stop_at_target,
        "cells": cells,
    });
    write_atomic(&out_dir.join("summary.json"), &summary.to_string())
}

/// Builds the aggregated metric table for one tau out of cell results.
pub fn profile_input(
    results: &[CellResult],
    solvers: &[String],
    tau: f64,
    agg: Aggregation,
) -> ProfileInput {
    // problem label -> solver -> per-seed metrics
    let mut table: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for res in results {
        if res.error.is_some() {
            continue;
        }
        let metric = convergence_metric_from_improvements(
            &res.improvements,
            res.f0,
            res.f_star,
            tau,
            res.n,
        );
        table
            .entry(format!("{}-n{}", res.problem, res.n))
            .or_default()
            .entry(res.solver.clone())
            .or_default()
            .push(metric);
    }
    let rows = table
        .into_iter()
        .map(|(label, by_solver)| {
            let ns = solvers
                .iter()
                .map(|s| {
                    by_solver
                        .get(s)
                        .map(|vals| aggregate(vals, agg))
                        .unwrap_or(f64::INFINITY)
                })
                .collect();
            (label, ns)
        })
        .collect();
    ProfileInput {
        solvers: solvers.to_vec(),
        rows,
    }
}

fn write_profiles(
    cfg: &CampaignConfig,
    results: &[CellResult],
    out_dir: &Path,
) -> Result<(), BenchError> {
    let solvers: Vec<String> = cfg.solvers.iter().map(|s| s.name().to_string()).collect();
    let alphas = alpha_grid();
    for &tau in &cfg.taus {
        for agg in [Aggregation::Median, Aggregation::Worst] {
            let input = profile_input(results, &solvers, tau, agg);
            let profile = performance_profile(&input, &alphas);
            let name = format!("profile-tau{}-{}.csv", format_tau(tau), agg.name());
            write_atomic(&out_dir.join(name), &profile.to_csv())?;
        }
    }
    Ok(())
}

/// Reads the cell sidecars of a campaign directory back into results.
pub fn load_campaign(dir: &Path) -> Result<Vec<CellResult>, BenchError> {
    let mut results = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path: PathBuf = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if !name.ends_with(".json")
            || name == "summary.json"
            || name == "campaign-meta.json"
        {
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| BenchError::Campaign(format!("{name}: {e}")))?;
        results.push(CellResult::from_json(&value)?);
    }
    if results.is_empty() {
        return Err(BenchError::Campaign(format!(
            "{} holds no cell results",
            dir.display()
        )));
    }
    results.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(results)
}

/// Distinct solver names present in a set of results, in first-seen order.
pub fn solvers_present(results: &[CellResult]) -> Vec<String> {
    let mut seen = Vec::new();
    for res in results {
        if !seen.contains(&res.solver) {
            seen.push(res.solver.clone());
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::TerminationStatus;

    fn synthetic_history(improvements: Vec<(usize, f64)>) -> RunHistory {
        RunHistory {
            problem: "synthetic".into(),
            n: 10,
            m: 10,
            seed: 0,
            records: Vec::new(),
            improvements,
            status: TerminationStatus::Budget,
            f0: 100.0,
            final_x: nalgebra::DVector::zeros(10),
            final_f: 0.9,
            total_evals: 40,
        }
    }

    #[test]
    fn metric_frozen_examples() {
        // First point already satisfies the test.
        let h = synthetic_history(vec![(1, 0.5)]);
        assert_eq!(convergence_metric(&h, 100.0, 0.0, 0.01, 10), 1.0 / 11.0);

        // Never converges.
        let h = synthetic_history(vec![(1, 100.0), (7, 50.0)]);
        assert_eq!(convergence_metric(&h, 100.0, 0.0, 0.01, 10), f64::INFINITY);

        // Test first met at evaluation 33 with n = 10: 33 / 11 = 3.
        let h = synthetic_history(vec![(1, 100.0), (12, 30.0), (33, 0.9), (35, 0.1)]);
        assert_eq!(convergence_metric(&h, 100.0, 0.0, 0.01, 10), 3.0);

        // Already solved at the start.
        let h = synthetic_history(vec![(1, 0.0)]);
        assert_eq!(convergence_metric(&h, 0.0, 0.0, 0.5, 10), 0.0);
    }

    #[test]
    fn profile_matches_hand_example() {
        let input = ProfileInput {
            solvers: vec!["A".into(), "B".into()],
            rows: vec![
                ("p1".into(), vec![2.0, 4.0]),
                ("p2".into(), vec![8.0, 4.0]),
            ],
        };
        let table = performance_profile(&input, &[1.0, 2.0]);
        assert_eq!(table.values[0], vec![0.5, 1.0]);
        assert_eq!(table.values[1], vec![0.5, 1.0]);
        assert!(table.excluded.is_empty());
    }

    #[test]
    fn profile_single_solver_and_infinities() {
        let input = ProfileInput {
            solvers: vec!["only".into()],
            rows: vec![
                ("a".into(), vec![3.0]),
                ("b".into(), vec![7.0]),
                ("never".into(), vec![f64::INFINITY]),
            ],
        };
        let table = performance_profile(&input, &alpha_grid());
        // The unsolved problem is excluded; the rest are solved at alpha 1.
        assert_eq!(table.excluded, vec!["never".to_string()]);
        for &v in &table.values[0] {
            assert_eq!(v, 1.0);
        }

        // An infinite entry is never counted even at huge alpha.
        let input = ProfileInput {
            solvers: vec!["A".into(), "B".into()],
            rows: vec![("p".into(), vec![1.0, f64::INFINITY])],
        };
        let table = performance_profile(&input, &[1.0, 1e9]);
        assert_eq!(table.values[1], vec![0.0, 0.0]);
    }

    #[test]
    fn profile_is_monotone_and_bounded() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let solvers = 2 + rng.gen_range(0..3);
            let problems = 1 + rng.gen_range(0..6);
            let rows = (0..problems)
                .map(|p| {
                    let ns = (0..solvers)
                        .map(|_| {
                            if rng.gen_bool(0.15) {
                                f64::INFINITY
                            } else {
                                rng.gen_range(1.0..100.0)
                            }
                        })
                        .collect();
                    (format!("p{p}"), ns)
                })
                .collect();
            let input = ProfileInput {
                solvers: (0..solvers).map(|s| format!("s{s}")).collect(),
                rows,
            };
            let table = performance_profile(&input, &alpha_grid());
            for col in &table.values {
                let mut prev = 0.0;
                for &v in col {
                    assert!((0.0..=1.0).contains(&v));
                    assert!(v >= prev, "profile must be nondecreasing");
                    prev = v;
                }
            }
            // Every retained problem is won by someone at alpha = 1.
            if !table.values.is_empty() {
                let retained = input.rows.len() - table.excluded.len();
                if retained > 0 {
                    let wins: f64 = table.values.iter().map(|col| col[0]).sum();
                    assert!(wins * retained as f64 >= retained as f64 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn aggregation_rules() {
        assert_eq!(aggregate(&[3.0, 1.0, 2.0], Aggregation::Median), 2.0);
        assert_eq!(aggregate(&[4.0, 1.0, 2.0, 3.0], Aggregation::Median), 2.5);
        assert_eq!(aggregate(&[3.0, 1.0, 2.0], Aggregation::Worst), 3.0);
        assert_eq!(
            aggregate(&[1.0, f64::INFINITY], Aggregation::Worst),
            f64::INFINITY
        );
        // Median with most runs unconverged is unconverged.
        assert_eq!(
            aggregate(
                &[1.0, f64::INFINITY, f64::INFINITY],
                Aggregation::Median
            ),
            f64::INFINITY
        );
    }

    #[test]
    fn config_parsing_round_trip() {
        let text = "\
# demo campaign
solvers = sketch, baseline
problems = sphere-shifted:3, broyden-tridiagonal:4
seeds = 0..3
budget = 20
taus = 1e-2, 1e-4
";
        let cfg = CampaignConfig::parse(text).unwrap();
        assert_eq!(cfg.solvers, vec![SolverPreset::Sketch, SolverPreset::Baseline]);
        assert_eq!(cfg.problems.len(), 2);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.budget_multiplier, 20);
        assert!(cfg.stop_at_target);

        assert!(CampaignConfig::parse("solvers = sketch\n").is_err());
        assert!(CampaignConfig::parse(&text.replace("1e-2", "2.0")).is_err());
        assert!(CampaignConfig::parse(&text.replace("sphere-shifted:3", "nope:3")).is_err());

        // Hash is stable and canonicalization-sensitive.
        let again = CampaignConfig::parse(text).unwrap();
        assert_eq!(cfg.content_hash(), again.content_hash());
        let other = CampaignConfig::parse(&text.replace("budget = 20", "budget = 21")).unwrap();
        assert_ne!(cfg.content_hash(), other.content_hash());
    }

    #[test]
    fn tiny_campaign_runs_resumes_and_profiles() {
        let dir = std::env::temp_dir().join(format!(
            "sketchtr-bench-test-{}-{}",
            std::process::id(),
            line!()
        ));
        let _ = fs::remove_dir_all(&dir);

        let cfg = CampaignConfig::parse(
            "solvers = sketch, baseline\nproblems = sphere-shifted:3, broyden-tridiagonal:4, linear-full-rank:3\nseeds = 0..5\nbudget = 25\ntaus = 1e-2\n",
        )
        .unwrap();
        let results = run_campaign(&cfg, &dir).unwrap();
        // 2 solvers x 3 problems x 5 seeds.
        assert_eq!(results.len(), 30);
        let csvs = fs::read_dir(&dir)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .is_some_and(|x| x == "csv")
            })
            .count();
        // 30 histories + 2 profile CSVs (median, worst) for the single tau.
        assert_eq!(csvs, 32);
        assert!(dir.join("summary.json").exists());
        assert!(dir.join("campaign-meta.json").exists());

        let summary_before = fs::read_to_string(dir.join("summary.json")).unwrap();
        // Resume: identical config reruns nothing and reproduces the summary.
        let resumed = run_campaign(&cfg, &dir).unwrap();
        assert_eq!(resumed.len(), 30);
        let summary_after = fs::read_to_string(dir.join("summary.json")).unwrap();
        assert_eq!(summary_before, summary_after);

        // A different config is refused.
        let other = CampaignConfig::parse(
            "solvers = sketch\nproblems = sphere-shifted:3\nseeds = 0..2\nbudget = 10\ntaus = 1e-2\n",
        )
        .unwrap();
        assert!(run_campaign(&other, &dir).is_err());

        // Loaded results support profile computation consistent with the
        // written CSV.
        let loaded = load_campaign(&dir).unwrap();
        assert_eq!(loaded.len(), 30);
        let solvers: Vec<String> = cfg.solvers.iter().map(|s| s.name().to_string()).collect();
        let input = profile_input(&loaded, &solvers, 1e-2, Aggregation::Median);
        let profile = performance_profile(&input, &alpha_grid());
        let want = fs::read_to_string(dir.join("profile-tau1e-2-median.csv")).unwrap();
        assert_eq!(profile.to_csv(), want);

        let _ = fs::remove_dir_all(&dir);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    proptest! {
        /// Tightening `tau` can only delay the first crossing, so the metric
        /// is nondecreasing as `tau` shrinks; finite values are always whole
        /// evaluation counts divided by `n + 1`.
        #[test]
        fn metric_monotone_in_tau(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.gen_range(1usize..30);
            let f_star = rng.gen_range(-5.0..5.0f64);
            let f0 = f_star + rng.gen_range(0.5..50.0f64);
            // Strictly improving curve that may or may not reach f_star.
            let mut improvements = Vec::new();
            let mut f = f0;
            let mut evals = 1usize;
            improvements.push((evals, f));
            for _ in 0..rng.gen_range(1usize..40) {
                evals += rng.gen_range(1usize..2 * n + 2);
                f = f_star + (f - f_star) * rng.gen_range(0.05..0.95f64);
                improvements.push((evals, f));
            }

            let mut last = 0.0f64;
            for &tau in &[0.5, 1e-1, 1e-3, 1e-5, 1e-7] {
                let m = convergence_metric_from_improvements(&improvements, f0, f_star, tau, n);
                prop_assert!(m >= last, "metric dropped from {} to {} as tau tightened", last, m);
                if m.is_finite() {
                    let scaled = m * (n + 1) as f64;
                    prop_assert!(
                        (scaled - scaled.round()).abs() < 1e-9,
                        "not an eval count over n + 1: {}",
                        m
                    );
                }
                last = m;
            }
            // Starting at the optimum counts as solved for free.
            let free = convergence_metric_from_improvements(&improvements, f_star, f_star, 0.1, n);
            prop_assert_eq!(free, 0.0);
        }

        /// The median sits between the best and worst runs, and `Worst` is
        /// exactly the max, going infinite as soon as any run does.
        #[test]
        fn aggregation_bounds(
            mut values in prop::collection::vec(0.01f64..100.0, 1..25),
            infinities in 0usize..3,
        ) {
            for _ in 0..infinities {
                values.push(f64::INFINITY);
            }
            let med = aggregate(&values, Aggregation::Median);
            let worst = aggregate(&values, Aggregation::Worst);
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(worst, max);
            prop_assert!(med >= min && med <= worst);
            if infinities > 0 {
                prop_assert!(worst.is_infinite());
            }
        }
    }
}

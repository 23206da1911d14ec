//! Library side of the `rfs-swarm` command: scenario loading, run and bench
//! commands, and the artifact writers they use.

pub mod export;
pub mod svg;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rfs_swarm_core::scenario::ControllerSpec;
use rfs_swarm_core::swarmsim::{run_scenario_into, SimLog};
use rfs_swarm_core::{IlqrOptions, QuasiNewtonOptions, Scenario};

/// Scenario files shipped with the tool, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("case1_l2_far", include_str!("../scenarios/case1_l2_far.json")),
    ("case1_l2_near", include_str!("../scenarios/case1_l2_near.json")),
    ("case1_l2q_mpc", include_str!("../scenarios/case1_l2q_mpc.json")),
    ("case1_l2q_ilqr", include_str!("../scenarios/case1_l2q_ilqr.json")),
    ("case2_mpc", include_str!("../scenarios/case2_mpc.json")),
    ("case2_ilqr", include_str!("../scenarios/case2_ilqr.json")),
    ("case3_mpc", include_str!("../scenarios/case3_mpc.json")),
    ("case3_ilqr", include_str!("../scenarios/case3_ilqr.json")),
    ("cwh_star_perfect", include_str!("../scenarios/cwh_star_perfect.json")),
    ("cwh_star_gmphd", include_str!("../scenarios/cwh_star_gmphd.json")),
];

/// Parses a bundled scenario.
pub fn bundled(name: &str) -> Option<Scenario> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::from_json(text).expect("bundled scenarios are valid"))
}

/// Failure of a command, mapped onto the process exit status.
#[derive(Debug)]
pub enum CliError {
    /// The scenario does not parse or is inconsistent.
    Schema(String),
    /// The run or the artifact writing failed.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Schema(m) => write!(f, "invalid scenario: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    Scenario::from_json(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" => Ok(Format::Svg),
            other => Err(format!("unknown format {other:?}, expected csv, json or svg")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub scenario: PathBuf,
    pub out_dir: PathBuf,
    pub formats: Vec<Format>,
    pub seed: Option<u64>,
}

/// What a finished run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub log: SimLog,
    pub artifacts: Vec<PathBuf>,
}

/// Writes the requested artifacts of a log into `dir`.
pub fn write_artifacts(log: &SimLog, scenario: &Scenario, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    if formats.contains(&Format::Csv) {
        let path = dir.join("trajectory.csv");
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        export::write_trajectory_csv(log, std::io::BufWriter::new(file)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    if formats.contains(&Format::Json) {
        let path = dir.join("diagnostics.json");
        fs::write(&path, export::diagnostics_json(log)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    if formats.contains(&Format::Svg) {
        let times = if scenario.snapshot_times.is_empty() {
            svg::default_times(log)
        } else {
            scenario.snapshot_times.clone()
        };
        let path = dir.join("snapshots.svg");
        fs::write(&path, svg::render_snapshots(log, &times)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Runs one scenario and writes its artifacts. On a runtime failure the
/// steps completed so far are still written before the error is returned.
pub fn cmd_run(manifest: &RunManifest) -> Result<RunOutcome, CliError> {
    if manifest.formats.is_empty() {
        return Err(CliError::Schema("at least one export format is required".into()));
    }
    let mut scenario = load_scenario(&manifest.scenario)?;
    if let Some(seed) = manifest.seed {
        scenario.seed = seed;
    }
    let mut log = SimLog::for_scenario(&scenario);
    let result = run_scenario_into(&scenario, &mut log);
    let artifacts = write_artifacts(&log, &scenario, &manifest.out_dir, &manifest.formats)?;
    match result {
        Ok(()) => Ok(RunOutcome { log, artifacts }),
        Err(e) => Err(CliError::Runtime(e.to_string())),
    }
}

/// Checks a scenario file without running it.
pub fn cmd_validate(path: &Path) -> Result<Scenario, CliError> {
    load_scenario(path)
}

/// Copy of `scenario` driven by the named controller. The scenario's own
/// controller settings are kept when it already uses that controller.
pub fn with_controller(scenario: &Scenario, label: &str) -> Scenario {
    let mut s = scenario.clone();
    if s.controller.label() != label {
        s.controller = match label {
            "ilqr" => ControllerSpec::Ilqr {
                options: IlqrOptions::default(),
                replan_every: None,
                plan_horizon: None,
            },
            _ => ControllerSpec::Mpc {
                t_p: 3,
                t_c: 1,
                qn_opts: QuasiNewtonOptions::default(),
            },
        };
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scenario: String,
    pub controller: String,
    pub wall_ms: f64,
    pub total_cost: f64,
    pub final_errors: Vec<f64>,
    pub error: Option<String>,
}

pub const BENCH_HEADER: [&str; 6] = ["scenario", "controller", "wall_ms", "total_cost", "final_errors", "status"];

impl BenchRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.scenario.clone(),
            self.controller.clone(),
            format!("{:.3}", self.wall_ms),
            export::fmt_float(self.total_cost),
            self.final_errors
                .iter()
                .map(|e| export::fmt_float(*e))
                .collect::<Vec<_>>()
                .join(";"),
            self.error.clone().unwrap_or_else(|| "ok".into()),
        ]
    }
}

fn bench_one(scenario: &Scenario) -> BenchRow {
    let started = Instant::now();
    let mut log = SimLog::for_scenario(scenario);
    let result = run_scenario_into(scenario, &mut log);
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    BenchRow {
        scenario: scenario.name.clone(),
        controller: scenario.controller.label().into(),
        wall_ms,
        total_cost: log.total_cost(),
        final_errors: if log.steps.is_empty() { Vec::new() } else { log.final_errors() },
        error: result.err().map(|e| e.to_string()),
    }
}

/// Worker count from `RFS_SWARM_THREADS`, at least one.
pub fn thread_cap() -> usize {
    std::env::var("RFS_SWARM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Runs every scenario with both controllers and equal seeds. Rows come
/// out in input order, ILQR before MPC, whatever the thread count.
pub fn bench_scenarios(scenarios: &[Scenario], threads: usize) -> Vec<BenchRow> {
    let jobs: Vec<Scenario> = scenarios
        .iter()
        .flat_map(|s| [with_controller(s, "ilqr"), with_controller(s, "mpc")])
        .collect();
    let mut rows: Vec<Option<BenchRow>> = vec![None; jobs.len()];
    let threads = threads.max(1).min(jobs.len().max(1));
    std::thread::scope(|scope| {
        let chunks: Vec<_> = rows.chunks_mut(jobs.len().div_ceil(threads).max(1)).collect();
        let mut start = 0;
        for chunk in chunks {
            let slice = &jobs[start..start + chunk.len()];
            start += chunk.len();
            scope.spawn(move || {
                for (slot, job) in chunk.iter_mut().zip(slice) {
                    *slot = Some(bench_one(job));
                }
            });
        }
    });
    rows.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Loads the scenarios, benches them, writes bench.csv into `out_dir` and
/// returns the rows. Unreadable scenarios become failed rows.
pub fn cmd_bench(paths: &[PathBuf], out_dir: &Path) -> Result<Vec<BenchRow>, CliError> {
    let mut loaded = Vec::new();
    let mut failed = Vec::new();
    for p in paths {
        match load_scenario(p) {
            Ok(s) => loaded.push(s),
            Err(e) => failed.push(BenchRow {
                scenario: p.display().to_string(),
                controller: "-".into(),
                wall_ms: 0.0,
                total_cost: f64::NAN,
                final_errors: Vec::new(),
                error: Some(e.to_string()),
            }),
        }
    }
    let mut rows = bench_scenarios(&loaded, thread_cap());
    rows.extend(failed);
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let path = out_dir.join("bench.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    w.write_record(BENCH_HEADER).map_err(|e| io_err(&path, e))?;
    for r in &rows {
        w.write_record(r.record()).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(rows)
}

/// Fixed-width text table of bench rows.
pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<20} {:<6} {:>12} {:>14} {:>10}  {}\n",
        "scenario", "ctrl", "wall_ms", "total_cost", "max_err", "status"
    );
    for r in rows {
        let max_err = r.final_errors.iter().copied().fold(f64::NAN, f64::max);
        out.push_str(&format!(
            "{:<20} {:<6} {:>12.1} {:>14.6} {:>10.4}  {}\n",
            r.scenario,
            r.controller,
            r.wall_ms,
            r.total_cost,
            max_err,
            r.error.as_deref().unwrap_or("ok")
        ));
    }
    out
}

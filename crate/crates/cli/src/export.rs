//! Reproducible exports of a [`SimLog`].

use std::io::Write;

use serde::Serialize;

use rfs_swarm_core::swarmsim::{FailureRecord, IlqrSolveRecord, SimLog};

/// Formats a float with 9 significant digits.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        format!("{v}")
    }
}

/// Header of trajectory.csv for a state of `state_dim` coordinates.
pub fn csv_header(state_dim: usize) -> Vec<String> {
    let axes = ["x", "y", "z"];
    let half = state_dim / 2;
    let mut h: Vec<String> = ["step", "t", "entity_kind", "entity_id"].iter().map(|s| s.to_string()).collect();
    h.extend(axes.iter().take(half).map(|a| a.to_string()));
    h.extend(axes.iter().take(half).map(|a| format!("v{a}")));
    h.push("weight".into());
    h
}

fn row(step: usize, t: f64, kind: &str, id: usize, state: &[f64], state_dim: usize, weight: Option<f64>) -> Vec<String> {
    let mut r = vec![step.to_string(), fmt_float(t), kind.to_string(), id.to_string()];
    r.extend((0..state_dim).map(|i| state.get(i).map(|v| fmt_float(*v)).unwrap_or_default()));
    r.push(weight.map(fmt_float).unwrap_or_default());
    r
}

/// One row per intensity component, agent, desired component, estimate and
/// measurement at every step. Measurements fill only the measured columns.
pub fn write_trajectory_csv<W: Write>(log: &SimLog, out: W) -> csv::Result<()> {
    let n = log.state_dim;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(n))?;
    for s in &log.steps {
        for (i, c) in s.intensities.iter().enumerate() {
            w.write_record(row(s.step, s.t, "intensity", i, &c.mean, n, Some(c.weight)))?;
        }
        for a in &s.agents {
            w.write_record(row(s.step, s.t, "agent", a.id, &a.state, n, None))?;
        }
        for (i, m) in s.targets.iter().enumerate() {
            w.write_record(row(s.step, s.t, "target", i, m, n, None))?;
        }
        for (i, m) in s.estimates.iter().enumerate() {
            w.write_record(row(s.step, s.t, "estimate", i, m, n, None))?;
        }
        for (i, z) in s.measurements.iter().enumerate() {
            w.write_record(row(s.step, s.t, "measurement", i, z, n, None))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// MPC step record without its wall-clock field.
#[derive(Debug, Serialize)]
pub struct MpcDiagnostic {
    pub step: usize,
    pub inner_iters: usize,
    pub fevals: usize,
    pub cost: f64,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub steps: usize,
    pub final_errors: Vec<f64>,
    pub settling_time: Option<f64>,
    pub min_separation: f64,
    pub total_cost: f64,
    pub cardinality: Vec<(usize, Option<usize>)>,
}

#[derive(Debug, Serialize)]
pub struct Diagnostics<'a> {
    pub scenario: &'a str,
    pub controller: &'a str,
    pub estimation: &'a str,
    pub summary: Summary,
    pub failures: &'a [FailureRecord],
    pub ilqr_solves: &'a [IlqrSolveRecord],
    pub mpc_steps: Vec<MpcDiagnostic>,
}

/// Tolerance of the settling time reported in the summary.
pub const SETTLING_TOL: f64 = 0.1;

pub fn diagnostics(log: &SimLog) -> Diagnostics<'_> {
    let summary = Summary {
        steps: log.steps.len(),
        final_errors: if log.steps.is_empty() { Vec::new() } else { log.final_errors() },
        settling_time: log.settling_time(SETTLING_TOL),
        min_separation: log.min_pairwise_separation(),
        total_cost: log.total_cost(),
        cardinality: log
            .steps
            .iter()
            .map(|s| (s.true_cardinality, s.estimated_cardinality))
            .collect(),
    };
    Diagnostics {
        scenario: &log.scenario,
        controller: &log.controller,
        estimation: &log.estimation,
        summary,
        failures: &log.failures,
        ilqr_solves: &log.ilqr_solves,
        mpc_steps: log
            .mpc_steps
            .iter()
            .map(|r| MpcDiagnostic {
                step: r.step,
                inner_iters: r.inner_iters,
                fevals: r.fevals,
                cost: r.cost,
            })
            .collect(),
    }
}

/// diagnostics.json: solver records and summary metrics, free of timing.
pub fn diagnostics_json(log: &SimLog) -> String {
    let mut s = serde_json::to_string_pretty(&diagnostics(log)).expect("diagnostics serialize");
    s.push('\n');
    s
}

#[derive(Debug, Serialize)]
struct TimingDoc<'a> {
    scenario: &'a str,
    controller: &'a str,
    total_ms: f64,
    controller_ms: f64,
    step_ms: &'a [f64],
    mpc_step_ms: Vec<f64>,
}

/// Wall-clock measurements of a run.
pub fn timing_json(log: &SimLog) -> String {
    let doc = TimingDoc {
        scenario: &log.scenario,
        controller: &log.controller,
        total_ms: log.timing.total_ms,
        controller_ms: log.timing.controller_ms,
        step_ms: &log.timing.step_ms,
        mpc_step_ms: log.mpc_steps.iter().map(|r| r.wallclock_ms).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("timing serializes")
}

//! Artifact emission. Every run writes the same fixed set of files into the
//! output directory; all numbers are rendered with the shortest
//! round-tripping decimal form, times with microsecond resolution, so a
//! repeated run with the same seed reproduces the files byte for byte.
//!
//! Files: `truth.csv`, `measurements.csv`, per-estimator `estimates_*.csv`
//! and `windows_*.csv` (plus `baddata_*.csv` when rejection is enabled),
//! `mse.csv` and `summary.json`. Column meaning is carried by the header
//! row; angles are radians, magnitudes and machine quantities per unit.

use std::path::Path;

use gridmhe::genmodel::GeneratorState;
use gridmhe::network::NetworkState;

use crate::config::Scenario;
use crate::run::{EstimatorRun, RunResult};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

const STATE_NAMES: [&str; 9] = [
    "delta", "domega", "e_d_prime", "e_q_prime", "p_sv", "p_m", "e_fd", "r_f", "v_r",
];

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn sec(t: f64) -> String {
    format!("{t:.6}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

fn write_record<I, S>(w: &mut csv::Writer<std::fs::File>, path: &Path, fields: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(fields).map_err(|e| io_err(path, e))
}

fn state_columns(n_gens: usize, n_nodes: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    for g in 0..n_gens {
        for name in STATE_NAMES {
            cols.push(format!("g{}.{}", g + 1, name));
        }
    }
    for i in 0..n_nodes {
        cols.push(format!("v{}", i + 1));
    }
    for i in 0..n_nodes {
        cols.push(format!("th{}", i + 1));
    }
    cols
}

fn state_row(t: f64, gens: &[GeneratorState], net: &NetworkState) -> Vec<String> {
    let mut row = vec![sec(t)];
    for g in gens {
        for v in g.as_vector().iter() {
            row.push(num(*v));
        }
    }
    row.extend(net.v.iter().map(|v| num(*v)));
    row.extend(net.theta.iter().map(|v| num(*v)));
    row
}

fn write_truth(dir: &Path, result: &RunResult) -> Result<()> {
    let path = dir.join("truth.csv");
    let mut w = writer(&path)?;
    let n_gens = result.truth_gens.first().map_or(0, |g| g.len());
    let n_nodes = result.truth_net.first().map_or(0, |s| s.len());
    write_record(&mut w, &path, state_columns(n_gens, n_nodes))?;
    for (k, t) in result.times.iter().enumerate() {
        write_record(
            &mut w,
            &path,
            state_row(*t, &result.truth_gens[k], &result.truth_net[k]),
        )?;
    }
    w.flush().map_err(|e| io_err(&path, e))
}

fn write_measurements(dir: &Path, result: &RunResult) -> Result<()> {
    let path = dir.join("measurements.csv");
    let mut w = writer(&path)?;
    let meas = &result.measurements;
    let mut cols = vec!["t".to_string()];
    for spec in &meas.channels {
        let label = spec.label();
        cols.push(format!("{label}.mag"));
        cols.push(format!("{label}.ph"));
        cols.push(format!("{label}.ok"));
    }
    write_record(&mut w, &path, cols)?;
    for (k, t) in meas.times.iter().enumerate() {
        let mut row = vec![sec(*t)];
        for s in &meas.frames[k] {
            row.push(num(s.magnitude));
            row.push(num(s.phase));
            row.push(if s.phase_valid { "1" } else { "0" }.to_string());
        }
        write_record(&mut w, &path, row)?;
    }
    w.flush().map_err(|e| io_err(&path, e))
}

fn write_estimates(
    dir: &Path,
    name: &str,
    times: &[f64],
    run: &EstimatorRun,
    with_machines: bool,
) -> Result<()> {
    let path = dir.join(name);
    let mut w = writer(&path)?;
    let n_gens = if with_machines {
        run.gen_states.first().map_or(0, |g| g.len())
    } else {
        0
    };
    let n_nodes = run.net_states.first().map_or(0, |s| s.len());
    write_record(&mut w, &path, state_columns(n_gens, n_nodes))?;
    static NO_GENS: [GeneratorState; 0] = [];
    for (k, net) in run.net_states.iter().enumerate() {
        let t = times[run.first_instant + k];
        let gens: &[GeneratorState] = if with_machines {
            &run.gen_states[k]
        } else {
            &NO_GENS
        };
        write_record(&mut w, &path, state_row(t, gens, net))?;
    }
    w.flush().map_err(|e| io_err(&path, e))
}

fn write_windows(dir: &Path, name: &str, run: &EstimatorRun) -> Result<()> {
    let path = dir.join(name);
    let mut w = writer(&path)?;
    write_record(
        &mut w,
        &path,
        [
            "window",
            "t",
            "iterations",
            "converged",
            "cost",
            "constraint_inf",
            "removals",
        ],
    )?;
    for win in &run.windows {
        write_record(
            &mut w,
            &path,
            [
                win.index.to_string(),
                sec(win.t),
                win.iterations.to_string(),
                if win.converged { "1" } else { "0" }.to_string(),
                num(win.cost),
                num(win.constraint_inf),
                win.removals.len().to_string(),
            ],
        )?;
    }
    w.flush().map_err(|e| io_err(&path, e))
}

fn write_baddata(dir: &Path, name: &str, run: &EstimatorRun) -> Result<()> {
    let path = dir.join(name);
    let mut w = writer(&path)?;
    write_record(
        &mut w,
        &path,
        ["window", "t", "channel", "window_instant", "normalized"],
    )?;
    for win in &run.windows {
        for r in &win.removals {
            write_record(
                &mut w,
                &path,
                [
                    win.index.to_string(),
                    sec(win.t),
                    r.label.clone(),
                    r.window_instant.to_string(),
                    num(r.normalized),
                ],
            )?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))
}

fn write_mse(dir: &Path, result: &RunResult) -> Result<()> {
    let path = dir.join("mse.csv");
    let mut w = writer(&path)?;
    let mut cols = vec!["node".to_string()];
    if result.mhe.is_some() {
        cols.push("mhe".to_string());
    }
    if result.sse.is_some() {
        cols.push("sse".to_string());
    }
    write_record(&mut w, &path, cols)?;
    let nodes = result.truth_net.first().map_or(0, |s| s.len());
    for i in 0..nodes {
        let mut row = vec![(i + 1).to_string()];
        if let Some(run) = &result.mhe {
            row.push(num(run.mse[i]));
        }
        if let Some(run) = &result.sse {
            row.push(num(run.mse[i]));
        }
        write_record(&mut w, &path, row)?;
    }
    w.flush().map_err(|e| io_err(&path, e))
}

fn write_summary(dir: &Path, result: &RunResult) -> Result<()> {
    let path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&result.summary)
        .map_err(|e| io_err(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

/// Writes the full artifact set of a run into `dir`, creating it if needed.
pub fn write_artifacts(scn: &Scenario, result: &RunResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_truth(dir, result)?;
    write_measurements(dir, result)?;
    if let Some(run) = &result.mhe {
        write_estimates(dir, "estimates_mhe.csv", &result.times, run, true)?;
        write_windows(dir, "windows_mhe.csv", run)?;
        if scn.run.lnr {
            write_baddata(dir, "baddata_mhe.csv", run)?;
        }
    }
    if let Some(run) = &result.sse {
        write_estimates(dir, "estimates_sse.csv", &result.times, run, false)?;
        write_windows(dir, "windows_sse.csv", run)?;
        if scn.run.lnr {
            write_baddata(dir, "baddata_sse.csv", run)?;
        }
    }
    write_mse(dir, result)?;
    write_summary(dir, result)?;
    log::info!("wrote artifacts to {}", dir.display());
    Ok(())
}

//! Scenario execution: power flow, truth simulation, measurement synthesis
//! and the estimator passes, collected into one result with its metrics.
//!
//! The truth plant integrates the full model with the loads folded in as
//! shunts (plus any scheduled parameter mismatch); the estimators only ever
//! see the branch/charging network, the machine ratings and the measurement
//! stream. The moving-horizon pass slides over the frames and keeps the last
//! instant of every window; the static pass solves each frame on its own,
//! warm-started from the previous one. Per-node accuracy is scored on the
//! instants both estimators can produce, i.e. from sample `horizon - 1` on.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use gridmhe::baddata::{lnr_loop, LnrReport, WindowDiagnostics};
use gridmhe::estimator::{voltage_mse, Layout, MheProblem};
use gridmhe::genmodel::{GeneratorState, GeneratorUnit};
use gridmhe::network::{scalar_label, NetworkState};
use gridmhe::simulator::{self, Measurements, Trajectory};
use gridmhe::{powerflow, Error};

use crate::config::{equilibrium_unit, units, Scenario};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn estimation_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Estimation(format!("{context}: {e}"))
}

/// One scalar removed by the rejection loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemovalRecord {
    /// Scalar label, e.g. `v3.mag`.
    pub label: String,
    /// Window-local instant whose normalized residual triggered the removal.
    pub window_instant: usize,
    pub normalized: f64,
}

/// Solve statistics of one window (one frame for the static pass).
#[derive(Debug, Clone)]
pub struct WindowStats {
    pub index: usize,
    /// Time of the estimated (last) instant.
    pub t: f64,
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
    pub constraint_inf: f64,
    pub removals: Vec<RemovalRecord>,
    /// With rejection enabled: whether every remaining scalar was critical.
    pub all_critical: Option<bool>,
    /// With rejection enabled: largest |Ω_jj| among the critical scalars.
    pub max_critical_omega: Option<f64>,
}

/// Output of one estimator pass, aligned to the sample grid.
#[derive(Debug, Clone)]
pub struct EstimatorRun {
    /// Sample index of the first estimated instant.
    pub first_instant: usize,
    pub net_states: Vec<NetworkState>,
    /// Machine estimates per instant; empty for the static pass.
    pub gen_states: Vec<Vec<GeneratorState>>,
    pub windows: Vec<WindowStats>,
    /// Per-node voltage MSE against the truth, over the compared instants.
    pub mse: Vec<f64>,
}

impl EstimatorRun {
    pub fn mean_iterations(&self) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        let total: usize = self.windows.iter().map(|w| w.iterations).sum();
        total as f64 / self.windows.len() as f64
    }

    pub fn removal_count(&self) -> usize {
        self.windows.iter().map(|w| w.removals.len()).sum()
    }
}

/// Everything a run produced, kept in memory for emission and inspection.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Stored sample times of the truth trajectory.
    pub times: Vec<f64>,
    pub truth_gens: Vec<Vec<GeneratorState>>,
    pub truth_net: Vec<NetworkState>,
    pub measurements: Measurements,
    /// Decision-vector dimension of one moving-horizon window.
    pub window_dim: usize,
    /// Sample index from which estimates are compared against the truth.
    pub first_instant: usize,
    pub mhe: Option<EstimatorRun>,
    pub sse: Option<EstimatorRun>,
    /// Set when the static pass hit the unobservability error.
    pub sse_unobservable: Option<String>,
    pub summary: Summary,
}

/// Per-estimator aggregate written into the JSON summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSummary {
    /// Per-node voltage MSE, node order 1..=n.
    pub mse: Vec<f64>,
    pub mean_iterations: f64,
    pub windows: usize,
    pub converged_windows: usize,
    pub removals: usize,
    /// Distinct removed scalar labels, in first-removal order.
    pub removed_channels: Vec<String>,
    /// With rejection enabled: windows in which every scalar was critical.
    pub all_critical_windows: Option<usize>,
    /// With rejection enabled: largest |Ω_jj| seen on a critical scalar.
    pub max_critical_omega: Option<f64>,
}

/// Machine-readable run summary; `summary.json` is its serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub estimator: String,
    pub lnr: bool,
    pub horizon: usize,
    pub nodes: usize,
    pub samples: usize,
    pub sample_dt: f64,
    pub window_dim: usize,
    pub first_compared_instant: usize,
    pub mhe: Option<EstimatorSummary>,
    pub sse: Option<EstimatorSummary>,
    pub sse_unobservable: Option<String>,
}

fn summarize(run: &EstimatorRun, lnr: bool) -> EstimatorSummary {
    let mut removed_channels: Vec<String> = Vec::new();
    for w in &run.windows {
        for r in &w.removals {
            if !removed_channels.contains(&r.label) {
                removed_channels.push(r.label.clone());
            }
        }
    }
    let max_critical_omega = run
        .windows
        .iter()
        .filter_map(|w| w.max_critical_omega)
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        });
    EstimatorSummary {
        mse: run.mse.clone(),
        mean_iterations: run.mean_iterations(),
        windows: run.windows.len(),
        converged_windows: run.windows.iter().filter(|w| w.converged).count(),
        removals: run.removal_count(),
        removed_channels,
        all_critical_windows: lnr
            .then(|| run.windows.iter().filter(|w| w.all_critical == Some(true)).count()),
        max_critical_omega: if lnr { max_critical_omega } else { None },
    }
}

/// Extracts removal records and criticality figures from a rejection report.
fn rejection_stats(
    scn: &Scenario,
    report: &LnrReport,
) -> (Vec<RemovalRecord>, Option<bool>, Option<f64>) {
    let removals = report
        .removals
        .iter()
        .map(|r| RemovalRecord {
            label: scalar_label(&scn.specs[r.channel], r.scalar),
            window_instant: r.instant,
            normalized: r.normalized,
        })
        .collect();
    let (all_critical, max_omega) = criticality(&report.diagnostics);
    (removals, Some(all_critical), max_omega)
}

fn criticality(diag: &WindowDiagnostics) -> (bool, Option<f64>) {
    let max_omega = diag
        .rows
        .iter()
        .filter(|r| r.critical)
        .map(|r| r.omega.abs())
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.max(v)))
        });
    (diag.all_critical(), max_omega)
}

/// Runs a scenario end to end. Pure computation; writing artifacts is the
/// caller's business.
pub fn run_scenario(scn: &Scenario) -> Result<RunResult> {
    let pf = powerflow::solve(&scn.net, &scn.schedule)
        .map_err(|e| estimation_err("power flow", e))?;
    log::info!(
        "power flow converged in {} iterations (mismatch {:.3e})",
        pf.iterations,
        pf.max_mismatch
    );

    // Truth plant: loads folded in as constant shunts at their solved
    // voltage, machine constants optionally perturbed.
    let mut truth_net = scn.net.clone();
    for l in &scn.loads {
        let v = pf.state.v[l.node];
        truth_net = truth_net
            .with_shunt_added(l.node, l.p / (v * v), -l.q / (v * v))
            .map_err(|e| estimation_err("folding loads", e))?;
    }
    let mut truth_gens: Vec<GeneratorUnit> = Vec::with_capacity(scn.machines.len());
    let mut x0_truth: Vec<GeneratorState> = Vec::with_capacity(scn.machines.len());
    for (node, params) in units(&scn.machines, scn.mismatch.as_ref()) {
        let (unit, x0) = equilibrium_unit(
            node,
            params,
            pf.state.v[node],
            pf.state.theta[node],
            pf.p[node],
            pf.q[node],
            scn.net.s_b(),
        )
        .map_err(|e| estimation_err("truth machine equilibrium", e))?;
        truth_gens.push(unit);
        x0_truth.push(x0);
    }

    // Estimator-side machines: nominal constants, same dispatch.
    let mut est_gens: Vec<GeneratorUnit> = Vec::with_capacity(scn.machines.len());
    let mut x0_est: Vec<GeneratorState> = Vec::with_capacity(scn.machines.len());
    for (node, params) in units(&scn.machines, None) {
        let (unit, x0) = equilibrium_unit(
            node,
            params,
            pf.state.v[node],
            pf.state.theta[node],
            pf.p[node],
            pf.q[node],
            scn.net.s_b(),
        )
        .map_err(|e| estimation_err("machine equilibrium", e))?;
        est_gens.push(unit);
        x0_est.push(x0);
    }

    let traj = simulator::simulate(
        &truth_net,
        &truth_gens,
        &x0_truth,
        &pf.state,
        &scn.events,
        &scn.sim,
    )
    .map_err(|e| estimation_err("simulation", e))?;
    log::info!("simulated {} samples over {} s", traj.len(), scn.sim.t_end);

    let mut meas = simulator::synthesize_pmu(&truth_net, &scn.specs, &traj, scn.seed)
        .map_err(|e| estimation_err("measurement synthesis", e))?;
    for bd in &scn.bad_data {
        simulator::inject_bad_data(&mut meas, bd.channel, bd.scalar, bd.t, bd.value)
            .map_err(|e| estimation_err("bad-data injection", e))?;
        log::info!(
            "corrupting {} with {} from t = {} s",
            scalar_label(&scn.specs[bd.channel], bd.scalar),
            bd.value,
            bd.t
        );
    }

    let horizon = scn.run.mhe.horizon;
    let window_dim = Layout {
        horizon,
        n_gens: scn.machines.len(),
        n_nodes: scn.net.n(),
    }
    .dim();
    let first_instant = horizon - 1;

    let mhe = if scn.run.kind.runs_mhe() {
        Some(run_mhe(scn, &est_gens, &x0_est, &pf.state, &traj, &meas)?)
    } else {
        None
    };

    let (sse, sse_unobservable) = if scn.run.kind.runs_sse() {
        match run_sse(scn, &pf.state, &traj, &meas)? {
            Ok(run) => (Some(run), None),
            Err(msg) => (None, Some(msg)),
        }
    } else {
        (None, None)
    };

    let summary = Summary {
        scenario: scn.name.clone(),
        seed: scn.seed,
        estimator: scn.run.kind.to_string(),
        lnr: scn.run.lnr,
        horizon,
        nodes: scn.net.n(),
        samples: traj.len(),
        sample_dt: scn.sample_dt,
        window_dim,
        first_compared_instant: first_instant,
        mhe: mhe.as_ref().map(|r| summarize(r, scn.run.lnr)),
        sse: sse.as_ref().map(|r| summarize(r, scn.run.lnr)),
        sse_unobservable: sse_unobservable.clone(),
    };

    Ok(RunResult {
        times: traj.times.clone(),
        truth_gens: traj.gen_states.clone(),
        truth_net: traj.net_states.clone(),
        measurements: meas,
        window_dim,
        first_instant,
        mhe,
        sse,
        sse_unobservable,
        summary,
    })
}

/// Per-node MSE of an estimate series starting at `first` against the truth.
fn score(truth: &Trajectory, states: &[NetworkState], first: usize, n: usize) -> Vec<f64> {
    let truth_slice = &truth.net_states[first..first + states.len()];
    (0..n).map(|i| voltage_mse(truth_slice, states, i)).collect()
}

fn run_mhe(
    scn: &Scenario,
    est_gens: &[GeneratorUnit],
    x0_est: &[GeneratorState],
    base: &NetworkState,
    traj: &Trajectory,
    meas: &Measurements,
) -> Result<EstimatorRun> {
    let problem = MheProblem::new(
        scn.net.clone(),
        est_gens.to_vec(),
        scn.specs.clone(),
        scn.sample_dt,
        scn.run.mhe.clone(),
    )
    .map_err(|e| estimation_err("window setup", e))?;
    let lay = problem.layout();
    let horizon = lay.horizon;

    // Every instant of the first window starts at the dispatched equilibrium,
    // which is also all the estimator knows before the first frame arrives.
    let mut x = DVector::zeros(lay.dim());
    for k in 0..horizon {
        for (i, x0) in x0_est.iter().enumerate() {
            lay.set_gen_state(&mut x, k, i, x0);
        }
        lay.set_net_state(&mut x, k, base);
    }
    let mut prior = x.rows(0, lay.block()).into_owned();

    let mask = vec![true; problem.mask_len()];
    let n_windows = meas.len() - horizon + 1;
    let mut net_states = Vec::with_capacity(n_windows);
    let mut gen_states = Vec::with_capacity(n_windows);
    let mut windows = Vec::with_capacity(n_windows);

    for w in 0..n_windows {
        let frames = &meas.frames[w..w + horizon];
        let t = meas.times[w + horizon - 1];
        let context = || format!("window {w} (t = {t:.6} s)");
        let (estimate, removals, all_critical, max_critical_omega) = if scn.run.lnr {
            let report = lnr_loop(&problem, &x, Some(&prior), frames, &mask, &scn.run.lnr_cfg)
                .map_err(|e| estimation_err(&context(), e))?;
            let (removals, all_critical, max_omega) = rejection_stats(scn, &report);
            if !report.removals.is_empty() {
                log::info!(
                    "{}: removed {:?}",
                    context(),
                    removals.iter().map(|r| r.label.as_str()).collect::<Vec<_>>()
                );
            }
            (report.estimate, removals, all_critical, max_omega)
        } else {
            let estimate = problem
                .solve(&x, Some(&prior), frames, &mask)
                .map_err(|e| estimation_err(&context(), e))?;
            (estimate, Vec::new(), None, None)
        };

        net_states.push(lay.net_state(&estimate.x, horizon - 1));
        gen_states.push(
            (0..est_gens.len())
                .map(|i| lay.gen_state(&estimate.x, horizon - 1, i))
                .collect::<Vec<_>>(),
        );
        windows.push(WindowStats {
            index: w,
            t,
            iterations: estimate.iterations,
            converged: estimate.converged,
            cost: estimate.cost,
            constraint_inf: estimate.constraint_inf,
            removals,
            all_critical,
            max_critical_omega,
        });

        let (next_x, next_prior) = problem
            .slide(&estimate)
            .map_err(|e| estimation_err(&context(), e))?;
        x = next_x;
        prior = next_prior;
    }

    let first = horizon - 1;
    let mse = score(traj, &net_states, first, scn.net.n());
    Ok(EstimatorRun {
        first_instant: first,
        net_states,
        gen_states,
        windows,
        mse,
    })
}

/// Static pass. An unobservable frame aborts it and reports the frame; that
/// outcome is data (the scenario may be designed for it), not a hard error.
fn run_sse(
    scn: &Scenario,
    base: &NetworkState,
    traj: &Trajectory,
    meas: &Measurements,
) -> Result<std::result::Result<EstimatorRun, String>> {
    let problem = MheProblem::static_problem(
        scn.net.clone(),
        scn.specs.clone(),
        scn.run.mhe.clone(),
    )
    .map_err(|e| estimation_err("snapshot setup", e))?;
    let lay = problem.layout();
    let mask = vec![true; problem.mask_len()];

    let mut x = DVector::zeros(lay.dim());
    lay.set_net_state(&mut x, 0, base);

    let mut net_states = Vec::with_capacity(meas.len());
    let mut windows = Vec::with_capacity(meas.len());
    for k in 0..meas.len() {
        let frames = &meas.frames[k..k + 1];
        let t = meas.times[k];
        let context = || format!("frame {k} (t = {t:.6} s)");
        let solved = if scn.run.lnr {
            lnr_loop(&problem, &x, None, frames, &mask, &scn.run.lnr_cfg).map(|report| {
                let (removals, all_critical, max_omega) = rejection_stats(scn, &report);
                (report.estimate, removals, all_critical, max_omega)
            })
        } else {
            problem
                .solve(&x, None, frames, &mask)
                .map(|estimate| (estimate, Vec::new(), None, None))
        };
        let (estimate, removals, all_critical, max_critical_omega) = match solved {
            Ok(v) => v,
            Err(e @ Error::Unobservable { .. }) => {
                let msg = format!("{}: {e}", context());
                log::warn!("{msg}");
                return Ok(Err(msg));
            }
            Err(e) => return Err(estimation_err(&context(), e)),
        };

        net_states.push(lay.net_state(&estimate.x, 0));
        windows.push(WindowStats {
            index: k,
            t,
            iterations: estimate.iterations,
            converged: estimate.converged,
            cost: estimate.cost,
            constraint_inf: estimate.constraint_inf,
            removals,
            all_critical,
            max_critical_omega,
        });
        x = estimate.x;
    }

    // Scored on the same instants as the moving-horizon pass.
    let first = scn.run.mhe.horizon - 1;
    let mse = score(traj, &net_states[first..], first, scn.net.n());
    Ok(Ok(EstimatorRun {
        first_instant: 0,
        net_states,
        gen_states: Vec::new(),
        windows,
        mse,
    }))
}

//! Steady-state power flow used to establish the operating point from which
//! the dynamic simulation and the estimators start.
//!
//! Newton iteration in polar coordinates. The scheduled quantities are net
//! injected powers on the system base; loads enter as negative injections.
//! Complex power follows the passive-sign-free convention `s = v * conj(i)`
//! with `i` the current the node pushes into its branches and shunts.

use crate::error::{Error, Result};
use crate::network::{NetworkModel, NetworkState};
use nalgebra::{DMatrix, DVector};

pub const MAX_ITERATIONS: usize = 50;
pub const TOLERANCE: f64 = 1e-10;

/// Role of a node in the power-flow problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BusSpec {
    /// Fixes voltage magnitude and angle; balances the system.
    Slack { v: f64, theta: f64 },
    /// Fixes net active power and voltage magnitude.
    Pv { p: f64, v: f64 },
    /// Fixes net active and reactive power.
    Pq { p: f64, q: f64 },
}

/// One `BusSpec` per node, same ordering as the network.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub buses: Vec<BusSpec>,
}

impl Schedule {
    fn validate(&self, net: &NetworkModel) -> Result<()> {
        if self.buses.len() != net.n() {
            return Err(Error::InvalidInput(format!(
                "schedule covers {} nodes, network has {}",
                self.buses.len(),
                net.n()
            )));
        }
        let slacks = self
            .buses
            .iter()
            .filter(|b| matches!(b, BusSpec::Slack { .. }))
            .count();
        if slacks != 1 {
            return Err(Error::InvalidInput(format!(
                "power flow needs exactly one slack node, got {slacks}"
            )));
        }
        for b in &self.buses {
            let vm = match b {
                BusSpec::Slack { v, .. } | BusSpec::Pv { v, .. } => Some(*v),
                BusSpec::Pq { .. } => None,
            };
            if let Some(v) = vm {
                if !(v > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "scheduled voltage magnitude must be positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Converged operating point with the realized net injections at every node.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub state: NetworkState,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Net complex power pushed into the network at node `i`, plus its gradient
/// over `(v_0.., theta_0..)` when requested.
fn nodal_power(
    net: &NetworkModel,
    s: &NetworkState,
    i: usize,
    with_jac: bool,
) -> Result<(f64, f64, Option<DMatrix<f64>>)> {
    let n = net.n();
    let (sin_i, cos_i) = s.theta[i].sin_cos();
    let (e, f) = (s.v[i] * cos_i, s.v[i] * sin_i);
    if !with_jac {
        let inj = net.nodal_injection(s, i)?;
        return Ok((e * inj.d + f * inj.q, f * inj.d - e * inj.q, None));
    }
    let (inj, ij) = net.nodal_injection_jacobian(s, i)?;
    let p = e * inj.d + f * inj.q;
    let q = f * inj.d - e * inj.q;
    let mut jac = DMatrix::zeros(2, 2 * n);
    for col in 0..2 * n {
        jac[(0, col)] = e * ij[(0, col)] + f * ij[(1, col)];
        jac[(1, col)] = f * ij[(0, col)] - e * ij[(1, col)];
    }
    // Direct dependence of (e, f) on this node's own magnitude and angle.
    jac[(0, i)] += cos_i * inj.d + sin_i * inj.q;
    jac[(0, n + i)] += -f * inj.d + e * inj.q;
    jac[(1, i)] += sin_i * inj.d - cos_i * inj.q;
    jac[(1, n + i)] += e * inj.d + f * inj.q;
    Ok((p, q, Some(jac)))
}

/// Solves the scheduled power flow by Newton iteration from a flat start
/// seeded with the scheduled magnitudes.
pub fn solve(net: &NetworkModel, schedule: &Schedule) -> Result<PowerFlowSolution> {
    schedule.validate(net)?;
    let n = net.n();
    let mut state = NetworkState::flat(n);
    for (i, b) in schedule.buses.iter().enumerate() {
        match *b {
            BusSpec::Slack { v, theta } => {
                state.v[i] = v;
                state.theta[i] = theta;
            }
            BusSpec::Pv { v, .. } => state.v[i] = v,
            BusSpec::Pq { .. } => {}
        }
    }

    // Unknowns: theta at every non-slack node, v at every PQ node.
    let mut theta_vars = Vec::new();
    let mut v_vars = Vec::new();
    for (i, b) in schedule.buses.iter().enumerate() {
        match b {
            BusSpec::Slack { .. } => {}
            BusSpec::Pv { .. } => theta_vars.push(i),
            BusSpec::Pq { .. } => {
                theta_vars.push(i);
                v_vars.push(i);
            }
        }
    }
    let dim = theta_vars.len() + v_vars.len();
    if dim == 0 {
        let (p, q) = realized(net, &state)?;
        return Ok(PowerFlowSolution {
            state,
            p,
            q,
            iterations: 0,
            max_mismatch: 0.0,
        });
    }

    let mut max_mismatch = f64::INFINITY;
    for iteration in 0..MAX_ITERATIONS {
        // Mismatch rows: dP at non-slack nodes, then dQ at PQ nodes.
        let mut rhs = DVector::zeros(dim);
        let mut jac = DMatrix::zeros(dim, dim);
        let mut row = 0;
        let mut power = Vec::with_capacity(n);
        for i in 0..n {
            power.push(nodal_power(net, &state, i, true)?);
        }
        let fill = |jac: &mut DMatrix<f64>, row: usize, src: &DMatrix<f64>, which: usize| {
            for (col, &j) in theta_vars.iter().enumerate() {
                jac[(row, col)] = src[(which, n + j)];
            }
            for (col, &j) in v_vars.iter().enumerate() {
                jac[(row, theta_vars.len() + col)] = src[(which, j)];
            }
        };
        for &i in &theta_vars {
            let (p, _, ref pj) = power[i];
            let target = match schedule.buses[i] {
                BusSpec::Pv { p, .. } => p,
                BusSpec::Pq { p, .. } => p,
                BusSpec::Slack { .. } => unreachable!(),
            };
            rhs[row] = target - p;
            fill(&mut jac, row, pj.as_ref().unwrap(), 0);
            row += 1;
        }
        for &i in &v_vars {
            let (_, q, ref pj) = power[i];
            let target = match schedule.buses[i] {
                BusSpec::Pq { q, .. } => q,
                _ => unreachable!(),
            };
            rhs[row] = target - q;
            fill(&mut jac, row, pj.as_ref().unwrap(), 1);
            row += 1;
        }

        max_mismatch = rhs.amax();
        if max_mismatch <= TOLERANCE {
            let (p, q) = realized(net, &state)?;
            return Ok(PowerFlowSolution {
                state,
                p,
                q,
                iterations: iteration,
                max_mismatch,
            });
        }

        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularInit("power-flow Jacobian is singular".into()))?;
        for (col, &j) in theta_vars.iter().enumerate() {
            state.theta[j] += delta[col];
        }
        for (col, &j) in v_vars.iter().enumerate() {
            state.v[j] += delta[theta_vars.len() + col];
            if state.v[j] <= 0.0 {
                return Err(Error::PowerFlowDiverged {
                    iterations: iteration + 1,
                    mismatch: max_mismatch,
                });
            }
        }
    }
    Err(Error::PowerFlowDiverged {
        iterations: MAX_ITERATIONS,
        mismatch: max_mismatch,
    })
}

fn realized(net: &NetworkModel, state: &NetworkState) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p = Vec::with_capacity(net.n());
    let mut q = Vec::with_capacity(net.n());
    for i in 0..net.n() {
        let (pi, qi, _) = nodal_power(net, state, i, false)?;
        p.push(pi);
        q.push(qi);
    }
    Ok((p, q))
}

//! Ground-truth generation: equilibrium initialization, implicit integration
//! of the coupled machine/network equations, disturbance events, and the PMU
//! measurement stream derived from the resulting trajectory.

use crate::error::{Error, Result};
use crate::genmodel::{
    self, DqCurrent, GeneratorParams, GeneratorSetpoints, GeneratorState, GeneratorUnit,
    STATE_DIM,
};
use crate::network::{MeasurementSpec, NetCurrent, NetworkModel, NetworkState, PolarReading};
use crate::wrap_angle;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::FRAC_PI_2;

/// Residual tolerance of the per-step Newton corrector.
pub const CORRECTOR_TOLERANCE: f64 = 1e-10;
const CORRECTOR_MAX_ITERATIONS: usize = 25;

/// Back-solves the machine state and the reference inputs that hold a
/// generator in equilibrium at the given terminal phasor while it injects
/// `(p_inj, q_inj)` into the network (system base `s_b`).
pub fn init_generator(
    p: &GeneratorParams,
    v: f64,
    theta: f64,
    p_inj: f64,
    q_inj: f64,
    s_b: f64,
) -> Result<(GeneratorState, GeneratorSetpoints)> {
    p.validate()?;
    if !(v > 0.0) {
        return Err(Error::SingularInit(format!(
            "terminal voltage magnitude must be positive, got {v}"
        )));
    }
    if !(s_b > 0.0) {
        return Err(Error::InvalidInput(format!(
            "system base power must be positive, got {s_b}"
        )));
    }
    let vph = Complex64::from_polar(v, theta);
    let i_sys = (Complex64::new(p_inj, q_inj) / vph).conj();
    let i_m = i_sys * (s_b / p.s_n);
    // The internal voltage behind (r_s + j x_q) points along the rotor q axis.
    let internal = vph + Complex64::new(p.r_s, p.x_q) * i_m;
    if internal.norm() < 1e-9 {
        return Err(Error::SingularInit(
            "internal voltage vanishes; rotor angle is undefined".into(),
        ));
    }
    let delta = internal.arg();
    let rot = Complex64::from_polar(1.0, FRAC_PI_2 - delta);
    let u = i_m * rot;
    let w = vph * rot;
    let (i_d, i_q) = (u.re, u.im);
    let (v_d, v_q) = (w.re, w.im);
    let e_d_prime = v_d + p.r_s * i_d - p.x_q_prime * i_q;
    let e_q_prime = v_q + p.r_s * i_q + p.x_d_prime * i_d;
    let e_fd = e_q_prime + (p.x_d - p.x_d_prime) * i_d;

    let mut x = GeneratorState {
        delta,
        domega: 0.0,
        e_d_prime,
        e_q_prime,
        p_sv: 0.0,
        p_m: 0.0,
        e_fd,
        r_f: p.k_f / p.t_f * e_fd,
        v_r: p.k_e * e_fd,
    };
    let p_e = genmodel::electric_power(&x, &DqCurrent { d: i_d, q: i_q }, p);
    x.p_sv = p_e;
    x.p_m = p_e;
    let sp = GeneratorSetpoints {
        p_ref: p_e,
        v_ref: v + p.k_e * e_fd / p.k_a,
    };
    Ok((x, sp))
}

/// Scaling applied to selected truth-side machine constants so the estimator
/// runs against a plant that differs from its model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterMismatch {
    pub x_d_prime_scale: f64,
    pub x_q_prime_scale: f64,
    pub h_scale: f64,
}

impl Default for ParameterMismatch {
    fn default() -> Self {
        Self {
            x_d_prime_scale: 1.05,
            x_q_prime_scale: 1.05,
            h_scale: 0.95,
        }
    }
}

impl ParameterMismatch {
    pub fn apply(&self, p: &GeneratorParams) -> GeneratorParams {
        let mut out = p.clone();
        out.x_d_prime *= self.x_d_prime_scale;
        out.x_q_prime *= self.x_q_prime_scale;
        out.h *= self.h_scale;
        out
    }
}

/// Disturbances applied at integration-step boundaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    /// Additional load drawing `(dp, dq)` at the node, converted to a shunt
    /// admittance at the pre-event voltage.
    LoadStep { node: usize, dp: f64, dq: f64 },
    /// Step change of a generator's reference inputs.
    SetpointStep { gen: usize, dp_ref: f64, dv_ref: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

/// Integration setup. `dt` is the internal step; every `sample_every`-th step
/// is stored in the trajectory.
#[derive(Debug, Clone, Copy)]
pub struct SimulationConfig {
    pub t_end: f64,
    pub dt: f64,
    pub sample_every: usize,
}

impl SimulationConfig {
    fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.t_end > 0.0) || self.sample_every == 0 {
            return Err(Error::InvalidInput(format!(
                "simulation setup must have positive t_end, dt and sample_every, got {self:?}"
            )));
        }
        let steps = (self.t_end / self.dt).round();
        if (steps * self.dt - self.t_end).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "t_end {} is not a multiple of dt {}",
                self.t_end, self.dt
            )));
        }
        Ok(steps as usize)
    }
}

/// Sampled system trajectory: one entry per stored instant.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Spacing between stored samples.
    pub dt: f64,
    pub times: Vec<f64>,
    /// `gen_states[k][i]` is generator `i` at sample `k`.
    pub gen_states: Vec<Vec<GeneratorState>>,
    pub net_states: Vec<NetworkState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Stacks `[gen states; v; theta]` used by the corrector.
struct Layout {
    m: usize,
    n: usize,
}

impl Layout {
    fn dim(&self) -> usize {
        STATE_DIM * self.m + 2 * self.n
    }

    fn v(&self, node: usize) -> usize {
        STATE_DIM * self.m + node
    }

    fn theta(&self, node: usize) -> usize {
        STATE_DIM * self.m + self.n + node
    }
}

fn check_gens(net: &NetworkModel, gens: &[GeneratorUnit]) -> Result<()> {
    if gens.is_empty() {
        return Err(Error::InvalidInput("simulation needs at least one generator".into()));
    }
    let mut nodes = Vec::new();
    for g in gens {
        if g.node >= net.n() {
            return Err(Error::InvalidInput(format!(
                "generator node {} outside 0..{}",
                g.node,
                net.n()
            )));
        }
        g.params.validate()?;
        if nodes.contains(&g.node) {
            return Err(Error::InvalidInput(format!(
                "two generators share node {}",
                g.node
            )));
        }
        nodes.push(g.node);
    }
    Ok(())
}

/// Network-side residual at every node: current into branches and shunts
/// minus the generator injections, with optional Jacobian over
/// `[gen states; v; theta]`. Rows are `d` for all nodes, then `q`.
fn network_residual(
    net: &NetworkModel,
    gens: &[GeneratorUnit],
    x: &[GeneratorState],
    s: &NetworkState,
    with_jac: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    let lay = Layout {
        m: gens.len(),
        n: net.n(),
    };
    let n = lay.n;
    let mut r = DVector::zeros(2 * n);
    let mut jac = with_jac.then(|| DMatrix::zeros(2 * n, lay.dim()));
    for node in 0..n {
        if let Some(j) = jac.as_mut() {
            let (inj, ij) = net.nodal_injection_jacobian(s, node)?;
            r[node] = inj.d;
            r[n + node] = inj.q;
            for col in 0..2 * n {
                j[(node, STATE_DIM * lay.m + col)] = ij[(0, col)];
                j[(n + node, STATE_DIM * lay.m + col)] = ij[(1, col)];
            }
        } else {
            let inj = net.nodal_injection(s, node)?;
            r[node] = inj.d;
            r[n + node] = inj.q;
        }
    }
    for (i, g) in gens.iter().enumerate() {
        let node = g.node;
        let (v, th) = (s.v[node], s.theta[node]);
        if let Some(j) = jac.as_mut() {
            let (inj, jx, jvt) =
                genmodel::generator_injection_jacobian(&x[i], v, th, &g.params, net.s_b())?;
            r[node] -= inj.d;
            r[n + node] -= inj.q;
            for col in 0..STATE_DIM {
                j[(node, STATE_DIM * i + col)] -= jx[(0, col)];
                j[(n + node, STATE_DIM * i + col)] -= jx[(1, col)];
            }
            j[(node, lay.v(node))] -= jvt[(0, 0)];
            j[(node, lay.theta(node))] -= jvt[(0, 1)];
            j[(n + node, lay.v(node))] -= jvt[(1, 0)];
            j[(n + node, lay.theta(node))] -= jvt[(1, 1)];
        } else {
            let inj = genmodel::generator_injection(&x[i], v, th, &g.params, net.s_b())?;
            r[node] -= inj.d;
            r[n + node] -= inj.q;
        }
    }
    Ok((r, jac))
}

/// Re-solves the network voltages with the machine states frozen; used after
/// a discrete event changes the algebraic equations.
pub fn reconcile_network(
    net: &NetworkModel,
    gens: &[GeneratorUnit],
    x: &[GeneratorState],
    s0: &NetworkState,
) -> Result<NetworkState> {
    check_gens(net, gens)?;
    let n = net.n();
    let m = gens.len();
    let mut s = s0.clone();
    for iteration in 0..CORRECTOR_MAX_ITERATIONS {
        let (r, jac) = network_residual(net, gens, x, &s, true)?;
        if r.amax() <= CORRECTOR_TOLERANCE {
            return Ok(s);
        }
        // Keep only the voltage columns.
        let full = jac.unwrap();
        let reduced = full.columns(STATE_DIM * m, 2 * n).into_owned();
        let delta = reduced.lu().solve(&r).ok_or(Error::CorrectorDiverged {
            step: iteration,
            t: 0.0,
            residual: r.amax(),
        })?;
        for node in 0..n {
            s.v[node] -= delta[node];
            s.theta[node] -= delta[n + node];
        }
    }
    let (r, _) = network_residual(net, gens, x, &s, false)?;
    Err(Error::CorrectorDiverged {
        step: CORRECTOR_MAX_ITERATIONS,
        t: 0.0,
        residual: r.amax(),
    })
}

/// One implicit trapezoidal step of the coupled differential/algebraic
/// system.
fn trapezoid_step(
    net: &NetworkModel,
    gens: &[GeneratorUnit],
    setpoints: &[GeneratorSetpoints],
    x: &[GeneratorState],
    s: &NetworkState,
    dt: f64,
    step: usize,
) -> Result<(Vec<GeneratorState>, NetworkState)> {
    let lay = Layout {
        m: gens.len(),
        n: net.n(),
    };
    let (m, n) = (lay.m, lay.n);
    let mut f0 = Vec::with_capacity(m);
    for (i, g) in gens.iter().enumerate() {
        f0.push(genmodel::sg_derivatives(
            &x[i],
            s.v[g.node],
            s.theta[g.node],
            &g.params,
            &setpoints[i],
        )?);
    }

    let mut x1: Vec<GeneratorState> = x.to_vec();
    let mut s1 = s.clone();
    for _ in 0..CORRECTOR_MAX_ITERATIONS {
        let mut r = DVector::zeros(lay.dim());
        let mut jac = DMatrix::zeros(lay.dim(), lay.dim());
        for (i, g) in gens.iter().enumerate() {
            let node = g.node;
            let (f1, a1, b1) = genmodel::sg_jacobian(
                &x1[i],
                s1.v[node],
                s1.theta[node],
                &g.params,
                &setpoints[i],
            )?;
            let res = x1[i].as_vector() - x[i].as_vector() - (dt / 2.0) * (f0[i] + f1);
            for row in 0..STATE_DIM {
                r[STATE_DIM * i + row] = res[row];
                for col in 0..STATE_DIM {
                    let mut val = -(dt / 2.0) * a1[(row, col)];
                    if row == col {
                        val += 1.0;
                    }
                    jac[(STATE_DIM * i + row, STATE_DIM * i + col)] = val;
                }
                jac[(STATE_DIM * i + row, lay.v(node))] = -(dt / 2.0) * b1[(row, 0)];
                jac[(STATE_DIM * i + row, lay.theta(node))] = -(dt / 2.0) * b1[(row, 1)];
            }
        }
        let (rn, jn) = network_residual(net, gens, &x1, &s1, true)?;
        let jn = jn.unwrap();
        for row in 0..2 * n {
            r[STATE_DIM * m + row] = rn[row];
            for col in 0..lay.dim() {
                jac[(STATE_DIM * m + row, col)] = jn[(row, col)];
            }
        }

        if r.amax() <= CORRECTOR_TOLERANCE {
            return Ok((x1, s1));
        }
        let delta = jac.lu().solve(&r).ok_or(Error::CorrectorDiverged {
            step,
            t: step as f64 * dt,
            residual: r.amax(),
        })?;
        for i in 0..m {
            let mut xv = x1[i].as_vector();
            for row in 0..STATE_DIM {
                xv[row] -= delta[STATE_DIM * i + row];
            }
            x1[i] = GeneratorState::from_vector(&xv);
        }
        for node in 0..n {
            s1.v[node] -= delta[lay.v(node)];
            s1.theta[node] -= delta[lay.theta(node)];
        }
    }
    Err(Error::CorrectorDiverged {
        step,
        t: step as f64 * dt,
        residual: f64::NAN,
    })
}

/// Integrates the coupled system from a consistent initial condition,
/// applying events at the nearest step boundary. When an event falls on a
/// stored sample instant, the sample is recorded before the event takes
/// effect.
pub fn simulate(
    net: &NetworkModel,
    gens: &[GeneratorUnit],
    x0: &[GeneratorState],
    s0: &NetworkState,
    events: &[Event],
    cfg: &SimulationConfig,
) -> Result<Trajectory> {
    check_gens(net, gens)?;
    if x0.len() != gens.len() {
        return Err(Error::InvalidInput(format!(
            "{} initial machine states for {} generators",
            x0.len(),
            gens.len()
        )));
    }
    if s0.len() != net.n() {
        return Err(Error::InvalidInput(format!(
            "initial network state covers {} of {} nodes",
            s0.len(),
            net.n()
        )));
    }
    let steps = cfg.steps()?;
    let mut scheduled: Vec<(usize, EventKind)> = Vec::with_capacity(events.len());
    for ev in events {
        let step = (ev.t / cfg.dt).round();
        if !(ev.t >= 0.0) || step as usize > steps {
            return Err(Error::InvalidInput(format!(
                "event time {} outside the simulated range",
                ev.t
            )));
        }
        match ev.kind {
            EventKind::LoadStep { node, .. } if node >= net.n() => {
                return Err(Error::InvalidInput(format!(
                    "load step node {node} outside 0..{}",
                    net.n()
                )));
            }
            EventKind::SetpointStep { gen, .. } if gen >= gens.len() => {
                return Err(Error::InvalidInput(format!(
                    "setpoint step generator {gen} outside 0..{}",
                    gens.len()
                )));
            }
            _ => {}
        }
        scheduled.push((step as usize, ev.kind));
    }
    scheduled.sort_by_key(|(step, _)| *step);

    let mut net_cur = net.clone();
    let mut units = gens.to_vec();
    let mut x = x0.to_vec();
    let mut s = s0.clone();
    let mut traj = Trajectory {
        dt: cfg.dt * cfg.sample_every as f64,
        times: Vec::new(),
        gen_states: Vec::new(),
        net_states: Vec::new(),
    };

    let mut next_event = 0;
    for step in 0..=steps {
        if step % cfg.sample_every == 0 {
            traj.times.push(step as f64 * cfg.dt);
            traj.gen_states.push(x.clone());
            traj.net_states.push(s.clone());
        }
        if step == steps {
            break;
        }

        let mut touched = false;
        while next_event < scheduled.len() && scheduled[next_event].0 == step {
            match scheduled[next_event].1 {
                EventKind::LoadStep { node, dp, dq } => {
                    let v = s.v[node];
                    let dg = dp / (v * v);
                    let db = -dq / (v * v);
                    net_cur = net_cur.with_shunt_added(node, dg, db)?;
                    log::debug!(
                        "t={:.4}: load step at node {} (dp={}, dq={})",
                        step as f64 * cfg.dt,
                        node,
                        dp,
                        dq
                    );
                }
                EventKind::SetpointStep { gen, dp_ref, dv_ref } => {
                    units[gen].setpoints.p_ref += dp_ref;
                    units[gen].setpoints.v_ref += dv_ref;
                    log::debug!(
                        "t={:.4}: setpoint step at generator {} (dp_ref={}, dv_ref={})",
                        step as f64 * cfg.dt,
                        gen,
                        dp_ref,
                        dv_ref
                    );
                }
            }
            touched = true;
            next_event += 1;
        }
        if touched {
            s = reconcile_network(&net_cur, &units, &x, &s)?;
        }

        let setpoints: Vec<GeneratorSetpoints> = units.iter().map(|u| u.setpoints).collect();
        let (x1, s1) = trapezoid_step(&net_cur, &units, &setpoints, &x, &s, cfg.dt, step)?;
        x = x1;
        s = s1;
    }
    Ok(traj)
}

/// Evaluates every channel at every stored sample, noise-free.
pub fn measure_frames(
    net: &NetworkModel,
    specs: &[MeasurementSpec],
    traj: &Trajectory,
) -> Result<Vec<Vec<PolarReading>>> {
    for spec in specs {
        spec.validate(net)?;
    }
    traj.net_states
        .iter()
        .map(|s| specs.iter().map(|spec| net.measure(s, spec)).collect())
        .collect()
}

/// One noisy scalar pair from a PMU channel. An unusable phase (the
/// underlying phasor was too small) is reported as zero with
/// `phase_valid = false`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmuSample {
    pub magnitude: f64,
    pub phase: f64,
    pub phase_valid: bool,
}

/// Synthesized measurement stream: `frames[k][c]` is channel `c` at
/// `times[k]`.
#[derive(Debug, Clone)]
pub struct Measurements {
    pub dt: f64,
    pub times: Vec<f64>,
    pub channels: Vec<MeasurementSpec>,
    pub frames: Vec<Vec<PmuSample>>,
}

impl Measurements {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Draws the measurement stream for a trajectory. The generator is seeded
/// explicitly and consumed in frame order, channel order, magnitude before
/// phase, so a given `(trajectory, specs, seed)` triple always yields the
/// same stream.
pub fn synthesize_pmu(
    net: &NetworkModel,
    specs: &[MeasurementSpec],
    traj: &Trajectory,
    seed: u64,
) -> Result<Measurements> {
    let clean = measure_frames(net, specs, traj)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noises: Vec<Normal<f64>> = specs
        .iter()
        .map(|spec| {
            Normal::new(0.0, spec.variance.sqrt()).map_err(|_| {
                Error::InvalidInput(format!("invalid noise variance {}", spec.variance))
            })
        })
        .collect::<Result<_>>()?;
    let mut frames = Vec::with_capacity(clean.len());
    for readings in &clean {
        let mut frame = Vec::with_capacity(specs.len());
        for (c, reading) in readings.iter().enumerate() {
            let mag_noise = noises[c].sample(&mut rng);
            let phase_noise = noises[c].sample(&mut rng);
            frame.push(if reading.degenerate {
                PmuSample {
                    magnitude: reading.magnitude + mag_noise,
                    phase: 0.0,
                    phase_valid: false,
                }
            } else {
                PmuSample {
                    magnitude: reading.magnitude + mag_noise,
                    phase: wrap_angle(reading.phase + phase_noise),
                    phase_valid: true,
                }
            });
        }
        frames.push(frame);
    }
    Ok(Measurements {
        dt: traj.dt,
        times: traj.times.clone(),
        channels: specs.to_vec(),
        frames,
    })
}

/// Replaces one scalar of one channel with a constant from `t_start` onward,
/// emulating a stuck or mis-calibrated instrument.
pub fn inject_bad_data(
    meas: &mut Measurements,
    channel: usize,
    scalar: crate::network::ChannelScalar,
    t_start: f64,
    value: f64,
) -> Result<()> {
    if channel >= meas.channels.len() {
        return Err(Error::InvalidInput(format!(
            "channel {channel} outside 0..{}",
            meas.channels.len()
        )));
    }
    for (k, t) in meas.times.iter().enumerate() {
        if *t >= t_start - 1e-12 {
            match scalar {
                crate::network::ChannelScalar::Magnitude => {
                    meas.frames[k][channel].magnitude = value;
                }
                crate::network::ChannelScalar::Phase => {
                    meas.frames[k][channel].phase = value;
                    meas.frames[k][channel].phase_valid = true;
                }
            }
        }
    }
    Ok(())
}

/// Total current imbalance of a trajectory sample; diagnostic used in tests.
pub fn algebraic_residual(
    net: &NetworkModel,
    gens: &[GeneratorUnit],
    x: &[GeneratorState],
    s: &NetworkState,
) -> Result<f64> {
    let (r, _) = network_residual(net, gens, x, s, false)?;
    Ok(r.amax())
}

/// Convenience: generator injection as a tuple for diagnostics.
pub fn injection_of(
    g: &GeneratorUnit,
    x: &GeneratorState,
    s: &NetworkState,
    s_b: f64,
) -> Result<NetCurrent> {
    genmodel::generator_injection(x, s.v[g.node], s.theta[g.node], &g.params, s_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Branch, ChannelScalar, MeasurementKind};
    use crate::powerflow::{self, BusSpec, Schedule};
    use crate::testsys;
    use approx::assert_relative_eq;

    fn two_bus_setup() -> (NetworkModel, NetworkModel, GeneratorUnit, GeneratorState, NetworkState)
    {
        let net = NetworkModel::new(
            2,
            vec![Branch { from: 0, to: 1, g: 1.0, b: -8.0 }],
            &[],
            vec![0],
            vec![],
            100.0,
        )
        .unwrap();
        let schedule = Schedule {
            buses: vec![
                BusSpec::Slack { v: 1.02, theta: 0.0 },
                BusSpec::Pq { p: -0.6, q: -0.2 },
            ],
        };
        let pf = powerflow::solve(&net, &schedule).unwrap();
        let v1 = pf.state.v[1];
        let truth = net
            .with_shunt_added(1, 0.6 / (v1 * v1), -0.2 / (v1 * v1))
            .unwrap();
        let params = crate::genmodel::test_fixtures::params();
        let (x0, sp) =
            init_generator(&params, pf.state.v[0], pf.state.theta[0], pf.p[0], pf.q[0], 100.0)
                .unwrap();
        let unit = GeneratorUnit {
            node: 0,
            params,
            setpoints: sp,
        };
        (net, truth, unit, x0, pf.state)
    }

    #[test]
    fn init_generator_produces_equilibrium() {
        let (_, truth, unit, x0, s0) = two_bus_setup();
        let f = crate::genmodel::sg_derivatives(
            &x0,
            s0.v[0],
            s0.theta[0],
            &unit.params,
            &unit.setpoints,
        )
        .unwrap();
        assert!(f.amax() <= 1e-12, "residual derivatives {:?}", f);
        // Machine current agrees with what the network demands at the node,
        // and the load shunt consumes the power flow's load exactly.
        let r = algebraic_residual(&truth, std::slice::from_ref(&unit), &[x0], &s0).unwrap();
        assert!(r <= 1e-12, "coupling residual {r}");
    }

    #[test]
    fn init_generator_rejects_degenerate_inputs() {
        let params = crate::genmodel::test_fixtures::params();
        assert!(init_generator(&params, 0.0, 0.0, 0.5, 0.1, 100.0).is_err());
        assert!(init_generator(&params, 1.0, 0.0, 0.5, 0.1, 0.0).is_err());
    }

    #[test]
    fn equilibrium_is_invariant_over_ten_seconds() {
        let sys = testsys::five_bus();
        let cfg = SimulationConfig {
            t_end: 10.0,
            dt: 1e-3,
            sample_every: 10,
        };
        let traj = simulate(&sys.truth_net, &sys.gens, &sys.x0, &sys.s0, &[], &cfg).unwrap();
        assert_eq!(traj.len(), 1001);
        let last = traj.len() - 1;
        for (i, x) in traj.gen_states[last].iter().enumerate() {
            let drift = (x.as_vector() - sys.x0[i].as_vector()).amax();
            assert!(drift <= 1e-6, "generator {i} drifted by {drift}");
        }
        for node in 0..sys.truth_net.n() {
            assert!((traj.net_states[last].v[node] - sys.s0.v[node]).abs() <= 1e-6);
            assert!(
                wrap_angle(traj.net_states[last].theta[node] - sys.s0.theta[node]).abs() <= 1e-6
            );
        }
    }

    #[test]
    fn load_step_settles_to_a_new_operating_point() {
        let sys = testsys::five_bus();
        let cfg = SimulationConfig {
            t_end: 8.0,
            dt: 1e-3,
            sample_every: 10,
        };
        let events = [Event {
            t: 0.5,
            kind: EventKind::LoadStep {
                node: 2,
                dp: 0.2,
                dq: 0.05,
            },
        }];
        let traj = simulate(&sys.truth_net, &sys.gens, &sys.x0, &sys.s0, &events, &cfg).unwrap();
        // The sample at the event instant still shows the pre-event state.
        let k_event = (0.5 / traj.dt).round() as usize;
        assert_relative_eq!(traj.net_states[k_event].v[2], sys.s0.v[2], epsilon = 1e-9);
        // Shortly after, the load node voltage has sagged.
        assert!(traj.net_states[k_event + 2].v[2] < sys.s0.v[2] - 1e-4);
        // Droop control leaves a small common under-frequency, so the
        // absolute angles keep ramping; everything else must settle.
        let last = traj.len() - 1;
        let settle = traj.len() - 51;
        let w0 = traj.gen_states[last][0].domega;
        let w1 = traj.gen_states[last][1].domega;
        assert!((w0 - w1).abs() <= 1e-5, "machines disagree on speed: {w0} vs {w1}");
        assert!(
            (-0.01..-0.003).contains(&w0),
            "implausible steady speed offset {w0}"
        );
        for i in 0..sys.gens.len() {
            let a = traj.gen_states[last][i].as_vector();
            let b = traj.gen_states[settle][i].as_vector();
            // The reheat lag keeps the mechanical power creeping for tens of
            // seconds, so only the fast states are expected to be quiet.
            let tail = (1..crate::genmodel::FAST_STATES)
                .map(|k| (a[k] - b[k]).abs())
                .fold(0.0, f64::max);
            assert!(tail <= 1e-3, "generator {i} still moving by {tail}");
            // The governors are still raising output toward the new load.
            assert!(traj.gen_states[last][i].p_m > sys.x0[i].p_m);
            // The rotor angle ramps at the common electrical speed offset.
            let drift = a[0] - b[0];
            let expected = sys.gens[i].params.omega_n * w0 * (last - settle) as f64 * traj.dt;
            assert_relative_eq!(drift, expected, max_relative = 0.05);
        }
        for node in 0..sys.truth_net.n() {
            let dv =
                (traj.net_states[last].v[node] - traj.net_states[settle].v[node]).abs();
            assert!(dv <= 5e-4, "voltage at node {node} still moving by {dv}");
        }
    }

    #[test]
    fn step_halving_converges_at_second_order() {
        let sys = testsys::five_bus();
        let events = [Event {
            t: 0.0,
            kind: EventKind::SetpointStep {
                gen: 0,
                dp_ref: 0.0,
                dv_ref: 0.02,
            },
        }];
        let run = |dt: f64| {
            let cfg = SimulationConfig {
                t_end: 0.4,
                dt,
                sample_every: (0.4 / dt).round() as usize,
            };
            let traj =
                simulate(&sys.truth_net, &sys.gens, &sys.x0, &sys.s0, &events, &cfg).unwrap();
            let last = traj.len() - 1;
            let mut out = vec![
                traj.gen_states[last][0].delta,
                traj.gen_states[last][0].domega,
                traj.gen_states[last][0].e_fd,
            ];
            out.push(traj.net_states[last].v[2]);
            out
        };
        let coarse = run(4e-3);
        let medium = run(2e-3);
        let fine = run(1e-3);
        let err_coarse: f64 = coarse
            .iter()
            .zip(&medium)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let err_fine: f64 = medium
            .iter()
            .zip(&fine)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let ratio = err_coarse / err_fine;
        assert!(
            (3.0..6.0).contains(&ratio),
            "expected roughly fourfold error reduction, got {ratio} ({err_coarse} / {err_fine})"
        );
    }

    #[test]
    fn synthesized_measurements_are_reproducible() {
        let sys = testsys::five_bus();
        let cfg = SimulationConfig {
            t_end: 0.5,
            dt: 1e-3,
            sample_every: 10,
        };
        let traj = simulate(&sys.truth_net, &sys.gens, &sys.x0, &sys.s0, &[], &cfg).unwrap();
        let specs = [
            MeasurementSpec {
                kind: MeasurementKind::VoltagePhasor { node: 3 },
                variance: 1e-6,
            },
            MeasurementSpec {
                kind: MeasurementKind::CurrentFlow { from: 3, to: 4 },
                variance: 1e-6,
            },
        ];
        let a = synthesize_pmu(&sys.est_net, &specs, &traj, 7).unwrap();
        let b = synthesize_pmu(&sys.est_net, &specs, &traj, 7).unwrap();
        assert_eq!(a.frames, b.frames);
        let c = synthesize_pmu(&sys.est_net, &specs, &traj, 8).unwrap();
        assert_ne!(a.frames, c.frames);
        // Noise is centered on the clean readings.
        let clean = measure_frames(&sys.est_net, &specs, &traj).unwrap();
        for (frame, ref_frame) in a.frames.iter().zip(&clean) {
            for (sample, reading) in frame.iter().zip(ref_frame) {
                assert!((sample.magnitude - reading.magnitude).abs() < 1e-2);
                assert!(sample.phase_valid);
                assert!(wrap_angle(sample.phase - reading.phase).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn bad_data_overrides_a_scalar_from_its_start_time() {
        let sys = testsys::five_bus();
        let cfg = SimulationConfig {
            t_end: 0.5,
            dt: 1e-3,
            sample_every: 10,
        };
        let traj = simulate(&sys.truth_net, &sys.gens, &sys.x0, &sys.s0, &[], &cfg).unwrap();
        let specs = [MeasurementSpec {
            kind: MeasurementKind::VoltagePhasor { node: 2 },
            variance: 1e-6,
        }];
        let mut meas = synthesize_pmu(&sys.est_net, &specs, &traj, 3).unwrap();
        let before = meas.clone();
        inject_bad_data(&mut meas, 0, ChannelScalar::Magnitude, 0.3, 0.92).unwrap();
        for (k, t) in meas.times.iter().enumerate() {
            if *t >= 0.3 {
                assert_eq!(meas.frames[k][0].magnitude, 0.92);
            } else {
                assert_eq!(meas.frames[k][0].magnitude, before.frames[k][0].magnitude);
            }
            assert_eq!(meas.frames[k][0].phase, before.frames[k][0].phase);
        }
        assert!(inject_bad_data(&mut meas, 5, ChannelScalar::Magnitude, 0.3, 0.92).is_err());
    }

    #[test]
    fn mismatch_scales_the_selected_constants() {
        let p = crate::genmodel::test_fixtures::params();
        let scaled = ParameterMismatch::default().apply(&p);
        assert_relative_eq!(scaled.x_d_prime, p.x_d_prime * 1.05);
        assert_relative_eq!(scaled.x_q_prime, p.x_q_prime * 1.05);
        assert_relative_eq!(scaled.h, p.h * 0.95);
        assert_eq!(scaled.x_d, p.x_d);
        assert_eq!(scaled.t_a, p.t_a);
    }

    #[test]
    fn simulate_validates_its_inputs() {
        let sys = testsys::five_bus();
        let cfg = SimulationConfig {
            t_end: 0.1,
            dt: 1e-3,
            sample_every: 10,
        };
        // Event outside the horizon.
        let late = [Event {
            t: 5.0,
            kind: EventKind::LoadStep { node: 2, dp: 0.1, dq: 0.0 },
        }];
        assert!(simulate(&sys.truth_net, &sys.gens, &sys.x0, &sys.s0, &late, &cfg).is_err());
        // Mismatched state count.
        assert!(simulate(&sys.truth_net, &sys.gens, &sys.x0[..1], &sys.s0, &[], &cfg).is_err());
        // t_end not a multiple of dt.
        let bad = SimulationConfig {
            t_end: 0.1005,
            dt: 1e-3,
            sample_every: 10,
        };
        assert!(simulate(&sys.truth_net, &sys.gens, &sys.x0, &sys.s0, &[], &bad).is_err());
    }
}

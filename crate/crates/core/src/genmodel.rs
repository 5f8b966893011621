//! Ninth-order synchronous generator model: two-axis machine dynamics with a
//! DC excitation system and a steam turbine governor.
//!
//! State vector ordering, fixed everywhere in the crate:
//! `[delta, domega, e_d_prime, e_q_prime, p_sv, p_m, e_fd, r_f, v_r]`
//!
//! * `delta` rotor angle against the synchronously rotating network frame
//!   (rad), `domega` per-unit speed deviation;
//! * `e_d_prime`, `e_q_prime` transient internal voltages (machine base);
//! * `p_sv`, `p_m` governor valve position and mechanical power;
//! * `e_fd`, `r_f`, `v_r` exciter field voltage, stabilizer feedback state
//!   and regulator output.
//!
//! The machine q axis sits at angle `delta` in the network frame and the d
//! axis trails it by pi/2, so a machine-frame phasor `z` maps to the network
//! frame as `z * exp(j*(delta - pi/2))`. Machine-side quantities are per unit
//! on the machine base `s_n`; network-side currents are rescaled to the
//! system base `s_b`.

use crate::error::{Error, Result};
use crate::network::NetCurrent;
use nalgebra::{SMatrix, SVector};

/// Number of differential states per generator.
pub const STATE_DIM: usize = 9;

/// The first `FAST_STATES` entries of the state vector are the machine states
/// (rotor + transient voltages); the rest belong to the governor and exciter.
pub const FAST_STATES: usize = 4;

/// Human-readable state names in vector order.
pub const STATE_NAMES: [&str; STATE_DIM] = [
    "delta", "domega", "edp", "eqp", "psv", "pm", "efd", "rf", "vr",
];

/// Machine, exciter and governor constants. Reactances and resistance are per
/// unit on the machine base `s_n` (MVA); time constants are seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// Nominal electrical speed in rad/s.
    pub omega_n: f64,
    /// Inertia constant (s).
    pub h: f64,
    /// Rotor damping coefficient.
    pub d: f64,
    /// Synchronous reactances.
    pub x_d: f64,
    pub x_q: f64,
    /// Transient reactances.
    pub x_d_prime: f64,
    pub x_q_prime: f64,
    /// Open-circuit transient time constants.
    pub t_d0_prime: f64,
    pub t_q0_prime: f64,
    /// Stator resistance.
    pub r_s: f64,
    /// Machine base power (MVA).
    pub s_n: f64,
    /// Exciter: field constant, field time constant, stabilizer gain and time
    /// constant, regulator gain and time constant.
    pub k_e: f64,
    pub t_e: f64,
    pub k_f: f64,
    pub t_f: f64,
    pub k_a: f64,
    pub t_a: f64,
    /// Governor: valve, lead and lag time constants plus droop.
    pub t_1: f64,
    pub t_2: f64,
    pub t_3: f64,
    pub r_droop: f64,
}

impl GeneratorParams {
    /// Checks the admissibility conditions the model relies on.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("omega_n", self.omega_n),
            ("h", self.h),
            ("t_d0_prime", self.t_d0_prime),
            ("t_q0_prime", self.t_q0_prime),
            ("s_n", self.s_n),
            ("t_e", self.t_e),
            ("t_f", self.t_f),
            ("t_a", self.t_a),
            ("k_a", self.k_a),
            ("t_1", self.t_1),
            ("t_2", self.t_2),
            ("t_3", self.t_3),
            ("r_droop", self.r_droop),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(Error::InvalidParameters(format!(
                    "{name} must be strictly positive, got {value}"
                )));
            }
        }
        if self.d < 0.0 {
            return Err(Error::InvalidParameters(format!(
                "d must be non-negative, got {}",
                self.d
            )));
        }
        if !(stator_det(self) > 0.0) {
            return Err(Error::InvalidParameters(format!(
                "stator matrix is singular: r_s^2 + x_d_prime*x_q_prime = {}",
                stator_det(self)
            )));
        }
        Ok(())
    }
}

/// Governor and exciter reference inputs, taken as known by the estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSetpoints {
    pub p_ref: f64,
    pub v_ref: f64,
}

/// Differential state of one generator; see the module docs for ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorState {
    pub delta: f64,
    pub domega: f64,
    pub e_d_prime: f64,
    pub e_q_prime: f64,
    pub p_sv: f64,
    pub p_m: f64,
    pub e_fd: f64,
    pub r_f: f64,
    pub v_r: f64,
}

impl GeneratorState {
    pub fn as_vector(&self) -> SVector<f64, STATE_DIM> {
        SVector::from([
            self.delta,
            self.domega,
            self.e_d_prime,
            self.e_q_prime,
            self.p_sv,
            self.p_m,
            self.e_fd,
            self.r_f,
            self.v_r,
        ])
    }

    pub fn from_vector(v: &SVector<f64, STATE_DIM>) -> Self {
        Self {
            delta: v[0],
            domega: v[1],
            e_d_prime: v[2],
            e_q_prime: v[3],
            p_sv: v[4],
            p_m: v[5],
            e_fd: v[6],
            r_f: v[7],
            v_r: v[8],
        }
    }
}

/// One generator attached to a network node, with its constants and known
/// reference inputs.
#[derive(Debug, Clone)]
pub struct GeneratorUnit {
    /// Index of the network node the machine feeds.
    pub node: usize,
    pub params: GeneratorParams,
    pub setpoints: GeneratorSetpoints,
}

/// Stator current in the machine dq frame, per unit on the machine base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DqCurrent {
    pub d: f64,
    pub q: f64,
}

fn stator_det(p: &GeneratorParams) -> f64 {
    p.r_s * p.r_s + p.x_d_prime * p.x_q_prime
}

/// Solves the stator algebraic relation for the dq currents given the rotor
/// states and the terminal voltage phasor `(v, theta)`:
///
/// ```text
/// [ r_s       -x_q_prime ] [i_d]   [ e_d_prime + v sin(theta - delta) ]
/// [ x_d_prime  r_s       ] [i_q] = [ e_q_prime - v cos(theta - delta) ]
/// ```
pub fn dq_current(
    x: &GeneratorState,
    v: f64,
    theta: f64,
    p: &GeneratorParams,
) -> Result<DqCurrent> {
    let det = stator_det(p);
    if !(det.abs() > 1e-14) {
        return Err(Error::InvalidParameters(format!(
            "stator matrix is singular (det = {det:.3e})"
        )));
    }
    let phi = theta - x.delta;
    let rhs_d = x.e_d_prime + v * phi.sin();
    let rhs_q = x.e_q_prime - v * phi.cos();
    Ok(DqCurrent {
        d: (p.r_s * rhs_d + p.x_q_prime * rhs_q) / det,
        q: (-p.x_d_prime * rhs_d + p.r_s * rhs_q) / det,
    })
}

/// Ordering of the local inputs for the 2x5 and scalar chain-rule blocks:
/// `(delta, e_d_prime, e_q_prime, v, theta)`.
type LocalJac = SMatrix<f64, 2, 5>;

/// `dq_current` together with its Jacobian with respect to
/// `(delta, e_d_prime, e_q_prime, v, theta)`.
pub fn dq_current_jacobian(
    x: &GeneratorState,
    v: f64,
    theta: f64,
    p: &GeneratorParams,
) -> Result<(DqCurrent, LocalJac)> {
    let cur = dq_current(x, v, theta, p)?;
    let det = stator_det(p);
    let phi = theta - x.delta;
    let (sin_phi, cos_phi) = phi.sin_cos();
    // Rows of d(rhs)/d(delta, e_d_prime, e_q_prime, v, theta).
    let drhs = SMatrix::<f64, 2, 5>::from_rows(&[
        [-v * cos_phi, 1.0, 0.0, sin_phi, v * cos_phi].into(),
        [-v * sin_phi, 0.0, 1.0, -cos_phi, v * sin_phi].into(),
    ]);
    let inv = SMatrix::<f64, 2, 2>::new(p.r_s, p.x_q_prime, -p.x_d_prime, p.r_s) / det;
    Ok((cur, inv * drhs))
}

/// Air-gap electric power of the machine (machine base).
pub fn electric_power(x: &GeneratorState, cur: &DqCurrent, p: &GeneratorParams) -> f64 {
    x.e_q_prime * cur.q + x.e_d_prime * cur.d + (p.x_d_prime - p.x_q_prime) * cur.d * cur.q
}

/// Gradient of `electric_power` over `(delta, e_d_prime, e_q_prime, v, theta)`
/// with the stator currents eliminated through `dq_current`.
fn electric_power_gradient(
    x: &GeneratorState,
    cur: &DqCurrent,
    jac: &LocalJac,
    p: &GeneratorParams,
) -> SVector<f64, 5> {
    let mut g = SVector::<f64, 5>::zeros();
    let sal = p.x_d_prime - p.x_q_prime;
    for k in 0..5 {
        g[k] = x.e_q_prime * jac[(1, k)]
            + x.e_d_prime * jac[(0, k)]
            + sal * (jac[(0, k)] * cur.q + cur.d * jac[(1, k)]);
    }
    g[1] += cur.d;
    g[2] += cur.q;
    g
}

/// Rotates a machine dq current into the common network frame and rescales it
/// from the machine base to the system base.
pub fn machine_to_network(cur: &DqCurrent, delta: f64, s_n: f64, s_b: f64) -> Result<NetCurrent> {
    if !(s_n > 0.0 && s_b > 0.0) {
        return Err(Error::InvalidParameters(format!(
            "base powers must be positive (s_n = {s_n}, s_b = {s_b})"
        )));
    }
    let scale = s_n / s_b;
    let (sin_d, cos_d) = delta.sin_cos();
    Ok(NetCurrent {
        d: scale * (cur.d * sin_d + cur.q * cos_d),
        q: scale * (-cur.d * cos_d + cur.q * sin_d),
    })
}

/// Current the generator injects into its node, in the network frame and on
/// the system base.
pub fn generator_injection(
    x: &GeneratorState,
    v: f64,
    theta: f64,
    p: &GeneratorParams,
    s_b: f64,
) -> Result<NetCurrent> {
    let cur = dq_current(x, v, theta, p)?;
    machine_to_network(&cur, x.delta, p.s_n, s_b)
}

/// `generator_injection` with its Jacobians with respect to the full state
/// vector (2x9) and the terminal voltage pair `(v, theta)` (2x2).
pub fn generator_injection_jacobian(
    x: &GeneratorState,
    v: f64,
    theta: f64,
    p: &GeneratorParams,
    s_b: f64,
) -> Result<(NetCurrent, SMatrix<f64, 2, STATE_DIM>, SMatrix<f64, 2, 2>)> {
    let (cur, jac) = dq_current_jacobian(x, v, theta, p)?;
    let inj = machine_to_network(&cur, x.delta, p.s_n, s_b)?;
    let scale = p.s_n / s_b;
    let (sin_d, cos_d) = x.delta.sin_cos();
    let rot = SMatrix::<f64, 2, 2>::new(sin_d, cos_d, -cos_d, sin_d);
    let drot = SMatrix::<f64, 2, 2>::new(cos_d, -sin_d, sin_d, cos_d);
    let cur_v = SVector::<f64, 2>::new(cur.d, cur.q);

    // Columns of the local (delta, e_d_prime, e_q_prime, v, theta) Jacobian.
    let chained = scale * rot * jac;
    let mut jx = SMatrix::<f64, 2, STATE_DIM>::zeros();
    let delta_term = scale * drot * cur_v;
    jx.set_column(0, &(chained.column(0) + delta_term));
    jx.set_column(2, &chained.column(1).into_owned());
    jx.set_column(3, &chained.column(2).into_owned());
    let mut jvt = SMatrix::<f64, 2, 2>::zeros();
    jvt.set_column(0, &chained.column(3).into_owned());
    jvt.set_column(1, &chained.column(4).into_owned());
    Ok((inj, jx, jvt))
}

/// Time derivative of the nine generator states given the terminal voltage
/// phasor and the reference inputs.
pub fn sg_derivatives(
    x: &GeneratorState,
    v: f64,
    theta: f64,
    p: &GeneratorParams,
    sp: &GeneratorSetpoints,
) -> Result<SVector<f64, STATE_DIM>> {
    let cur = dq_current(x, v, theta, p)?;
    let p_e = electric_power(x, &cur, p);
    let valve = sp.p_ref - x.domega / p.r_droop - x.p_sv;
    Ok(SVector::from([
        p.omega_n * x.domega,
        (x.p_m - p_e - p.d * x.domega) / (2.0 * p.h),
        (-x.e_d_prime + (p.x_q - p.x_q_prime) * cur.q) / p.t_q0_prime,
        (x.e_fd - x.e_q_prime - (p.x_d - p.x_d_prime) * cur.d) / p.t_d0_prime,
        valve / p.t_1,
        ((p.t_2 / p.t_1) * valve + x.p_sv - x.p_m) / p.t_3,
        (-p.k_e * x.e_fd + x.v_r) / p.t_e,
        (-x.r_f + (p.k_f / p.t_f) * x.e_fd) / p.t_f,
        (-x.v_r + p.k_a * x.r_f - (p.k_a * p.k_f / p.t_f) * x.e_fd + p.k_a * (sp.v_ref - v))
            / p.t_a,
    ]))
}

/// `sg_derivatives` with its Jacobians with respect to the state (9x9) and
/// the terminal voltage pair `(v, theta)` (9x2).
pub fn sg_jacobian(
    x: &GeneratorState,
    v: f64,
    theta: f64,
    p: &GeneratorParams,
    sp: &GeneratorSetpoints,
) -> Result<(
    SVector<f64, STATE_DIM>,
    SMatrix<f64, STATE_DIM, STATE_DIM>,
    SMatrix<f64, STATE_DIM, 2>,
)> {
    let f = sg_derivatives(x, v, theta, p, sp)?;
    let (cur, cjac) = dq_current_jacobian(x, v, theta, p)?;
    let pe_grad = electric_power_gradient(x, &cur, &cjac, p);

    let mut jx = SMatrix::<f64, STATE_DIM, STATE_DIM>::zeros();
    let mut jvt = SMatrix::<f64, STATE_DIM, 2>::zeros();
    // Maps local input order (delta, e_d_prime, e_q_prime, v, theta) onto the
    // state columns (0, 2, 3) and the terminal columns (0, 1).
    let spread = |row: usize,
                  local: &SVector<f64, 5>,
                  jx: &mut SMatrix<f64, STATE_DIM, STATE_DIM>,
                  jvt: &mut SMatrix<f64, STATE_DIM, 2>| {
        jx[(row, 0)] += local[0];
        jx[(row, 2)] += local[1];
        jx[(row, 3)] += local[2];
        jvt[(row, 0)] += local[3];
        jvt[(row, 1)] += local[4];
    };

    jx[(0, 1)] = p.omega_n;

    let two_h = 2.0 * p.h;
    jx[(1, 1)] = -p.d / two_h;
    jx[(1, 5)] = 1.0 / two_h;
    spread(1, &(-pe_grad / two_h), &mut jx, &mut jvt);

    let kq = (p.x_q - p.x_q_prime) / p.t_q0_prime;
    jx[(2, 2)] += -1.0 / p.t_q0_prime;
    spread(2, &(kq * cjac.row(1).transpose()), &mut jx, &mut jvt);

    let kd = -(p.x_d - p.x_d_prime) / p.t_d0_prime;
    jx[(3, 3)] += -1.0 / p.t_d0_prime;
    jx[(3, 6)] = 1.0 / p.t_d0_prime;
    spread(3, &(kd * cjac.row(0).transpose()), &mut jx, &mut jvt);

    jx[(4, 1)] = -1.0 / (p.r_droop * p.t_1);
    jx[(4, 4)] = -1.0 / p.t_1;

    jx[(5, 1)] = -p.t_2 / (p.t_1 * p.t_3 * p.r_droop);
    jx[(5, 4)] = (1.0 - p.t_2 / p.t_1) / p.t_3;
    jx[(5, 5)] = -1.0 / p.t_3;

    jx[(6, 6)] = -p.k_e / p.t_e;
    jx[(6, 8)] = 1.0 / p.t_e;

    jx[(7, 6)] = p.k_f / (p.t_f * p.t_f);
    jx[(7, 7)] = -1.0 / p.t_f;

    jx[(8, 6)] = -p.k_a * p.k_f / (p.t_f * p.t_a);
    jx[(8, 7)] = p.k_a / p.t_a;
    jx[(8, 8)] = -1.0 / p.t_a;
    jvt[(8, 0)] = -p.k_a / p.t_a;

    Ok((f, jx, jvt))
}

/// One explicit Euler step of the generator dynamics; this is the process
/// model the moving-horizon estimator linearizes.
pub fn euler_step(
    x: &GeneratorState,
    v: f64,
    theta: f64,
    p: &GeneratorParams,
    sp: &GeneratorSetpoints,
    dt: f64,
) -> Result<GeneratorState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let f = sg_derivatives(x, v, theta, p, sp)?;
    Ok(GeneratorState::from_vector(&(x.as_vector() + dt * f)))
}

/// `euler_step` with its Jacobians with respect to the state and the terminal
/// voltage pair.
pub fn euler_jacobian(
    x: &GeneratorState,
    v: f64,
    theta: f64,
    p: &GeneratorParams,
    sp: &GeneratorSetpoints,
    dt: f64,
) -> Result<(
    GeneratorState,
    SMatrix<f64, STATE_DIM, STATE_DIM>,
    SMatrix<f64, STATE_DIM, 2>,
)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let (f, jx, jvt) = sg_jacobian(x, v, theta, p, sp)?;
    let next = GeneratorState::from_vector(&(x.as_vector() + dt * f));
    let step_jx = SMatrix::<f64, STATE_DIM, STATE_DIM>::identity() + dt * jx;
    Ok((next, step_jx, dt * jvt))
}

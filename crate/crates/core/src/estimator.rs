//! Moving-horizon estimation of generator internal states and nodal voltage
//! phasors from PMU streams.
//!
//! A window stacks the full system state at `horizon` consecutive sample
//! instants. The estimate minimizes a weighted sum of squares of
//!
//! * an arrival term anchoring the first instant to a prior,
//! * measurement residuals against every PMU scalar in the window,
//! * process residuals tying consecutive machine states through an explicit
//!   first-order discretization of the generator dynamics,
//! * current-coupling residuals between each machine and its node,
//!
//! subject to hard zero-current constraints at the designated injection-free
//! nodes, solved by a damped Gauss-Newton iteration on the saddle-point
//! system.
//!
//! With a horizon of one, no generators and no arrival prior, the same
//! machinery is the classical static state estimator; a snapshot that does
//! not determine the voltage profile then surfaces as
//! [`Error::Unobservable`].

use crate::error::{Error, Result};
use crate::genmodel::{self, GeneratorState, GeneratorUnit, FAST_STATES, STATE_DIM};
use crate::kkt;
use crate::network::{ChannelScalar, MeasurementSpec, NetworkModel, NetworkState};
use crate::simulator::PmuSample;
use crate::wrap_angle;
use nalgebra::{DMatrix, DVector};

/// Weights and iteration controls.
#[derive(Debug, Clone, Copy)]
pub struct MheConfig {
    /// Number of stacked instants per window.
    pub horizon: usize,
    /// Process weight on the rotor and flux states.
    pub w_process_fast: f64,
    /// Process weight on the governor and exciter states.
    pub w_process_slow: f64,
    /// Weight on the machine/network current coupling.
    pub w_coupling: f64,
    /// Weight anchoring the first instant to the prior.
    pub w_arrival: f64,
    pub max_iterations: usize,
    /// Step infinity-norm below which the iteration may stop.
    pub step_tol: f64,
    /// Constraint infinity-norm that must also hold at convergence.
    pub constraint_tol: f64,
}

impl Default for MheConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            w_process_fast: 1e6,
            w_process_slow: 1e4,
            w_coupling: 1e4,
            w_arrival: 1e6,
            max_iterations: 20,
            step_tol: 1e-8,
            constraint_tol: 1e-8,
        }
    }
}

/// Index arithmetic for the stacked window vector. Each instant occupies one
/// block `[machine states, v per node, theta per node]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub horizon: usize,
    pub n_gens: usize,
    pub n_nodes: usize,
}

impl Layout {
    pub fn block(&self) -> usize {
        STATE_DIM * self.n_gens + 2 * self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.horizon * self.block()
    }

    pub fn gen(&self, instant: usize, gen: usize) -> usize {
        instant * self.block() + STATE_DIM * gen
    }

    pub fn v(&self, instant: usize, node: usize) -> usize {
        instant * self.block() + STATE_DIM * self.n_gens + node
    }

    pub fn theta(&self, instant: usize, node: usize) -> usize {
        self.v(instant, node) + self.n_nodes
    }

    pub fn gen_state(&self, x: &DVector<f64>, instant: usize, gen: usize) -> GeneratorState {
        let base = self.gen(instant, gen);
        GeneratorState::from_vector(&nalgebra::SVector::from_fn(|i, _| x[base + i]))
    }

    pub fn net_state(&self, x: &DVector<f64>, instant: usize) -> NetworkState {
        NetworkState {
            v: (0..self.n_nodes).map(|i| x[self.v(instant, i)]).collect(),
            theta: (0..self.n_nodes)
                .map(|i| x[self.theta(instant, i)])
                .collect(),
        }
    }

    pub fn set_gen_state(
        &self,
        x: &mut DVector<f64>,
        instant: usize,
        gen: usize,
        state: &GeneratorState,
    ) {
        let base = self.gen(instant, gen);
        let v = state.as_vector();
        for i in 0..STATE_DIM {
            x[base + i] = v[i];
        }
    }

    pub fn set_net_state(&self, x: &mut DVector<f64>, instant: usize, s: &NetworkState) {
        for i in 0..self.n_nodes {
            x[self.v(instant, i)] = s.v[i];
            x[self.theta(instant, i)] = s.theta[i];
        }
    }
}

/// Meaning of one weighted residual row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Difference to the prior; `index` is the offset within the first block.
    Arrival { index: usize },
    /// One scalar of one PMU channel at one instant.
    Measurement {
        instant: usize,
        channel: usize,
        scalar: ChannelScalar,
    },
    /// One state component of the one-step prediction mismatch arriving at
    /// `instant`.
    Process {
        instant: usize,
        gen: usize,
        state: usize,
    },
    /// Machine/network current mismatch; axis 0 is the d component.
    Coupling {
        instant: usize,
        gen: usize,
        axis: usize,
    },
}

/// Linearization of the window objective at a point.
pub struct Assembled {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub rows: Vec<RowKind>,
    pub constraints: DVector<f64>,
    pub constraint_jacobian: DMatrix<f64>,
}

impl Assembled {
    pub fn cost(&self) -> f64 {
        0.5 * self
            .residual
            .iter()
            .zip(self.weights.iter())
            .map(|(r, w)| w * r * r)
            .sum::<f64>()
    }
}

/// Solution of one window.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub x: DVector<f64>,
    pub layout: Layout,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
    pub constraint_inf: f64,
    pub step_inf: f64,
    pub lambda: DVector<f64>,
    /// Accepted objective values, starting with the initial point.
    pub cost_history: Vec<f64>,
    /// Whether any step needed damping to be accepted.
    pub damped: bool,
}

/// Estimation problem over a fixed network, machine fleet and channel list.
#[derive(Debug, Clone)]
pub struct MheProblem {
    net: NetworkModel,
    gens: Vec<GeneratorUnit>,
    specs: Vec<MeasurementSpec>,
    dt: f64,
    cfg: MheConfig,
}

impl MheProblem {
    pub fn new(
        net: NetworkModel,
        gens: Vec<GeneratorUnit>,
        specs: Vec<MeasurementSpec>,
        dt: f64,
        cfg: MheConfig,
    ) -> Result<Self> {
        if cfg.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least one".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sample spacing must be positive, got {dt}"
            )));
        }
        for w in [
            cfg.w_process_fast,
            cfg.w_process_slow,
            cfg.w_coupling,
            cfg.w_arrival,
        ] {
            if !(w > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "weights must be positive, got {w}"
                )));
            }
        }
        if specs.is_empty() {
            return Err(Error::InvalidInput("no measurement channels".into()));
        }
        for spec in &specs {
            spec.validate(&net)?;
        }
        let mut nodes = Vec::new();
        for g in &gens {
            g.params.validate()?;
            if g.node >= net.n() {
                return Err(Error::InvalidInput(format!(
                    "generator node {} outside 0..{}",
                    g.node,
                    net.n()
                )));
            }
            if nodes.contains(&g.node) {
                return Err(Error::InvalidInput(format!(
                    "two generators share node {}",
                    g.node
                )));
            }
            nodes.push(g.node);
        }
        Ok(Self {
            net,
            gens,
            specs,
            dt,
            cfg,
        })
    }

    /// Static single-snapshot estimator over the same network: horizon one,
    /// no machines, no arrival term.
    pub fn static_problem(
        net: NetworkModel,
        specs: Vec<MeasurementSpec>,
        cfg: MheConfig,
    ) -> Result<Self> {
        let cfg = MheConfig {
            horizon: 1,
            ..cfg
        };
        // The sample spacing is irrelevant without process terms.
        Self::new(net, Vec::new(), specs, 1.0, cfg)
    }

    pub fn layout(&self) -> Layout {
        Layout {
            horizon: self.cfg.horizon,
            n_gens: self.gens.len(),
            n_nodes: self.net.n(),
        }
    }

    pub fn config(&self) -> &MheConfig {
        &self.cfg
    }

    pub fn network(&self) -> &NetworkModel {
        &self.net
    }

    pub fn generators(&self) -> &[GeneratorUnit] {
        &self.gens
    }

    pub fn channels(&self) -> &[MeasurementSpec] {
        &self.specs
    }

    /// Number of active scalar mask slots (two per channel).
    pub fn mask_len(&self) -> usize {
        2 * self.specs.len()
    }

    fn check_window(&self, frames: &[Vec<PmuSample>], mask: &[bool]) -> Result<()> {
        if frames.len() != self.cfg.horizon {
            return Err(Error::InvalidInput(format!(
                "window needs {} frames, got {}",
                self.cfg.horizon,
                frames.len()
            )));
        }
        for f in frames {
            if f.len() != self.specs.len() {
                return Err(Error::InvalidInput(format!(
                    "frame has {} channels, problem has {}",
                    f.len(),
                    self.specs.len()
                )));
            }
        }
        if mask.len() != self.mask_len() {
            return Err(Error::InvalidInput(format!(
                "mask has {} slots, problem has {}",
                mask.len(),
                self.mask_len()
            )));
        }
        Ok(())
    }

    /// Builds the stacked residual, its Jacobian, the weights and the hard
    /// constraints at the point `x`. `prior` enables the arrival rows;
    /// `mask` switches individual channel scalars off (their rows stay, with
    /// zero weight, so row indices are stable across removals).
    pub fn assemble(
        &self,
        x: &DVector<f64>,
        prior: Option<&DVector<f64>>,
        frames: &[Vec<PmuSample>],
        mask: &[bool],
    ) -> Result<Assembled> {
        self.check_window(frames, mask)?;
        let lay = self.layout();
        if x.len() != lay.dim() {
            return Err(Error::InvalidInput(format!(
                "window vector has {} entries, layout needs {}",
                x.len(),
                lay.dim()
            )));
        }
        if let Some(p) = prior {
            if p.len() != lay.block() {
                return Err(Error::InvalidInput(format!(
                    "prior has {} entries, block is {}",
                    p.len(),
                    lay.block()
                )));
            }
        }
        let horizon = self.cfg.horizon;
        let block = lay.block();
        let n_rows = prior.map_or(0, |_| block)
            + horizon * 2 * self.specs.len()
            + (horizon - 1) * STATE_DIM * self.gens.len()
            + horizon * 2 * self.gens.len();
        let n_cons = horizon * 2 * self.net.zero_nodes().len();

        let mut residual = DVector::zeros(n_rows);
        let mut jacobian = DMatrix::zeros(n_rows, lay.dim());
        let mut weights = DVector::zeros(n_rows);
        let mut rows = Vec::with_capacity(n_rows);
        let mut constraints = DVector::zeros(n_cons);
        let mut c_jac = DMatrix::zeros(n_cons, lay.dim());

        let states: Vec<NetworkState> = (0..horizon).map(|k| lay.net_state(x, k)).collect();

        let mut row = 0;
        if let Some(p) = prior {
            for i in 0..block {
                residual[row] = x[i] - p[i];
                jacobian[(row, i)] = 1.0;
                weights[row] = self.cfg.w_arrival;
                rows.push(RowKind::Arrival { index: i });
                row += 1;
            }
        }

        for (k, state) in states.iter().enumerate() {
            for (c, spec) in self.specs.iter().enumerate() {
                let sample = &frames[k][c];
                let (reading, mjac) = self.net.measure_jacobian(state, spec)?;
                let col0 = lay.v(k, 0);
                // Magnitude row.
                residual[row] = sample.magnitude - reading.magnitude;
                for col in 0..2 * self.net.n() {
                    jacobian[(row, col0 + col)] = -mjac[(0, col)];
                }
                weights[row] = if mask[2 * c] && !reading.degenerate {
                    1.0 / spec.variance
                } else {
                    0.0
                };
                rows.push(RowKind::Measurement {
                    instant: k,
                    channel: c,
                    scalar: ChannelScalar::Magnitude,
                });
                row += 1;
                // Phase row.
                residual[row] = wrap_angle(sample.phase - reading.phase);
                for col in 0..2 * self.net.n() {
                    jacobian[(row, col0 + col)] = -mjac[(1, col)];
                }
                weights[row] = if mask[2 * c + 1] && sample.phase_valid && !reading.degenerate {
                    1.0 / spec.variance
                } else {
                    0.0
                };
                rows.push(RowKind::Measurement {
                    instant: k,
                    channel: c,
                    scalar: ChannelScalar::Phase,
                });
                row += 1;
            }
        }

        for k in 0..horizon - 1 {
            for (i, g) in self.gens.iter().enumerate() {
                let xg = lay.gen_state(x, k, i);
                let (v, th) = (states[k].v[g.node], states[k].theta[g.node]);
                let (pred, a, b) =
                    genmodel::euler_jacobian(&xg, v, th, &g.params, &g.setpoints, self.dt)?;
                let pred = pred.as_vector();
                let next = lay.gen_state(x, k + 1, i).as_vector();
                let base_next = lay.gen(k + 1, i);
                let base_cur = lay.gen(k, i);
                for s in 0..STATE_DIM {
                    residual[row] = next[s] - pred[s];
                    jacobian[(row, base_next + s)] = 1.0;
                    for col in 0..STATE_DIM {
                        jacobian[(row, base_cur + col)] = -a[(s, col)];
                    }
                    jacobian[(row, lay.v(k, g.node))] = -b[(s, 0)];
                    jacobian[(row, lay.theta(k, g.node))] = -b[(s, 1)];
                    weights[row] = if s < FAST_STATES {
                        self.cfg.w_process_fast
                    } else {
                        self.cfg.w_process_slow
                    };
                    rows.push(RowKind::Process {
                        instant: k + 1,
                        gen: i,
                        state: s,
                    });
                    row += 1;
                }
            }
        }

        for (k, state) in states.iter().enumerate() {
            for (i, g) in self.gens.iter().enumerate() {
                let (inj, njac) = self.net.nodal_injection_jacobian(state, g.node)?;
                let xg = lay.gen_state(x, k, i);
                let (gi, gjx, gjvt) = genmodel::generator_injection_jacobian(
                    &xg,
                    state.v[g.node],
                    state.theta[g.node],
                    &g.params,
                    self.net.s_b(),
                )?;
                let col0 = lay.v(k, 0);
                let base = lay.gen(k, i);
                for axis in 0..2 {
                    residual[row] = if axis == 0 { inj.d - gi.d } else { inj.q - gi.q };
                    for col in 0..2 * self.net.n() {
                        jacobian[(row, col0 + col)] = njac[(axis, col)];
                    }
                    for col in 0..STATE_DIM {
                        jacobian[(row, base + col)] -= gjx[(axis, col)];
                    }
                    jacobian[(row, lay.v(k, g.node))] -= gjvt[(axis, 0)];
                    jacobian[(row, lay.theta(k, g.node))] -= gjvt[(axis, 1)];
                    weights[row] = self.cfg.w_coupling;
                    rows.push(RowKind::Coupling {
                        instant: k,
                        gen: i,
                        axis,
                    });
                    row += 1;
                }
            }
        }
        debug_assert_eq!(row, n_rows);

        let mut crow = 0;
        for (k, state) in states.iter().enumerate() {
            for &z in self.net.zero_nodes() {
                let (inj, njac) = self.net.nodal_injection_jacobian(state, z)?;
                let col0 = lay.v(k, 0);
                for axis in 0..2 {
                    constraints[crow] = if axis == 0 { inj.d } else { inj.q };
                    for col in 0..2 * self.net.n() {
                        c_jac[(crow, col0 + col)] = njac[(axis, col)];
                    }
                    crow += 1;
                }
            }
        }
        debug_assert_eq!(crow, n_cons);

        Ok(Assembled {
            residual,
            jacobian,
            weights,
            rows,
            constraints,
            constraint_jacobian: c_jac,
        })
    }

    /// Runs the damped Gauss-Newton iteration from `x0`.
    ///
    /// Without a prior the problem must be determined by the measurements and
    /// constraints alone; a singular system is then reported as
    /// [`Error::Unobservable`] rather than masked by damping.
    pub fn solve(
        &self,
        x0: &DVector<f64>,
        prior: Option<&DVector<f64>>,
        frames: &[Vec<PmuSample>],
        mask: &[bool],
    ) -> Result<Estimate> {
        let lay = self.layout();
        let mut x = x0.clone();
        let mut asm = self.assemble(&x, prior, frames, mask)?;
        let mut cost = asm.cost();
        let mut cost_history = vec![cost];
        let mut lambda = DVector::zeros(asm.constraints.len());
        let mut constraint_inf = asm.constraints.amax();
        let mut step_inf = f64::INFINITY;
        let mut converged = false;
        let mut iterations = 0;
        let mut damped = false;
        let mut mu = 0.0;

        while iterations < self.cfg.max_iterations {
            iterations += 1;
            let normal = kkt::weighted_normal(&asm.jacobian, &asm.weights);
            let gradient = kkt::weighted_gradient(&asm.jacobian, &asm.weights, &asm.residual);
            let mu_floor = 1e-8 * normal.trace() / lay.dim() as f64;

            let factor = loop {
                let mut damped_normal = normal.clone();
                if mu > 0.0 {
                    for i in 0..lay.dim() {
                        damped_normal[(i, i)] += mu;
                    }
                }
                match kkt::factor(&damped_normal, &asm.constraint_jacobian) {
                    Ok(f) => break f,
                    Err(Error::SingularKkt { cond }) => {
                        if prior.is_none() {
                            return Err(Error::Unobservable { cond });
                        }
                        let next = if mu > 0.0 { mu * 10.0 } else { mu_floor.max(1e-14) };
                        if next > 1e12 * mu_floor.max(1e-14) {
                            return Err(Error::SingularKkt { cond });
                        }
                        damped = true;
                        mu = next;
                    }
                    Err(e) => return Err(e),
                }
            };

            let (dx, y) = factor.solve(&(-&gradient), &(-&asm.constraints))?;
            let x_trial = &x + &dx;
            let asm_trial = self.assemble(&x_trial, prior, frames, mask)?;
            let cost_trial = asm_trial.cost();
            let cons_trial = asm_trial.constraints.amax();
            let accepted = cost_trial <= cost + 1e-12 * (1.0 + cost.abs())
                || cons_trial <= 0.5 * constraint_inf;
            if accepted {
                x = x_trial;
                asm = asm_trial;
                cost = cost_trial;
                constraint_inf = cons_trial;
                cost_history.push(cost);
                step_inf = dx.amax();
                lambda = -y;
                mu = 0.0;
                if step_inf <= self.cfg.step_tol && constraint_inf <= self.cfg.constraint_tol {
                    converged = true;
                    break;
                }
            } else {
                damped = true;
                mu = if mu > 0.0 { mu * 10.0 } else { mu_floor.max(1e-14) };
                if mu > 1e12 * mu_floor.max(1e-14) {
                    break;
                }
            }
        }

        Ok(Estimate {
            x,
            layout: lay,
            converged,
            iterations,
            cost,
            constraint_inf,
            step_inf,
            lambda,
            cost_history,
            damped,
        })
    }

    /// Shifts a solved window one instant forward: blocks move left, the new
    /// final instant is seeded with a one-step prediction of the machines
    /// (voltages are carried over), and the new prior is the old estimate of
    /// the second instant.
    pub fn slide(&self, est: &Estimate) -> Result<(DVector<f64>, DVector<f64>)> {
        let lay = self.layout();
        if est.layout != lay {
            return Err(Error::InvalidInput("estimate layout mismatch".into()));
        }
        let block = lay.block();
        let horizon = lay.horizon;
        let mut x = DVector::zeros(lay.dim());
        for k in 0..horizon - 1 {
            for i in 0..block {
                x[k * block + i] = est.x[(k + 1) * block + i];
            }
        }
        // Predict the machines one step past the old final instant.
        let last = horizon - 1;
        let prev_net = lay.net_state(&est.x, last);
        for (i, g) in self.gens.iter().enumerate() {
            let xg = lay.gen_state(&est.x, last, i);
            let pred = genmodel::euler_step(
                &xg,
                prev_net.v[g.node],
                prev_net.theta[g.node],
                &g.params,
                &g.setpoints,
                self.dt,
            )?;
            lay.set_gen_state(&mut x, last, i, &pred);
        }
        lay.set_net_state(&mut x, last, &prev_net);

        let prior = x.rows(0, block).into_owned();
        Ok((x, prior))
    }
}

/// Mean squared phasor tracking error at one node over aligned series:
/// the average of squared magnitude errors and squared wrapped angle errors,
/// both counted in the normalization.
pub fn voltage_mse(truth: &[NetworkState], estimate: &[NetworkState], node: usize) -> f64 {
    assert_eq!(truth.len(), estimate.len(), "series must be aligned");
    assert!(!truth.is_empty(), "series must not be empty");
    let k = truth.len() as f64;
    let mut acc = 0.0;
    for (t, e) in truth.iter().zip(estimate) {
        let dv = e.v[node] - t.v[node];
        let dth = wrap_angle(e.theta[node] - t.theta[node]);
        acc += dv * dv + dth * dth;
    }
    acc / (2.0 * k)
}

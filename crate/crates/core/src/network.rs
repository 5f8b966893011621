//! Static network model: branches and shunts with rectangular current
//! injections expressed in the common rotating frame, plus the polar PMU
//! measurement map.
//!
//! A nodal voltage phasor is `(v, theta)` with `v * exp(j*theta)`; the D axis
//! of the common frame is the real axis and the Q axis the imaginary axis.
//! Branch admittances are series only (`g + j*b`); line charging or any load
//! that is known accurately enough to be part of the model enters as a node
//! shunt.

use crate::error::{Error, Result};
use crate::wrap_angle;
use nalgebra::DMatrix;

/// Current magnitudes below this are treated as having no usable phase.
pub const DEGENERATE_CURRENT: f64 = 1e-9;

/// Rectangular current components in the common network frame (system base).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetCurrent {
    pub d: f64,
    pub q: f64,
}

/// Series branch between two nodes with admittance `g + j*b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub g: f64,
    pub b: f64,
}

/// Voltage magnitudes and phase angles for every node.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl NetworkState {
    /// Flat profile: unit magnitude, zero angle.
    pub fn flat(n: usize) -> Self {
        Self {
            v: vec![1.0; n],
            theta: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// What a PMU channel observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementKind {
    /// Voltage phasor at a node.
    VoltagePhasor { node: usize },
    /// Current phasor on the branch between two nodes, metered at `from`.
    CurrentFlow { from: usize, to: usize },
    /// Net current phasor injected into a node through its branches/shunts.
    CurrentInjection { node: usize },
}

/// One PMU channel: a phasor quantity reported as magnitude and phase, each
/// corrupted by zero-mean Gaussian noise of the given variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementSpec {
    pub kind: MeasurementKind,
    pub variance: f64,
}

/// Which scalar of a phasor channel is meant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelScalar {
    Magnitude,
    Phase,
}

impl MeasurementSpec {
    /// Checks the channel against a network.
    pub fn validate(&self, net: &NetworkModel) -> Result<()> {
        if !(self.variance > 0.0) {
            return Err(Error::InvalidInput(format!(
                "measurement variance must be positive, got {}",
                self.variance
            )));
        }
        match self.kind {
            MeasurementKind::VoltagePhasor { node } | MeasurementKind::CurrentInjection { node } => {
                net.check_node(node)
            }
            MeasurementKind::CurrentFlow { from, to } => {
                net.find_branch(from, to).map(|_| ())
            }
        }
    }

    /// Short stable label, e.g. `v3`, `f4-5`, `j2` (nodes reported 1-based).
    pub fn label(&self) -> String {
        match self.kind {
            MeasurementKind::VoltagePhasor { node } => format!("v{}", node + 1),
            MeasurementKind::CurrentFlow { from, to } => format!("f{}-{}", from + 1, to + 1),
            MeasurementKind::CurrentInjection { node } => format!("j{}", node + 1),
        }
    }
}

/// Label of one scalar of a channel, e.g. `v3.mag`.
pub fn scalar_label(spec: &MeasurementSpec, scalar: ChannelScalar) -> String {
    let suffix = match scalar {
        ChannelScalar::Magnitude => "mag",
        ChannelScalar::Phase => "ph",
    };
    format!("{}.{}", spec.label(), suffix)
}

/// Magnitude/phase pair produced by [`NetworkModel::measure`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarReading {
    pub magnitude: f64,
    pub phase: f64,
    /// Set when the underlying phasor is too small for its phase to mean
    /// anything; such phases are reported as zero.
    pub degenerate: bool,
}

/// Immutable network description shared by the simulator and the estimators.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    n: usize,
    branches: Vec<Branch>,
    shunt_g: Vec<f64>,
    shunt_b: Vec<f64>,
    gen_nodes: Vec<usize>,
    zero_nodes: Vec<usize>,
    s_b: f64,
    /// Branch indices touching each node.
    adjacency: Vec<Vec<usize>>,
}

impl NetworkModel {
    /// Builds and validates a model. `shunts` are `(node, g, b)` triples and
    /// accumulate; `gen_nodes` hosts generators, `zero_nodes` are nodes whose
    /// net injected current is known to vanish. The two sets must be disjoint.
    pub fn new(
        n: usize,
        branches: Vec<Branch>,
        shunts: &[(usize, f64, f64)],
        mut gen_nodes: Vec<usize>,
        mut zero_nodes: Vec<usize>,
        s_b: f64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidModel("network must have at least one node".into()));
        }
        if !(s_b > 0.0) {
            return Err(Error::InvalidModel(format!(
                "system base power must be positive, got {s_b}"
            )));
        }
        let mut adjacency = vec![Vec::new(); n];
        let mut seen = std::collections::BTreeSet::new();
        for (idx, br) in branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(Error::InvalidModel(format!(
                    "branch {}-{} has an endpoint outside 0..{n}",
                    br.from, br.to
                )));
            }
            if br.from == br.to {
                return Err(Error::InvalidModel(format!(
                    "branch endpoints must differ, got node {}",
                    br.from
                )));
            }
            let key = (br.from.min(br.to), br.from.max(br.to));
            if !seen.insert(key) {
                return Err(Error::InvalidModel(format!(
                    "duplicate branch between nodes {} and {}",
                    key.0, key.1
                )));
            }
            adjacency[br.from].push(idx);
            adjacency[br.to].push(idx);
        }
        let mut shunt_g = vec![0.0; n];
        let mut shunt_b = vec![0.0; n];
        for &(node, g, b) in shunts {
            if node >= n {
                return Err(Error::InvalidModel(format!(
                    "shunt node {node} outside 0..{n}"
                )));
            }
            shunt_g[node] += g;
            shunt_b[node] += b;
        }
        gen_nodes.sort_unstable();
        gen_nodes.dedup();
        zero_nodes.sort_unstable();
        zero_nodes.dedup();
        for &g in &gen_nodes {
            if g >= n {
                return Err(Error::InvalidModel(format!(
                    "generator node {g} outside 0..{n}"
                )));
            }
            if zero_nodes.binary_search(&g).is_ok() {
                return Err(Error::InvalidModel(format!(
                    "node {g} cannot host a generator and be a zero-injection node"
                )));
            }
        }
        for &z in &zero_nodes {
            if z >= n {
                return Err(Error::InvalidModel(format!(
                    "zero-injection node {z} outside 0..{n}"
                )));
            }
        }
        Ok(Self {
            n,
            branches,
            shunt_g,
            shunt_b,
            gen_nodes,
            zero_nodes,
            s_b,
            adjacency,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s_b(&self) -> f64 {
        self.s_b
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn gen_nodes(&self) -> &[usize] {
        &self.gen_nodes
    }

    pub fn zero_nodes(&self) -> &[usize] {
        &self.zero_nodes
    }

    pub fn shunt(&self, node: usize) -> (f64, f64) {
        (self.shunt_g[node], self.shunt_b[node])
    }

    /// Copy of the model with `(dg, db)` added to the shunt at `node`; used
    /// to fold loads into the network and to apply load-step events.
    pub fn with_shunt_added(&self, node: usize, dg: f64, db: f64) -> Result<Self> {
        self.check_node(node)?;
        let mut out = self.clone();
        out.shunt_g[node] += dg;
        out.shunt_b[node] += db;
        Ok(out)
    }

    fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.n {
            return Err(Error::InvalidInput(format!(
                "node {node} outside 0..{}",
                self.n
            )));
        }
        Ok(())
    }

    fn check_state(&self, s: &NetworkState) -> Result<()> {
        if s.v.len() != self.n || s.theta.len() != self.n {
            return Err(Error::InvalidInput(format!(
                "state has {}/{} entries for a {}-node network",
                s.v.len(),
                s.theta.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// Looks a branch up in either orientation.
    pub fn find_branch(&self, from: usize, to: usize) -> Result<&Branch> {
        self.branches
            .iter()
            .find(|br| (br.from == from && br.to == to) || (br.from == to && br.to == from))
            .ok_or_else(|| Error::InvalidInput(format!(
                "no branch between nodes {from} and {to}"
            )))
    }

    /// Net current flowing from node `i` into its branches and shunt,
    /// accumulated term by term over the incident branches:
    ///
    /// ```text
    /// d = sum_j [(vi cos ti - vj cos tj) g_ij - (vi sin ti - vj sin tj) b_ij]
    ///     + vi cos ti * g_sh - vi sin ti * b_sh
    /// q = sum_j [(vi cos ti - vj cos tj) b_ij + (vi sin ti - vj sin tj) g_ij]
    ///     + vi sin ti * g_sh + vi cos ti * b_sh
    /// ```
    pub fn nodal_injection(&self, s: &NetworkState, i: usize) -> Result<NetCurrent> {
        self.check_state(s)?;
        self.check_node(i)?;
        let (vi, ti) = (s.v[i], s.theta[i]);
        let (sin_i, cos_i) = ti.sin_cos();
        let (ei, fi) = (vi * cos_i, vi * sin_i);
        let mut d = ei * self.shunt_g[i] - fi * self.shunt_b[i];
        let mut q = fi * self.shunt_g[i] + ei * self.shunt_b[i];
        for &bi in &self.adjacency[i] {
            let br = &self.branches[bi];
            let j = if br.from == i { br.to } else { br.from };
            let (sin_j, cos_j) = s.theta[j].sin_cos();
            let de = ei - s.v[j] * cos_j;
            let df = fi - s.v[j] * sin_j;
            d += de * br.g - df * br.b;
            q += de * br.b + df * br.g;
        }
        Ok(NetCurrent { d, q })
    }

    /// `nodal_injection` plus its 2 x 2n Jacobian over `(v_0..v_{n-1},
    /// theta_0..theta_{n-1})`.
    pub fn nodal_injection_jacobian(
        &self,
        s: &NetworkState,
        i: usize,
    ) -> Result<(NetCurrent, DMatrix<f64>)> {
        let inj = self.nodal_injection(s, i)?;
        let n = self.n;
        let mut jac = DMatrix::zeros(2, 2 * n);
        let (vi, ti) = (s.v[i], s.theta[i]);
        let (sin_i, cos_i) = ti.sin_cos();

        // Total admittance hanging off node i (shunt + incident branches).
        let mut gii = self.shunt_g[i];
        let mut bii = self.shunt_b[i];
        for &bi in &self.adjacency[i] {
            let br = &self.branches[bi];
            let j = if br.from == i { br.to } else { br.from };
            gii += br.g;
            bii += br.b;
            let (sin_j, cos_j) = s.theta[j].sin_cos();
            // d-row, neighbor columns.
            jac[(0, j)] = -cos_j * br.g + sin_j * br.b;
            jac[(0, n + j)] = s.v[j] * (sin_j * br.g + cos_j * br.b);
            // q-row, neighbor columns.
            jac[(1, j)] = -cos_j * br.b - sin_j * br.g;
            jac[(1, n + j)] = s.v[j] * (sin_j * br.b - cos_j * br.g);
        }
        jac[(0, i)] = cos_i * gii - sin_i * bii;
        jac[(0, n + i)] = -vi * (sin_i * gii + cos_i * bii);
        jac[(1, i)] = sin_i * gii + cos_i * bii;
        jac[(1, n + i)] = vi * (cos_i * gii - sin_i * bii);
        Ok((inj, jac))
    }

    /// Current on the branch between `from` and `to`, metered at the `from`
    /// end, positive toward `to`.
    pub fn branch_current(&self, s: &NetworkState, from: usize, to: usize) -> Result<NetCurrent> {
        self.check_state(s)?;
        let br = self.find_branch(from, to)?;
        let (sin_f, cos_f) = s.theta[from].sin_cos();
        let (sin_t, cos_t) = s.theta[to].sin_cos();
        let de = s.v[from] * cos_f - s.v[to] * cos_t;
        let df = s.v[from] * sin_f - s.v[to] * sin_t;
        Ok(NetCurrent {
            d: de * br.g - df * br.b,
            q: de * br.b + df * br.g,
        })
    }

    /// `branch_current` plus its 2 x 2n Jacobian.
    pub fn branch_current_jacobian(
        &self,
        s: &NetworkState,
        from: usize,
        to: usize,
    ) -> Result<(NetCurrent, DMatrix<f64>)> {
        let cur = self.branch_current(s, from, to)?;
        let br = self.find_branch(from, to)?;
        let n = self.n;
        let mut jac = DMatrix::zeros(2, 2 * n);
        let (sin_f, cos_f) = s.theta[from].sin_cos();
        let (sin_t, cos_t) = s.theta[to].sin_cos();
        jac[(0, from)] = cos_f * br.g - sin_f * br.b;
        jac[(0, n + from)] = -s.v[from] * (sin_f * br.g + cos_f * br.b);
        jac[(0, to)] = -cos_t * br.g + sin_t * br.b;
        jac[(0, n + to)] = s.v[to] * (sin_t * br.g + cos_t * br.b);
        jac[(1, from)] = cos_f * br.b + sin_f * br.g;
        jac[(1, n + from)] = s.v[from] * (cos_f * br.g - sin_f * br.b);
        jac[(1, to)] = -cos_t * br.b - sin_t * br.g;
        jac[(1, n + to)] = -s.v[to] * (cos_t * br.g - sin_t * br.b);
        Ok((cur, jac))
    }

    /// Evaluates one PMU channel at a network state, in polar form.
    pub fn measure(&self, s: &NetworkState, spec: &MeasurementSpec) -> Result<PolarReading> {
        self.check_state(s)?;
        match spec.kind {
            MeasurementKind::VoltagePhasor { node } => {
                self.check_node(node)?;
                Ok(PolarReading {
                    magnitude: s.v[node],
                    phase: wrap_angle(s.theta[node]),
                    degenerate: false,
                })
            }
            MeasurementKind::CurrentFlow { from, to } => {
                Ok(polar(self.branch_current(s, from, to)?))
            }
            MeasurementKind::CurrentInjection { node } => {
                Ok(polar(self.nodal_injection(s, node)?))
            }
        }
    }

    /// `measure` plus the 2 x 2n Jacobian of `(magnitude, phase)`. Rows of a
    /// degenerate reading are zeroed: there is no usable derivative there and
    /// such channels are dropped by the estimator anyway.
    pub fn measure_jacobian(
        &self,
        s: &NetworkState,
        spec: &MeasurementSpec,
    ) -> Result<(PolarReading, DMatrix<f64>)> {
        self.check_state(s)?;
        match spec.kind {
            MeasurementKind::VoltagePhasor { node } => {
                self.check_node(node)?;
                let mut jac = DMatrix::zeros(2, 2 * self.n);
                jac[(0, node)] = 1.0;
                jac[(1, self.n + node)] = 1.0;
                Ok((
                    PolarReading {
                        magnitude: s.v[node],
                        phase: wrap_angle(s.theta[node]),
                        degenerate: false,
                    },
                    jac,
                ))
            }
            MeasurementKind::CurrentFlow { from, to } => {
                let (cur, rect) = self.branch_current_jacobian(s, from, to)?;
                Ok(polar_chain(cur, rect))
            }
            MeasurementKind::CurrentInjection { node } => {
                let (cur, rect) = self.nodal_injection_jacobian(s, node)?;
                Ok(polar_chain(cur, rect))
            }
        }
    }
}

fn polar(c: NetCurrent) -> PolarReading {
    let magnitude = (c.d * c.d + c.q * c.q).sqrt();
    if magnitude < DEGENERATE_CURRENT {
        PolarReading {
            magnitude,
            phase: 0.0,
            degenerate: true,
        }
    } else {
        PolarReading {
            magnitude,
            phase: c.q.atan2(c.d),
            degenerate: false,
        }
    }
}

fn polar_chain(c: NetCurrent, rect: DMatrix<f64>) -> (PolarReading, DMatrix<f64>) {
    let reading = polar(c);
    if reading.degenerate {
        return (reading, DMatrix::zeros(2, rect.ncols()));
    }
    let m = reading.magnitude;
    let m2 = m * m;
    // d(mag)/d(d,q) and d(phase)/d(d,q) chained through the rectangular rows.
    let mut jac = DMatrix::zeros(2, rect.ncols());
    for col in 0..rect.ncols() {
        let dd = rect[(0, col)];
        let dq = rect[(1, col)];
        jac[(0, col)] = (c.d * dd + c.q * dq) / m;
        jac[(1, col)] = (c.d * dq - c.q * dd) / m2;
    }
    (reading, jac)
}

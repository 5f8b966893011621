//! Configuration loading: a system file describes the grid and its machines,
//! a scenario file references it and adds the experiment (measurements,
//! disturbances, estimator settings). Node and generator numbers in the files
//! are 1-based, matching the channel labels (`v3`, `f4-5`); everything is
//! converted to 0-based indices here.

use std::fmt;
use std::path::Path;

use serde::Deserialize;

use gridmhe::baddata::LnrConfig;
use gridmhe::estimator::MheConfig;
use gridmhe::genmodel::{GeneratorParams, GeneratorUnit};
use gridmhe::network::{
    Branch, ChannelScalar, MeasurementKind, MeasurementSpec, NetworkModel,
};
use gridmhe::powerflow::{BusSpec, Schedule};
use gridmhe::simulator::{Event, EventKind, ParameterMismatch, SimulationConfig};

use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn config_err(msg: impl fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}

// ---------------------------------------------------------------------------
// Raw file schemas
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    /// System base power in MVA.
    s_b: f64,
    /// Nominal frequency in Hz.
    f_n: f64,
    nodes: usize,
    #[serde(default)]
    zero_injection: Vec<usize>,
    #[serde(default)]
    branches: Vec<BranchEntry>,
    #[serde(default)]
    shunts: Vec<ShuntEntry>,
    #[serde(default)]
    generators: Vec<GeneratorEntry>,
    #[serde(default)]
    loads: Vec<LoadEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchEntry {
    from: usize,
    to: usize,
    /// Series resistance and reactance, p.u. on the system base.
    r: f64,
    x: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShuntEntry {
    node: usize,
    #[serde(default)]
    g: f64,
    #[serde(default)]
    b: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorEntry {
    node: usize,
    /// Machine base power in MVA; impedances below are p.u. on it.
    s_n: f64,
    #[serde(default)]
    slack: bool,
    v_set: f64,
    /// Scheduled active power, p.u. on the system base. Required unless the
    /// machine holds the slack node.
    p_set: Option<f64>,
    h: f64,
    d: f64,
    x_d: f64,
    x_q: f64,
    x_d_prime: f64,
    x_q_prime: f64,
    t_d0_prime: f64,
    t_q0_prime: f64,
    r_s: f64,
    k_e: f64,
    t_e: f64,
    k_f: f64,
    t_f: f64,
    k_a: f64,
    t_a: f64,
    t_1: f64,
    t_2: f64,
    t_3: f64,
    r_droop: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadEntry {
    node: usize,
    /// Consumed active/reactive power, p.u. on the system base.
    p: f64,
    q: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    /// Path of the system file, relative to this file.
    system: String,
    t_end: f64,
    /// Integration step of the truth simulation, seconds.
    dt: f64,
    /// PMU reporting rate, Hz. Must divide the integration rate evenly.
    sample_hz: f64,
    seed: u64,
    pmu: Vec<PmuEntry>,
    #[serde(default)]
    events: Vec<EventEntry>,
    mismatch: Option<MismatchEntry>,
    #[serde(default)]
    estimator: EstimatorEntry,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum PmuEntry {
    Voltage { node: usize, variance: f64 },
    Flow { from: usize, to: usize, variance: f64 },
    Injection { node: usize, variance: f64 },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EventEntry {
    LoadStep { t: f64, node: usize, dp: f64, dq: f64 },
    SetpointStep { t: f64, generator: usize, dp_ref: f64, dv_ref: f64 },
    BadData { t: f64, channel: String, value: f64 },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MismatchEntry {
    #[serde(default = "one")]
    x_d_prime_scale: f64,
    #[serde(default = "one")]
    x_q_prime_scale: f64,
    #[serde(default = "one")]
    h_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatorEntry {
    kind: Option<EstimatorKind>,
    horizon: Option<usize>,
    lnr: Option<bool>,
    threshold: Option<f64>,
    w_process_fast: Option<f64>,
    w_process_slow: Option<f64>,
    w_coupling: Option<f64>,
    w_arrival: Option<f64>,
    max_iterations: Option<usize>,
    step_tol: Option<f64>,
    constraint_tol: Option<f64>,
}

// ---------------------------------------------------------------------------
// Resolved scenario
// ---------------------------------------------------------------------------

/// Which estimators a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[clap(rename_all = "lowercase")]
pub enum EstimatorKind {
    Mhe,
    Sse,
    Both,
}

impl EstimatorKind {
    pub fn runs_mhe(self) -> bool {
        matches!(self, EstimatorKind::Mhe | EstimatorKind::Both)
    }

    pub fn runs_sse(self) -> bool {
        matches!(self, EstimatorKind::Sse | EstimatorKind::Both)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Mhe => "mhe",
            EstimatorKind::Sse => "sse",
            EstimatorKind::Both => "both",
        })
    }
}

/// One machine of the system, 0-based node.
#[derive(Debug, Clone)]
pub struct Machine {
    pub node: usize,
    pub params: GeneratorParams,
}

/// A constant-power load, folded into the truth network as a shunt at its
/// solved voltage. 0-based node, consumption positive, p.u. on the system
/// base.
#[derive(Debug, Clone, Copy)]
pub struct LoadSpec {
    pub node: usize,
    pub p: f64,
    pub q: f64,
}

/// A stuck-scalar corruption of one measurement channel.
#[derive(Debug, Clone)]
pub struct BadDataSpec {
    pub channel: usize,
    pub scalar: ChannelScalar,
    pub t: f64,
    pub value: f64,
}

/// Estimator selection and tuning for a run.
#[derive(Debug, Clone)]
pub struct EstimatorSettings {
    pub kind: EstimatorKind,
    pub mhe: MheConfig,
    pub lnr: bool,
    pub lnr_cfg: LnrConfig,
}

/// Fully validated run description: the network as the estimator knows it,
/// the dispatch schedule, the machines, and the experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Scenario file stem; names the default output directory.
    pub name: String,
    /// Branch/charging model without the loads.
    pub net: NetworkModel,
    pub schedule: Schedule,
    pub machines: Vec<Machine>,
    pub loads: Vec<LoadSpec>,
    pub specs: Vec<MeasurementSpec>,
    pub sim: SimulationConfig,
    /// Spacing of stored samples and measurement frames, seconds.
    pub sample_dt: f64,
    pub seed: u64,
    pub events: Vec<Event>,
    pub bad_data: Vec<BadDataSpec>,
    pub mismatch: Option<ParameterMismatch>,
    pub run: EstimatorSettings,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let raw: ScenarioFile = toml::from_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let system_path = dir.join(&raw.system);
        let system_text = std::fs::read_to_string(&system_path)
            .map_err(|e| config_err(format!("{}: {e}", system_path.display())))?;
        let system: SystemFile = toml::from_str(&system_text)
            .map_err(|e| config_err(format!("{}: {e}", system_path.display())))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into());
        resolve(name, raw, system)
    }

    /// Number of stored samples (and measurement frames) the run produces.
    pub fn samples(&self) -> usize {
        let steps = (self.sim.t_end / self.sim.dt).round() as usize;
        steps / self.sim.sample_every + 1
    }

    /// Re-checks the constraints a command-line override can break.
    pub fn revalidate(&self) -> Result<()> {
        if self.run.mhe.horizon == 0 {
            return Err(config_err("horizon must be at least one"));
        }
        if self.samples() < self.run.mhe.horizon {
            return Err(config_err(format!(
                "horizon {} exceeds the {} samples the scenario produces",
                self.run.mhe.horizon,
                self.samples()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// Converts a 1-based config node number, verifying the range.
fn node_index(raw: usize, n: usize, what: &str) -> Result<usize> {
    if raw == 0 || raw > n {
        return Err(config_err(format!(
            "{what} references node {raw}, expected 1..={n}"
        )));
    }
    Ok(raw - 1)
}

fn branch_admittance(e: &BranchEntry) -> Result<(f64, f64)> {
    let d = e.r * e.r + e.x * e.x;
    if !(d > 0.0) || !d.is_finite() {
        return Err(config_err(format!(
            "branch {}-{} needs a nonzero finite impedance, got r = {}, x = {}",
            e.from, e.to, e.r, e.x
        )));
    }
    Ok((e.r / d, -e.x / d))
}

fn machine_params(e: &GeneratorEntry, omega_n: f64) -> GeneratorParams {
    GeneratorParams {
        omega_n,
        h: e.h,
        d: e.d,
        x_d: e.x_d,
        x_q: e.x_q,
        x_d_prime: e.x_d_prime,
        x_q_prime: e.x_q_prime,
        t_d0_prime: e.t_d0_prime,
        t_q0_prime: e.t_q0_prime,
        r_s: e.r_s,
        s_n: e.s_n,
        k_e: e.k_e,
        t_e: e.t_e,
        k_f: e.k_f,
        t_f: e.t_f,
        k_a: e.k_a,
        t_a: e.t_a,
        t_1: e.t_1,
        t_2: e.t_2,
        t_3: e.t_3,
        r_droop: e.r_droop,
    }
}

/// Parses a scalar label like `v3.mag` or `f4-5.ph` against the channel list.
fn parse_scalar_label(label: &str, specs: &[MeasurementSpec]) -> Result<(usize, ChannelScalar)> {
    let (chan, suffix) = label.rsplit_once('.').ok_or_else(|| {
        config_err(format!(
            "channel label {label:?} must look like <channel>.mag or <channel>.ph"
        ))
    })?;
    let scalar = match suffix {
        "mag" => ChannelScalar::Magnitude,
        "ph" => ChannelScalar::Phase,
        other => {
            return Err(config_err(format!(
                "unknown scalar {other:?} in {label:?}, expected mag or ph"
            )))
        }
    };
    let index = specs
        .iter()
        .position(|s| s.label() == chan)
        .ok_or_else(|| {
            let known: Vec<String> = specs.iter().map(|s| s.label()).collect();
            config_err(format!(
                "channel {chan:?} is not measured; configured channels: {known:?}"
            ))
        })?;
    Ok((index, scalar))
}

fn resolve(name: String, raw: ScenarioFile, system: SystemFile) -> Result<Scenario> {
    let n = system.nodes;
    if !(system.f_n > 0.0) {
        return Err(config_err(format!(
            "nominal frequency must be positive, got {}",
            system.f_n
        )));
    }
    let omega_n = 2.0 * std::f64::consts::PI * system.f_n;

    let mut branches = Vec::with_capacity(system.branches.len());
    for e in &system.branches {
        let (g, b) = branch_admittance(e)?;
        branches.push(Branch {
            from: node_index(e.from, n, "a branch")?,
            to: node_index(e.to, n, "a branch")?,
            g,
            b,
        });
    }
    let mut shunts = Vec::with_capacity(system.shunts.len());
    for e in &system.shunts {
        shunts.push((node_index(e.node, n, "a shunt")?, e.g, e.b));
    }
    let mut zero_nodes = Vec::with_capacity(system.zero_injection.len());
    for &z in &system.zero_injection {
        zero_nodes.push(node_index(z, n, "zero_injection")?);
    }

    let mut machines = Vec::with_capacity(system.generators.len());
    let mut gen_nodes = Vec::with_capacity(system.generators.len());
    let mut slack = None;
    let mut pv: Vec<(usize, f64, f64)> = Vec::new();
    for e in &system.generators {
        let node = node_index(e.node, n, "a generator")?;
        if e.slack {
            if e.p_set.is_some() {
                return Err(config_err(format!(
                    "the slack machine at node {} must not schedule p_set",
                    e.node
                )));
            }
            if slack.replace((node, e.v_set)).is_some() {
                return Err(config_err("more than one machine is marked slack"));
            }
        } else {
            let p = e.p_set.ok_or_else(|| {
                config_err(format!("the machine at node {} needs p_set", e.node))
            })?;
            pv.push((node, p, e.v_set));
        }
        machines.push(Machine {
            node,
            params: machine_params(e, omega_n),
        });
        gen_nodes.push(node);
    }
    let (slack_node, slack_v) =
        slack.ok_or_else(|| config_err("exactly one machine must be marked slack"))?;

    let net = NetworkModel::new(n, branches, &shunts, gen_nodes, zero_nodes, system.s_b)
        .map_err(|e| config_err(e))?;

    let mut loads = Vec::with_capacity(system.loads.len());
    for e in &system.loads {
        let node = node_index(e.node, n, "a load")?;
        if net.gen_nodes().contains(&node) {
            return Err(config_err(format!(
                "node {} carries both a machine and a load",
                e.node
            )));
        }
        if net.zero_nodes().contains(&node) {
            return Err(config_err(format!(
                "node {} is declared zero-injection but carries a load",
                e.node
            )));
        }
        if loads.iter().any(|l: &LoadSpec| l.node == node) {
            return Err(config_err(format!("node {} carries two loads", e.node)));
        }
        loads.push(LoadSpec {
            node,
            p: e.p,
            q: e.q,
        });
    }

    let mut buses = vec![BusSpec::Pq { p: 0.0, q: 0.0 }; n];
    buses[slack_node] = BusSpec::Slack {
        v: slack_v,
        theta: 0.0,
    };
    for &(node, p, v) in &pv {
        buses[node] = BusSpec::Pv { p, v };
    }
    for l in &loads {
        buses[l.node] = BusSpec::Pq { p: -l.p, q: -l.q };
    }
    let schedule = Schedule { buses };

    let mut specs = Vec::with_capacity(raw.pmu.len());
    for e in &raw.pmu {
        let (kind, variance) = match *e {
            PmuEntry::Voltage { node, variance } => (
                MeasurementKind::VoltagePhasor {
                    node: node_index(node, n, "a pmu channel")?,
                },
                variance,
            ),
            PmuEntry::Flow { from, to, variance } => (
                MeasurementKind::CurrentFlow {
                    from: node_index(from, n, "a pmu channel")?,
                    to: node_index(to, n, "a pmu channel")?,
                },
                variance,
            ),
            PmuEntry::Injection { node, variance } => (
                MeasurementKind::CurrentInjection {
                    node: node_index(node, n, "a pmu channel")?,
                },
                variance,
            ),
        };
        let spec = MeasurementSpec { kind, variance };
        spec.validate(&net).map_err(|e| config_err(e))?;
        specs.push(spec);
    }

    if !(raw.t_end > 0.0) || !(raw.dt > 0.0) {
        return Err(config_err(format!(
            "t_end and dt must be positive, got {} and {}",
            raw.t_end, raw.dt
        )));
    }
    if !(raw.sample_hz > 0.0) {
        return Err(config_err(format!(
            "sample_hz must be positive, got {}",
            raw.sample_hz
        )));
    }
    let per_sample = 1.0 / (raw.sample_hz * raw.dt);
    let sample_every = per_sample.round();
    if sample_every < 1.0 || (per_sample - sample_every).abs() > 1e-9 {
        return Err(config_err(format!(
            "sample_hz {} does not divide the integration rate 1/dt = {} evenly",
            raw.sample_hz,
            1.0 / raw.dt
        )));
    }
    let sample_every = sample_every as usize;
    let sim = SimulationConfig {
        t_end: raw.t_end,
        dt: raw.dt,
        sample_every,
    };
    let sample_dt = raw.dt * sample_every as f64;

    let mut events = Vec::new();
    let mut bad_data = Vec::new();
    for e in &raw.events {
        let t = match *e {
            EventEntry::LoadStep { t, .. }
            | EventEntry::SetpointStep { t, .. }
            | EventEntry::BadData { t, .. } => t,
        };
        if !(0.0..=raw.t_end).contains(&t) {
            return Err(config_err(format!(
                "event at t = {t} falls outside 0..={}",
                raw.t_end
            )));
        }
        match e {
            EventEntry::LoadStep { t, node, dp, dq } => events.push(Event {
                t: *t,
                kind: EventKind::LoadStep {
                    node: node_index(*node, n, "a load step")?,
                    dp: *dp,
                    dq: *dq,
                },
            }),
            EventEntry::SetpointStep {
                t,
                generator,
                dp_ref,
                dv_ref,
            } => {
                if *generator == 0 || *generator > machines.len() {
                    return Err(config_err(format!(
                        "a setpoint step references machine {generator}, expected 1..={}",
                        machines.len()
                    )));
                }
                events.push(Event {
                    t: *t,
                    kind: EventKind::SetpointStep {
                        gen: *generator - 1,
                        dp_ref: *dp_ref,
                        dv_ref: *dv_ref,
                    },
                });
            }
            EventEntry::BadData { t, channel, value } => {
                if !value.is_finite() {
                    return Err(config_err(format!(
                        "bad-data value for {channel} must be finite, got {value}"
                    )));
                }
                let (channel, scalar) = parse_scalar_label(channel, &specs)?;
                bad_data.push(BadDataSpec {
                    channel,
                    scalar,
                    t: *t,
                    value: *value,
                });
            }
        }
    }

    // Injection channels are synthesized from the base truth network; a load
    // or a load step at the metered node would make the reading inconsistent.
    for spec in &specs {
        if let MeasurementKind::CurrentInjection { node } = spec.kind {
            let stepped = events.iter().any(
                |e| matches!(e.kind, EventKind::LoadStep { node: m, .. } if m == node),
            );
            if stepped || loads.iter().any(|l| l.node == node) {
                return Err(config_err(format!(
                    "injection channel {} meters a node whose load changes; measure the branch flows instead",
                    spec.label()
                )));
            }
        }
    }

    let mismatch = raw.mismatch.map(|m| ParameterMismatch {
        x_d_prime_scale: m.x_d_prime_scale,
        x_q_prime_scale: m.x_q_prime_scale,
        h_scale: m.h_scale,
    });
    if let Some(m) = &mismatch {
        for (label, s) in [
            ("x_d_prime_scale", m.x_d_prime_scale),
            ("x_q_prime_scale", m.x_q_prime_scale),
            ("h_scale", m.h_scale),
        ] {
            if !(s > 0.0) || !s.is_finite() {
                return Err(config_err(format!(
                    "mismatch {label} must be positive, got {s}"
                )));
            }
        }
    }

    let e = raw.estimator;
    let defaults = MheConfig::default();
    let mhe = MheConfig {
        horizon: e.horizon.unwrap_or(defaults.horizon),
        w_process_fast: e.w_process_fast.unwrap_or(defaults.w_process_fast),
        w_process_slow: e.w_process_slow.unwrap_or(defaults.w_process_slow),
        w_coupling: e.w_coupling.unwrap_or(defaults.w_coupling),
        w_arrival: e.w_arrival.unwrap_or(defaults.w_arrival),
        max_iterations: e.max_iterations.unwrap_or(defaults.max_iterations),
        step_tol: e.step_tol.unwrap_or(defaults.step_tol),
        constraint_tol: e.constraint_tol.unwrap_or(defaults.constraint_tol),
    };
    let lnr_defaults = LnrConfig::default();
    let run = EstimatorSettings {
        kind: e.kind.unwrap_or(EstimatorKind::Both),
        mhe,
        lnr: e.lnr.unwrap_or(false),
        lnr_cfg: LnrConfig {
            threshold: e.threshold.unwrap_or(lnr_defaults.threshold),
            ..lnr_defaults
        },
    };

    let scenario = Scenario {
        name,
        net,
        schedule,
        machines,
        loads,
        specs,
        sim,
        sample_dt,
        seed: raw.seed,
        events,
        bad_data,
        mismatch,
        run,
    };
    scenario.revalidate()?;
    Ok(scenario)
}

/// Generator units for the estimator or, with a mismatch applied, the truth
/// plant.
pub fn units(
    machines: &[Machine],
    mismatch: Option<&ParameterMismatch>,
) -> Vec<(usize, GeneratorParams)> {
    machines
        .iter()
        .map(|m| {
            let params = match mismatch {
                Some(mm) => mm.apply(&m.params),
                None => m.params.clone(),
            };
            (m.node, params)
        })
        .collect()
}

/// Attaches the solved equilibrium to a parameter set, yielding the unit and
/// its initial state.
pub fn equilibrium_unit(
    node: usize,
    params: GeneratorParams,
    v: f64,
    theta: f64,
    p: f64,
    q: f64,
    s_b: f64,
) -> gridmhe::Result<(GeneratorUnit, gridmhe::genmodel::GeneratorState)> {
    let (x0, setpoints) = gridmhe::simulator::init_generator(&params, v, theta, p, q, s_b)?;
    Ok((
        GeneratorUnit {
            node,
            params,
            setpoints,
        },
        x0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        path
    }

    const SYSTEM: &str = r#"
s_b = 100.0
f_n = 50.0
nodes = 3
zero_injection = [3]

[[branches]]
from = 1
to = 3
r = 0.01
x = 0.1

[[branches]]
from = 2
to = 3
r = 0.02
x = 0.2

[[generators]]
node = 1
s_n = 100.0
slack = true
v_set = 1.02
h = 6.4
d = 2.0
x_d = 0.9
x_q = 0.86
x_d_prime = 0.12
x_q_prime = 0.2
t_d0_prime = 6.0
t_q0_prime = 0.535
r_s = 0.0026
k_e = 1.0
t_e = 0.314
k_f = 0.063
t_f = 0.35
k_a = 20.0
t_a = 0.2
t_1 = 0.5
t_2 = 2.5
t_3 = 7.5
r_droop = 0.05

[[loads]]
node = 2
p = 0.4
q = 0.1
"#;

    const SCENARIO: &str = r#"
system = "sys.toml"
t_end = 1.0
dt = 0.001
sample_hz = 100.0
seed = 7

[[pmu]]
kind = "voltage"
node = 2
variance = 1e-6

[[pmu]]
kind = "flow"
from = 1
to = 3
variance = 1e-6

[[events]]
kind = "load_step"
t = 0.5
node = 2
dp = 0.1
dq = 0.0

[[events]]
kind = "bad_data"
t = 0.5
channel = "v2.mag"
value = 0.9

[estimator]
kind = "both"
horizon = 3
lnr = true
"#;

    #[test]
    fn a_well_formed_pair_of_files_resolves() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM);
        let path = write_file(dir.path(), "case.toml", SCENARIO);
        let scn = Scenario::load(&path).unwrap();

        assert_eq!(scn.name, "case");
        assert_eq!(scn.net.n(), 3);
        assert_eq!(scn.net.gen_nodes(), &[0]);
        assert_eq!(scn.net.zero_nodes(), &[2]);
        assert_eq!(scn.machines.len(), 1);
        assert_eq!(scn.loads.len(), 1);
        assert_eq!(scn.loads[0].node, 1);
        assert_eq!(scn.specs.len(), 2);
        assert_eq!(scn.specs[0].label(), "v2");
        assert_eq!(scn.specs[1].label(), "f1-3");
        assert_eq!(scn.sim.sample_every, 10);
        assert!((scn.sample_dt - 0.01).abs() < 1e-12);
        assert_eq!(scn.samples(), 101);
        assert_eq!(scn.seed, 7);
        assert_eq!(scn.events.len(), 1);
        assert_eq!(scn.bad_data.len(), 1);
        assert_eq!(scn.bad_data[0].channel, 0);
        assert_eq!(scn.bad_data[0].scalar, ChannelScalar::Magnitude);
        assert_eq!(scn.run.kind, EstimatorKind::Both);
        assert!(scn.run.lnr);
        assert_eq!(scn.run.mhe.horizon, 3);

        // The per-unit conversion of the first branch: z = 0.01 + j0.1.
        let br = &scn.net.branches()[0];
        let d: f64 = 0.01f64 * 0.01 + 0.1 * 0.1;
        assert!((br.g - 0.01 / d).abs() < 1e-12);
        assert!((br.b + 0.1 / d).abs() < 1e-12);

        // The machine schedule pins the slack; the load shows up negated.
        assert!(matches!(scn.schedule.buses[0], BusSpec::Slack { v, .. } if v == 1.02));
        assert!(
            matches!(scn.schedule.buses[1], BusSpec::Pq { p, q } if p == -0.4 && q == -0.1)
        );
    }

    #[test]
    fn mistakes_are_reported_as_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM);

        let cases: &[(&str, &str, &str)] = &[
            ("missing.toml", "", "no such file"),
            (
                "badlabel.toml",
                &SCENARIO.replace("v2.mag", "v9.mag"),
                "unknown channel",
            ),
            (
                "badnode.toml",
                &SCENARIO.replace("node = 2\nvariance", "node = 9\nvariance"),
                "pmu node out of range",
            ),
            (
                "badrate.toml",
                &SCENARIO.replace("sample_hz = 100.0", "sample_hz = 333.0"),
                "rate does not divide",
            ),
            (
                "typo.toml",
                &SCENARIO.replace("seed = 7", "seed = 7\nspice = 1"),
                "unknown key",
            ),
        ];
        for (name, text, what) in cases {
            if !text.is_empty() {
                write_file(dir.path(), name, text);
            }
            let err = Scenario::load(&dir.path().join(name)).unwrap_err();
            assert!(
                matches!(err, CliError::Config(_)),
                "{what}: expected a config error, got {err:?}"
            );
        }
    }

    #[test]
    fn horizon_must_fit_into_the_scenario() {
        let dir = tempfile::tempdir().unwrap();
        write_file(dir.path(), "sys.toml", SYSTEM);
        let text = SCENARIO.replace("horizon = 3", "horizon = 200");
        let path = write_file(dir.path(), "case.toml", &text);
        let err = Scenario::load(&path).unwrap_err();
        assert!(matches!(err, CliError::Config(msg) if msg.contains("horizon")));
    }
}

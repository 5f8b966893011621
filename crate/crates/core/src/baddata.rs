//! Bad-data handling on top of the window estimator.
//!
//! At a converged estimate the residual of every PMU scalar has a computable
//! variance: the channel's own noise variance minus what the estimator
//! explains. Scalars whose residual variance vanishes are *critical* — the
//! fit interpolates them, so no corruption of them is ever visible and they
//! must never be rejected. For the rest, the residual divided by its standard
//! deviation is a unitless suspicion score; the largest score above a
//! threshold names the scalar to reject. Rejection zeroes that scalar's
//! weight across the whole window and the window is re-solved, repeating
//! until nothing suspicious remains.

use crate::error::{Error, Result};
use crate::estimator::{Estimate, MheProblem, RowKind};
use crate::kkt;
use crate::network::{scalar_label, ChannelScalar};
use crate::simulator::PmuSample;
use nalgebra::DVector;

/// Detection and criticality controls.
#[derive(Debug, Clone, Copy)]
pub struct LnrConfig {
    /// Normalized-residual magnitude above which a scalar is suspect.
    pub threshold: f64,
    /// A row is critical when its residual variance is at most this fraction
    /// of its noise variance.
    pub critical_ratio: f64,
}

impl Default for LnrConfig {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            critical_ratio: 1e-6,
        }
    }
}

/// Residual diagnostics for one PMU scalar row of a window.
#[derive(Debug, Clone)]
pub struct RowDiagnostic {
    pub instant: usize,
    pub channel: usize,
    pub scalar: ChannelScalar,
    /// Measured minus fitted value.
    pub residual: f64,
    /// Channel noise variance.
    pub variance: f64,
    /// Variance of the residual itself.
    pub omega: f64,
    pub critical: bool,
    /// `|residual| / sqrt(omega)`; absent for critical rows.
    pub normalized: Option<f64>,
}

/// Diagnostics for every active PMU scalar row of a window.
#[derive(Debug, Clone, Default)]
pub struct WindowDiagnostics {
    pub rows: Vec<RowDiagnostic>,
}

impl WindowDiagnostics {
    /// The non-critical row with the largest normalized residual.
    pub fn worst(&self) -> Option<&RowDiagnostic> {
        self.rows
            .iter()
            .filter(|r| !r.critical)
            .max_by(|a, b| {
                a.normalized
                    .unwrap()
                    .partial_cmp(&b.normalized.unwrap())
                    .unwrap()
            })
    }

    pub fn all_critical(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.critical)
    }
}

/// One rejected channel scalar.
#[derive(Debug, Clone)]
pub struct Removal {
    pub channel: usize,
    pub scalar: ChannelScalar,
    /// Instant of the row that triggered the rejection.
    pub instant: usize,
    pub normalized: f64,
}

/// Outcome of the detect-and-reject loop on one window.
#[derive(Debug, Clone)]
pub struct LnrReport {
    pub estimate: Estimate,
    /// Scalar mask after all rejections.
    pub mask: Vec<bool>,
    pub removals: Vec<Removal>,
    /// Diagnostics of the final, accepted fit.
    pub diagnostics: WindowDiagnostics,
}

/// Computes residual variances and suspicion scores at a converged estimate.
///
/// The factorization here is undamped; if the window is only solvable with
/// damping the diagnostics are not defined and the error is propagated.
pub fn diagnose(
    problem: &MheProblem,
    x: &DVector<f64>,
    prior: Option<&DVector<f64>>,
    frames: &[Vec<PmuSample>],
    mask: &[bool],
    cfg: &LnrConfig,
) -> Result<WindowDiagnostics> {
    let asm = problem.assemble(x, prior, frames, mask)?;
    let normal = kkt::weighted_normal(&asm.jacobian, &asm.weights);
    let factor = kkt::factor(&normal, &asm.constraint_jacobian)?;
    let zero_c = DVector::zeros(asm.constraints.len());

    let mut rows = Vec::new();
    for (j, kind) in asm.rows.iter().enumerate() {
        let &RowKind::Measurement {
            instant,
            channel,
            scalar,
        } = kind
        else {
            continue;
        };
        let w = asm.weights[j];
        if w == 0.0 {
            continue;
        }
        let h_j = asm.jacobian.row(j).transpose();
        let (e_h, _) = factor.solve(&h_j, &zero_c)?;
        let explained = h_j.dot(&e_h);
        let variance = 1.0 / w;
        let omega = variance - explained;
        let critical = omega <= cfg.critical_ratio * variance;
        rows.push(RowDiagnostic {
            instant,
            channel,
            scalar,
            residual: asm.residual[j],
            variance,
            omega,
            critical,
            normalized: (!critical).then(|| asm.residual[j].abs() / omega.sqrt()),
        });
    }
    Ok(WindowDiagnostics { rows })
}

/// Maps a rank failure that appears only after rejections onto the dedicated
/// error, so callers can tell "this window was never solvable" apart from
/// "rejections consumed the redundancy".
fn removal_error(e: Error, removals: &[Removal], problem: &MheProblem) -> Error {
    if removals.is_empty() {
        return e;
    }
    match e {
        Error::Unobservable { .. } | Error::SingularKkt { .. } => Error::RemovalUnobservable {
            removed: removals
                .iter()
                .map(|r| scalar_label(&problem.channels()[r.channel], r.scalar))
                .collect(),
        },
        other => other,
    }
}

/// Solves one window with iterative largest-normalized-residual rejection.
///
/// Each round solves the window, scores every active scalar and rejects the
/// worst one above the threshold — across all instants of the window at once
/// — then re-solves from the previous fit. Critical scalars are never
/// rejected. The loop ends when nothing scores above the threshold.
pub fn lnr_loop(
    problem: &MheProblem,
    x0: &DVector<f64>,
    prior: Option<&DVector<f64>>,
    frames: &[Vec<PmuSample>],
    mask: &[bool],
    cfg: &LnrConfig,
) -> Result<LnrReport> {
    if !(cfg.threshold > 0.0) {
        return Err(Error::InvalidInput(format!(
            "detection threshold must be positive, got {}",
            cfg.threshold
        )));
    }
    let mut mask = mask.to_vec();
    let mut removals: Vec<Removal> = Vec::new();
    let mut start = x0.clone();
    loop {
        let est = problem
            .solve(&start, prior, frames, &mask)
            .map_err(|e| removal_error(e, &removals, problem))?;
        let diagnostics = diagnose(problem, &est.x, prior, frames, &mask, cfg)
            .map_err(|e| removal_error(e, &removals, problem))?;
        let suspect = diagnostics
            .worst()
            .filter(|r| r.normalized.unwrap() > cfg.threshold)
            .cloned();
        match suspect {
            None => {
                return Ok(LnrReport {
                    estimate: est,
                    mask,
                    removals,
                    diagnostics,
                })
            }
            Some(r) => {
                let slot = 2 * r.channel
                    + match r.scalar {
                        ChannelScalar::Magnitude => 0,
                        ChannelScalar::Phase => 1,
                    };
                mask[slot] = false;
                removals.push(Removal {
                    channel: r.channel,
                    scalar: r.scalar,
                    instant: r.instant,
                    normalized: r.normalized.unwrap(),
                });
                start = est.x.clone();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::MheConfig;
    use crate::network::{Branch, MeasurementKind, MeasurementSpec, NetworkModel};
    use crate::simulator::{self, SimulationConfig};
    use crate::testsys;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn spec(kind: MeasurementKind, variance: f64) -> MeasurementSpec {
        MeasurementSpec { kind, variance }
    }

    fn two_node_net() -> NetworkModel {
        NetworkModel::new(
            2,
            vec![Branch {
                from: 0,
                to: 1,
                g: 0.5,
                b: -4.0,
            }],
            &[],
            vec![],
            vec![],
            100.0,
        )
        .unwrap()
    }

    fn sample(magnitude: f64, phase: f64) -> PmuSample {
        PmuSample {
            magnitude,
            phase,
            phase_valid: true,
        }
    }

    /// Two channels reading the same node split the noise variance evenly;
    /// a node seen by only one channel is critical.
    #[test]
    fn duplicate_channels_halve_the_residual_variance() {
        let net = two_node_net();
        let specs = vec![
            spec(MeasurementKind::VoltagePhasor { node: 0 }, 1e-6),
            spec(MeasurementKind::VoltagePhasor { node: 0 }, 1e-6),
            spec(MeasurementKind::VoltagePhasor { node: 1 }, 4e-6),
        ];
        let problem = MheProblem::static_problem(net, specs, MheConfig::default()).unwrap();
        let frames = vec![vec![
            sample(1.01, 0.02),
            sample(1.03, 0.02),
            sample(0.97, -0.10),
        ]];
        let mask = vec![true; problem.mask_len()];
        let x0 = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
        let est = problem.solve(&x0, None, &frames, &mask).unwrap();
        let diags = diagnose(
            &problem,
            &est.x,
            None,
            &frames,
            &mask,
            &LnrConfig::default(),
        )
        .unwrap();
        assert_eq!(diags.rows.len(), 6);
        for r in &diags.rows {
            match (r.channel, r.scalar) {
                (0 | 1, _) => {
                    assert!(!r.critical);
                    assert_relative_eq!(r.omega, 0.5e-6, epsilon = 1e-12);
                }
                (2, _) => assert!(r.critical, "sole channel at node 1 must be critical"),
                _ => unreachable!(),
            }
        }
        // The fitted magnitude is the average, so each duplicate is off by
        // one centivolt and scores 0.01 / sqrt(5e-7).
        let expected = 0.01 / 0.5e-6f64.sqrt();
        for r in diags.rows.iter().filter(|r| {
            r.channel < 2 && r.scalar == ChannelScalar::Magnitude
        }) {
            assert_relative_eq!(r.residual.abs(), 0.01, epsilon = 1e-9);
            assert_relative_eq!(r.normalized.unwrap(), expected, max_relative = 1e-6);
        }
        // Agreeing phase duplicates leave no residual.
        for r in diags.rows.iter().filter(|r| {
            r.channel < 2 && r.scalar == ChannelScalar::Phase
        }) {
            assert!(r.residual.abs() <= 1e-12);
        }
    }

    #[test]
    fn disagreeing_duplicate_is_rejected_and_the_survivor_kept() {
        let net = two_node_net();
        let specs = vec![
            spec(MeasurementKind::VoltagePhasor { node: 0 }, 1e-6),
            spec(MeasurementKind::VoltagePhasor { node: 0 }, 1e-6),
            spec(MeasurementKind::VoltagePhasor { node: 1 }, 4e-6),
        ];
        let problem = MheProblem::static_problem(net, specs, MheConfig::default()).unwrap();
        let frames = vec![vec![
            sample(1.01, 0.02),
            sample(1.03, 0.02),
            sample(0.97, -0.10),
        ]];
        let mask = vec![true; problem.mask_len()];
        let x0 = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
        let report = lnr_loop(
            &problem,
            &x0,
            None,
            &frames,
            &mask,
            &LnrConfig::default(),
        )
        .unwrap();
        assert_eq!(report.removals.len(), 1);
        let removed = &report.removals[0];
        assert!(removed.channel < 2);
        assert_eq!(removed.scalar, ChannelScalar::Magnitude);
        // The fit now interpolates the surviving duplicate exactly.
        let survivor = 1 - removed.channel;
        let lay = problem.layout();
        assert_relative_eq!(
            report.estimate.x[lay.v(0, 0)],
            frames[0][survivor].magnitude,
            epsilon = 1e-9
        );
        assert!(!report.mask[2 * removed.channel]);
        assert!(report.mask[2 * survivor]);
    }

    /// Brute-force oracle: residual variances from an explicitly inverted
    /// saddle-point matrix.
    #[test]
    fn residual_variances_match_an_explicit_inverse() {
        let sys = testsys::five_bus();
        let specs = vec![
            spec(MeasurementKind::VoltagePhasor { node: 0 }, 1e-6),
            spec(MeasurementKind::VoltagePhasor { node: 2 }, 2e-6),
            spec(MeasurementKind::VoltagePhasor { node: 4 }, 1e-6),
            spec(MeasurementKind::CurrentFlow { from: 3, to: 4 }, 3e-6),
        ];
        let problem =
            MheProblem::static_problem(sys.est_net.clone(), specs, MheConfig::default()).unwrap();
        let cfg = SimulationConfig {
            t_end: 0.02,
            dt: 1e-3,
            sample_every: 10,
        };
        let traj =
            simulator::simulate(&sys.truth_net, &sys.gens, &sys.x0, &sys.s0, &[], &cfg).unwrap();
        let readings = simulator::measure_frames(&sys.est_net, problem.channels(), &traj).unwrap();
        let frames = vec![readings[0]
            .iter()
            .map(|r| sample(r.magnitude, r.phase))
            .collect::<Vec<_>>()];
        let mask = vec![true; problem.mask_len()];
        let lay = problem.layout();
        let mut x0 = DVector::zeros(lay.dim());
        for i in 0..5 {
            x0[lay.v(0, i)] = sys.s0.v[i];
            x0[lay.theta(0, i)] = sys.s0.theta[i];
        }
        let est = problem.solve(&x0, None, &frames, &mask).unwrap();
        let diags = diagnose(
            &problem,
            &est.x,
            None,
            &frames,
            &mask,
            &LnrConfig::default(),
        )
        .unwrap();

        let asm = problem.assemble(&est.x, None, &frames, &mask).unwrap();
        let n = kkt::weighted_normal(&asm.jacobian, &asm.weights);
        let dim = lay.dim();
        let nc = asm.constraints.len();
        let mut k = DMatrix::zeros(dim + nc, dim + nc);
        k.view_mut((0, 0), (dim, dim)).copy_from(&n);
        k.view_mut((dim, 0), (nc, dim))
            .copy_from(&asm.constraint_jacobian);
        k.view_mut((0, dim), (dim, nc))
            .copy_from(&asm.constraint_jacobian.transpose());
        let k_inv = k.try_inverse().expect("oracle inverse");
        let e = k_inv.view((0, 0), (dim, dim)).into_owned();

        let mut checked = 0;
        for (j, kind) in asm.rows.iter().enumerate() {
            let RowKind::Measurement {
                instant,
                channel,
                scalar,
            } = *kind
            else {
                continue;
            };
            let h_j = asm.jacobian.row(j).transpose();
            let omega_ref = 1.0 / asm.weights[j] - (h_j.transpose() * &e * &h_j)[(0, 0)];
            let row = diags
                .rows
                .iter()
                .find(|r| r.instant == instant && r.channel == channel && r.scalar == scalar)
                .unwrap();
            assert_relative_eq!(row.omega, omega_ref, max_relative = 1e-4, epsilon = 1e-12);
            checked += 1;
        }
        assert_eq!(checked, 8);
    }

    /// The matrix mapping measured values to fitted values is a projection,
    /// even in the presence of hard constraints.
    #[test]
    fn fitted_value_map_is_idempotent() {
        let sys = testsys::five_bus();
        let specs = vec![
            spec(MeasurementKind::VoltagePhasor { node: 0 }, 1e-6),
            spec(MeasurementKind::VoltagePhasor { node: 2 }, 1e-6),
            spec(MeasurementKind::VoltagePhasor { node: 4 }, 1e-6),
            spec(MeasurementKind::CurrentFlow { from: 3, to: 4 }, 1e-6),
        ];
        let problem =
            MheProblem::static_problem(sys.est_net.clone(), specs, MheConfig::default()).unwrap();
        let lay = problem.layout();
        let mut x = DVector::zeros(lay.dim());
        for i in 0..5 {
            x[lay.v(0, i)] = sys.s0.v[i];
            x[lay.theta(0, i)] = sys.s0.theta[i];
        }
        let frames = vec![vec![sample(1.0, 0.0); 4]];
        let mask = vec![true; problem.mask_len()];
        let asm = problem.assemble(&x, None, &frames, &mask).unwrap();
        let n = kkt::weighted_normal(&asm.jacobian, &asm.weights);
        let dim = lay.dim();
        let nc = asm.constraints.len();
        let mut k = DMatrix::zeros(dim + nc, dim + nc);
        k.view_mut((0, 0), (dim, dim)).copy_from(&n);
        k.view_mut((dim, 0), (nc, dim))
            .copy_from(&asm.constraint_jacobian);
        k.view_mut((0, dim), (dim, nc))
            .copy_from(&asm.constraint_jacobian.transpose());
        let k_inv = k.try_inverse().expect("oracle inverse");
        let e = k_inv.view((0, 0), (dim, dim)).into_owned();
        let mut wh = asm.jacobian.clone();
        for (r, mut row) in wh.row_iter_mut().enumerate() {
            row *= asm.weights[r];
        }
        let hat = &asm.jacobian * &e * wh.transpose();
        let drift = (&hat * &hat - &hat).amax();
        assert!(
            drift <= 1e-6 * (1.0 + hat.amax()),
            "projection drift {drift}"
        );
    }

    fn tc3_specs() -> Vec<MeasurementSpec> {
        vec![
            spec(MeasurementKind::VoltagePhasor { node: 2 }, 1e-6),
            spec(MeasurementKind::VoltagePhasor { node: 3 }, 1e-6),
            spec(MeasurementKind::CurrentFlow { from: 3, to: 4 }, 1e-6),
        ]
    }

    /// A stuck magnitude on one channel is found, removed across the whole
    /// window, and the refit lands back on the truth; a clean window passes
    /// untouched.
    #[test]
    fn window_rejection_isolates_a_corrupted_magnitude() {
        let sys = testsys::five_bus();
        let problem = MheProblem::new(
            sys.est_net.clone(),
            sys.gens.clone(),
            tc3_specs(),
            0.01,
            MheConfig::default(),
        )
        .unwrap();
        let lay = problem.layout();
        let cfg = SimulationConfig {
            t_end: 0.05,
            dt: 1e-3,
            sample_every: 10,
        };
        let traj =
            simulator::simulate(&sys.truth_net, &sys.gens, &sys.x0, &sys.s0, &[], &cfg).unwrap();
        let readings = simulator::measure_frames(&sys.est_net, problem.channels(), &traj).unwrap();
        let mut frames: Vec<Vec<PmuSample>> = readings[0..3]
            .iter()
            .map(|f| f.iter().map(|r| sample(r.magnitude, r.phase)).collect())
            .collect();
        let mut truth = DVector::zeros(lay.dim());
        for k in 0..3 {
            for i in 0..2 {
                lay.set_gen_state(&mut truth, k, i, &traj.gen_states[k][i]);
            }
            lay.set_net_state(&mut truth, k, &traj.net_states[k]);
        }
        let prior = truth.rows(0, lay.block()).into_owned();
        let mask = vec![true; problem.mask_len()];

        let clean = lnr_loop(
            &problem,
            &truth,
            Some(&prior),
            &frames,
            &mask,
            &LnrConfig::default(),
        )
        .unwrap();
        assert!(clean.removals.is_empty());
        assert!(clean.mask.iter().all(|&m| m));

        for f in &mut frames {
            f[0].magnitude = 0.92;
        }
        let report = lnr_loop(
            &problem,
            &truth,
            Some(&prior),
            &frames,
            &mask,
            &LnrConfig::default(),
        )
        .unwrap();
        assert_eq!(report.removals.len(), 1, "removals: {:?}", report.removals);
        assert_eq!(report.removals[0].channel, 0);
        assert_eq!(report.removals[0].scalar, ChannelScalar::Magnitude);
        assert!(report.removals[0].normalized > 10.0);
        assert!(!report.mask[0]);
        // After rejection the fit is back on the truth.
        assert!(
            (&report.estimate.x - &truth).amax() <= 1e-6,
            "post-rejection error {}",
            (&report.estimate.x - &truth).amax()
        );
        // And nothing else looks suspicious.
        if let Some(w) = report.diagnostics.worst() {
            assert!(w.normalized.unwrap() <= 3.0);
        }
    }

    /// With a snapshot that the channels determine exactly, every scalar is
    /// critical: the fit interpolates the corruption and rejection never
    /// fires. This is the guard that keeps rejection from destroying rank.
    #[test]
    fn exactly_determined_snapshot_has_only_critical_scalars() {
        let sys = testsys::five_bus();
        let problem =
            MheProblem::static_problem(sys.est_net.clone(), tc3_specs(), MheConfig::default())
                .unwrap();
        let cfg = SimulationConfig {
            t_end: 0.02,
            dt: 1e-3,
            sample_every: 10,
        };
        let traj =
            simulator::simulate(&sys.truth_net, &sys.gens, &sys.x0, &sys.s0, &[], &cfg).unwrap();
        let readings = simulator::measure_frames(&sys.est_net, problem.channels(), &traj).unwrap();
        let mut frames = vec![readings[0]
            .iter()
            .map(|r| sample(r.magnitude, r.phase))
            .collect::<Vec<_>>()];
        frames[0][0].magnitude = 0.92;
        let lay = problem.layout();
        let mut x0 = DVector::zeros(lay.dim());
        for i in 0..5 {
            x0[lay.v(0, i)] = sys.s0.v[i];
            x0[lay.theta(0, i)] = sys.s0.theta[i];
        }
        let mask = vec![true; problem.mask_len()];
        let report = lnr_loop(
            &problem,
            &x0,
            None,
            &frames,
            &mask,
            &LnrConfig::default(),
        )
        .unwrap();
        assert!(report.removals.is_empty());
        assert!(report.diagnostics.all_critical());
        // The corruption went straight into the estimate, undetected.
        let v2 = report.estimate.x[lay.v(0, 2)];
        assert!(
            (v2 - 0.92).abs() <= 1e-6,
            "interpolated fit should absorb the corruption, got v2 = {v2}"
        );
    }

    #[test]
    fn rank_failures_after_rejections_get_their_own_error() {
        let sys = testsys::five_bus();
        let problem =
            MheProblem::static_problem(sys.est_net.clone(), tc3_specs(), MheConfig::default())
                .unwrap();
        let removals = vec![Removal {
            channel: 1,
            scalar: ChannelScalar::Magnitude,
            instant: 0,
            normalized: 9.0,
        }];
        let mapped = removal_error(
            Error::Unobservable { cond: 0.0 },
            &removals,
            &problem,
        );
        match mapped {
            Error::RemovalUnobservable { removed } => {
                assert_eq!(removed, vec!["v4.mag".to_string()]);
            }
            other => panic!("expected rank error after rejection, got {other:?}"),
        }
        // Without any rejection the original error passes through.
        match removal_error(Error::Unobservable { cond: 0.0 }, &[], &problem) {
            Error::Unobservable { .. } => {}
            other => panic!("expected passthrough, got {other:?}"),
        }
        // Unrelated errors are never rewritten.
        match removal_error(Error::InvalidInput("x".into()), &removals, &problem) {
            Error::InvalidInput(_) => {}
            other => panic!("expected passthrough, got {other:?}"),
        }
    }

    #[test]
    fn masked_scalars_never_appear_in_diagnostics() {
        let net = two_node_net();
        let specs = vec![
            spec(MeasurementKind::VoltagePhasor { node: 0 }, 1e-6),
            spec(MeasurementKind::VoltagePhasor { node: 0 }, 1e-6),
            spec(MeasurementKind::VoltagePhasor { node: 1 }, 1e-6),
        ];
        let problem = MheProblem::static_problem(net, specs, MheConfig::default()).unwrap();
        let frames = vec![vec![
            sample(1.01, 0.02),
            sample(1.03, 0.02),
            sample(0.97, -0.10),
        ]];
        let mut mask = vec![true; problem.mask_len()];
        mask[2] = false;
        let x0 = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
        let est = problem.solve(&x0, None, &frames, &mask).unwrap();
        let diags = diagnose(
            &problem,
            &est.x,
            None,
            &frames,
            &mask,
            &LnrConfig::default(),
        )
        .unwrap();
        assert_eq!(diags.rows.len(), 5);
        assert!(!diags
            .rows
            .iter()
            .any(|r| r.channel == 1 && r.scalar == ChannelScalar::Magnitude));
    }
}


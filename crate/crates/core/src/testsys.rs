//! Shared five-node, two-generator test system used across module tests.

use crate::genmodel::{GeneratorParams, GeneratorState, GeneratorUnit};
use crate::network::{Branch, NetworkModel, NetworkState};
use crate::powerflow::{self, BusSpec, Schedule};
use crate::simulator::init_generator;

pub(crate) struct TestSystem {
    /// Branch and charging model only; the load is not part of it.
    pub est_net: NetworkModel,
    /// Same model with the load folded in as a shunt at its solved voltage.
    pub truth_net: NetworkModel,
    pub gens: Vec<GeneratorUnit>,
    pub x0: Vec<GeneratorState>,
    pub s0: NetworkState,
}

pub(crate) fn second_machine() -> GeneratorParams {
    let mut p = crate::genmodel::test_fixtures::params();
    p.s_n = 60.0;
    p.h = 4.0;
    p.x_d = 1.05;
    p.x_q = 0.98;
    p.x_d_prime = 0.185;
    p.x_q_prime = 0.36;
    p.t_d0_prime = 5.2;
    p.t_q0_prime = 0.85;
    p.r_s = 0.0031;
    p
}

pub(crate) fn five_bus() -> TestSystem {
    let est_net = NetworkModel::new(
        5,
        vec![
            Branch { from: 0, to: 3, g: 0.9, b: -9.0 },
            Branch { from: 1, to: 4, g: 1.2, b: -12.0 },
            Branch { from: 3, to: 4, g: 0.6, b: -6.0 },
            Branch { from: 2, to: 3, g: 0.8, b: -8.0 },
            Branch { from: 2, to: 4, g: 0.7, b: -7.0 },
        ],
        &[(2, 0.0, 0.02), (3, 0.0, 0.015), (4, 0.0, 0.015)],
        vec![0, 1],
        vec![3, 4],
        100.0,
    )
    .unwrap();
    let load = (1.0, 0.3);
    let schedule = Schedule {
        buses: vec![
            BusSpec::Slack { v: 1.02, theta: 0.0 },
            BusSpec::Pv { p: 0.6, v: 1.01 },
            BusSpec::Pq { p: -load.0, q: -load.1 },
            BusSpec::Pq { p: 0.0, q: 0.0 },
            BusSpec::Pq { p: 0.0, q: 0.0 },
        ],
    };
    let pf = powerflow::solve(&est_net, &schedule).unwrap();
    let v2 = pf.state.v[2];
    let truth_net = est_net
        .with_shunt_added(2, load.0 / (v2 * v2), -load.1 / (v2 * v2))
        .unwrap();

    let params = [crate::genmodel::test_fixtures::params(), second_machine()];
    let mut gens = Vec::new();
    let mut x0 = Vec::new();
    for (i, node) in [0usize, 1].into_iter().enumerate() {
        let (x, sp) = init_generator(
            &params[i],
            pf.state.v[node],
            pf.state.theta[node],
            pf.p[node],
            pf.q[node],
            est_net.s_b(),
        )
        .unwrap();
        gens.push(GeneratorUnit {
            node,
            params: params[i].clone(),
            setpoints: sp,
        });
        x0.push(x);
    }
    let s0 = pf.state;
    TestSystem {
        est_net,
        truth_net,
        gens,
        x0,
        s0,
    }
}

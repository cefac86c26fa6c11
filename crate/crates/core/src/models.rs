//! Small reference models used by the test suites, the CLI and the bindings.

use crate::mdp::FiniteMdp;

/// One state, one action, cost `c`, self-loop.
pub fn single_state(cost: f64, discount: Option<f64>) -> FiniteMdp {
    FiniteMdp::new(vec![vec![cost]], vec![vec![vec![1.0]]], discount).expect("valid model")
}

/// Two states, one action, costs `(0, 1)`, both states move to state 0.
/// With discount 0.5 the fixed point is `v* = (0, 1)`.
pub fn chain2(discount: f64) -> FiniteMdp {
    FiniteMdp::new(
        vec![vec![0.0], vec![1.0]],
        vec![vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]],
        Some(discount),
    )
    .expect("valid model")
}

/// Two-action variant of [`chain2`]: action 1 keeps the chain in state 1
/// (cost 0.4 there) and is optimal in state 1 only.
pub fn chain2_two_action(discount: f64) -> FiniteMdp {
    FiniteMdp::new(
        vec![vec![0.0, 0.2], vec![1.0, 0.4]],
        vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        ],
        Some(discount),
    )
    .expect("valid model")
}

/// Two states, one action, costs `(0, 1)`, both rows `(0.5, 0.5)`.
/// Average-cost solution: `g* = 0.5`, `v*(1) - v*(0) = 1`.
pub fn uniform2() -> FiniteMdp {
    FiniteMdp::new(
        vec![vec![0.0], vec![1.0]],
        vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
        None,
    )
    .expect("valid model")
}

/// Two states, one action, rows `(0.5, 0.5)` and `(0.8, 0.2)`; span
/// coefficient 0.3.
pub fn skew2() -> FiniteMdp {
    FiniteMdp::new(
        vec![vec![0.0], vec![1.0]],
        vec![vec![vec![0.5, 0.5]], vec![vec![0.8, 0.2]]],
        None,
    )
    .expect("valid model")
}

/// Three states, two actions, fully stochastic kernel.
pub fn garnet3(discount: f64) -> FiniteMdp {
    FiniteMdp::new(
        vec![vec![1.0, 0.6], vec![0.2, 0.8], vec![0.5, 0.0]],
        vec![
            vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.2, 0.7]],
            vec![vec![0.3, 0.4, 0.3], vec![0.7, 0.2, 0.1]],
            vec![vec![0.2, 0.2, 0.6], vec![0.5, 0.4, 0.1]],
        ],
        Some(discount),
    )
    .expect("valid model")
}

pub fn by_name(name: &str) -> Option<FiniteMdp> {
    Some(match name {
        "single" => single_state(1.0, Some(0.9)),
        "chain2" => chain2(0.5),
        "chain2-two-action" => chain2_two_action(0.5),
        "uniform2" => uniform2(),
        "skew2" => skew2(),
        "garnet3" => garnet3(0.7),
        _ => return None,
    })
}

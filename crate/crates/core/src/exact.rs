//! Exact dynamic-programming operators and the fixed-point solvers used as
//! ground truth for the sampled iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{span_seminorm, sup_norm, FiniteMdp, QFunction, ValueFunction};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveKind {
    #[serde(rename = "discounted-v")]
    DiscountedValue,
    #[serde(rename = "average-v")]
    AverageValue,
    #[serde(rename = "discounted-q")]
    DiscountedQ,
}

impl std::fmt::Display for SolveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DiscountedValue => "discounted-v",
            Self::AverageValue => "average-v",
            Self::DiscountedQ => "discounted-q",
        })
    }
}

impl std::str::FromStr for SolveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discounted-v" | "discounted" => Ok(Self::DiscountedValue),
            "average-v" | "average" => Ok(Self::AverageValue),
            "discounted-q" | "q" => Ok(Self::DiscountedQ),
            other => Err(Error::param("kind", format!("unknown solve kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solution {
    Value(ValueFunction),
    Q(QFunction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub solution: Solution,
    /// Optimal average cost; only set for the average-cost kind.
    pub gain: Option<f64>,
    pub iterations: usize,
    pub final_residual: f64,
}

impl SolveResult {
    pub fn value(&self) -> Option<&ValueFunction> {
        match &self.solution {
            Solution::Value(v) => Some(v),
            Solution::Q(_) => None,
        }
    }

    pub fn q(&self) -> Option<&QFunction> {
        match &self.solution {
            Solution::Q(q) => Some(q),
            Solution::Value(_) => None,
        }
    }
}

/// `min_a c(s,a) + g * sum_j p(j|s,a) v(j)` for every state.
pub(crate) fn min_backup(mdp: &FiniteMdp, v: &[f64], g: f64) -> Vec<f64> {
    (0..mdp.num_states())
        .map(|s| {
            (0..mdp.num_actions())
                .map(|a| mdp.cost(s, a) + g * mdp.expected_next(s, a, v))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Discounted Bellman operator with the expectation taken exactly.
pub fn bellman_discounted(mdp: &FiniteMdp, v: &ValueFunction) -> Result<ValueFunction> {
    let gamma = mdp.require_discount()?;
    mdp.check_len(v.len())?;
    Ok(ValueFunction::from_vec(min_backup(mdp, v.as_slice(), gamma)))
}

/// Undiscounted Bellman operator followed by normalization: returns
/// `Tv - min(Tv)` and the gain estimate `min(Tv)`.
pub fn relative_bellman(mdp: &FiniteMdp, v: &ValueFunction) -> Result<(ValueFunction, f64)> {
    mdp.check_len(v.len())?;
    let tv = ValueFunction::from_vec(min_backup(mdp, v.as_slice(), 1.0));
    let gain = tv.min();
    Ok((tv.shifted(-gain), gain))
}

/// `[TQ](s,a) = c(s,a) + gamma * sum_j p(j|s,a) min_a' Q(j, a')`
pub fn q_bellman(mdp: &FiniteMdp, q: &QFunction) -> Result<QFunction> {
    let gamma = mdp.require_discount()?;
    check_q_shape(mdp, q)?;
    let v = q.state_values();
    let values = (0..mdp.num_states())
        .flat_map(|s| (0..mdp.num_actions()).map(move |a| (s, a)))
        .map(|(s, a)| mdp.cost(s, a) + gamma * mdp.expected_next(s, a, v.as_slice()))
        .collect();
    QFunction::new(mdp.num_states(), mdp.num_actions(), values)
}

pub(crate) fn check_q_shape(mdp: &FiniteMdp, q: &QFunction) -> Result<()> {
    if q.num_states() != mdp.num_states() || q.num_actions() != mdp.num_actions() {
        return Err(Error::DimensionMismatch {
            expected: mdp.num_states() * mdp.num_actions(),
            got: q.num_states() * q.num_actions(),
        });
    }
    Ok(())
}

/// Iterates the exact operator of `kind` from zero until the successive
/// difference (sup-norm, or span for the average-cost kind) is at most `tol`.
pub fn solve_fixed_point(
    mdp: &FiniteMdp,
    kind: SolveKind,
    tol: f64,
    max_iter: usize,
) -> Result<SolveResult> {
    if !(tol > 0.0) {
        return Err(Error::param("tol", "must be positive"));
    }
    let no_convergence = |residual| Error::NoConvergence {
        iterations: max_iter,
        residual,
        tol,
    };
    match kind {
        SolveKind::DiscountedValue => {
            let mut v = ValueFunction::zeros(mdp.num_states());
            let mut residual = f64::INFINITY;
            for k in 1..=max_iter {
                let next = bellman_discounted(mdp, &v)?;
                residual = sup_norm(next.sub(&v).as_slice());
                v = next;
                if residual <= tol {
                    return Ok(SolveResult {
                        solution: Solution::Value(v),
                        gain: None,
                        iterations: k,
                        final_residual: residual,
                    });
                }
            }
            Err(no_convergence(residual))
        }
        SolveKind::AverageValue => {
            let mut v = ValueFunction::zeros(mdp.num_states());
            let mut residual = f64::INFINITY;
            for k in 1..=max_iter {
                let (next, gain) = relative_bellman(mdp, &v)?;
                residual = span_seminorm(next.sub(&v).as_slice());
                v = next;
                if residual <= tol {
                    return Ok(SolveResult {
                        solution: Solution::Value(v),
                        gain: Some(gain),
                        iterations: k,
                        final_residual: residual,
                    });
                }
            }
            Err(no_convergence(residual))
        }
        SolveKind::DiscountedQ => {
            let mut q = QFunction::zeros(mdp.num_states(), mdp.num_actions());
            let mut residual = f64::INFINITY;
            for k in 1..=max_iter {
                let next = q_bellman(mdp, &q)?;
                residual = next.sub(&q).sup_norm();
                q = next;
                if residual <= tol {
                    return Ok(SolveResult {
                        solution: Solution::Q(q),
                        gain: None,
                        iterations: k,
                        final_residual: residual,
                    });
                }
            }
            Err(no_convergence(residual))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TransitionKernel;
    use crate::models;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> ValueFunction {
        ValueFunction::new(x.to_vec()).unwrap()
    }

    #[test]
    fn bellman_examples() {
        let single = models::single_state(1.0, Some(0.9));
        assert_eq!(bellman_discounted(&single, &v(&[0.0])).unwrap(), v(&[1.0]));
        let chain = models::chain2(0.5);
        assert_eq!(bellman_discounted(&chain, &v(&[0.0, 0.0])).unwrap(), v(&[0.0, 1.0]));
        // v* = (0, 1) solves v(0) = 0 + 0.5 v(0), v(1) = 1 + 0.5 v(0)
        assert_eq!(bellman_discounted(&chain, &v(&[0.0, 1.0])).unwrap(), v(&[0.0, 1.0]));
        assert!(matches!(
            bellman_discounted(&models::uniform2(), &v(&[0.0, 0.0])),
            Err(Error::MissingDiscount)
        ));
    }

    #[test]
    fn relative_bellman_examples() {
        let m = models::uniform2();
        let (out, gain) = relative_bellman(&m, &v(&[0.0, 1.0])).unwrap();
        assert_eq!(out, v(&[0.0, 1.0]));
        assert_eq!(gain, 0.5);
        let (out2, gain2) = relative_bellman(&m, &v(&[3.25, 4.25])).unwrap();
        assert_eq!(out2, out);
        assert!((gain2 - (gain + 3.25)).abs() < 1e-15);
    }

    #[test]
    fn q_bellman_examples() {
        let single = models::single_state(1.0, Some(0.5));
        let q2 = QFunction::new(1, 1, vec![2.0]).unwrap();
        assert_eq!(q_bellman(&single, &q2).unwrap(), q2);

        let m = models::chain2_two_action(0.5);
        let zero = QFunction::zeros(2, 2);
        assert_eq!(q_bellman(&m, &zero).unwrap().as_slice(), m.costs());

        // hand expansion: rows are degenerate, so TQ(s,a) = c(s,a) + 0.5 min_a' Q(next, a')
        let q = QFunction::new(2, 2, vec![1.0, 3.0, 2.0, 0.5]).unwrap();
        let out = q_bellman(&m, &q).unwrap();
        let expect = [0.0 + 0.5 * 1.0, 0.2 + 0.5 * 0.5, 1.0 + 0.5 * 1.0, 0.4 + 0.5 * 0.5];
        for (o, e) in out.as_slice().iter().zip(expect) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn solver_examples() {
        let single = models::single_state(1.0, Some(0.9));
        let r = solve_fixed_point(&single, SolveKind::DiscountedValue, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((r.value().unwrap().as_slice()[0] - 10.0).abs() < 1e-8);
        assert!(r.final_residual <= DEFAULT_TOL);

        let chain = models::chain2(0.5);
        let r = solve_fixed_point(&chain, SolveKind::DiscountedValue, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let vs = r.value().unwrap().as_slice();
        assert!(vs[0].abs() < 1e-12 && (vs[1] - 1.0).abs() < 1e-12);

        let r = solve_fixed_point(&models::uniform2(), SolveKind::AverageValue, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((r.gain.unwrap() - 0.5).abs() < 1e-12);
        assert!((r.value().unwrap().span() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn solver_reports_non_convergence() {
        let m = models::garnet3(0.99);
        let err = solve_fixed_point(&m, SolveKind::DiscountedValue, 1e-12, 5).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 5, .. }));
        assert!(solve_fixed_point(&m, SolveKind::DiscountedValue, 0.0, 5).is_err());
    }

    fn policy_value(m: &FiniteMdp, rule: &[usize], gamma: f64) -> [f64; 2] {
        // 2x2 solve of (I - gamma P_rule) v = c_rule by Cramer's rule
        let p = |s: usize, j: usize| m.kernel().row(s, rule[s])[j];
        let (a11, a12) = (1.0 - gamma * p(0, 0), -gamma * p(0, 1));
        let (a21, a22) = (-gamma * p(1, 0), 1.0 - gamma * p(1, 1));
        let (b1, b2) = (m.cost(0, rule[0]), m.cost(1, rule[1]));
        let det = a11 * a22 - a12 * a21;
        [(b1 * a22 - a12 * b2) / det, (a11 * b2 - a21 * b1) / det]
    }

    #[test]
    fn greedy_rule_at_fixed_point_is_optimal() {
        let m = models::chain2_two_action(0.5);
        let mut best: Option<([f64; 2], Vec<usize>)> = None;
        for r0 in 0..2 {
            for r1 in 0..2 {
                let val = policy_value(&m, &[r0, r1], 0.5);
                let better = match &best {
                    None => true,
                    Some((b, _)) => val[0] <= b[0] && val[1] <= b[1] && val != *b,
                };
                if better {
                    best = Some((val, vec![r0, r1]));
                }
            }
        }
        let (vstar, rule) = best.unwrap();
        let r = solve_fixed_point(&m, SolveKind::DiscountedValue, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let sol = r.value().unwrap();
        for (got, want) in sol.as_slice().iter().zip(&vstar) {
            assert!((got - want).abs() < 1e-9);
        }
        assert_eq!(m.greedy_rule(sol, true).unwrap().0, rule);
    }

    fn random_mdp(rng: &mut ChaCha8Rng, discount: Option<f64>) -> FiniteMdp {
        let ns = rng.random_range(2..6);
        let na = rng.random_range(1..4);
        let mut probs = Vec::new();
        for _ in 0..ns * na {
            let raw: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|x| x / total));
        }
        let cost = (0..ns * na).map(|_| rng.random_range(-2.0..2.0)).collect();
        FiniteMdp::from_parts(cost, TransitionKernel::new(ns, na, probs).unwrap(), discount).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn exact_operators_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let gamma = rng.random_range(0.1..0.99);
            let m = random_mdp(&mut rng, Some(gamma));
            let n = m.num_states();
            let (v1, v2) = (v(&random_vec(&mut rng, n, 10.0)), v(&random_vec(&mut rng, n, 10.0)));
            let lhs = bellman_discounted(&m, &v1).unwrap().sub(&bellman_discounted(&m, &v2).unwrap()).sup_norm();
            assert!(lhs <= gamma * v1.sub(&v2).sup_norm() + 1e-12);

            let alpha = m.kernel().unichain_coefficient();
            let (t1, _) = relative_bellman(&m, &v1).unwrap();
            let (t2, _) = relative_bellman(&m, &v2).unwrap();
            assert!(t1.sub(&t2).span() <= alpha * v1.sub(&v2).span() + 1e-12);

            let na = m.num_actions();
            let q1 = QFunction::new(n, na, random_vec(&mut rng, n * na, 10.0)).unwrap();
            let q2 = QFunction::new(n, na, random_vec(&mut rng, n * na, 10.0)).unwrap();
            let lhs = q_bellman(&m, &q1).unwrap().sub(&q_bellman(&m, &q2).unwrap()).sup_norm();
            assert!(lhs <= gamma * q1.sub(&q2).sup_norm() + 1e-12);
        }
    }

    #[test]
    fn q_star_is_consistent_with_v_star() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let gamma = rng.random_range(0.3..0.95);
            let m = random_mdp(&mut rng, Some(gamma));
            let vs = solve_fixed_point(&m, SolveKind::DiscountedValue, 1e-12, DEFAULT_MAX_ITER).unwrap();
            let qs = solve_fixed_point(&m, SolveKind::DiscountedQ, 1e-12, DEFAULT_MAX_ITER).unwrap();
            let diff = qs.q().unwrap().state_values().sub(vs.value().unwrap()).sup_norm();
            assert!(diff < 1e-9, "{diff}");
        }
    }

    #[test]
    fn residuals_shrink_geometrically() {
        let m = models::garnet3(0.8);
        let gamma = 0.8;
        let mut cur = ValueFunction::zeros(3);
        let mut prev_r: Option<f64> = None;
        for _ in 0..200 {
            let next = bellman_discounted(&m, &cur).unwrap();
            let r = next.sub(&cur).sup_norm();
            if let Some(p) = prev_r {
                assert!(r <= gamma * p + 1e-12, "{r} / {p}");
            }
            prev_r = Some(r);
            cur = next;
        }
    }

    #[test]
    fn relative_bellman_shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let m = random_mdp(&mut rng, None);
            let x = v(&random_vec(&mut rng, m.num_states(), 5.0));
            let lambda = rng.random_range(-10.0..10.0);
            let (a, ga) = relative_bellman(&m, &x).unwrap();
            let (b, gb) = relative_bellman(&m, &x.shifted(lambda)).unwrap();
            assert!(a.sub(&b).sup_norm() < 1e-12);
            assert!((gb - ga - lambda).abs() < 1e-12);
            assert_eq!(a.min(), 0.0);
        }
    }
}

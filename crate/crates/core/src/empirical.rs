//! Sampled operators `T^n_k`, the gradient operator for a quadratic family,
//! and the driver that iterates them with a fresh batch per step.
//!
//! Within one application every `(s, a)` pair sees the same batch
//! `Z_1..Z_n`; the sample average `(1/n) sum_i v(f(s, a, Z_i))` is evaluated
//! through the per-pair transition counts, which is the same sum grouped by
//! next state.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{self, SolveKind, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::mdp::{span_seminorm, sup_norm, FiniteMdp, QFunction, TransitionKernel, ValueFunction};
use crate::stream::{RngStreamSpec, SampleBatch};

/// Transition counts of one batch for every `(s, a)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmpiricalKernel {
    num_states: usize,
    num_actions: usize,
    n: usize,
    counts: Vec<u32>,
}

impl EmpiricalKernel {
    pub fn from_batch(mdp: &FiniteMdp, batch: &SampleBatch) -> Self {
        Self {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            n: batch.len(),
            counts: mdp.transition_counts(batch.draws()),
        }
    }

    pub fn sample_size(&self) -> usize {
        self.n
    }

    pub fn counts(&self, s: usize, a: usize) -> &[u32] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.counts[start..start + self.num_states]
    }

    /// `p^n(.|s, a) = counts / n`
    pub fn row(&self, s: usize, a: usize) -> Vec<f64> {
        let n = self.n as f64;
        self.counts(s, a).iter().map(|c| *c as f64 / n).collect()
    }

    pub fn to_kernel(&self) -> TransitionKernel {
        let n = self.n as f64;
        let probs = self.counts.iter().map(|c| *c as f64 / n).collect();
        TransitionKernel::new(self.num_states, self.num_actions, probs)
            .expect("count rows are stochastic")
    }

    /// Span coefficient of the empirical kernel, computed on integer counts.
    pub fn span_coefficient(&self) -> f64 {
        let rows: Vec<&[u32]> = self.counts.chunks(self.num_states).collect();
        let mut min_overlap = u64::MAX;
        for (i, r1) in rows.iter().enumerate() {
            for r2 in &rows[i + 1..] {
                let overlap: u64 = r1.iter().zip(r2.iter()).map(|(x, y)| (*x).min(*y) as u64).sum();
                min_overlap = min_overlap.min(overlap);
            }
        }
        if min_overlap == u64::MAX {
            return 0.0;
        }
        1.0 - min_overlap as f64 / self.n as f64
    }

    #[inline]
    fn sample_mean(&self, pair: usize, v: &[f64]) -> f64 {
        let start = pair * self.num_states;
        let total: f64 = self.counts[start..start + self.num_states]
            .iter()
            .zip(v)
            .filter(|(c, _)| **c > 0)
            .map(|(c, x)| *c as f64 * x)
            .sum();
        total / self.n as f64
    }

    /// `min_a c(s,a) + g * (1/n) sum_i v(f(s,a,Z_i))` per state.
    fn min_backup(&self, mdp: &FiniteMdp, v: &[f64], g: f64) -> Vec<f64> {
        let na = self.num_actions;
        (0..self.num_states)
            .map(|s| {
                (0..na)
                    .map(|a| mdp.cost(s, a) + g * self.sample_mean(s * na + a, v))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn q_backup(&self, mdp: &FiniteMdp, state_values: &[f64], g: f64) -> Vec<f64> {
        (0..self.num_states * self.num_actions)
            .map(|pair| mdp.costs()[pair] + g * self.sample_mean(pair, state_values))
            .collect()
    }
}

fn project(mut v: Vec<f64>, bound: f64) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.clamp(-bound, bound));
    v
}

fn discounted_step(mdp: &FiniteMdp, ek: &EmpiricalKernel, v: &[f64]) -> Result<Vec<f64>> {
    let gamma = mdp.require_discount()?;
    Ok(project(ek.min_backup(mdp, v, gamma), mdp.value_bound()?))
}

fn relative_step(mdp: &FiniteMdp, ek: &EmpiricalKernel, v: &[f64]) -> (Vec<f64>, f64) {
    let mut tv = ek.min_backup(mdp, v, 1.0);
    let gain = tv.iter().copied().fold(f64::INFINITY, f64::min);
    tv.iter_mut().for_each(|x| *x -= gain);
    (tv, gain)
}

fn q_step(mdp: &FiniteMdp, ek: &EmpiricalKernel, q: &QFunction) -> Result<QFunction> {
    let gamma = mdp.require_discount()?;
    let values = ek.q_backup(mdp, q.state_values().as_slice(), gamma);
    QFunction::new(mdp.num_states(), mdp.num_actions(), values)
}

/// Empirical Bellman operator; the result is clipped to the value box
/// `||c||_inf / (1 - gamma)`.
pub fn empirical_bellman(
    mdp: &FiniteMdp,
    v: &ValueFunction,
    batch: &SampleBatch,
) -> Result<ValueFunction> {
    mdp.require_discount()?;
    mdp.check_len(v.len())?;
    let ek = EmpiricalKernel::from_batch(mdp, batch);
    discounted_step(mdp, &ek, v.as_slice()).map(ValueFunction::from_vec)
}

/// Sampled undiscounted backup, normalized to minimum zero; also returns the
/// gain estimate (the subtracted minimum).
pub fn empirical_relative_bellman(
    mdp: &FiniteMdp,
    v: &ValueFunction,
    batch: &SampleBatch,
) -> Result<(ValueFunction, f64)> {
    mdp.check_len(v.len())?;
    let ek = EmpiricalKernel::from_batch(mdp, batch);
    let (out, gain) = relative_step(mdp, &ek, v.as_slice());
    Ok((ValueFunction::from_vec(out), gain))
}

/// `[T^n Q](s,a) = c(s,a) + (gamma/n) sum_i min_a' Q(f(s,a,Z_i), a')`
pub fn empirical_q(mdp: &FiniteMdp, q: &QFunction, batch: &SampleBatch) -> Result<QFunction> {
    exact::check_q_shape(mdp, q)?;
    let ek = EmpiricalKernel::from_batch(mdp, batch);
    q_step(mdp, &ek, q)
}

/// Empirical transition row `p^n(j|s,a) = #{i : f(s,a,Z_i) = j} / n`.
pub fn empirical_kernel(
    mdp: &FiniteMdp,
    s: usize,
    a: usize,
    batch: &SampleBatch,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    mdp.next_state(s, a, 0.5)?;
    let n = batch.len() as f64;
    let mut row = vec![0.0; mdp.num_states()];
    for &u in batch.draws() {
        row[mdp.next_state_unchecked(s, a, u)] += 1.0;
    }
    row.iter_mut().for_each(|x| *x /= n);
    Ok(row)
}

/// Span coefficient of an empirical kernel.
pub fn empirical_span_coefficient(p_hat: &TransitionKernel) -> f64 {
    p_hat.unichain_coefficient()
}

/// Quadratic loss `f(x, W) = 0.5 ||x - h(W)||^2` with
/// `h(W) = x* + (W - 1/2) 1` and `W ~ U[0, 1]`, so `E[h(W)] = x*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdProblem {
    target_mean: Vec<f64>,
    step_size: f64,
}

impl SgdProblem {
    pub fn new(target_mean: Vec<f64>, step_size: f64) -> Result<Self> {
        if target_mean.is_empty() {
            return Err(Error::param("target_mean", "dimension must be positive"));
        }
        if target_mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("target_mean", "entries must be finite"));
        }
        if !(step_size > 0.0 && step_size < 2.0) {
            return Err(Error::param(
                "step_size",
                format!("{step_size} must lie in (0, 2) for the mean map to contract"),
            ));
        }
        Ok(Self {
            target_mean,
            step_size,
        })
    }

    pub fn dimension(&self) -> usize {
        self.target_mean.len()
    }

    pub fn target_mean(&self) -> &[f64] {
        &self.target_mean
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    /// `|1 - beta|`
    pub fn contraction(&self) -> f64 {
        (1.0 - self.step_size).abs()
    }

    /// Deterministic map `T(x) = x - beta (x - x*)`.
    pub fn mean_map(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(x.iter()
            .zip(&self.target_mean)
            .map(|(xi, ti)| xi - self.step_size * (xi - ti))
            .collect())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Mini-batch gradient step `x - (beta/n) sum_i grad f(x, W_i)`.
pub fn sgd_step(problem: &SgdProblem, x: &[f64], batch: &SampleBatch) -> Result<Vec<f64>> {
    problem.check_dim(x)?;
    let shift = batch.mean() - 0.5;
    Ok(x.iter()
        .zip(&problem.target_mean)
        .map(|(xi, ti)| xi - problem.step_size * (xi - (ti + shift)))
        .collect())
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    /// Empirical value iteration (discounted).
    Evi,
    /// Empirical relative value iteration (average cost).
    Ervi,
    /// Empirical Q-value iteration (discounted).
    Eqvi,
    Sgd,
}

impl OperatorKind {
    pub fn solve_kind(self) -> Option<SolveKind> {
        match self {
            Self::Evi => Some(SolveKind::DiscountedValue),
            Self::Ervi => Some(SolveKind::AverageValue),
            Self::Eqvi => Some(SolveKind::DiscountedQ),
            Self::Sgd => None,
        }
    }
}

impl std::str::FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evi" => Ok(Self::Evi),
            "ervi" => Ok(Self::Ervi),
            "eqvi" => Ok(Self::Eqvi),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::param("kind", format!("unknown operator `{other}`"))),
        }
    }
}

/// Per-batch noise statistics of one sampled operator: its contraction
/// coefficient and `W = rho(T^n(x*), T(x*))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStats {
    pub alpha_hat: f64,
    pub w: f64,
}

/// A sampled iteration together with its oracle fixed point.
#[derive(Debug, Clone)]
pub enum IteratedProblem {
    DiscountedValue {
        mdp: FiniteMdp,
        fixed_point: ValueFunction,
    },
    AverageValue {
        mdp: FiniteMdp,
        /// Normalized to minimum zero.
        fixed_point: ValueFunction,
        gain: f64,
    },
    DiscountedQ {
        mdp: FiniteMdp,
        fixed_point: QFunction,
    },
    Sgd {
        problem: SgdProblem,
        initial: Vec<f64>,
    },
}

impl IteratedProblem {
    /// Solves the exact fixed point of the operator family first.
    pub fn prepare(kind: OperatorKind, mdp: &FiniteMdp) -> Result<Self> {
        let solve_kind = kind
            .solve_kind()
            .ok_or_else(|| Error::param("kind", "sgd problems are built with IteratedProblem::sgd"))?;
        let sol = exact::solve_fixed_point(mdp, solve_kind, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let mdp = mdp.clone();
        Ok(match kind {
            OperatorKind::Evi => Self::DiscountedValue {
                mdp,
                fixed_point: sol.value().cloned().expect("value solution"),
            },
            OperatorKind::Ervi => Self::AverageValue {
                mdp,
                fixed_point: sol.value().expect("value solution").normalized(),
                gain: sol.gain.expect("average kind sets the gain"),
            },
            OperatorKind::Eqvi => Self::DiscountedQ {
                mdp,
                fixed_point: sol.q().cloned().expect("q solution"),
            },
            OperatorKind::Sgd => unreachable!(),
        })
    }

    pub fn sgd(problem: SgdProblem, initial: Vec<f64>) -> Result<Self> {
        problem.check_dim(&initial)?;
        Ok(Self::Sgd { problem, initial })
    }

    pub fn kind(&self) -> OperatorKind {
        match self {
            Self::DiscountedValue { .. } => OperatorKind::Evi,
            Self::AverageValue { .. } => OperatorKind::Ervi,
            Self::DiscountedQ { .. } => OperatorKind::Eqvi,
            Self::Sgd { .. } => OperatorKind::Sgd,
        }
    }

    pub fn mdp(&self) -> Option<&FiniteMdp> {
        match self {
            Self::DiscountedValue { mdp, .. }
            | Self::AverageValue { mdp, .. }
            | Self::DiscountedQ { mdp, .. } => Some(mdp),
            Self::Sgd { .. } => None,
        }
    }

    pub fn fixed_point(&self) -> &[f64] {
        match self {
            Self::DiscountedValue { fixed_point, .. } | Self::AverageValue { fixed_point, .. } => {
                fixed_point.as_slice()
            }
            Self::DiscountedQ { fixed_point, .. } => fixed_point.as_slice(),
            Self::Sgd { problem, .. } => problem.target_mean(),
        }
    }

    /// Optimal gain in average-cost mode.
    pub fn gain(&self) -> Option<f64> {
        match self {
            Self::AverageValue { gain, .. } => Some(*gain),
            _ => None,
        }
    }

    /// Starting iterate: zero for the dynamic-programming kinds.
    pub fn initial(&self) -> Vec<f64> {
        match self {
            Self::Sgd { initial, .. } => initial.clone(),
            other => vec![0.0; other.fixed_point().len()],
        }
    }

    /// Deterministic contraction coefficient of the exact operator.
    pub fn contraction(&self) -> f64 {
        match self {
            Self::DiscountedValue { mdp, .. } | Self::DiscountedQ { mdp, .. } => {
                mdp.discount().expect("discounted kinds carry a discount")
            }
            Self::AverageValue { mdp, .. } => mdp.kernel().unichain_coefficient(),
            Self::Sgd { problem, .. } => problem.contraction(),
        }
    }

    /// Distance to the fixed point: sup-norm, span for average cost,
    /// Euclidean for the gradient iteration.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Self::DiscountedValue { .. } | Self::DiscountedQ { .. } => {
                sup_norm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>())
            }
            Self::AverageValue { .. } => {
                span_seminorm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>())
            }
            Self::Sgd { .. } => euclidean(x, y),
        }
    }

    pub fn error(&self, x: &[f64]) -> f64 {
        self.distance(x, self.fixed_point())
    }

    /// One application of the sampled operator; returns the new iterate and,
    /// in average-cost mode, the gain estimate.
    pub fn step(&self, x: &[f64], batch: &SampleBatch) -> Result<(Vec<f64>, Option<f64>)> {
        match self {
            Self::DiscountedValue { mdp, .. } => {
                mdp.check_len(x.len())?;
                let ek = EmpiricalKernel::from_batch(mdp, batch);
                Ok((discounted_step(mdp, &ek, x)?, None))
            }
            Self::AverageValue { mdp, .. } => {
                mdp.check_len(x.len())?;
                let ek = EmpiricalKernel::from_batch(mdp, batch);
                let (v, g) = relative_step(mdp, &ek, x);
                Ok((v, Some(g)))
            }
            Self::DiscountedQ { mdp, .. } => {
                let q = QFunction::new(mdp.num_states(), mdp.num_actions(), x.to_vec())?;
                let ek = EmpiricalKernel::from_batch(mdp, batch);
                Ok((q_step(mdp, &ek, &q)?.as_slice().to_vec(), None))
            }
            Self::Sgd { problem, .. } => Ok((sgd_step(problem, x, batch)?, None)),
        }
    }

    /// Contraction coefficient of the sampled operator built from `batch`
    /// and its deviation `rho(T^n(x*), T(x*))` at the fixed point.
    pub fn noise_stats(&self, batch: &SampleBatch) -> Result<NoiseStats> {
        let star = self.fixed_point();
        Ok(match self {
            Self::AverageValue { mdp, gain, .. } => {
                let ek = EmpiricalKernel::from_batch(mdp, batch);
                let sampled = ek.min_backup(mdp, star, 1.0);
                let exact: Vec<f64> = star.iter().map(|x| x + gain).collect();
                NoiseStats {
                    alpha_hat: ek.span_coefficient(),
                    w: self.distance(&sampled, &exact),
                }
            }
            _ => {
                let (out, _) = self.step(star, batch)?;
                NoiseStats {
                    alpha_hat: self.contraction(),
                    w: self.distance(&out, star),
                }
            }
        })
    }
}

/// One replica of the iterated sampled operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub replica: u64,
    /// `errors[k]` is the distance to the fixed point after `k` steps.
    pub errors: Vec<f64>,
    pub gains: Vec<Option<f64>>,
    pub iterates: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn final_error(&self) -> f64 {
        *self.errors.last().expect("trajectory holds the initial point")
    }

    pub fn final_iterate(&self) -> Option<&[f64]> {
        self.iterates.as_ref().and_then(|it| it.last()).map(Vec::as_slice)
    }
}

/// Drives `X_{k+1} = T^n_k(X_k)` for `iterations` steps. Step `k` (0-based)
/// draws its batch from stream `(master_seed, replica, k)`.
pub fn run_iterated(
    problem: &IteratedProblem,
    n: usize,
    iterations: usize,
    master_seed: u64,
    replica: u64,
    record: bool,
) -> Result<Trajectory> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut x = problem.initial();
    let mut errors = Vec::with_capacity(iterations + 1);
    let mut gains = Vec::with_capacity(iterations + 1);
    let mut iterates = record.then(|| vec![x.clone()]);
    errors.push(problem.error(&x));
    gains.push(None);
    for k in 0..iterations {
        let batch = RngStreamSpec::new(master_seed, replica, k as u64).batch(n)?;
        let (next, gain) = problem.step(&x, &batch)?;
        x = next;
        errors.push(problem.error(&x));
        gains.push(gain);
        if let Some(it) = iterates.as_mut() {
            it.push(x.clone());
        }
    }
    Ok(Trajectory {
        replica,
        errors,
        gains,
        iterates,
    })
}

/// Writes `replica,k,error,gain_estimate` rows.
pub fn write_trajectories_csv<W: Write>(out: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["replica", "k", "error", "gain_estimate"])?;
    for t in trajectories {
        for (k, (e, g)) in t.errors.iter().zip(&t.gains).enumerate() {
            wtr.write_record([
                t.replica.to_string(),
                k.to_string(),
                format!("{e:.17e}"),
                g.map(|g| format!("{g:.17e}")).unwrap_or_default(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

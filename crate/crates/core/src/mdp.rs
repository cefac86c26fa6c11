//! Finite MDP representation.
//!
//! The transition map `f(s, a, z)` is realized by inverting the cumulative
//! distribution of the kernel row `p(.|s, a)` at a uniform draw `z`, so the
//! kernel is the only source of truth for the dynamics. A merged table of all
//! row breakpoints ([`NoiseLookup`]) lets a whole batch of draws be turned
//! into per-pair transition counts with one binary search per draw.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on a kernel row sum before it is rejected.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Row-stochastic tensor `p(j | s, a)`, stored row-major as `[(s * A + a) * S + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TransitionKernel {
    /// Validates every row; rows whose sum is within [`ROW_SUM_TOL`] of one
    /// are renormalized, anything else is rejected with the first bad row.
    pub fn new(num_states: usize, num_actions: usize, mut probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidModel(
                "num_states and num_actions must be positive".into(),
            ));
        }
        let expected = num_states * num_actions * num_states;
        if probs.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: probs.len(),
            });
        }
        for (pair, row) in probs.chunks_mut(num_states).enumerate() {
            let (state, action) = (pair / num_actions, pair % num_actions);
            let bad = |reason: String| Error::KernelRow {
                state,
                action,
                reason,
            };
            if let Some((j, p)) = row
                .iter()
                .enumerate()
                .find(|(_, p)| !(-ROW_SUM_TOL..=1.0 + ROW_SUM_TOL).contains(*p))
            {
                return Err(bad(format!("entry p({j}) = {p} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(bad(format!("row sums to {sum}")));
            }
            if sum != 1.0 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                row.iter_mut().for_each(|p| *p = (*p / sum).clamp(0.0, 1.0));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<Vec<f64>>]) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(num_states * num_actions * num_states);
        for (s, per_action) in rows.iter().enumerate() {
            if per_action.len() != num_actions {
                return Err(Error::InvalidModel(format!(
                    "kernel state {s} has {} actions, expected {num_actions}",
                    per_action.len()
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != num_states {
                    return Err(Error::KernelRow {
                        state: s,
                        action: a,
                        reason: format!("row has {} entries, expected {num_states}", row.len()),
                    });
                }
                probs.extend_from_slice(row);
            }
        }
        Self::new(num_states, num_actions, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.probs[start..start + self.num_states]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.num_states)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Span-contraction coefficient `1 - min over pairs of sum_j min(p, p')`.
    pub fn unichain_coefficient(&self) -> f64 {
        let rows: Vec<&[f64]> = self.rows().collect();
        let mut min_overlap = f64::INFINITY;
        for (i, r1) in rows.iter().enumerate() {
            for r2 in &rows[i + 1..] {
                let overlap: f64 = r1.iter().zip(r2.iter()).map(|(x, y)| x.min(*y)).sum();
                min_overlap = min_overlap.min(overlap);
            }
        }
        if !min_overlap.is_finite() {
            // a single (s, a) pair overlaps only with itself
            return 0.0;
        }
        (1.0 - min_overlap).clamp(0.0, 1.0)
    }

    /// Applies a state relabeling: state `s` becomes `perm[s]` in both the
    /// row index and the column index.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_states;
        if perm.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: perm.len(),
            });
        }
        let mut probs = vec![0.0; self.probs.len()];
        for s in 0..n {
            for a in 0..self.num_actions {
                let dst = (perm[s] * self.num_actions + a) * n;
                for (j, p) in self.row(s, a).iter().enumerate() {
                    probs[dst + perm[j]] = *p;
                }
            }
        }
        Self::new(n, self.num_actions, probs)
    }
}

/// Free-function form of [`TransitionKernel::unichain_coefficient`].
pub fn unichain_coefficient(kernel: &TransitionKernel) -> f64 {
    kernel.unichain_coefficient()
}

/// Merged breakpoints of every kernel row's cumulative distribution.
///
/// Bucket `i` covers `(b[i-1], b[i]]` (bucket 0 also holds `u = 0`). No row
/// breakpoint lies strictly inside a bucket, so each bucket maps to a single
/// next state per `(s, a)`.
#[derive(Debug, Clone)]
pub struct NoiseLookup {
    breakpoints: Vec<f64>,
    /// `[(s * A + a) * B + bucket]` -> next state
    targets: Vec<u32>,
}

impl NoiseLookup {
    fn build(kernel: &TransitionKernel, cumulative: &[f64]) -> Self {
        let s_count = kernel.num_states;
        let mut breakpoints: Vec<f64> = cumulative
            .chunks(s_count)
            .zip(kernel.rows())
            .flat_map(|(cum, row)| {
                cum.iter()
                    .zip(row)
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(c, _)| *c)
            })
            .collect();
        breakpoints.push(1.0);
        breakpoints.sort_by(f64::total_cmp);
        breakpoints.dedup();

        let pairs = kernel.num_states * kernel.num_actions;
        let mut targets = Vec::with_capacity(pairs * breakpoints.len());
        for (cum, row) in cumulative.chunks(s_count).zip(kernel.rows()) {
            for &b in &breakpoints {
                targets.push(invert_cdf(row, cum, b) as u32);
            }
        }
        Self {
            breakpoints,
            targets,
        }
    }

    pub fn num_buckets(&self) -> usize {
        self.breakpoints.len()
    }

    #[inline]
    pub fn bucket(&self, u: f64) -> usize {
        self.breakpoints.partition_point(|b| *b < u)
    }

    /// Histogram of the draws over buckets.
    pub fn histogram(&self, draws: &[f64]) -> Vec<u32> {
        let mut hist = vec![0u32; self.breakpoints.len()];
        for &u in draws {
            hist[self.bucket(u)] += 1;
        }
        hist
    }

    #[inline]
    fn target(&self, pair: usize, bucket: usize) -> usize {
        self.targets[pair * self.breakpoints.len() + bucket] as usize
    }
}

/// Smallest `j` with `p(j) > 0` and cumulative mass `>= u`.
#[inline]
fn invert_cdf(row: &[f64], cum: &[f64], u: f64) -> usize {
    row.iter()
        .zip(cum)
        .position(|(p, c)| *p > 0.0 && *c >= u)
        .expect("last positive cumulative entry is pinned to 1")
}

fn cumulative_rows(kernel: &TransitionKernel) -> Vec<f64> {
    let mut out = Vec::with_capacity(kernel.probs.len());
    for row in kernel.rows() {
        let start = out.len();
        let mut acc = 0.0;
        for p in row {
            acc += p;
            out.push(acc);
        }
        let last_pos = row
            .iter()
            .rposition(|p| *p > 0.0)
            .expect("stochastic row has a positive entry");
        for c in &mut out[start + last_pos..] {
            *c = 1.0;
        }
    }
    out
}

/// On-disk JSON layout of a finite MDP.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MdpFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub cost: Vec<Vec<f64>>,
    pub kernel: Vec<Vec<Vec<f64>>>,
    pub discount: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    cost: Vec<f64>,
    kernel: TransitionKernel,
    discount: Option<f64>,
    cumulative: Vec<f64>,
    lookup: NoiseLookup,
}

impl FiniteMdp {
    /// `cost[s][a]`, `kernel[s][a][j]`.
    pub fn new(
        cost: Vec<Vec<f64>>,
        kernel: Vec<Vec<Vec<f64>>>,
        discount: Option<f64>,
    ) -> Result<Self> {
        let kernel = TransitionKernel::from_rows(&kernel)?;
        if cost.len() != kernel.num_states {
            return Err(Error::InvalidModel(format!(
                "cost has {} states, kernel has {}",
                cost.len(),
                kernel.num_states
            )));
        }
        let mut flat = Vec::with_capacity(kernel.num_states * kernel.num_actions);
        for (s, row) in cost.iter().enumerate() {
            if row.len() != kernel.num_actions {
                return Err(Error::InvalidModel(format!(
                    "cost row {s} has {} actions, expected {}",
                    row.len(),
                    kernel.num_actions
                )));
            }
            if let Some((a, c)) = row.iter().enumerate().find(|(_, c)| !c.is_finite()) {
                return Err(Error::InvalidModel(format!("cost({s}, {a}) = {c} is not finite")));
            }
            flat.extend_from_slice(row);
        }
        Self::from_parts(flat, kernel, discount)
    }

    pub fn from_parts(
        cost: Vec<f64>,
        kernel: TransitionKernel,
        discount: Option<f64>,
    ) -> Result<Self> {
        if cost.len() != kernel.num_states * kernel.num_actions {
            return Err(Error::DimensionMismatch {
                expected: kernel.num_states * kernel.num_actions,
                got: cost.len(),
            });
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidModel("cost entries must be finite".into()));
        }
        if let Some(g) = discount {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::InvalidModel(format!(
                    "discount {g} must lie strictly inside (0, 1)"
                )));
            }
        }
        let cumulative = cumulative_rows(&kernel);
        let lookup = NoiseLookup::build(&kernel, &cumulative);
        Ok(Self {
            num_states: kernel.num_states,
            num_actions: kernel.num_actions,
            cost,
            kernel,
            discount,
            cumulative,
            lookup,
        })
    }

    pub fn from_file_spec(spec: MdpFile) -> Result<Self> {
        if spec.kernel.len() != spec.num_states || spec.cost.len() != spec.num_states {
            return Err(Error::InvalidModel(format!(
                "num_states = {} but cost has {} rows and kernel has {}",
                spec.num_states,
                spec.cost.len(),
                spec.kernel.len()
            )));
        }
        if let Some(s) = spec.kernel.iter().position(|r| r.len() != spec.num_actions) {
            return Err(Error::InvalidModel(format!(
                "num_actions = {} but kernel state {s} has {}",
                spec.num_actions,
                spec.kernel[s].len()
            )));
        }
        Self::new(spec.cost, spec.kernel, spec.discount)
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        Self::from_file_spec(serde_json::from_str(json)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_file_spec(&self) -> MdpFile {
        let s_count = self.num_states;
        MdpFile {
            num_states: s_count,
            num_actions: self.num_actions,
            cost: self.cost.chunks(self.num_actions).map(<[f64]>::to_vec).collect(),
            kernel: (0..s_count)
                .map(|s| {
                    (0..self.num_actions)
                        .map(|a| self.kernel.row(s, a).to_vec())
                        .collect()
                })
                .collect(),
            discount: self.discount,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_spec()).expect("plain data serializes")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> Option<f64> {
        self.discount
    }

    pub fn require_discount(&self) -> Result<f64> {
        self.discount.ok_or(Error::MissingDiscount)
    }

    /// Same model with a different (or no) discount factor.
    pub fn with_discount(&self, discount: Option<f64>) -> Result<Self> {
        Self::from_parts(self.cost.clone(), self.kernel.clone(), discount)
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn lookup(&self) -> &NoiseLookup {
        &self.lookup
    }

    #[inline]
    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[s * self.num_actions + a]
    }

    pub fn costs(&self) -> &[f64] {
        &self.cost
    }

    /// `||c||_inf`
    pub fn cost_sup(&self) -> f64 {
        sup_norm(&self.cost)
    }

    /// Radius of the value-function box `||c||_inf / (1 - gamma)`.
    pub fn value_bound(&self) -> Result<f64> {
        Ok(self.cost_sup() / (1.0 - self.require_discount()?))
    }

    /// True when every kernel row puts all of its mass on one state.
    pub fn is_deterministic(&self) -> bool {
        self.kernel.rows().all(|row| row.contains(&1.0))
    }

    fn check_pair(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.num_states {
            return Err(Error::IndexOutOfRange {
                what: "state",
                index: s,
                size: self.num_states,
            });
        }
        if a >= self.num_actions {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: a,
                size: self.num_actions,
            });
        }
        Ok(())
    }

    /// Transition function `f(s, a, u)`: inverse CDF of `p(.|s, a)` at `u`.
    pub fn next_state(&self, s: usize, a: usize, u: f64) -> Result<usize> {
        self.check_pair(s, a)?;
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::NoiseOutOfRange(u));
        }
        Ok(self.next_state_unchecked(s, a, u))
    }

    #[inline]
    pub(crate) fn next_state_unchecked(&self, s: usize, a: usize, u: f64) -> usize {
        let start = (s * self.num_actions + a) * self.num_states;
        let end = start + self.num_states;
        invert_cdf(&self.kernel.probs[start..end], &self.cumulative[start..end], u)
    }

    /// Per-pair transition counts `#{i : f(s, a, u_i) = j}` for a batch,
    /// laid out like the kernel.
    pub fn transition_counts(&self, draws: &[f64]) -> Vec<u32> {
        let hist = self.lookup.histogram(draws);
        let s_count = self.num_states;
        let pairs = s_count * self.num_actions;
        let mut counts = vec![0u32; pairs * s_count];
        for pair in 0..pairs {
            let row = &mut counts[pair * s_count..(pair + 1) * s_count];
            for (bucket, &h) in hist.iter().enumerate() {
                if h > 0 {
                    row[self.lookup.target(pair, bucket)] += h;
                }
            }
        }
        counts
    }

    /// `sum_j p(j|s, a) v(j)`
    #[inline]
    pub fn expected_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.kernel
            .row(s, a)
            .iter()
            .zip(v)
            .map(|(p, x)| p * x)
            .sum()
    }

    /// Greedy decision rule `argmin_a c(s,a) + g sum_j p(j|s,a) v(j)` with
    /// `g` the discount (or 1 in average-cost mode); ties go to the lowest
    /// action index.
    pub fn greedy_rule(&self, v: &ValueFunction, discounted: bool) -> Result<DecisionRule> {
        self.check_len(v.len())?;
        let g = if discounted {
            self.require_discount()?
        } else {
            1.0
        };
        let actions = (0..self.num_states)
            .map(|s| {
                let mut best = (0, f64::INFINITY);
                for a in 0..self.num_actions {
                    let q = self.cost(s, a) + g * self.expected_next(s, a, v.as_slice());
                    if q < best.1 {
                        best = (a, q);
                    }
                }
                best.0
            })
            .collect();
        Ok(DecisionRule(actions))
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len != self.num_states {
            return Err(Error::DimensionMismatch {
                expected: self.num_states,
                got: len,
            });
        }
        Ok(())
    }
}

/// Value function over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueFunction(Vec<f64>);

impl ValueFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(x) = values.iter().find(|x| !x.is_finite()) {
            return Err(Error::param("values", format!("{x} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(num_states: usize) -> Self {
        Self(vec![0.0; num_states])
    }

    pub(crate) fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.0)
    }

    pub fn span(&self) -> f64 {
        span_seminorm(&self.0)
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `v + lambda * 1`
    pub fn shifted(&self, lambda: f64) -> Self {
        Self(self.0.iter().map(|x| x + lambda).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// Normalized representative with minimum zero.
    pub fn normalized(&self) -> Self {
        self.shifted(-self.min())
    }
}

impl From<ValueFunction> for Vec<f64> {
    fn from(v: ValueFunction) -> Self {
        v.0
    }
}

/// Q function over state-action pairs, row-major `[s * A + a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QFunction {
    pub fn new(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch {
                expected: num_states * num_actions,
                got: values.len(),
            });
        }
        if let Some(x) = values.iter().find(|x| !x.is_finite()) {
            return Err(Error::param("values", format!("{x} is not finite")));
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
        })
    }

    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }

    /// `min_a Q(s, a)` per state.
    pub fn state_values(&self) -> ValueFunction {
        ValueFunction(
            self.values
                .chunks(self.num_actions)
                .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
                .collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            num_states: self.num_states,
            num_actions: self.num_actions,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Stationary deterministic policy: one action index per state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecisionRule(pub Vec<usize>);

impl DecisionRule {
    pub fn new(actions: Vec<usize>, num_actions: usize) -> Result<Self> {
        if let Some(a) = actions.iter().find(|a| **a >= num_actions) {
            return Err(Error::IndexOutOfRange {
                what: "action",
                index: *a,
                size: num_actions,
            });
        }
        Ok(Self(actions))
    }

    pub fn action(&self, s: usize) -> usize {
        self.0[s]
    }
}

/// `max_i |x_i|`; zero for an empty slice.
pub fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `max_i x_i - min_i x_i`; zero for an empty slice.
pub fn span_seminorm(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    hi - lo
}

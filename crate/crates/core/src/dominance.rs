//! Integer-valued chains that dominate the scaled error process.
//!
//! * `Y`: floor `eta`; down one with probability `p`, up `w` otherwise.
//! * `P`: the `Y` chain with floor 0.
//! * `Q`: down one with probability `p`, otherwise up to `w(ceil(q/w) + 1)`.
//!
//! "With probability `p`" means a uniform draw `u < p`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::ceil_snapped;
use crate::error::{Error, Result};

/// Hard cap on refinement sweeps in [`stationary_numeric`].
pub const MAX_SWEEPS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominanceParams {
    pub p: f64,
    pub w: u64,
    pub eta: u64,
}

impl DominanceParams {
    pub fn new(p: f64, w: u64, eta: u64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::param("p", format!("{p} not in (0, 1]")));
        }
        if w == 0 {
            return Err(Error::param("w", "must be at least 1"));
        }
        Ok(Self { p, w, eta })
    }

    /// `w = ceil(wbar / eps)`, `eta = ceil(2 / delta)`.
    pub fn from_constants(p: f64, wbar: f64, epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::param("epsilon", "must be positive"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::param("delta", "must lie in (0, 1)"));
        }
        if !(wbar >= 0.0 && wbar.is_finite()) {
            return Err(Error::param("wbar", "must be finite and nonnegative"));
        }
        let w = ceil_snapped(wbar / epsilon).max(1);
        let eta = ceil_snapped(2.0 / delta);
        Self::new(p, w, eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChainKind {
    P,
    Q,
    Y,
}

impl std::str::FromStr for ChainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P" => Ok(Self::P),
            "Q" => Ok(Self::Q),
            "Y" => Ok(Self::Y),
            _ => Err(Error::param("kind", format!("unknown chain `{s}`"))),
        }
    }
}

impl ChainKind {
    fn floor(self, params: &DominanceParams) -> u64 {
        match self {
            Self::Y => params.eta,
            Self::P | Self::Q => 0,
        }
    }

    /// Target of the up-move from offset `q` above the floor.
    fn up(self, w: u64, q: u64) -> u64 {
        match self {
            Self::P | Self::Y => q + w,
            Self::Q => w * (q.div_ceil(w) + 1),
        }
    }

    /// Existence threshold for the stationary law.
    pub fn threshold(self, w: u64) -> f64 {
        let w = w as f64;
        match self {
            Self::P | Self::Y => w / (w + 1.0),
            Self::Q => 2.0 * w / (2.0 * w + 1.0),
        }
    }
}

pub fn y_step(params: &DominanceParams, y: u64, u: f64) -> Result<u64> {
    if y < params.eta {
        return Err(Error::param("y", format!("{y} below the floor {}", params.eta)));
    }
    Ok(if u < params.p {
        (y - 1).max(params.eta)
    } else {
        y + params.w
    })
}

pub fn p_step(p: f64, w: u64, q: u64, u: f64) -> u64 {
    if u < p {
        q.saturating_sub(1)
    } else {
        q + w
    }
}

pub fn q_step(p: f64, w: u64, q: u64, u: f64) -> u64 {
    if u < p {
        q.saturating_sub(1)
    } else {
        ChainKind::Q.up(w, q)
    }
}

/// Probability masses on consecutive integer states starting at `support[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDistribution {
    pub support: Vec<u64>,
    pub mass: Vec<f64>,
    /// Bound on the mass beyond the last retained state.
    pub truncation_tail: f64,
}

impl ChainDistribution {
    pub fn unit(state: u64) -> Self {
        Self {
            support: vec![state],
            mass: vec![1.0],
            truncation_tail: 0.0,
        }
    }

    pub fn get(&self, state: u64) -> f64 {
        match self.support.first() {
            Some(&lo) if state >= lo => self.mass.get((state - lo) as usize).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// `P(X >= x)` over the retained support.
    pub fn tail_at_least(&self, x: u64) -> f64 {
        self.support
            .iter()
            .zip(&self.mass)
            .filter(|(s, _)| **s >= x)
            .map(|(_, m)| m)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["state", "mass"])?;
        for (s, m) in self.support.iter().zip(&self.mass) {
            wtr.write_record([s.to_string(), format!("{m:.12}")])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn q_closed_form_parts(p: f64, w: u64) -> (f64, f64) {
    let pw = p.powi(w as i32);
    ((2.0 * pw - 1.0) / pw, (1.0 - pw) / pw)
}

/// Closed-form stationary law of the `Q` chain,
/// `pi(0) = (2p^w - 1)/p^w`, `pi(nw + i) = pi(0) (1-p) p^-i r^n` for
/// `i = 1..=w`, `r = (1 - p^w)/p^w`. Whole blocks of `w` states are kept until
/// the remaining analytic tail drops below `tail_cap`.
pub fn stationary_q_closed_form(p: f64, w: u64, tail_cap: f64) -> Result<ChainDistribution> {
    DominanceParams::new(p, w, 0)?;
    if !(tail_cap > 0.0) {
        return Err(Error::param("tail_cap", "must be positive"));
    }
    let threshold = ChainKind::Q.threshold(w);
    if p <= threshold {
        return Err(Error::BelowThreshold { p, threshold });
    }
    if p == 1.0 {
        return Ok(ChainDistribution::unit(0));
    }
    let (pi0, r) = q_closed_form_parts(p, w);
    let mut mass = vec![pi0];
    let mut block = 0i32;
    loop {
        let factor = pi0 * (1.0 - p) * r.powi(block);
        mass.extend((1..=w as i32).map(|i| factor / p.powi(i)));
        let tail = pi0 * r.powi(block + 2) / (1.0 - r);
        if tail < tail_cap {
            return Ok(ChainDistribution {
                support: (0..mass.len() as u64).collect(),
                mass,
                truncation_tail: tail,
            });
        }
        block += 1;
    }
}

/// Root in `(0, 1)` of `p z^{w+1} - z^w + (1 - p) = 0`: geometric decay rate of
/// the `P` chain's stationary law away from the floor.
fn p_chain_decay(p: f64, w: u64) -> f64 {
    let f = |z: f64| p * z.powi(w as i32 + 1) - z.powi(w as i32) + (1.0 - p);
    // f(0) > 0, f has a single interior minimum below zero when p > w/(w+1)
    let zmin = w as f64 / ((w + 1) as f64 * p);
    let (mut lo, mut hi) = (0.0, zmin.min(1.0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Number of retained states above the floor so the stationary mass
/// beyond them is below `tail_cap`.
pub fn truncation_level(kind: ChainKind, params: &DominanceParams, tail_cap: f64) -> Result<usize> {
    let threshold = kind.threshold(params.w);
    if params.p <= threshold {
        return Err(Error::BelowThreshold {
            p: params.p,
            threshold,
        });
    }
    if params.p == 1.0 {
        return Ok(1);
    }
    let n = match kind {
        ChainKind::Q => stationary_q_closed_form(params.p, params.w, tail_cap)?.mass.len(),
        ChainKind::P | ChainKind::Y => {
            let z = p_chain_decay(params.p, params.w);
            // pi(j) <= z^j up to a constant no larger than the jump size
            let c = (params.w + 1) as f64;
            let n = ((tail_cap * (1.0 - z) / c).ln() / z.ln()).ceil();
            n.max(1.0) as usize + 1
        }
    };
    Ok(n)
}

/// Transition of the truncated chain (offsets from the floor, top `n - 1`).
fn apply_truncated(kind: ChainKind, p: f64, w: u64, pi: &[f64], out: &mut [f64]) {
    let top = pi.len() as u64 - 1;
    out.iter_mut().for_each(|x| *x = 0.0);
    for (i, m) in pi.iter().enumerate() {
        out[i.saturating_sub(1)] += p * m;
        let up = kind.up(w, i as u64).min(top) as usize;
        out[up] += (1.0 - p) * m;
    }
}

fn l1_residual(kind: ChainKind, p: f64, w: u64, pi: &[f64], scratch: &mut [f64]) -> f64 {
    apply_truncated(kind, p, w, pi, scratch);
    pi.iter().zip(scratch.iter()).map(|(a, b)| (a - b).abs()).sum()
}

/// Stationary law of the chain truncated to `n` states above its floor,
/// with up-moves past the top reflected onto the top state.
///
/// The truncated chain only moves down one step at a time, so its balance
/// across each cut `j | j+1` gives `p pi(j+1) = (1-p) sum_{i <= j < up(i)} pi(i)`,
/// which determines the law in one pass. The result is then checked (and,
/// if needed, refined by power iteration) until `||pi T - pi||_1 <= tol`.
pub fn stationary_numeric(
    kind: ChainKind,
    params: &DominanceParams,
    n: usize,
    tol: f64,
) -> Result<ChainDistribution> {
    let threshold = kind.threshold(params.w);
    if params.p <= threshold {
        return Err(Error::BelowThreshold {
            p: params.p,
            threshold,
        });
    }
    if n == 0 {
        return Err(Error::param("n", "truncation size must be positive"));
    }
    let floor = kind.floor(params);
    let (p, w) = (params.p, params.w);
    if p == 1.0 {
        return Ok(ChainDistribution::unit(floor));
    }

    let top = n as u64 - 1;
    let mut pi = vec![0.0; n];
    pi[0] = 1.0;
    let ratio = (1.0 - p) / p;
    let mut lo = 0usize;
    for j in 0..n - 1 {
        while kind.up(w, lo as u64).min(top) <= j as u64 {
            lo += 1;
        }
        let window: f64 = pi[lo..=j].iter().sum();
        pi[j + 1] = ratio * window;
        if pi[j + 1] > 1e200 {
            pi[..=j + 1].iter_mut().for_each(|x| *x *= 1e-200);
        }
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|x| *x /= total);

    let mut scratch = vec![0.0; n];
    let mut residual = l1_residual(kind, p, w, &pi, &mut scratch);
    let mut sweeps = 0;
    while residual > tol {
        if sweeps >= MAX_SWEEPS {
            return Err(Error::NoConvergence {
                iterations: sweeps,
                residual,
                tol,
            });
        }
        std::mem::swap(&mut pi, &mut scratch);
        residual = l1_residual(kind, p, w, &pi, &mut scratch);
        sweeps += 1;
    }
    Ok(ChainDistribution {
        support: (floor..floor + n as u64).collect(),
        mass: pi,
        truncation_tail: 0.0,
    })
}

/// `P` and `Q` driven by the same draws from `P_1 = Q_1 = 0`.
pub fn coupled_pq_paths(p: f64, w: u64, len: usize, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = Vec::with_capacity(len);
    let mut qs = Vec::with_capacity(len);
    let (mut a, mut b) = (0u64, 0u64);
    for _ in 0..len {
        ps.push(a);
        qs.push(b);
        let u: f64 = rng.random();
        a = p_step(p, w, a, u);
        b = q_step(p, w, b, u);
    }
    (ps, qs)
}

/// Exact law of `Y_k` started from `Y_0 = y0` (`y0 >= eta`).
pub fn y_marginal(params: &DominanceParams, y0: u64, k: usize) -> Result<ChainDistribution> {
    if y0 < params.eta {
        return Err(Error::param("y0", format!("{y0} below the floor {}", params.eta)));
    }
    let lo = params.eta;
    let len = (y0 - lo) as usize + k * params.w as usize + 1;
    let mut cur = vec![0.0; len];
    let mut next = vec![0.0; len];
    cur[(y0 - lo) as usize] = 1.0;
    let mut hi = (y0 - lo) as usize;
    for _ in 0..k {
        next[..=(hi + params.w as usize)].iter_mut().for_each(|x| *x = 0.0);
        for (i, m) in cur[..=hi].iter().enumerate() {
            if *m == 0.0 {
                continue;
            }
            next[i.saturating_sub(1)] += params.p * m;
            next[i + params.w as usize] += (1.0 - params.p) * m;
        }
        hi += params.w as usize;
        std::mem::swap(&mut cur, &mut next);
    }
    cur.truncate(hi + 1);
    Ok(ChainDistribution {
        support: (lo..lo + cur.len() as u64).collect(),
        mass: cur,
        truncation_tail: 0.0,
    })
}

/// One grid point of the dominance check: `lhs = P(eps Y_k >= q)`,
/// `rhs = P^(E_k >= q) - 3 sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominancePoint {
    pub quantile: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub params: DominanceParams,
    pub epsilon: f64,
    pub k: usize,
    pub y0: u64,
    pub samples: usize,
    pub points: Vec<DominancePoint>,
}

impl DominanceReport {
    pub fn passed(&self) -> bool {
        self.points.iter().all(|p| p.pass)
    }

    pub fn worst_margin(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.margin)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["quantile", "lhs", "rhs", "margin", "pass"])?;
        for p in &self.points {
            wtr.write_record([
                format!("{:.10e}", p.quantile),
                format!("{:.10e}", p.lhs),
                format!("{:.10e}", p.rhs),
                format!("{:.10e}", p.margin),
                p.pass.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Checks `P(eps Y_k >= q) >= P^(E_k >= q) - 3 sigma` at every grid point,
/// where `error_samples` are independent draws of the error after `k` steps
/// and the `Y` law is exact from `Y_0 = max(ceil(e0 / eps), eta)`.
pub fn verify_error_dominance(
    error_samples: &[f64],
    e0: f64,
    params: &DominanceParams,
    epsilon: f64,
    k: usize,
    grid: &[f64],
) -> Result<DominanceReport> {
    if error_samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(params.p > 0.5) {
        return Err(Error::param("p", "dominance needs p > 1/2"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::param("epsilon", "must be positive"));
    }
    let y0 = ((e0 / epsilon).ceil().max(0.0) as u64).max(params.eta);
    let law = y_marginal(params, y0, k)?;
    let r = error_samples.len() as f64;
    let points = grid
        .iter()
        .map(|&q| {
            let lhs: f64 = law
                .support
                .iter()
                .zip(&law.mass)
                .filter(|(y, _)| epsilon * **y as f64 >= q)
                .map(|(_, m)| m)
                .sum();
            let hat = error_samples.iter().filter(|e| **e >= q).count() as f64 / r;
            let rhs = hat - 3.0 * (hat * (1.0 - hat) / r).sqrt();
            let margin = lhs - rhs;
            DominancePoint {
                quantile: q,
                lhs,
                rhs,
                margin,
                pass: margin >= -1e-12,
            }
        })
        .collect();
    Ok(DominanceReport {
        params: *params,
        epsilon,
        k,
        y0,
        samples: error_samples.len(),
        points,
    })
}

/// `count` evenly spaced quantiles on `[lo, hi]`.
pub fn quantile_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn params(p: f64, w: u64, eta: u64) -> DominanceParams {
        DominanceParams::new(p, w, eta).unwrap()
    }

    #[test]
    fn y_step_examples() {
        let par = params(0.7, 3, 4);
        assert_eq!(y_step(&par, 4, 0.1).unwrap(), 4);
        assert_eq!(y_step(&par, 7, 0.1).unwrap(), 6);
        assert_eq!(y_step(&par, 7, 0.9).unwrap(), 10);
        assert!(y_step(&par, 3, 0.1).is_err());
        let det = params(1.0, 2, 1);
        let mut y = 9;
        for step in 1..=8 {
            y = y_step(&det, y, 0.999).unwrap();
            assert_eq!(y, 9 - step);
        }
        assert_eq!(y_step(&det, 1, 0.999).unwrap(), 1);
    }

    #[test]
    fn p_and_q_step_examples() {
        assert_eq!(q_step(0.5, 2, 3, 0.9), 6);
        assert_eq!(q_step(0.5, 2, 0, 0.9), 2);
        assert_eq!(q_step(0.5, 2, 4, 0.9), 6);
        assert_eq!(p_step(0.5, 2, 0, 0.1), 0);
        assert_eq!(p_step(0.5, 2, 5, 0.9), 7);
        assert_eq!(q_step(0.5, 2, 5, 0.1), 4);
    }

    #[test]
    fn params_validation() {
        assert!(DominanceParams::new(0.0, 1, 0).is_err());
        assert!(DominanceParams::new(1.1, 1, 0).is_err());
        assert!(DominanceParams::new(0.9, 0, 0).is_err());
        let p = DominanceParams::from_constants(0.9, 2.0, 0.25, 0.5).unwrap();
        assert_eq!((p.w, p.eta), (8, 4));
        assert_eq!(DominanceParams::from_constants(0.9, 0.0, 0.25, 0.5).unwrap().w, 1);
    }

    #[test]
    fn closed_form_examples() {
        let d = stationary_q_closed_form(0.9, 2, 1e-12).unwrap();
        assert!((d.mass[0] - 62.0 / 81.0).abs() < 1e-12);
        assert!((d.mass[1] - 0.0850480109739369).abs() < 1e-12);
        // power-iteration oracle on the truncated chain: 0.0944977899...
        assert!((d.mass[2] - 0.0944977899710410).abs() < 1e-12);
        assert!((d.mass[3] - 0.0199495334383308).abs() < 1e-12);
        assert!(d.truncation_tail < 1e-12);
        assert!((d.total() + d.truncation_tail - 1.0).abs() < 1e-14);

        let d = stationary_q_closed_form(0.95, 3, 1e-12).unwrap();
        assert!((d.mass[0] - 0.8336492200).abs() < 1e-9);

        assert_eq!(stationary_q_closed_form(1.0, 4, 1e-12).unwrap(), ChainDistribution::unit(0));
        assert!(matches!(
            stationary_q_closed_form(0.8, 2, 1e-12),
            Err(Error::BelowThreshold { .. })
        ));
    }

    #[test]
    fn numeric_matches_closed_form() {
        for (p, w) in [(0.9, 2), (0.95, 3), (0.85, 2), (0.8, 1), (0.97, 5)] {
            let closed = stationary_q_closed_form(p, w, 1e-13).unwrap();
            let n = closed.mass.len() + 4 * w as usize;
            let num = stationary_numeric(ChainKind::Q, &params(p, w, 0), n, 1e-12).unwrap();
            for (s, m) in closed.support.iter().zip(&closed.mass) {
                assert!((num.get(*s) - m).abs() <= 1e-8, "p={p} w={w} s={s}");
            }
        }
    }

    #[test]
    fn numeric_unit_and_threshold() {
        let d = stationary_numeric(ChainKind::Y, &params(1.0, 3, 5), 10, 1e-12).unwrap();
        assert_eq!(d, ChainDistribution::unit(5));
        assert!(matches!(
            stationary_numeric(ChainKind::P, &params(0.6, 2, 0), 10, 1e-12),
            Err(Error::BelowThreshold { .. })
        ));
    }

    #[test]
    fn y_chain_is_shifted_p_chain() {
        let par = params(0.85, 3, 7);
        let n = truncation_level(ChainKind::P, &par, 1e-12).unwrap();
        let pd = stationary_numeric(ChainKind::P, &par, n, 1e-13).unwrap();
        let yd = stationary_numeric(ChainKind::Y, &par, n, 1e-13).unwrap();
        assert_eq!(yd.support[0], 7);
        for i in 0..n as u64 {
            assert!((yd.get(i + 7) - pd.get(i)).abs() <= 1e-10);
        }
    }

    #[test]
    fn truncation_level_controls_tail() {
        for (p, w) in [(0.8, 2), (0.9, 3), (0.7, 2)] {
            let par = params(p, w, 0);
            let n = truncation_level(ChainKind::P, &par, 1e-10).unwrap();
            let small = stationary_numeric(ChainKind::P, &par, n, 1e-13).unwrap();
            let big = stationary_numeric(ChainKind::P, &par, 2 * n, 1e-13).unwrap();
            let beyond: f64 = big.mass[n..].iter().sum();
            assert!(beyond < 1e-10, "p={p} w={w}: {beyond}");
            for i in 0..n / 2 {
                assert!((small.mass[i] - big.mass[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn p_floor_bound() {
        for w in 1..=4u64 {
            let th = ChainKind::Q.threshold(w);
            for step in 1..=5 {
                let p = th + (1.0 - th) * step as f64 / 6.0;
                let par = params(p, w, 0);
                let n = truncation_level(ChainKind::P, &par, 1e-12).unwrap();
                let d = stationary_numeric(ChainKind::P, &par, n, 1e-13).unwrap();
                let pw = p.powi(w as i32);
                assert!(d.mass[0] >= (2.0 * pw - 1.0) / pw - 1e-8);
            }
        }
    }

    #[test]
    fn coupled_paths() {
        let (a, b) = coupled_pq_paths(1.0, 3, 50, 1);
        assert_eq!(a, b);
        for seed in 0..20 {
            let (ps, qs) = coupled_pq_paths(0.85, 2, 10_000, seed);
            assert!(ps.iter().zip(&qs).all(|(x, y)| y >= x));
        }
        // from q = 1 with w = 2 the Q chain jumps to 4, the P chain to 3
        assert!(q_step(0.5, 2, 1, 0.9) > p_step(0.5, 2, 1, 0.9));
    }

    #[test]
    fn y_marginal_exact() {
        let par = params(0.7, 2, 1);
        let d = y_marginal(&par, 3, 0).unwrap();
        assert_eq!(d.get(3), 1.0);
        let d = y_marginal(&par, 3, 2).unwrap();
        assert!((d.get(1) - 0.49).abs() < 1e-15);
        assert!((d.get(4) - 2.0 * 0.7 * 0.3).abs() < 1e-15);
        assert!((d.get(7) - 0.09).abs() < 1e-15);
        assert!((d.total() - 1.0).abs() < 1e-14);
        // matches simulation
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reps = 20_000;
        let d = y_marginal(&par, 2, 6).unwrap();
        let mut hits = 0;
        for _ in 0..reps {
            let mut y = 2;
            for _ in 0..6 {
                y = y_step(&par, y, rng.random()).unwrap();
            }
            hits += (y >= 5) as usize;
        }
        let hat = hits as f64 / reps as f64;
        let want = d.tail_at_least(5);
        assert!((hat - want).abs() < 4.0 * (want * (1.0 - want) / reps as f64).sqrt());
    }

    #[test]
    fn dominance_verification() {
        let par = params(0.9, 2, 2);
        // geometric decay with no noise: dominated trivially
        let samples = vec![0.01; 500];
        let rep = verify_error_dominance(&samples, 1.0, &par, 0.1, 20, &quantile_grid(0.0, 1.0, 11)).unwrap();
        assert!(rep.passed());
        assert!(rep.worst_margin() >= 0.0);
        assert_eq!(rep.y0, 10);

        // negative control: p = 1 but errors stay large
        let det = params(1.0, 2, 2);
        let rep = verify_error_dominance(&vec![0.9; 500], 1.0, &det, 0.1, 20, &quantile_grid(0.0, 1.0, 11)).unwrap();
        assert!(!rep.passed());

        assert!(verify_error_dominance(&[], 1.0, &par, 0.1, 1, &[0.5]).is_err());
        assert!(verify_error_dominance(&[0.1], 1.0, &params(0.5, 2, 2), 0.1, 1, &[0.5]).is_err());
    }

    #[test]
    fn csv_output() {
        let d = stationary_q_closed_form(0.9, 2, 1e-3).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("state,mass\n0,0.765432098765\n"));
    }

    proptest! {
        #[test]
        fn closed_form_mass_sum(w in 1u64..6, frac in 0.02f64..0.98) {
            let th = ChainKind::Q.threshold(w);
            let p = th + (1.0 - th) * frac;
            let pw = p.powi(w as i32);
            let (pi0, r) = q_closed_form_parts(p, w);
            // 1 + sum_m r^{m+1} = p^w / (2p^w - 1)
            let series: f64 = 1.0 + (0..2000).map(|m| r.powi(m + 1)).sum::<f64>();
            prop_assert!((series - pw / (2.0 * pw - 1.0)).abs() < 1e-12 * series.max(1.0));
            let d = stationary_q_closed_form(p, w, 1e-13).unwrap();
            prop_assert!((d.total() + d.truncation_tail - 1.0).abs() < 1e-13);
            prop_assert!((d.mass[0] - pi0).abs() < 1e-15);
        }

        #[test]
        fn closed_form_monotone_in_p(w in 1u64..6, a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let th = ChainKind::Q.threshold(w);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let p1 = th + (1.0 - th) * lo;
            let p2 = th + (1.0 - th) * hi;
            let d1 = stationary_q_closed_form(p1, w, 1e-6).unwrap();
            let d2 = stationary_q_closed_form(p2, w, 1e-6).unwrap();
            prop_assert!(d2.mass[0] >= d1.mass[0]);
        }

        #[test]
        fn coupling_holds(seed in 0u64..1000, w in 1u64..5, p in 0.5f64..1.0) {
            let (ps, qs) = coupled_pq_paths(p, w, 2000, seed);
            prop_assert!(ps.iter().zip(&qs).all(|(x, y)| y >= x));
        }
    }
}

//! Closed-form certificate arithmetic.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, QFunction};

/// Ceiling that treats values within a few ulps of an integer as that
/// integer, so `8 / (1 - 0.9)` gives 80 rather than 81.
pub fn ceil_snapped(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r.max(0.0) as u64
    } else {
        x.ceil().max(0.0) as u64
    }
}

/// Constants entering the tail certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub kappa: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub alpha: f64,
    pub wbar: f64,
    pub num_states: usize,
    pub num_actions: usize,
    pub cost_sup: f64,
    pub n: u64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::param("kappa", "must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= self.kappa / 2.0) {
            return Err(Error::param(
                "epsilon",
                format!("{} not in (0, kappa/2 = {}]", self.epsilon, self.kappa / 2.0),
            ));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::param("alpha", format!("{} not in [0, 1)", self.alpha)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0 - self.alpha) {
            return Err(Error::param(
                "delta",
                format!("{} not in (0, 1 - alpha = {})", self.delta, 1.0 - self.alpha),
            ));
        }
        if (self.eta() as f64) > self.kappa / self.epsilon {
            return Err(Error::param(
                "kappa",
                format!(
                    "ceil(2/delta) = {} exceeds kappa/epsilon = {}",
                    self.eta(),
                    self.kappa / self.epsilon
                ),
            ));
        }
        if !(self.wbar > 0.0 && self.wbar.is_finite()) {
            return Err(Error::param("wbar", "must be positive and finite"));
        }
        if self.num_states == 0 || self.num_actions == 0 {
            return Err(Error::param("num_states", "model sizes must be positive"));
        }
        if !(self.cost_sup >= 0.0 && self.cost_sup.is_finite()) {
            return Err(Error::param("cost_sup", "must be finite and nonnegative"));
        }
        Ok(())
    }

    /// `ceil(wbar / epsilon)`
    pub fn w(&self) -> u64 {
        ceil_snapped(self.wbar / self.epsilon).max(1)
    }

    /// `ceil(2 / delta)`
    pub fn eta(&self) -> u64 {
        ceil_snapped(2.0 / self.delta)
    }
}

/// `max(m1 + m2 - 1, 0)`
pub fn frechet_hoeffding_lower(m1: f64, m2: f64) -> f64 {
    (m1 + m2 - 1.0).clamp(0.0, 1.0)
}

fn hoeffding(eps: f64, alpha: f64, n: f64, s: usize, a: usize, cost_sup: f64) -> f64 {
    let pairs = 2.0 * (s * a) as f64;
    if n == 0.0 {
        return pairs;
    }
    if alpha == 0.0 || cost_sup == 0.0 {
        return 0.0;
    }
    let s = s as f64;
    let rate = eps * eps * (1.0 - alpha).powi(2) / (2.0 * alpha * alpha * s * s * cost_sup * cost_sup);
    pairs * (-rate * n).exp()
}

/// `gamma_2(n, eps) = 2|S||A| exp(-eps^2 (1-alpha)^2 n / (2 alpha^2 |S|^2 ||c||^2))`.
/// Not clipped; may exceed one.
pub fn hoeffding_w_tail(inputs: &BoundInputs) -> f64 {
    hoeffding(
        inputs.epsilon,
        inputs.alpha,
        inputs.n as f64,
        inputs.num_states,
        inputs.num_actions,
        inputs.cost_sup,
    )
}

/// `1 - gamma1 - gamma2`, clipped to `[0, 1]`.
pub fn p_n(gamma1: f64, gamma2: f64) -> f64 {
    (1.0 - gamma1 - gamma2).clamp(0.0, 1.0)
}

/// `(1 - p^w) / p^w`
pub fn tail_bound(p: f64, w: u64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::param("p", format!("{p} not in (0, 1]")));
    }
    let pw = p.powi(w as i32);
    Ok(((1.0 - pw) / pw).max(0.0))
}

/// Existence thresholds `(w/(w+1), 2w/(2w+1))` for the `P` and `Q` chains.
pub fn thresholds(w: u64) -> (f64, f64) {
    let w = w as f64;
    (w / (w + 1.0), 2.0 * w / (2.0 * w + 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailCertificate {
    pub p: f64,
    pub w: u64,
    pub bound: f64,
    /// `p > 2w/(2w+1)`
    pub valid: bool,
}

impl TailCertificate {
    pub fn new(p: f64, w: u64) -> Result<Self> {
        if w == 0 {
            return Err(Error::param("w", "must be at least 1"));
        }
        let bound = if p > 0.0 { tail_bound(p, w)? } else { f64::INFINITY };
        Ok(Self {
            p,
            w,
            bound,
            valid: p > thresholds(w).1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub n: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub kappa: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub p: f64,
    pub w: u64,
    pub bound: f64,
    pub valid: bool,
}

impl CertificateReport {
    pub fn from_parts(inputs: &BoundInputs, gamma1: f64, gamma2: f64) -> Result<Self> {
        let p = p_n(gamma1, gamma2);
        let cert = TailCertificate::new(p, inputs.w())?;
        Ok(Self {
            n: inputs.n,
            epsilon: inputs.epsilon,
            delta: inputs.delta,
            kappa: inputs.kappa,
            gamma1,
            gamma2,
            p,
            w: cert.w,
            bound: cert.bound,
            valid: cert.valid,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.serialize(self)?;
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Discounted certificate: the contraction event holds surely, so
/// `gamma1 = 0` and `p = 1 - gamma2`.
pub fn discounted_certificate(inputs: &BoundInputs) -> Result<CertificateReport> {
    inputs.validate()?;
    CertificateReport::from_parts(inputs, 0.0, hoeffding_w_tail(inputs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleComplexity {
    pub n: u64,
    pub w: u64,
    /// `1 - (1/(1+confidence))^{1/w}`
    pub rhs: f64,
}

impl SampleComplexity {
    /// Left side of the defining inequality at sample size `n`.
    pub fn lhs(
        n: u64,
        kappa: f64,
        num_states: usize,
        num_actions: usize,
        alpha: f64,
        cost_sup: f64,
    ) -> f64 {
        hoeffding(kappa / 4.0, alpha, n as f64, num_states, num_actions, cost_sup)
    }
}

/// Smallest `n` with
/// `2|S||A| exp(-kappa^2 (1-alpha)^2 n / (32 alpha^2 |S|^2 ||c||^2)) <= 1 - (1/(1+confidence))^{1/w}`,
/// `w = ceil(8 ||c|| / ((1-alpha) kappa))`. Found by exponential search and
/// bisection on the integer `n`.
pub fn sample_complexity_discounted(
    kappa: f64,
    confidence: f64,
    num_states: usize,
    num_actions: usize,
    alpha: f64,
    cost_sup: f64,
) -> Result<SampleComplexity> {
    if !(kappa > 0.0) {
        return Err(Error::param("kappa", "must be positive"));
    }
    if !(confidence > 0.0) {
        return Err(Error::param("confidence", "must be positive"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", format!("{alpha} not in (0, 1)")));
    }
    if num_states == 0 || num_actions == 0 {
        return Err(Error::param("num_states", "model sizes must be positive"));
    }
    if !(cost_sup >= 0.0 && cost_sup.is_finite()) {
        return Err(Error::param("cost_sup", "must be finite and nonnegative"));
    }
    let w = ceil_snapped(8.0 * cost_sup / ((1.0 - alpha) * kappa)).max(1);
    let rhs = 1.0 - (1.0 / (1.0 + confidence)).powf(1.0 / w as f64);
    let holds = |n: u64| SampleComplexity::lhs(n, kappa, num_states, num_actions, alpha, cost_sup) <= rhs;
    if holds(0) {
        return Ok(SampleComplexity { n: 0, w, rhs });
    }
    let mut hi = 1u64;
    while !holds(hi) {
        if hi > u64::MAX / 4 {
            return Err(Error::param("kappa", "sample size overflows"));
        }
        hi *= 2;
    }
    let mut lo = hi / 2; // fails (or is 0, which fails)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(SampleComplexity { n: hi, w, rhs })
}

/// `2 alpha ||c|| / (1 - alpha)`: almost-sure bound on the value-iteration
/// noise at the fixed point.
pub fn wbar_value(alpha: f64, cost_sup: f64) -> f64 {
    2.0 * alpha * cost_sup / (1.0 - alpha)
}

/// `2 gamma ||Q*||`
pub fn wbar_q(gamma: f64, q_star_sup: f64) -> f64 {
    2.0 * gamma * q_star_sup
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WbarKind {
    DiscountedV,
    Q,
}

pub fn wbar(kind: WbarKind, mdp: &FiniteMdp, q_star: Option<&QFunction>) -> Result<f64> {
    let gamma = mdp.require_discount()?;
    match kind {
        WbarKind::DiscountedV => Ok(wbar_value(gamma, mdp.cost_sup())),
        WbarKind::Q => {
            let q = q_star.ok_or_else(|| Error::param("q_star", "Q-function oracle required"))?;
            Ok(wbar_q(gamma, q.sup_norm()))
        }
    }
}

/// `c0 = 2 ||c|| / (1 - alpha)` with `alpha` the discount.
pub fn drift_constant_discounted(mdp: &FiniteMdp) -> Result<f64> {
    let gamma = mdp.require_discount()?;
    Ok(2.0 * mdp.cost_sup() / (1.0 - gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use proptest::{prop_assert, proptest};

    fn example4(n: u64) -> BoundInputs {
        BoundInputs {
            kappa: 1.0,
            epsilon: 0.25,
            delta: 0.05,
            alpha: 0.9,
            wbar: 18.0,
            num_states: 3,
            num_actions: 2,
            cost_sup: 1.0,
            n,
        }
    }

    #[test]
    fn frechet_examples() {
        assert_eq!(frechet_hoeffding_lower(1.0, 1.0), 1.0);
        assert!((frechet_hoeffding_lower(0.9, 0.95) - 0.85).abs() < 1e-15);
        assert_eq!(frechet_hoeffding_lower(0.4, 0.4), 0.0);
    }

    #[test]
    fn hoeffding_examples() {
        assert_eq!(hoeffding_w_tail(&example4(0)), 12.0);
        let g = hoeffding_w_tail(&example4(300_000));
        // 12 exp(-0.0625 * 0.01 * 3e5 / (2 * 0.81 * 9))
        assert!((g - 3.11974e-5).abs() < 1e-9, "{g}");
        let g1 = hoeffding_w_tail(&example4(1000));
        let g2 = hoeffding_w_tail(&example4(2000));
        assert!((g2 - g1 * g1 / 12.0).abs() < 1e-12 * g1);
        let mut zero_cost = example4(10);
        zero_cost.cost_sup = 0.0;
        assert_eq!(hoeffding_w_tail(&zero_cost), 0.0);
    }

    #[test]
    fn p_n_and_tail_bound_examples() {
        assert_eq!(p_n(0.0, 0.0), 1.0);
        assert!((p_n(0.01, 0.02) - 0.97).abs() < 1e-15);
        assert_eq!(p_n(0.0, 12.0), 0.0);
        assert_eq!(tail_bound(1.0, 7).unwrap(), 0.0);
        assert!((tail_bound(0.95, 3).unwrap() - 0.1663507800).abs() < 1e-9);
        assert!(tail_bound(0.0, 3).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(thresholds(1), (0.5, 2.0 / 3.0));
        assert_eq!(thresholds(2), (2.0 / 3.0, 0.8));
        assert!(0.81f64.powi(2) > 0.606);
    }

    #[test]
    fn certificate_validity() {
        let c = TailCertificate::new(0.99, 2).unwrap();
        assert!(c.valid);
        let c = TailCertificate::new(0.8, 2).unwrap();
        assert!(!c.valid);
        let c = TailCertificate::new(0.0, 2).unwrap();
        assert!(!c.valid && c.bound.is_infinite());
    }

    #[test]
    fn inputs_validation() {
        let ok = example4(100);
        // eta = 40 > kappa / eps = 4
        assert!(ok.validate().is_err());
        let good = BoundInputs {
            kappa: 5.0,
            epsilon: 0.1,
            delta: 0.05,
            ..ok
        };
        good.validate().unwrap();
        assert_eq!(good.w(), 180);
        assert!(BoundInputs { epsilon: 3.0, ..good }.validate().is_err());
        assert!(BoundInputs { delta: 0.2, ..good }.validate().is_err());
        assert!(BoundInputs { wbar: 0.0, ..good }.validate().is_err());
    }

    #[test]
    fn discounted_certificate_has_no_contraction_term() {
        let inputs = BoundInputs {
            kappa: 5.0,
            epsilon: 1.0,
            delta: 0.45,
            alpha: 0.5,
            wbar: 2.0,
            num_states: 2,
            num_actions: 1,
            cost_sup: 1.0,
            n: 500,
        };
        let r = discounted_certificate(&inputs).unwrap();
        assert_eq!(r.gamma1, 0.0);
        assert_eq!(r.p, 1.0 - r.gamma2);
        assert!(r.valid);
        let json = r.to_json();
        for field in ["n", "epsilon", "delta", "kappa", "gamma1", "gamma2", "p", "w", "bound", "valid"] {
            assert!(json.contains(&format!("\"{field}\"")));
        }
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("n,epsilon,delta,kappa,gamma1,gamma2,p,w,bound,valid\n"));
    }

    #[test]
    fn sample_complexity_boundary() {
        let sc = sample_complexity_discounted(1.0, 0.1, 3, 2, 0.9, 1.0).unwrap();
        assert_eq!(sc.w, 80);
        let lhs = |n| SampleComplexity::lhs(n, 1.0, 3, 2, 0.9, 1.0);
        assert!(lhs(sc.n) <= sc.rhs);
        assert!(lhs(sc.n - 1) > sc.rhs);
        // implied tail bound meets the confidence
        let p = 1.0 - lhs(sc.n);
        assert!(tail_bound(p, sc.w).unwrap() <= 0.1 + 1e-12);

        let half = sample_complexity_discounted(0.5, 0.1, 3, 2, 0.9, 1.0).unwrap();
        assert!(half.n >= 4 * sc.n);

        // vacuous confidence: only gamma_2 < 1 is needed
        let loose = sample_complexity_discounted(1.0, 1e300, 3, 2, 0.9, 1.0).unwrap();
        assert!(loose.rhs > 0.999);
        assert!(loose.n < sc.n / 3);
        assert!(lhs(loose.n) < 1.0);
        assert!(sample_complexity_discounted(1.0, 0.1, 3, 2, 1.0, 1.0).is_err());
    }

    #[test]
    fn wbar_and_drift() {
        assert!((wbar_value(0.9, 1.0) - 18.0).abs() < 1e-12);
        assert_eq!(wbar_q(0.5, 2.0), 2.0);
        let m = models::single_state(1.0, Some(0.5));
        let q = QFunction::new(1, 1, vec![2.0]).unwrap();
        assert_eq!(wbar(WbarKind::Q, &m, Some(&q)).unwrap(), 2.0);
        assert_eq!(wbar(WbarKind::DiscountedV, &m, None).unwrap(), 2.0);
        assert!(wbar(WbarKind::Q, &m, None).is_err());

        let m = models::single_state(1.0, Some(0.9));
        assert!((drift_constant_discounted(&m).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(drift_constant_discounted(&models::single_state(0.0, Some(0.9))).unwrap(), 0.0);
        let m3 = models::single_state(3.0, Some(0.9));
        assert!((drift_constant_discounted(&m3).unwrap() - 60.0).abs() < 1e-12);
        assert!(drift_constant_discounted(&models::uniform2()).is_err());
    }

    #[test]
    fn threshold_power_stays_above_0_606() {
        for w in 1..=100u64 {
            let p = thresholds(w).1 + 1e-6;
            assert!(p.powi(w as i32) > 0.606, "w = {w}");
        }
    }

    proptest! {
        #[test]
        fn identity_with_floor_mass(w in 1u64..50, frac in 0.0f64..1.0) {
            let th = thresholds(w).1;
            let p = th + (1.0 - th) * frac;
            let pw = p.powi(w as i32);
            let floor = (2.0 * pw - 1.0) / pw;
            prop_assert!((1.0 - floor - tail_bound(p, w).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn frechet_below_marginals(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let f = frechet_hoeffding_lower(a, b);
            prop_assert!((0.0..=1.0).contains(&f) && f <= a.min(b));
        }

        #[test]
        fn bound_nonincreasing_in_n(n in 0u64..100_000, extra in 1u64..100_000, eps in 0.05f64..1.0) {
            let mk = |n| BoundInputs { kappa: 100.0, epsilon: eps, delta: 0.05, alpha: 0.9, wbar: 18.0,
                num_states: 3, num_actions: 2, cost_sup: 1.0, n };
            let b1 = tail_bound(p_n(0.0, hoeffding_w_tail(&mk(n))).max(1e-300), mk(n).w()).unwrap();
            let b2 = tail_bound(p_n(0.0, hoeffding_w_tail(&mk(n + extra))).max(1e-300), mk(n).w()).unwrap();
            prop_assert!(b2 <= b1);
        }

        #[test]
        fn valid_implies_large_pw(w in 1u64..=100, frac in 0.0f64..1.0) {
            let th = thresholds(w).1;
            let p = th + (1.0 - th) * frac + 1e-9;
            let c = TailCertificate::new(p.min(1.0), w).unwrap();
            prop_assert!(!c.valid || c.p.powi(w as i32) > (-0.5f64).exp());
        }
    }
}

//! Monte Carlo experiments: replica runs, tail estimates against the
//! certificate, joint-success estimates, drift checks and dominance runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, BoundInputs, CertificateReport};
use crate::dominance::{self, DominanceParams, DominanceReport};
use crate::empirical::{run_iterated, write_trajectories_csv, IteratedProblem, OperatorKind, SgdProblem, Trajectory};
use crate::error::{Error, Result};
use crate::mdp::{sup_norm, FiniteMdp};
use crate::models;
use crate::stream::RngStreamSpec;

/// Stream index offset for joint-success batches, disjoint from replica streams.
pub const JOINT_STREAM_BASE: u64 = 1 << 63;
/// Stream index offset for drift-check batches.
pub const DRIFT_STREAM_BASE: u64 = (1 << 63) | (1 << 62);

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "RANDOP_OUTPUT_DIR";

/// 3-sigma binomial half-width.
pub fn binomial_ci(p_hat: f64, samples: usize) -> f64 {
    3.0 * (p_hat * (1.0 - p_hat) / samples as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSpec {
    pub target_mean: Vec<f64>,
    pub step_size: f64,
    /// Defaults to the zero vector.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
}

impl SgdSpec {
    pub fn build(&self) -> Result<IteratedProblem> {
        let problem = SgdProblem::new(self.target_mean.clone(), self.step_size)?;
        let initial = self
            .initial
            .clone()
            .unwrap_or_else(|| vec![0.0; problem.dimension()]);
        IteratedProblem::sgd(problem, initial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mdp_path: Option<PathBuf>,
    /// Name of a built-in model (see [`models::by_name`]).
    #[serde(default)]
    pub model: Option<String>,
    /// Overrides the model's discount factor.
    #[serde(default)]
    pub discount: Option<f64>,
    #[serde(default)]
    pub sgd: Option<SgdSpec>,
    pub kind: OperatorKind,
    pub n: usize,
    pub iterations: usize,
    #[serde(default)]
    pub burn_in: usize,
    pub replicas: usize,
    pub kappa: f64,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json_str(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Checks the run shape; threshold compatibility is checked when the
    /// certificate is built, since it needs the contraction coefficient.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("n", "must be positive"));
        }
        if self.replicas == 0 {
            return Err(Error::param("replicas", "must be at least 1"));
        }
        if self.iterations <= self.burn_in {
            return Err(Error::param(
                "iterations",
                format!("{} must exceed burn_in = {}", self.iterations, self.burn_in),
            ));
        }
        let sources = [self.mdp_path.is_some(), self.model.is_some(), self.sgd.is_some()]
            .iter()
            .filter(|x| **x)
            .count();
        if sources != 1 {
            return Err(Error::param("mdp_path", "exactly one of mdp_path, model, sgd must be set"));
        }
        if (self.kind == OperatorKind::Sgd) != self.sgd.is_some() {
            return Err(Error::param("kind", "kind `sgd` goes with an sgd spec and only then"));
        }
        Ok(())
    }

    pub fn load_mdp(&self) -> Result<Option<FiniteMdp>> {
        let mdp = match (&self.mdp_path, &self.model) {
            (Some(path), _) => FiniteMdp::from_path(path)?,
            (None, Some(name)) => {
                models::by_name(name).ok_or_else(|| Error::param("model", format!("unknown model `{name}`")))?
            }
            (None, None) => return Ok(None),
        };
        Ok(Some(match self.discount {
            Some(g) => mdp.with_discount(Some(g))?,
            None => mdp,
        }))
    }

    pub fn problem(&self) -> Result<IteratedProblem> {
        self.validate()?;
        match &self.sgd {
            Some(spec) => spec.build(),
            None => {
                let mdp = self.load_mdp()?.expect("validated source");
                IteratedProblem::prepare(self.kind, &mdp)
            }
        }
    }

    /// Iteration compared against the final one by the stabilization check.
    pub fn check_iteration(&self) -> usize {
        self.burn_in.max(self.iterations / 2)
    }

    /// Explicit output path, else the directory named by `RANDOP_OUTPUT_DIR`.
    pub fn resolved_output(&self) -> Option<PathBuf> {
        self.output_path
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
    }
}

/// Runs `replicas` independent trajectories in parallel; results are in
/// replica order.
pub fn run_replicas(
    problem: &IteratedProblem,
    n: usize,
    iterations: usize,
    replicas: usize,
    master_seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..replicas as u64)
        .into_par_iter()
        .map(|r| run_iterated(problem, n, iterations, master_seed, r, false))
        .collect()
}

/// Almost-sure bound on `W = rho(T^n(x*), T(x*))` per operator kind.
///
/// * value iteration: `2 gamma ||c|| / (1 - gamma)`
/// * Q iteration: `2 gamma ||Q*||`
/// * relative value iteration: `2 sp(v*)`
/// * gradient step: `beta sqrt(d) / 2`
pub fn noise_bound(problem: &IteratedProblem) -> f64 {
    match problem {
        IteratedProblem::DiscountedValue { mdp, .. } => {
            bounds::wbar_value(mdp.discount().expect("discounted"), mdp.cost_sup())
        }
        IteratedProblem::DiscountedQ { mdp, fixed_point } => {
            bounds::wbar_q(mdp.discount().expect("discounted"), fixed_point.sup_norm())
        }
        IteratedProblem::AverageValue { fixed_point, .. } => 2.0 * fixed_point.span(),
        IteratedProblem::Sgd { problem, .. } => {
            problem.step_size() * (problem.dimension() as f64).sqrt() / 2.0
        }
    }
}

/// Monte Carlo estimate of `P(alpha_hat <= 1 - delta, W <= eps)` from fresh
/// batches at the fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSuccess {
    pub samples: usize,
    pub joint: f64,
    /// `P^(alpha_hat <= 1 - delta)`
    pub contraction_marginal: f64,
    /// `P^(W <= eps)`
    pub noise_marginal: f64,
    pub ci_halfwidth: f64,
    pub frechet_lower: f64,
    /// `max(joint - ci, 0)`
    pub joint_lower: f64,
}

impl JointSuccess {
    pub fn consistent(&self) -> bool {
        self.joint >= self.frechet_lower - self.ci_halfwidth
    }
}

pub fn estimate_joint_success(
    problem: &IteratedProblem,
    n: usize,
    epsilon: f64,
    delta: f64,
    samples: usize,
    master_seed: u64,
) -> Result<JointSuccess> {
    if samples == 0 {
        return Err(Error::param("samples", "must be positive"));
    }
    let hits: Vec<(bool, bool)> = (0..samples as u64)
        .into_par_iter()
        .map(|r| {
            let batch = RngStreamSpec::new(master_seed, JOINT_STREAM_BASE + r, 0).batch(n)?;
            let s = problem.noise_stats(&batch)?;
            Ok((s.alpha_hat <= 1.0 - delta, s.w <= epsilon))
        })
        .collect::<Result<_>>()?;
    let m = samples as f64;
    let joint = hits.iter().filter(|(a, b)| *a && *b).count() as f64 / m;
    let m1 = hits.iter().filter(|(a, _)| *a).count() as f64 / m;
    let m2 = hits.iter().filter(|(_, b)| *b).count() as f64 / m;
    let ci = binomial_ci(joint, samples);
    Ok(JointSuccess {
        samples,
        joint,
        contraction_marginal: m1,
        noise_marginal: m2,
        ci_halfwidth: ci,
        frechet_lower: bounds::frechet_hoeffding_lower(m1, m2),
        joint_lower: (joint - ci).max(0.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateSource {
    /// Closed-form concentration bound on the noise tail.
    Hoeffding,
    /// Marginals estimated by Monte Carlo, each lowered by its 3-sigma width.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub report: CertificateReport,
    pub source: CertificateSource,
    pub joint: Option<JointSuccess>,
}

/// Builds the tail certificate for `problem`. Discounted value iteration
/// and the gradient step have closed-form noise tails and a sure contraction
/// event; Q iteration and relative value iteration use estimated marginals.
pub fn certificate(
    problem: &IteratedProblem,
    n: usize,
    kappa: f64,
    epsilon: f64,
    delta: f64,
    samples: usize,
    master_seed: u64,
) -> Result<Certificate> {
    let alpha = problem.contraction();
    let (num_states, num_actions, cost_sup) = match problem.mdp() {
        Some(m) => (m.num_states(), m.num_actions(), m.cost_sup()),
        None => (problem.fixed_point().len(), 1, 0.0),
    };
    let inputs = BoundInputs {
        kappa,
        epsilon,
        delta,
        alpha,
        wbar: noise_bound(problem).max(f64::MIN_POSITIVE),
        num_states,
        num_actions,
        cost_sup,
        n: n as u64,
    };
    inputs.validate()?;
    match problem {
        IteratedProblem::DiscountedValue { .. } => Ok(Certificate {
            report: bounds::discounted_certificate(&inputs)?,
            source: CertificateSource::Hoeffding,
            joint: None,
        }),
        IteratedProblem::Sgd { problem: sgd, .. } => {
            // W = beta sqrt(d) |mean - 1/2|; Hoeffding on the mean of n uniforms
            let t = epsilon / (sgd.step_size() * (sgd.dimension() as f64).sqrt());
            let gamma2 = 2.0 * (-2.0 * n as f64 * t * t).exp();
            Ok(Certificate {
                report: CertificateReport::from_parts(&inputs, 0.0, gamma2)?,
                source: CertificateSource::Hoeffding,
                joint: None,
            })
        }
        _ => {
            let js = estimate_joint_success(problem, n, epsilon, delta, samples, master_seed)?;
            let lowered = |m: f64| 1.0 - (m - binomial_ci(m, samples)).max(0.0);
            let gamma1 = match problem {
                IteratedProblem::DiscountedQ { .. } => 0.0,
                _ => lowered(js.contraction_marginal),
            };
            let gamma2 = lowered(js.noise_marginal);
            Ok(Certificate {
                report: CertificateReport::from_parts(&inputs, gamma1, gamma2)?,
                source: CertificateSource::Estimated,
                joint: Some(js),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailBoundReport {
    pub kind: OperatorKind,
    pub n: usize,
    pub iterations: usize,
    pub check_iteration: usize,
    pub replicas: usize,
    pub kappa: f64,
    /// `P^(E_K > kappa)` over replicas.
    pub empirical_tail: f64,
    pub ci_halfwidth: f64,
    pub tail_at_check: f64,
    /// Tails at `K` and at the check iteration differ by at most `2 ci`.
    pub stabilized: bool,
    pub theoretical_bound: f64,
    pub certificate: Certificate,
    /// Mean last-iterate gain estimate (relative value iteration only).
    pub mean_final_gain: Option<f64>,
    /// Certificate valid and `empirical_tail - ci <= theoretical_bound`.
    pub pass: bool,
}

fn tail_at(trajectories: &[Trajectory], k: usize, kappa: f64) -> f64 {
    trajectories.iter().filter(|t| t.errors[k] > kappa).count() as f64 / trajectories.len() as f64
}

/// Tail estimate from already-run trajectories.
pub fn summarize_tail(
    trajectories: &[Trajectory],
    kind: OperatorKind,
    n: usize,
    check_iteration: usize,
    kappa: f64,
    certificate: Certificate,
) -> TailBoundReport {
    let r = trajectories.len();
    let iterations = trajectories[0].errors.len() - 1;
    let empirical_tail = tail_at(trajectories, iterations, kappa);
    let ci = binomial_ci(empirical_tail, r);
    let tail_at_check = tail_at(trajectories, check_iteration, kappa);
    let ci_check = binomial_ci(tail_at_check, r);
    let stabilized = (empirical_tail - tail_at_check).abs() <= 2.0 * ci.max(ci_check);
    let gains: Vec<f64> = trajectories
        .iter()
        .filter_map(|t| t.gains.last().copied().flatten())
        .collect();
    let mean_final_gain = (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64);
    let bound = certificate.report.bound;
    TailBoundReport {
        kind,
        n,
        iterations,
        check_iteration,
        replicas: r,
        kappa,
        empirical_tail,
        ci_halfwidth: ci,
        tail_at_check,
        stabilized,
        theoretical_bound: bound,
        pass: certificate.report.valid && empirical_tail - ci <= bound,
        certificate,
        mean_final_gain,
    }
}

/// Runs the configured experiment, writes `trajectories.csv`, `summary.json`
/// and `certificate.csv` into the output directory (if any) and returns the
/// report.
pub fn estimate_tail(config: &ExperimentConfig) -> Result<TailBoundReport> {
    let problem = config.problem()?;
    let cert = certificate(
        &problem,
        config.n,
        config.kappa,
        config.epsilon,
        config.delta,
        config.replicas,
        config.master_seed,
    )?;
    let trajectories = run_replicas(&problem, config.n, config.iterations, config.replicas, config.master_seed)?;
    let report = summarize_tail(
        &trajectories,
        config.kind,
        config.n,
        config.check_iteration(),
        config.kappa,
        cert,
    );
    if let Some(dir) = config.resolved_output() {
        write_outputs(&dir, &trajectories, &report)?;
    }
    Ok(report)
}

pub fn write_outputs(dir: &Path, trajectories: &[Trajectory], report: &TailBoundReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("trajectories.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_trajectories_csv(std::io::BufWriter::new(file), trajectories)?;
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(report)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let path = dir.join("certificate.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    report.certificate.report.write_csv(file)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub label: String,
    /// `||v - v*||`
    pub distance: f64,
    /// Estimate of `E||T^n v - v*|| - ||v - v*|| + V(v)` with `V(v) = ||v - v*||`.
    pub statistic: f64,
    pub ci_halfwidth: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub c0: f64,
    pub points: Vec<DriftPoint>,
}

impl DriftReport {
    pub fn passed(&self) -> bool {
        self.points.iter().all(|p| p.pass)
    }
}

/// Drift inequality `E||T^n v - v*|| - ||v - v*|| <= -V(v) + c0` at the fixed
/// point, at `per_class` random interior points of the value box and at
/// `per_class` random vertices of it.
pub fn drift_check(
    problem: &IteratedProblem,
    n: usize,
    per_class: usize,
    samples: usize,
    master_seed: u64,
) -> Result<DriftReport> {
    let IteratedProblem::DiscountedValue { mdp, fixed_point } = problem else {
        return Err(Error::param("kind", "drift check needs discounted value iteration"));
    };
    if samples < 2 {
        return Err(Error::param("samples", "need at least two samples per point"));
    }
    let c0 = bounds::drift_constant_discounted(mdp)?;
    let bound = mdp.value_bound()?;
    let star = fixed_point.as_slice();
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut points: Vec<(String, Vec<f64>)> = vec![("fixed-point".into(), star.to_vec())];
    for _ in 0..per_class {
        points.push((
            "interior".into(),
            (0..star.len()).map(|_| rng.random_range(-bound..=bound)).collect(),
        ));
    }
    for _ in 0..per_class {
        points.push((
            "boundary".into(),
            (0..star.len())
                .map(|_| if rng.random::<bool>() { bound } else { -bound })
                .collect(),
        ));
    }
    let out = points
        .into_par_iter()
        .enumerate()
        .map(|(i, (label, v))| {
            let distance = problem.error(&v);
            let vals: Vec<f64> = (0..samples as u64)
                .map(|r| {
                    let batch = RngStreamSpec::new(master_seed, DRIFT_STREAM_BASE + r, i as u64).batch(n)?;
                    let (next, _) = problem.step(&v, &batch)?;
                    Ok(problem.error(&next))
                })
                .collect::<Result<_>>()?;
            let mean = vals.iter().sum::<f64>() / samples as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
            let ci = 3.0 * (var / samples as f64).sqrt();
            // V(v) = ||v - v*|| cancels the subtracted distance
            let statistic = mean;
            Ok(DriftPoint {
                label,
                distance,
                statistic,
                ci_halfwidth: ci,
                pass: statistic <= c0 + ci,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DriftReport { c0, points: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceExperiment {
    pub joint: JointSuccess,
    pub wbar: f64,
    pub report: DominanceReport,
}

/// Runs `replicas` trajectories for `k` steps and checks the error at step
/// `k` against the exact law of the dominating chain, with `p` set to the
/// lower confidence limit of the estimated joint success probability.
#[allow(clippy::too_many_arguments)]
pub fn dominance_experiment(
    problem: &IteratedProblem,
    n: usize,
    k: usize,
    replicas: usize,
    master_seed: u64,
    epsilon: f64,
    delta: f64,
    grid_points: usize,
) -> Result<DominanceExperiment> {
    let joint = estimate_joint_success(problem, n, epsilon, delta, replicas, master_seed)?;
    let wbar = noise_bound(problem);
    let params = DominanceParams::from_constants(joint.joint_lower, wbar, epsilon, delta)?;
    let trajectories = run_replicas(problem, n, k, replicas, master_seed)?;
    let samples: Vec<f64> = trajectories.iter().map(|t| t.errors[k]).collect();
    let e0 = trajectories[0].errors[0];
    let hi = sup_norm(&samples);
    let hi = if hi > 0.0 { hi } else { epsilon };
    let grid: Vec<f64> = (1..=grid_points)
        .map(|i| hi * i as f64 / grid_points as f64)
        .collect();
    let report = dominance::verify_error_dominance(&samples, e0, &params, epsilon, k, &grid)?;
    Ok(DominanceExperiment { joint, wbar, report })
}

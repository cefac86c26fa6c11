use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use randop::bounds::{self, TailCertificate};
use randop::dominance::{self, ChainKind, DominanceParams};
use randop::empirical::{write_trajectories_csv, IteratedProblem, OperatorKind};
use randop::error::{Error, Result};
use randop::exact::{self, SolveKind, DEFAULT_MAX_ITER, DEFAULT_TOL};
use randop::harness::{self, ExperimentConfig, SgdSpec, OUTPUT_DIR_ENV};
use randop::mdp::FiniteMdp;
use randop::models;

#[derive(Parser)]
#[command(name = "randop", version, about = "Iterated random operators: empirical DP, dominating chains, tail certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the exact fixed point of a model.
    SolveExact {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "discounted-v")]
        kind: SolveKind,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
        max_iter: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Empirical value iteration.
    RunEvi(RunArgs),
    /// Empirical relative value iteration (average cost).
    RunErvi(RunArgs),
    /// Empirical Q-value iteration.
    RunEqvi(RunArgs),
    /// Mini-batch gradient iteration on a quadratic loss.
    RunSgd {
        /// Comma-separated target mean.
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        target: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        step_size: f64,
        #[arg(long, value_delimiter = ',')]
        initial: Option<Vec<f64>>,
        #[command(flatten)]
        run: ReplicaArgs,
    },
    /// Check the error law against the dominating chain.
    DominanceVerify {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "evi")]
        kind: OperatorKind,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        replicas: usize,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 20)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Stationary law of a dominating chain.
    Stationary {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        w: u64,
        #[arg(long, default_value = "Q")]
        chain: ChainKind,
        #[arg(long, default_value_t = 0)]
        eta: u64,
        #[arg(long, default_value_t = 1e-12)]
        tail_cap: f64,
        /// Force the numeric solver (always used for P and Y).
        #[arg(long)]
        numeric: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Tail bound `(1 - p^w)/p^w` from `p` or from `gamma1`, `gamma2`.
    BoundCalc {
        #[arg(long, conflicts_with_all = ["gamma1", "gamma2"])]
        p: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        gamma1: f64,
        #[arg(long, default_value_t = 0.0)]
        gamma2: f64,
        #[arg(long)]
        w: u64,
    },
    /// Smallest sample size meeting the discounted confidence target.
    SampleComplexity {
        #[arg(long)]
        kappa: f64,
        #[arg(long)]
        confidence: f64,
        #[arg(long)]
        states: usize,
        #[arg(long)]
        actions: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        cost_sup: f64,
    },
    /// Run a tail experiment from a JSON config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Built-in model name.
    #[arg(long, conflicts_with = "mdp")]
    model: Option<String>,
    /// JSON model file.
    #[arg(long)]
    mdp: Option<PathBuf>,
    /// Override the discount factor.
    #[arg(long)]
    discount: Option<f64>,
}

impl ModelArgs {
    fn load(&self) -> Result<FiniteMdp> {
        let mdp = match (&self.mdp, &self.model) {
            (Some(p), _) => FiniteMdp::from_path(p)?,
            (None, Some(name)) => models::by_name(name)
                .ok_or_else(|| Error::InvalidModel(format!("unknown model `{name}`")))?,
            (None, None) => return Err(Error::InvalidModel("one of --model or --mdp is required".into())),
        };
        match self.discount {
            Some(g) => mdp.with_discount(Some(g)),
            None => Ok(mdp),
        }
    }
}

#[derive(Args)]
struct ReplicaArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    run: ReplicaArgs,
}

enum Outcome {
    Ok,
    CertificateFailed,
}

fn output_dir(explicit: &Option<PathBuf>) -> Option<PathBuf> {
    explicit
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
}

fn create(dir: &Path, name: &str) -> Result<fs::File> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::File::create(&path).map_err(|e| Error::io(&path, e))
}

fn fmt_num(x: f64) -> String {
    let s = format!("{x:.8}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn fmt_vec(xs: &[f64]) -> String {
    if xs.len() == 1 {
        fmt_num(xs[0])
    } else {
        format!("[{}]", xs.iter().map(|x| fmt_num(*x)).collect::<Vec<_>>().join(", "))
    }
}

fn run_replicas(problem: &IteratedProblem, run: &ReplicaArgs) -> Result<Outcome> {
    let trajectories = harness::run_replicas(problem, run.n, run.iterations, run.replicas, run.seed)?;
    let mut out = io::stdout().lock();
    writeln!(out, "replica, final_error, final_gain").ok();
    for t in &trajectories {
        let gain = t.gains.last().copied().flatten().map(fmt_num).unwrap_or_default();
        writeln!(out, "{}, {:.10e}, {}", t.replica, t.final_error(), gain).ok();
    }
    let mean = trajectories.iter().map(|t| t.final_error()).sum::<f64>() / trajectories.len() as f64;
    writeln!(out, "mean_final_error = {mean:.10e}").ok();
    if let Some(dir) = output_dir(&run.output) {
        write_trajectories_csv(io::BufWriter::new(create(&dir, "trajectories.csv")?), &trajectories)?;
    }
    Ok(Outcome::Ok)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::SolveExact {
            model,
            kind,
            tol,
            max_iter,
            output,
        } => {
            let mdp = model.load()?;
            let res = exact::solve_fixed_point(&mdp, kind, tol, max_iter)?;
            if let Some(v) = res.value() {
                println!("v* = {}", fmt_vec(v.as_slice()));
                let rule = mdp.greedy_rule(v, kind == SolveKind::DiscountedValue)?;
                println!("rule = {:?}", rule.0);
            }
            if let Some(q) = res.q() {
                println!("Q* = {}", fmt_vec(q.as_slice()));
                println!("v* = {}", fmt_vec(q.state_values().as_slice()));
            }
            if let Some(g) = res.gain {
                println!("gain = {}", fmt_num(g));
            }
            println!("iterations = {}", res.iterations);
            if let Some(dir) = output_dir(&output) {
                let mut f = create(&dir, "solution.json")?;
                let json = serde_json::json!({
                    "kind": kind.to_string(),
                    "values": res.value().map(|v| v.as_slice().to_vec()),
                    "q_values": res.q().map(|q| q.as_slice().to_vec()),
                    "gain": res.gain,
                    "iterations": res.iterations,
                    "final_residual": res.final_residual,
                });
                writeln!(f, "{}", serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&dir, e))?;
            }
            Ok(Outcome::Ok)
        }
        Command::RunEvi(args) => run_replicas(&IteratedProblem::prepare(OperatorKind::Evi, &args.model.load()?)?, &args.run),
        Command::RunErvi(args) => {
            run_replicas(&IteratedProblem::prepare(OperatorKind::Ervi, &args.model.load()?)?, &args.run)
        }
        Command::RunEqvi(args) => {
            run_replicas(&IteratedProblem::prepare(OperatorKind::Eqvi, &args.model.load()?)?, &args.run)
        }
        Command::RunSgd {
            target,
            step_size,
            initial,
            run,
        } => {
            let spec = SgdSpec {
                target_mean: target,
                step_size,
                initial,
            };
            run_replicas(&spec.build()?, &run)
        }
        Command::DominanceVerify {
            model,
            kind,
            n,
            k,
            replicas,
            epsilon,
            delta,
            grid,
            seed,
            output,
        } => {
            let problem = IteratedProblem::prepare(kind, &model.load()?)?;
            let exp = harness::dominance_experiment(&problem, n, k, replicas, seed, epsilon, delta, grid)?;
            let rep = &exp.report;
            println!(
                "p = {}, w = {}, eta = {}, y0 = {}",
                fmt_num(rep.params.p),
                rep.params.w,
                rep.params.eta,
                rep.y0
            );
            rep.write_csv(io::stdout().lock())?;
            println!("worst_margin = {:.6e}", rep.worst_margin());
            println!("dominance = {}", if rep.passed() { "pass" } else { "fail" });
            if let Some(dir) = output_dir(&output) {
                rep.write_csv(create(&dir, "dominance.csv")?)?;
            }
            Ok(if rep.passed() { Outcome::Ok } else { Outcome::CertificateFailed })
        }
        Command::Stationary {
            p,
            w,
            chain,
            eta,
            tail_cap,
            numeric,
            output,
        } => {
            let dist = if chain == ChainKind::Q && !numeric {
                dominance::stationary_q_closed_form(p, w, tail_cap)?
            } else {
                let params = DominanceParams::new(p, w, eta)?;
                let n = dominance::truncation_level(chain, &params, tail_cap)?;
                dominance::stationary_numeric(chain, &params, n, 1e-12)?
            };
            let mut out = io::stdout().lock();
            writeln!(out, "state, mass").ok();
            for (s, m) in dist.support.iter().zip(&dist.mass) {
                writeln!(out, "{s}, {m:.12}").ok();
            }
            if let Some(dir) = output_dir(&output) {
                dist.write_csv(create(&dir, "stationary.csv")?)?;
            }
            Ok(Outcome::Ok)
        }
        Command::BoundCalc { p, gamma1, gamma2, w } => {
            let p = p.unwrap_or_else(|| bounds::p_n(gamma1, gamma2));
            let cert = TailCertificate::new(p, w)?;
            let (pc, qc) = bounds::thresholds(w);
            println!("p = {}", fmt_num(cert.p));
            println!("w = {}", cert.w);
            println!("bound = {}", fmt_num(cert.bound));
            println!("thresholds = ({}, {})", fmt_num(pc), fmt_num(qc));
            println!("valid = {}", cert.valid);
            Ok(if cert.valid { Outcome::Ok } else { Outcome::CertificateFailed })
        }
        Command::SampleComplexity {
            kappa,
            confidence,
            states,
            actions,
            alpha,
            cost_sup,
        } => {
            let sc = bounds::sample_complexity_discounted(kappa, confidence, states, actions, alpha, cost_sup)?;
            println!("n = {}", sc.n);
            println!("w = {}", sc.w);
            println!("rhs = {:.12e}", sc.rhs);
            Ok(Outcome::Ok)
        }
        Command::Experiment { config, output } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if output.is_some() {
                cfg.output_path = output;
            }
            let report = harness::estimate_tail(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.pass { Outcome::Ok } else { Outcome::CertificateFailed })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CertificateFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

//! `opl` — experiment harness for off-policy learning from logged bandit
//! feedback. Subcommands cover dataset generation, supervised-to-bandit
//! conversion, logging-policy fitting, bound-objective training, policy
//! evaluation, the non-contextual clipping example, factorial sweeps and
//! sweep reports.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

mod config;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use opl_core::bounds::LambdaMode;
use opl_core::data::{
    convert_to_bandit, evaluate_policy_reward, generate_blobs_split, generate_fig1_bandit,
    BlobSpec, Fig1Spec, LoggedDataset, SupervisedDataset,
};
use opl_core::estimators::{estimate_risk, EstimatorSpec};
use opl_core::math::fmt_f64;
use opl_core::policies::{fit_logging_policy, McConfig, PolicyParams};
use opl_core::trainer::{
    train, AlphaSetting, ObjectiveKind, PolicyClass, TrainConfig, TrainReport,
};

#[derive(Parser)]
#[command(
    name = "opl",
    about = "Off-policy learning from logged bandit feedback",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Gaussian-cluster classification dataset.
    Generate {
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        d: usize,
        #[arg(long, default_value_t = 20000)]
        n: usize,
        #[arg(long, default_value_t = 4.0)]
        class_sep: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_sd: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Also emit a held-out test set drawn from the same geometry.
        #[arg(long, default_value_t = 0)]
        test_n: usize,
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Fit the logging policy on a small split of a supervised dataset.
    FitLogging {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eta0: f64,
        #[arg(long, default_value_t = 0.05)]
        split_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Policy parameters CSV.
        #[arg(long)]
        out: PathBuf,
        /// Held-in indices, one per line; exclude these when converting.
        #[arg(long)]
        heldin_out: Option<PathBuf>,
    },
    /// Convert a supervised dataset to logged bandit feedback.
    Convert {
        #[arg(long)]
        data: PathBuf,
        /// Logging policy parameters CSV.
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Indices file to exclude (for example the fit-logging held-in set).
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        mc: McArgs,
    },
    /// Train a policy on logged data by minimizing a bound objective.
    Train(Box<TrainArgs>),
    /// Evaluate a policy's mean test reward on labelled data.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Per-action reward-estimate curves on the non-contextual example.
    Fig1 {
        #[arg(long, default_value_t = 50000)]
        n: usize,
        /// Weight-clip threshold of the min-clip curve.
        #[arg(long, default_value_t = 100.0)]
        m: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full factorial experiment from a TOML config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Override [run] out_dir.
        #[arg(long)]
        out_dir: Option<String>,
        /// Override [run] seeds, comma separated.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Aggregate a finished sweep directory into summary and curve files.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Args, Clone)]
struct McArgs {
    /// Monte Carlo draws per propensity evaluation.
    #[arg(long, default_value_t = 32)]
    s: usize,
    #[arg(long, default_value_t = 0)]
    mc_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Logged dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Prior policy parameters CSV (for example the fitted logging policy).
    #[arg(long)]
    prior: PathBuf,
    /// ours | london | sakhi1 | sakhi2 | lp | ips | ipsmin | ipsmax | ipsalpha | ipsbeta
    #[arg(long)]
    objective: String,
    /// softmax | gaussian | mixed_logit
    #[arg(long, default_value = "gaussian")]
    policy_class: String,
    /// Number, "paper-default" (1 - n^(-1/4)) or "adaptive".
    #[arg(long, default_value = "paper-default")]
    alpha: String,
    /// Number or "paper-default" (n^(-1/4)).
    #[arg(long, default_value = "paper-default")]
    tau: String,
    /// Weight-clip threshold for the ipsmin objective.
    #[arg(long, default_value_t = 100.0)]
    m: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Fixed lambda for the main bound; omitted = closed-form optimum.
    #[arg(long)]
    lambda: Option<f64>,
    /// Learning-principle penalty weights, comma separated.
    #[arg(long, default_value = "1e-5,1e-5,1e-5")]
    lp_lambdas: String,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// 0 trains full batch.
    #[arg(long, default_value_t = 0)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    mc: McArgs,
    /// Supervised test CSV; adds the final test reward to the report.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Learned policy parameters CSV.
    #[arg(long)]
    out_params: PathBuf,
    /// Training report JSON.
    #[arg(long)]
    out_report: PathBuf,
    /// Per-epoch curve CSV.
    #[arg(long)]
    out_curve: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is a
            // configuration error
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<ConfigError>().is_some();
            ExitCode::from(if config_error { 1 } else { 2 })
        }
    }
}

/// Marker for errors caused by invalid configuration rather than runtime
/// failures.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(ConfigError(msg.into()))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            k,
            d,
            n,
            class_sep,
            noise_sd,
            seed,
            out,
            test_n,
            test_out,
        } => {
            let spec = BlobSpec {
                k,
                d,
                n,
                class_sep,
                noise_sd,
                seed,
            };
            spec.validate().map_err(|e| config_err(e.to_string()))?;
            if test_n > 0 {
                let (train_ds, test_ds) = generate_blobs_split(&spec, test_n)?;
                train_ds.save_csv(&out)?;
                let test_path = test_out
                    .ok_or_else(|| config_err("--test-out is required with --test-n"))?;
                test_ds.save_csv(&test_path)?;
                println!("wrote {} (+ test set)", out.display());
            } else {
                opl_core::data::generate_blobs(&spec)?.save_csv(&out)?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
        Command::FitLogging {
            data,
            eta0,
            split_frac,
            seed,
            out,
            heldin_out,
        } => {
            let ds = SupervisedDataset::load_csv(&data)?;
            let fit = fit_logging_policy(&ds, eta0, split_frac, seed)?;
            PolicyParams::Softmax(fit.params).save_csv(&out)?;
            if let Some(p) = heldin_out {
                let lines: Vec<String> = fit.held_in.iter().map(|i| i.to_string()).collect();
                std::fs::write(&p, lines.join("\n") + "\n")?;
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Convert {
            data,
            policy,
            seed,
            exclude,
            out,
            mc,
        } => {
            let mut ds = SupervisedDataset::load_csv(&data)?;
            if let Some(excl) = exclude {
                let text = std::fs::read_to_string(&excl)?;
                let drop: std::collections::HashSet<usize> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| l.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| config_err(format!("exclude file: {e}")))?;
                let keep: Vec<usize> = (0..ds.n()).filter(|i| !drop.contains(i)).collect();
                ds = ds.subset(&keep)?;
            }
            let pol = PolicyParams::load_csv(&policy)?;
            let logged = convert_to_bandit(
                &ds,
                &pol,
                &McConfig {
                    s: mc.s,
                    seed: mc.mc_seed,
                },
                seed,
            )?;
            logged.save_csv(&out)?;
            println!("wrote {} ({} interactions)", out.display(), logged.n());
            Ok(())
        }
        Command::Train(args) => run_train(*args),
        Command::Evaluate {
            data,
            policy,
            seed,
            repeats,
        } => {
            let ds = SupervisedDataset::load_csv(&data)?;
            let pol = PolicyParams::load_csv(&policy)?;
            let reward = evaluate_policy_reward(&ds, &pol, seed, repeats)?;
            println!("{}", fmt_f64(reward));
            Ok(())
        }
        Command::Fig1 { n, m, seed, out } => run_fig1(n, m, seed, &out),
        Command::Sweep {
            config,
            out_dir,
            seeds,
        } => {
            let mut cfg = config::SweepConfig::load(&config).map_err(|e| config_err(format!("{e:#}")))?;
            if let Some(dir) = out_dir {
                cfg.run.out_dir = dir;
            }
            if let Some(s) = seeds {
                cfg.run.seeds = s
                    .split(',')
                    .map(|v| v.trim().parse::<u64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| config_err(format!("--seeds: {e}")))?;
            }
            cfg.validate().map_err(|e| config_err(format!("{e:#}")))?;
            sweep::run_sweep(&cfg)
        }
        Command::Report { run_dir } => sweep::emit_report(&run_dir),
    }
}

/// Resolves "paper-default"/numeric/adaptive smoothing settings against the
/// logged sample size.
pub fn resolve_alpha(raw: &str, n: usize) -> Result<AlphaSetting> {
    match raw {
        "paper-default" => Ok(AlphaSetting::Fixed(1.0 - (n as f64).powf(-0.25))),
        "adaptive" => Ok(AlphaSetting::Adaptive),
        v => {
            let a: f64 = v
                .parse()
                .map_err(|e| config_err(format!("alpha `{v}`: {e}")))?;
            if !(0.0..=1.0).contains(&a) {
                return Err(config_err("alpha must lie in [0, 1]"));
            }
            Ok(AlphaSetting::Fixed(a))
        }
    }
}

pub fn resolve_tau(raw: &str, n: usize) -> Result<f64> {
    match raw {
        "paper-default" => Ok((n as f64).powf(-0.25)),
        v => {
            let t: f64 = v
                .parse()
                .map_err(|e| config_err(format!("tau `{v}`: {e}")))?;
            if !(0.0 < t && t < 1.0) {
                return Err(config_err("tau must lie in (0, 1)"));
            }
            Ok(t)
        }
    }
}

pub fn parse_policy_class(raw: &str) -> Result<PolicyClass> {
    match raw {
        "softmax" => Ok(PolicyClass::Softmax),
        "gaussian" => Ok(PolicyClass::Gaussian),
        "mixed_logit" => Ok(PolicyClass::MixedLogit),
        other => Err(config_err(format!("unknown policy class `{other}`"))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    name: &str,
    alpha: &str,
    tau: &str,
    m: f64,
    delta: f64,
    lambda: Option<f64>,
    lp_lambdas: (f64, f64, f64),
    n: usize,
) -> Result<ObjectiveKind> {
    let lambda_mode = match lambda {
        Some(l) => LambdaMode::Fixed { lambda: l },
        None => LambdaMode::ClosedFormStar,
    };
    Ok(match name {
        "ours" => ObjectiveKind::Ours {
            alpha: resolve_alpha(alpha, n)?,
            delta,
            lambda_mode,
        },
        "london" => ObjectiveKind::London {
            tau: resolve_tau(tau, n)?,
            delta,
        },
        "sakhi1" => ObjectiveKind::Sakhi1 {
            tau: resolve_tau(tau, n)?,
            delta,
        },
        "sakhi2" => ObjectiveKind::Sakhi2 {
            tau: resolve_tau(tau, n)?,
            delta,
        },
        "lp" => {
            let a = match resolve_alpha(alpha, n)? {
                AlphaSetting::Fixed(a) => a,
                AlphaSetting::Adaptive => {
                    return Err(config_err("the lp objective needs a fixed alpha"))
                }
            };
            ObjectiveKind::LearningPrinciple {
                alpha: a,
                lambdas: lp_lambdas,
            }
        }
        "ips" => ObjectiveKind::EstimatorOnly {
            spec: EstimatorSpec::Ips,
        },
        "ipsmin" => ObjectiveKind::EstimatorOnly {
            spec: EstimatorSpec::IpsMin { m },
        },
        "ipsmax" => ObjectiveKind::EstimatorOnly {
            spec: EstimatorSpec::IpsMax {
                tau: resolve_tau(tau, n)?,
            },
        },
        "ipsalpha" => {
            let a = match resolve_alpha(alpha, n)? {
                AlphaSetting::Fixed(a) => a,
                AlphaSetting::Adaptive => {
                    return Err(config_err("ipsalpha needs a fixed alpha"))
                }
            };
            ObjectiveKind::EstimatorOnly {
                spec: EstimatorSpec::IpsAlpha { alpha: a },
            }
        }
        "ipsbeta" => {
            let b = match resolve_alpha(alpha, n)? {
                AlphaSetting::Fixed(a) => a,
                AlphaSetting::Adaptive => return Err(config_err("ipsbeta needs a fixed beta")),
            };
            ObjectiveKind::EstimatorOnly {
                spec: EstimatorSpec::IpsBeta { beta: b },
            }
        }
        other => return Err(config_err(format!("unknown objective `{other}`"))),
    })
}

/// Serializes a training report (plus provenance) as JSON.
pub fn report_json(report: &TrainReport, provenance: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "config": provenance,
        "objective": report.objective_name,
        "policy_class": report.policy_class.name(),
        "prior_hash": report.prior_hash,
        "final_test_reward": report.final_test_reward,
        "epochs": report.epochs,
    })
}

fn run_train(args: TrainArgs) -> Result<()> {
    let ds = LoggedDataset::load_csv(&args.data)?;
    let prior = PolicyParams::load_csv(&args.prior)?;
    let lp: Vec<f64> = args
        .lp_lambdas
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| config_err(format!("--lp-lambdas: {e}")))?;
    if lp.len() != 3 {
        return Err(config_err("--lp-lambdas needs exactly three values"));
    }
    let objective = build_objective(
        &args.objective,
        &args.alpha,
        &args.tau,
        args.m,
        args.delta,
        args.lambda,
        (lp[0], lp[1], lp[2]),
        ds.n(),
    )?;
    let class = parse_policy_class(&args.policy_class)?;
    let cfg = TrainConfig {
        lr: args.lr,
        epochs: args.epochs,
        batch_size: if args.batch_size == 0 {
            None
        } else {
            Some(args.batch_size)
        },
        mc: McConfig {
            s: args.mc.s,
            seed: args.mc.mc_seed,
        },
        ..TrainConfig::new(objective, class, args.seed)
    };
    let test = args
        .test
        .as_ref()
        .map(SupervisedDataset::load_csv)
        .transpose()?;
    let report = train(&ds, &cfg, &prior, test.as_ref())?;

    report.final_params.save_csv(&args.out_params)?;
    let provenance = serde_json::json!({
        "data": args.data.display().to_string(),
        "prior": args.prior.display().to_string(),
        "train_config": &cfg,
        "seed": args.seed,
    });
    std::fs::write(
        &args.out_report,
        serde_json::to_string_pretty(&report_json(&report, provenance.clone()))? + "\n",
    )?;
    if let Some(curve) = &args.out_curve {
        let mut out = String::new();
        out.push_str(&format!("# {provenance}\n"));
        out.push_str("epoch,total,estimate,kl,bias,second_moment,lambda,alpha\n");
        for e in &report.epochs {
            let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch,
                fmt_f64(e.total),
                fmt_f64(e.estimate),
                opt(e.kl),
                opt(e.bias),
                opt(e.second_moment),
                opt(e.lambda),
                opt(e.alpha)
            ));
        }
        std::fs::write(curve, out)?;
    }
    if let Some(r) = report.final_test_reward {
        println!("final test reward {}", fmt_f64(r));
    }
    println!("wrote {} and {}", args.out_params.display(), args.out_report.display());
    Ok(())
}

fn run_fig1(n: usize, m: f64, seed: u64, out: &PathBuf) -> Result<()> {
    let spec = Fig1Spec {
        n_samples: n,
        ..Fig1Spec::default()
    };
    spec.validate().map_err(|e| config_err(e.to_string()))?;
    let ds = generate_fig1_bandit(&spec, seed)?;
    let provenance = serde_json::json!({
        "n": n, "m": m, "seed": seed, "eps": spec.eps, "n_actions": spec.n_actions,
    });
    let mut text = format!("# {provenance}\n");
    text.push_str("action,true_reward,ips_estimate,ipsmin_estimate\n");
    for a in 0..spec.n_actions {
        let at_logged: Vec<f64> = ds
            .actions()
            .iter()
            .map(|&ai| if ai == a { 1.0 } else { 0.0 })
            .collect();
        let ips = -estimate_risk(&EstimatorSpec::Ips, &ds, &at_logged)?.value;
        let ipsmin = -estimate_risk(&EstimatorSpec::IpsMin { m }, &ds, &at_logged)?.value;
        // action indices are 1-based in emitted tables
        text.push_str(&format!(
            "{},{},{},{}\n",
            a + 1,
            fmt_f64(spec.true_reward(a)),
            fmt_f64(ips),
            fmt_f64(ipsmin)
        ));
    }
    std::fs::write(out, text).context("writing fig1 output")?;
    println!("wrote {}", out.display());
    Ok(())
}

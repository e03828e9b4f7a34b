//! Factorial sweep runner and report aggregation.
//!
//! A sweep expands (eta0 x objective x policy class x alpha-or-tau x seed),
//! runs convert -> train -> evaluate per cell, and writes one row per cell
//! into `results.csv` (first line: a comment embedding the resolved config
//! and global seed). Reruns with the same config are byte identical. The
//! report step aggregates mean and standard error over seeds and emits one
//! curve file per (objective, policy class).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use opl_core::data::{
    convert_to_bandit, evaluate_policy_reward, generate_blobs_split, generate_fig1_bandit,
    BlobSpec, Fig1Spec, LoggedDataset, SupervisedDataset,
};
use opl_core::math::fmt_f64;
use opl_core::policies::{fit_logging_policy, McConfig, PolicyParams};
use opl_core::trainer::{train, TrainConfig};

use crate::config::SweepConfig;
use crate::{build_objective, config_err, parse_policy_class, report_json};

struct CellData {
    logged: LoggedDataset,
    prior: PolicyParams,
    test: Option<SupervisedDataset>,
    fig1: Option<Fig1Spec>,
    log_reward: f64,
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(out_dir.join("cells")).context("creating output directory")?;
    let provenance = cfg.provenance();

    let mut rows = String::new();
    rows.push_str(&format!("# {provenance}\n"));
    rows.push_str("eta0,objective,policy_class,alpha_or_tau,seed,test_reward\n");

    let mut cell_idx = 0usize;
    for &eta0 in &cfg.logging.eta0 {
        for &seed in &cfg.run.seeds {
            let data = prepare_cell_data(cfg, eta0, seed)?;
            for objective_name in &cfg.train.objectives {
                for class_name in &cfg.train.policy_classes {
                    let labels: &[String] = if matches!(objective_name.as_str(), "ours" | "lp") {
                        &cfg.train.alpha
                    } else {
                        &cfg.train.tau
                    };
                    for label in labels {
                        // the adaptive smoothing exponent only applies to
                        // the main bound objective; skip other combinations
                        if label == "adaptive" && objective_name != "ours" {
                            continue;
                        }
                        let reward = run_cell(
                            cfg,
                            &data,
                            objective_name,
                            class_name,
                            label,
                            seed,
                            cell_idx,
                            &out_dir,
                            &provenance,
                        )
                        .with_context(|| {
                            format!(
                                "cell {cell_idx}: eta0={eta0} objective={objective_name} \
                                 class={class_name} alpha_or_tau={label} seed={seed}"
                            )
                        })?;
                        rows.push_str(&format!(
                            "{eta0},{objective_name},{class_name},{label},{seed},{}\n",
                            fmt_f64(reward)
                        ));
                        cell_idx += 1;
                    }
                }
            }
            // logging-policy baseline row for reference curves
            rows.push_str(&format!(
                "{eta0},logging,logging,-,{seed},{}\n",
                fmt_f64(data.log_reward)
            ));
        }
    }
    std::fs::write(out_dir.join("results.csv"), rows)?;
    println!("wrote {} ({} cells)", out_dir.join("results.csv").display(), cell_idx);
    Ok(())
}

fn prepare_cell_data(cfg: &SweepConfig, eta0: f64, seed: u64) -> Result<CellData> {
    let derived = cfg.run.global_seed.wrapping_mul(0x9E37_79B9).wrapping_add(seed);
    match cfg.dataset.source.as_str() {
        "fig1" => {
            let spec = Fig1Spec {
                n_samples: cfg.dataset.n,
                ..Fig1Spec::default()
            };
            let logged = generate_fig1_bandit(&spec, derived)?;
            let probs = spec.logging_probs();
            let prior = PolicyParams::Softmax(spec.logging_softmax_params());
            let log_reward = (0..spec.n_actions)
                .map(|a| probs[a] * spec.true_reward(a))
                .sum();
            Ok(CellData {
                logged,
                prior,
                test: None,
                fig1: Some(spec),
                log_reward,
            })
        }
        source => {
            let (sup, test) = match source {
                "blobs" => {
                    let spec = BlobSpec {
                        k: cfg.dataset.k,
                        d: cfg.dataset.d,
                        n: cfg.dataset.n,
                        class_sep: cfg.dataset.class_sep,
                        noise_sd: cfg.dataset.noise_sd,
                        seed: derived,
                    };
                    generate_blobs_split(&spec, cfg.dataset.test_n)?
                }
                _ => {
                    let sup = SupervisedDataset::load_csv(
                        cfg.dataset.path.as_ref().expect("validated"),
                    )?;
                    let test = match &cfg.dataset.test_path {
                        Some(p) => SupervisedDataset::load_csv(p)?,
                        None => sup.clone(),
                    };
                    (sup, test)
                }
            };
            let fit = fit_logging_policy(&sup, eta0, cfg.logging.split_frac, derived)?;
            let held: std::collections::HashSet<usize> =
                fit.held_in.iter().copied().collect();
            let keep: Vec<usize> = (0..sup.n()).filter(|i| !held.contains(i)).collect();
            let train_sup = sup.subset(&keep)?;
            let prior = PolicyParams::Softmax(fit.params);
            let logged = convert_to_bandit(
                &train_sup,
                &prior,
                &McConfig {
                    s: cfg.train.s,
                    seed: derived,
                },
                derived,
            )?;
            let log_reward = evaluate_policy_reward(&test, &prior, derived, 1)?;
            Ok(CellData {
                logged,
                prior,
                test: Some(test),
                fig1: None,
                log_reward,
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &SweepConfig,
    data: &CellData,
    objective_name: &str,
    class_name: &str,
    label: &str,
    seed: u64,
    cell_idx: usize,
    out_dir: &Path,
    provenance: &str,
) -> Result<f64> {
    let lp = cfg.train.lp_lambdas;
    let objective = build_objective(
        objective_name,
        label,
        label,
        100.0,
        cfg.train.delta,
        None,
        (lp[0], lp[1], lp[2]),
        data.logged.n(),
    )?;
    let class = parse_policy_class(class_name)?;
    let tcfg = TrainConfig {
        lr: cfg.train.lr,
        epochs: cfg.train.epochs,
        batch_size: if cfg.train.batch_size == 0 {
            None
        } else {
            Some(cfg.train.batch_size)
        },
        mc: McConfig {
            s: cfg.train.s,
            seed: cfg.run.global_seed ^ seed,
        },
        ..TrainConfig::new(objective, class, seed)
    };
    let report = train(&data.logged, &tcfg, &data.prior, data.test.as_ref())?;
    let reward = match (&data.fig1, report.final_test_reward) {
        (_, Some(r)) => r,
        (Some(spec), None) => {
            // expected true reward of the learned policy on the known
            // non-contextual reward curve
            let p = report
                .final_params
                .propensities(&[1.0], &tcfg.mc, u64::MAX)
                .map_err(|e| config_err(e.to_string()))?;
            (0..spec.n_actions)
                .map(|a| p.probs()[a] * spec.true_reward(a))
                .sum()
        }
        (None, None) => f64::NAN,
    };
    let cell_file = out_dir.join("cells").join(format!("cell_{cell_idx:05}.json"));
    let pv: serde_json::Value = serde_json::from_str(provenance).unwrap_or_default();
    let mut json = report_json(&report, pv);
    json["cell"] = serde_json::json!({
        "index": cell_idx,
        "objective": objective_name,
        "policy_class": class_name,
        "alpha_or_tau": label,
        "seed": seed,
        "test_reward": reward,
        "logging_reward": data.log_reward,
    });
    std::fs::write(cell_file, serde_json::to_string_pretty(&json)? + "\n")?;
    Ok(reward)
}

pub fn emit_report(run_dir: &Path) -> Result<()> {
    let results = run_dir.join("results.csv");
    let text = std::fs::read_to_string(&results)
        .with_context(|| format!("reading {}", results.display()))?;
    let mut provenance = String::new();
    let mut problems: Vec<String> = Vec::new();
    // (objective, class, label, eta0) -> rewards over seeds
    let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') {
            provenance = line.trim_start_matches('#').trim().to_string();
            continue;
        }
        if lineno <= 1 && line.starts_with("eta0,") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            problems.push(format!("line {}: expected 6 fields", lineno + 1));
            continue;
        }
        match fields[5].parse::<f64>() {
            Ok(reward) => {
                groups
                    .entry((
                        fields[1].to_string(),
                        fields[2].to_string(),
                        fields[3].to_string(),
                        fields[0].to_string(),
                    ))
                    .or_default()
                    .push(reward);
            }
            Err(e) => problems.push(format!("line {}: bad reward: {e}", lineno + 1)),
        }
    }
    for p in &problems {
        eprintln!("warning: {p}");
    }

    let mut summary = String::new();
    summary.push_str(&format!("# {provenance}\n"));
    summary.push_str("objective,policy_class,alpha_or_tau,eta0,mean_reward,stderr,n_seeds\n");
    let mut curves: BTreeMap<(String, String), String> = BTreeMap::new();
    for ((objective, class, label, eta0), rewards) in &groups {
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let stderr = if rewards.len() > 1 {
            let var =
                rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        summary.push_str(&format!(
            "{objective},{class},{label},{eta0},{},{},{}\n",
            fmt_f64(mean),
            fmt_f64(stderr),
            rewards.len()
        ));
        let curve = curves.entry((objective.clone(), class.clone())).or_insert_with(|| {
            format!("# {provenance}\nalpha_or_tau,eta0,mean_reward,stderr\n")
        });
        curve.push_str(&format!(
            "{label},{eta0},{},{}\n",
            fmt_f64(mean),
            fmt_f64(stderr)
        ));
    }
    std::fs::write(run_dir.join("summary.csv"), summary)?;
    for ((objective, class), body) in &curves {
        let path = run_dir.join(format!("curve_{objective}_{class}.csv"));
        std::fs::write(&path, body)?;
    }
    println!(
        "wrote {} and {} curve files ({} problems)",
        run_dir.join("summary.csv").display(),
        curves.len(),
        problems.len()
    );
    Ok(())
}

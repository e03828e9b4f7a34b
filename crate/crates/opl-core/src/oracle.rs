//! Brute-force ground truth on small enumerable problems: exact risk, exact
//! estimator bias/variance by full enumeration over (context, action) cells
//! (and both Bernoulli cost outcomes), and coverage experiments that verify
//! bound validity by simulation.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    bias_term_b, empirical_sq_mean, main_bound, prop51_bound, second_moment_term_v, BoundConfig,
    LambdaMode,
};
use crate::data::{sample_categorical, LoggedDataset, LoggedInteraction};
use crate::error::{OplError, Result};
use crate::estimators::{estimate_risk, EstimatorSpec};
use crate::math::PROPENSITY_FLOOR;
use crate::rng::{salt, stream};

const ENUMERATION_BUDGET: usize = 10_000;

/// Cost model of an enumerable problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostNoise {
    /// Observed cost equals the table entry.
    Deterministic,
    /// Observed cost is -Bernoulli(|table entry|), in {-1, 0}.
    Bernoulli,
}

/// A finite-support contextual bandit with a known cost table.
#[derive(Debug, Clone)]
pub struct EnumerableProblem {
    /// (feature vector, probability) per context; probabilities sum to 1.
    pub contexts: Vec<(Array1<f64>, f64)>,
    pub k: usize,
    /// |X| x K expected costs in [-1, 0].
    pub cost_table: Array2<f64>,
    pub cost_noise: CostNoise,
}

impl EnumerableProblem {
    pub fn validate(&self) -> Result<()> {
        if self.contexts.is_empty() || self.k == 0 {
            return Err(OplError::EmptyDataset);
        }
        let cells = self.contexts.len() * self.k;
        if cells > ENUMERATION_BUDGET {
            return Err(OplError::EnumerationBudget {
                cells,
                budget: ENUMERATION_BUDGET,
            });
        }
        let total: f64 = self.contexts.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(OplError::InvalidArgument(format!(
                "context probabilities sum to {total}"
            )));
        }
        if self.cost_table.dim() != (self.contexts.len(), self.k) {
            return Err(OplError::DimensionMismatch("cost table shape".into()));
        }
        if self.cost_table.iter().any(|c| !(-1.0..=0.0).contains(c)) {
            return Err(OplError::InvalidArgument("costs must lie in [-1, 0]".into()));
        }
        Ok(())
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    /// E[c^2 | x, a] under the configured cost model.
    fn cost_sq(&self, x: usize, a: usize) -> f64 {
        let c = self.cost_table[(x, a)];
        match self.cost_noise {
            CostNoise::Deterministic => c * c,
            CostNoise::Bernoulli => -c,
        }
    }
}

/// The non-contextual 100-action example as an enumerable problem.
pub fn fig1_problem(spec: &crate::data::Fig1Spec) -> EnumerableProblem {
    let k = spec.n_actions;
    let mut cost_table = Array2::zeros((1, k));
    for a in 0..k {
        cost_table[(0, a)] = -spec.true_reward(a);
    }
    EnumerableProblem {
        contexts: vec![(Array1::from(vec![1.0]), 1.0)],
        k,
        cost_table,
        cost_noise: CostNoise::Bernoulli,
    }
}

/// Dirac target matrix: all mass on one action in every context.
pub fn dirac_target(n_contexts: usize, k: usize, action: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_contexts, k));
    for x in 0..n_contexts {
        m[(x, action)] = 1.0;
    }
    m
}

/// Exact risk R = sum_x nu(x) sum_a pi(a|x) c(x, a).
pub fn exact_risk(problem: &EnumerableProblem, target: &Array2<f64>) -> f64 {
    let mut r = 0.0;
    for (x, (_, nux)) in problem.contexts.iter().enumerate() {
        for a in 0..problem.k {
            r += nux * target[(x, a)] * problem.cost_table[(x, a)];
        }
    }
    r
}

/// Exact smoothed risk R^alpha = sum_x nu sum_a pi0^(1-alpha) pi c, the
/// expectation of the smoothed estimator.
pub fn exact_risk_alpha(
    problem: &EnumerableProblem,
    logging: &Array2<f64>,
    target: &Array2<f64>,
    alpha: f64,
) -> f64 {
    let mut r = 0.0;
    for (x, (_, nux)) in problem.contexts.iter().enumerate() {
        for a in 0..problem.k {
            let p0 = logging[(x, a)].max(PROPENSITY_FLOOR);
            r += nux * p0.powf(1.0 - alpha) * target[(x, a)] * problem.cost_table[(x, a)];
        }
    }
    r
}

/// Exact population second-moment term sum nu pi0^(1-2 alpha) pi E[c^2]:
/// the intractable-in-general input of the evaluation-style bound.
pub fn exact_population_sq(
    problem: &EnumerableProblem,
    logging: &Array2<f64>,
    target: &Array2<f64>,
    alpha: f64,
) -> f64 {
    let mut r = 0.0;
    for (x, (_, nux)) in problem.contexts.iter().enumerate() {
        for a in 0..problem.k {
            let p0 = logging[(x, a)].max(PROPENSITY_FLOOR);
            r += nux * p0.powf(1.0 - 2.0 * alpha) * target[(x, a)] * problem.cost_sq(x, a);
        }
    }
    r
}

/// Exact single-replicate bias and variance of the n-sample estimator mean,
/// by full enumeration over (x, a) cells and cost outcomes.
pub fn exact_bias_variance(
    problem: &EnumerableProblem,
    logging: &Array2<f64>,
    target: &Array2<f64>,
    spec: &EstimatorSpec,
    n: usize,
) -> Result<(f64, f64)> {
    problem.validate()?;
    spec.validate()?;
    if n == 0 {
        return Err(OplError::InvalidArgument("n must be >= 1".into()));
    }
    let mut mean = 0.0;
    let mut second = 0.0;
    for (x, (_, nux)) in problem.contexts.iter().enumerate() {
        for a in 0..problem.k {
            let p0_raw = logging[(x, a)];
            if p0_raw <= 0.0 {
                continue; // never logged
            }
            let p0 = p0_raw.max(PROPENSITY_FLOOR);
            let w = spec.transform(target[(x, a)], p0);
            mean += nux * p0_raw * problem.cost_table[(x, a)] * w;
            second += nux * p0_raw * problem.cost_sq(x, a) * w * w;
        }
    }
    let risk = exact_risk(problem, target);
    Ok((mean - risk, (second - mean * mean) / n as f64))
}

/// Which bound a coverage experiment checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "bound", rename_all = "snake_case")]
pub enum CoverageBound {
    /// Two-sided main bound with closed-form lambda.
    Main,
    /// Negative control: the main bound with every term halved.
    MainHalved,
    /// Evaluation-style bound; covers |R^alpha - estimate| and needs the
    /// oracle's population term.
    Prop51 { lambda: f64 },
}

/// Draws `replicates` logged datasets of size n from (nu, pi0), evaluates
/// the named bound for the fixed target policy on each, and returns the
/// fraction of replicates where the deviation stays within the bound.
#[allow(clippy::too_many_arguments)]
pub fn coverage_experiment(
    problem: &EnumerableProblem,
    logging: &Array2<f64>,
    target: &Array2<f64>,
    kl: f64,
    bound: CoverageBound,
    alpha: f64,
    delta: f64,
    n: usize,
    replicates: usize,
    seed: u64,
) -> Result<f64> {
    problem.validate()?;
    if replicates < 100 {
        return Err(OplError::InvalidArgument("replicates must be >= 100".into()));
    }
    let risk = exact_risk(problem, target);
    let risk_alpha = exact_risk_alpha(problem, logging, target, alpha);
    let population_sq = exact_population_sq(problem, logging, target, alpha);
    let nu: Vec<f64> = problem.contexts.iter().map(|(_, p)| *p).collect();
    let mut covered = 0usize;
    for r in 0..replicates {
        let mut rng = stream(seed, salt::COVERAGE, r as u64);
        let (ds, xs) = draw_logged(problem, logging, &nu, n, &mut rng)?;
        let mut target_rows = Array2::zeros((n, problem.k));
        for (i, &x) in xs.iter().enumerate() {
            target_rows.row_mut(i).assign(&target.row(x));
        }
        let at_logged: Vec<f64> = (0..n).map(|i| target_rows[(i, ds.actions()[i])]).collect();
        let est = estimate_risk(&EstimatorSpec::IpsAlpha { alpha }, &ds, &at_logged)?;
        let ok = match bound {
            CoverageBound::Main | CoverageBound::MainHalved => {
                let b = bias_term_b(alpha, &ds, &target_rows);
                let v = second_moment_term_v(alpha, &ds, &target_rows);
                let terms = main_bound(
                    est.value,
                    kl,
                    b,
                    v,
                    &BoundConfig {
                        delta,
                        alpha,
                        lambda_mode: LambdaMode::ClosedFormStar,
                        n,
                    },
                )?;
                let mut gap = terms.penalty();
                if bound == CoverageBound::MainHalved {
                    gap *= 0.5;
                }
                (risk - est.value).abs() <= gap
            }
            CoverageBound::Prop51 { lambda } => {
                let emp = empirical_sq_mean(alpha, &ds, &target_rows);
                let total =
                    prop51_bound(est.value, kl, lambda, emp, population_sq, n, delta)?;
                (risk_alpha - est.value).abs() <= total - est.value
            }
        };
        if ok {
            covered += 1;
        }
    }
    Ok(covered as f64 / replicates as f64)
}

/// Draws one logged dataset from the problem; returns it plus the context
/// index of each interaction.
pub fn draw_logged<R: Rng>(
    problem: &EnumerableProblem,
    logging: &Array2<f64>,
    nu: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<(LoggedDataset, Vec<usize>)> {
    let mut interactions = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_categorical(nu, rng);
        let row = logging.row(x);
        let a = sample_categorical(row.as_slice().unwrap(), rng);
        let cost = match problem.cost_noise {
            CostNoise::Deterministic => problem.cost_table[(x, a)],
            CostNoise::Bernoulli => {
                if rng.gen::<f64>() < -problem.cost_table[(x, a)] {
                    -1.0
                } else {
                    0.0
                }
            }
        };
        interactions.push(LoggedInteraction {
            features: problem.contexts[x].0.clone(),
            action: a,
            cost,
            logging_propensities: row.to_owned(),
        });
        xs.push(x);
    }
    Ok((LoggedDataset::from_interactions(interactions)?, xs))
}

/// Randomized enumerable instance for property suites: |X| in [1, 10],
/// K in [2, 20], Dirichlet logging and target propensities, uniform cost
/// table, optional Bernoulli noise.
pub fn random_problem(seed: u64, noise: CostNoise) -> (EnumerableProblem, Array2<f64>, Array2<f64>)
{
    let mut rng = stream(seed, salt::PROBLEM_GEN, 0);
    let n_x = rng.gen_range(1..=10);
    let k = rng.gen_range(2..=20);
    let mut nu: Vec<f64> = (0..n_x).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
    let s: f64 = nu.iter().sum();
    nu.iter_mut().for_each(|v| *v /= s);
    let mut contexts = Vec::with_capacity(n_x);
    for (x, &p) in nu.iter().enumerate() {
        let mut f = Array1::zeros(3);
        for j in 0..3 {
            f[j] = rng.gen::<f64>() - 0.5;
        }
        let norm = f.dot(&f).sqrt().max(1e-9);
        contexts.push((f / norm, if x == n_x - 1 { 0.0 } else { p }));
    }
    // make probabilities sum to exactly 1
    let partial: f64 = contexts.iter().map(|(_, p)| *p).sum();
    contexts.last_mut().unwrap().1 = 1.0 - partial;
    let mut cost_table = Array2::zeros((n_x, k));
    for c in cost_table.iter_mut() {
        *c = -rng.gen::<f64>();
    }
    let dirichlet = |rng: &mut rand_chacha::ChaCha8Rng, k: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-12).ln() + 1e-6).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    };
    let mut logging = Array2::zeros((n_x, k));
    let mut target = Array2::zeros((n_x, k));
    for x in 0..n_x {
        let l = dirichlet(&mut rng, k);
        let t = dirichlet(&mut rng, k);
        for a in 0..k {
            logging[(x, a)] = l[a];
            target[(x, a)] = t[a];
        }
    }
    (
        EnumerableProblem {
            contexts,
            k,
            cost_table,
            cost_noise: noise,
        },
        logging,
        target,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Fig1Spec;
    use crate::estimators::{bias_bound_alpha, variance_bound_alpha};

    #[test]
    fn exact_risk_reference_values() {
        let (p, _, _) = random_problem(1, CostNoise::Deterministic);
        let uniform = Array2::from_elem((p.n_contexts(), p.k), 1.0 / p.k as f64);
        let all_neg_one = EnumerableProblem {
            cost_table: Array2::from_elem((p.n_contexts(), p.k), -1.0),
            ..p.clone()
        };
        assert!((exact_risk(&all_neg_one, &uniform) + 1.0).abs() < 1e-12);

        // single context, pi = (0.8, 0.2), costs (-1, 0)
        let single = EnumerableProblem {
            contexts: vec![(Array1::from(vec![1.0]), 1.0)],
            k: 2,
            cost_table: ndarray::array![[-1.0, 0.0]],
            cost_noise: CostNoise::Deterministic,
        };
        let target = ndarray::array![[0.8, 0.2]];
        assert!((exact_risk(&single, &target) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn fig1_dirac_risks() {
        let spec = Fig1Spec::default();
        let p = fig1_problem(&spec);
        let d0 = dirac_target(1, 100, 0);
        assert!((exact_risk(&p, &d0) + 0.1).abs() < 1e-12);
        let d49 = dirac_target(1, 100, 49);
        assert!((exact_risk(&p, &d49) + 0.051).abs() < 1e-12);
    }

    #[test]
    fn ips_is_exactly_unbiased_under_absolute_continuity() {
        for seed in 0..50 {
            let (p, logging, target) = random_problem(seed, CostNoise::Deterministic);
            let (bias, var) =
                exact_bias_variance(&p, &logging, &target, &EstimatorSpec::Ips, 10).unwrap();
            assert!(bias.abs() < 1e-12, "seed {seed}: bias {bias}");
            assert!(var >= 0.0);
            let (bias_a, _) = exact_bias_variance(
                &p,
                &logging,
                &target,
                &EstimatorSpec::IpsAlpha { alpha: 1.0 },
                10,
            )
            .unwrap();
            assert!(bias_a.abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_bias_within_population_bound() {
        for seed in 0..100 {
            let (p, logging, target) = random_problem(seed, CostNoise::Deterministic);
            let nu: Vec<f64> = p.contexts.iter().map(|(_, pr)| *pr).collect();
            for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let spec = EstimatorSpec::IpsAlpha { alpha };
                let (bias, var) = exact_bias_variance(&p, &logging, &target, &spec, 7).unwrap();
                let bb = bias_bound_alpha(alpha, &nu, &logging, &target);
                let vb = variance_bound_alpha(alpha, &nu, &logging, &target, 7);
                assert!(bias.abs() <= bb + 1e-12, "seed {seed} alpha {alpha}");
                assert!(var <= vb + 1e-12, "seed {seed} alpha {alpha}");
            }
        }
    }

    #[test]
    fn fig1_min_clip_underestimates() {
        let spec = Fig1Spec::default();
        let p = fig1_problem(&spec);
        let logging = {
            let mut m = Array2::zeros((1, 100));
            m.row_mut(0).assign(&spec.logging_probs());
            m
        };
        let d0 = dirac_target(1, 100, 0);
        let (bias, _) = exact_bias_variance(
            &p,
            &logging,
            &d0,
            &EstimatorSpec::IpsMin { m: 100.0 },
            1,
        )
        .unwrap();
        // E[estimated reward] = 100 * (0.05/99) * 0.1 ~ 0.0050505 vs true 0.1
        let expected_reward = 100.0 * (0.05 / 99.0) * 0.1;
        let expected_bias = -expected_reward - (-0.1);
        assert!((bias - expected_bias).abs() < 1e-12);
        assert!((expected_reward - 0.0050505).abs() < 1e-6);
    }

    #[test]
    fn estimator_replicate_mean_converges_to_exact_mean() {
        let (p, logging, target) = random_problem(4, CostNoise::Bernoulli);
        let spec = EstimatorSpec::IpsAlpha { alpha: 0.6 };
        let n = 200;
        let (bias, var) = exact_bias_variance(&p, &logging, &target, &spec, n).unwrap();
        let exact_mean = exact_risk(&p, &target) + bias;
        let nu: Vec<f64> = p.contexts.iter().map(|(_, pr)| *pr).collect();
        let reps = 400;
        let mut total = 0.0;
        for r in 0..reps {
            let mut rng = stream(77, salt::COVERAGE, r);
            let (ds, xs) = draw_logged(&p, &logging, &nu, n, &mut rng).unwrap();
            let at_logged: Vec<f64> = (0..n).map(|i| target[(xs[i], ds.actions()[i])]).collect();
            total += estimate_risk(&spec, &ds, &at_logged).unwrap().value;
        }
        let mc_mean = total / reps as f64;
        let stderr = (var / reps as f64).sqrt();
        assert!(
            (mc_mean - exact_mean).abs() <= 4.0 * stderr,
            "mc {mc_mean} vs exact {exact_mean} (stderr {stderr})"
        );
    }

    #[test]
    fn coverage_deterministic_and_negative_control() {
        // single context, one rare heavy-weight action: deviations large
        // enough that halving the bound loses coverage
        let problem = EnumerableProblem {
            contexts: vec![(Array1::from(vec![1.0]), 1.0)],
            k: 2,
            cost_table: ndarray::array![[-1.0, 0.0]],
            cost_noise: CostNoise::Deterministic,
        };
        let logging = ndarray::array![[0.01, 0.99]];
        let target = ndarray::array![[1.0, 0.0]];
        let c1 = coverage_experiment(
            &problem,
            &logging,
            &target,
            0.0,
            CoverageBound::Main,
            1.0,
            0.05,
            1000,
            300,
            5,
        )
        .unwrap();
        let c1b = coverage_experiment(
            &problem,
            &logging,
            &target,
            0.0,
            CoverageBound::Main,
            1.0,
            0.05,
            1000,
            300,
            5,
        )
        .unwrap();
        assert_eq!(c1, c1b);
        assert!(c1 >= 0.95, "intact coverage {c1}");
        let broken = coverage_experiment(
            &problem,
            &logging,
            &target,
            0.0,
            CoverageBound::MainHalved,
            1.0,
            0.05,
            1000,
            300,
            5,
        )
        .unwrap();
        assert!(
            broken <= c1 - 0.01,
            "negative control {broken} not measurably below {c1}"
        );
    }

    #[test]
    fn prop51_population_term_and_coverage() {
        let (p, logging, target) = random_problem(21, CostNoise::Deterministic);
        let alpha = 0.7;
        let pop = exact_population_sq(&p, &logging, &target, alpha);
        // direct re-derivation
        let mut direct = 0.0;
        for (x, (_, nux)) in p.contexts.iter().enumerate() {
            for a in 0..p.k {
                direct += nux
                    * target[(x, a)]
                    * p.cost_table[(x, a)].powi(2)
                    * logging[(x, a)].powf(1.0 - 2.0 * alpha);
            }
        }
        assert!((pop - direct).abs() < 1e-12);

        let cov = coverage_experiment(
            &p,
            &logging,
            &target,
            0.0,
            CoverageBound::Prop51 { lambda: 0.05 },
            alpha,
            0.05,
            500,
            200,
            9,
        )
        .unwrap();
        assert!(cov >= 0.95, "prop51 coverage {cov}");
    }

    #[test]
    fn enumeration_budget_enforced() {
        let mut p = fig1_problem(&Fig1Spec::default());
        p.k = 101;
        let many: Vec<(Array1<f64>, f64)> = (0..100)
            .map(|_| (Array1::from(vec![1.0]), 0.01))
            .collect();
        p.contexts = many;
        p.cost_table = Array2::zeros((100, 101));
        match p.validate() {
            Err(OplError::EnumerationBudget { .. }) => {}
            other => panic!("expected budget error, got {other:?}"),
        }
    }
}

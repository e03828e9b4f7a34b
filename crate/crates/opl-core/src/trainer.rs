//! Gradient-based minimization of bound and learning-principle objectives
//! over policy parameters.
//!
//! Every objective here is a smooth function F of (a) a handful of
//! propensity-linear terms t_j = sum W_j . Pi with data-dependent weight
//! matrices W_j, and (b) the closed-form KL/L2 penalty. One fused kernel
//! pass returns the t_j values and their exact frozen-draw gradients; the
//! scalar sensitivities dF/dt_j are applied afterwards, so each step costs a
//! single sweep over the data. Draws are resampled per step and frozen
//! within a step.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    adaptive_alpha, g_exp, kl_gaussian_upper, lambda_star, sakhi2_default_grid, LambdaMode,
};
use crate::data::{evaluate_policy_reward, LoggedDataset, SupervisedDataset};
use crate::error::{OplError, Result};
use crate::estimators::EstimatorSpec;
use crate::math::{fmt_f64, fnv1a, PROPENSITY_FLOOR};
use crate::policies::{
    eval_terms_with_grads, GaussianPolicyParams, McConfig, MixedLogitParams, PolicyGrad,
    PolicyParams, SoftmaxParams, TermEval, SIGMA_MIN,
};

/// Policy class being trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyClass {
    Softmax,
    Gaussian,
    MixedLogit,
}

impl PolicyClass {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyClass::Softmax => "softmax",
            PolicyClass::Gaussian => "gaussian",
            PolicyClass::MixedLogit => "mixed_logit",
        }
    }
}

/// Smoothing exponent: fixed, or re-chosen from data every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "alpha", content = "value")]
pub enum AlphaSetting {
    Fixed(f64),
    Adaptive,
}

/// The objective being minimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Two-sided smoothed-IPS bound (estimate + sqrt(kl1/2n) + B +
    /// kl2/(n lambda) + lambda V / 2).
    Ours {
        alpha: AlphaSetting,
        delta: f64,
        lambda_mode: LambdaMode,
    },
    /// Propensity-floor baseline with the square-root empirical term.
    London { tau: f64, delta: f64 },
    /// Exponential-form baseline; lambda is learned jointly through an
    /// exp parameterization clamped at 30.
    Sakhi1 { tau: f64, delta: f64 },
    /// Bernstein-style baseline minimized over a lambda grid.
    Sakhi2 { tau: f64, delta: f64 },
    /// estimate + l1 ||mu - mu0||^2 + l2 V + l3 B, sigma frozen at 1.
    LearningPrinciple { alpha: f64, lambdas: (f64, f64, f64) },
    /// A bare risk estimate, no penalty.
    EstimatorOnly { spec: EstimatorSpec },
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Ours { .. } => "ours",
            ObjectiveKind::London { .. } => "london",
            ObjectiveKind::Sakhi1 { .. } => "sakhi1",
            ObjectiveKind::Sakhi2 { .. } => "sakhi2",
            ObjectiveKind::LearningPrinciple { .. } => "lp",
            ObjectiveKind::EstimatorOnly { .. } => "estimator",
        }
    }
}

/// Trainer configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub policy_class: PolicyClass,
    pub lr: f64,
    pub epochs: usize,
    /// None trains full batch; Some(b) takes minibatch steps of size b.
    pub batch_size: Option<usize>,
    pub mc: McConfig,
    pub seed: u64,
    /// Grid resolution for the adaptive smoothing exponent.
    pub adaptive_grid: usize,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveKind, policy_class: PolicyClass, seed: u64) -> Self {
        Self {
            objective,
            policy_class,
            lr: 0.1,
            epochs: 20,
            batch_size: None,
            mc: McConfig::default(),
            seed,
            adaptive_grid: 101,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(OplError::InvalidArgument("lr must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(OplError::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.adaptive_grid < 2 {
            return Err(OplError::InvalidArgument("adaptive_grid must be >= 2".into()));
        }
        if let Some(b) = self.batch_size {
            if b == 0 {
                return Err(OplError::InvalidArgument("batch_size must be >= 1".into()));
            }
        }
        self.mc.validate()
    }
}

/// Bias-corrected Adam state (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One in-place update. Errors on non-finite gradients.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(OplError::DimensionMismatch(format!(
                "adam state has {} entries, got params {} / grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(OplError::NonFinite(format!(
                "gradient component {i} at adam step {}",
                self.t + 1
            )));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One objective evaluation, decomposed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub total: f64,
    pub estimate: f64,
    pub kl: Option<f64>,
    pub bias: Option<f64>,
    pub second_moment: Option<f64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    /// Named additive pieces; they sum to `total`.
    pub components: Vec<(String, f64)>,
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub estimate: f64,
    pub kl: Option<f64>,
    pub bias: Option<f64>,
    pub second_moment: Option<f64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
}

/// Full training trace.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub objective_name: String,
    pub policy_class: PolicyClass,
    pub epochs: Vec<EpochRecord>,
    pub final_params: PolicyParams,
    pub final_test_reward: Option<f64>,
    /// Fingerprint of the (never updated) prior, constant across epochs.
    pub prior_hash: String,
}

impl TrainReport {
    /// Smoothing-exponent trajectory (present when the objective carries one).
    pub fn alpha_trajectory(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.alpha).collect()
    }
}

/// Stable fingerprint of policy parameters.
pub fn params_fingerprint(params: &PolicyParams) -> String {
    let mut text = String::from(params.kind_name());
    let (matrix, extra) = match params {
        PolicyParams::Softmax(p) => (&p.theta, p.inv_temperature),
        PolicyParams::Gaussian(p) => (&p.mu, p.log_sigma),
        PolicyParams::MixedLogit(p) => (&p.mu, p.log_sigma),
    };
    for v in matrix.iter() {
        text.push_str(&fmt_f64(*v));
        text.push(',');
    }
    text.push_str(&fmt_f64(extra));
    format!("{:016x}", fnv1a(text.as_bytes()))
}

// ── Weight-matrix builders ────────────────────────────────────────────

fn floored_logged_propensity(ds: &LoggedDataset, i: usize) -> f64 {
    ds.logged_propensity(i).max(PROPENSITY_FLOOR)
}

/// Estimate weights for the alpha-smoothed estimator: W[i, a_i] = c_i /
/// (n p0^alpha). `n_total` scales the mean (it may exceed the batch size
/// when minibatching).
fn w_estimate_alpha(ds: &LoggedDataset, alpha: f64, n_total: f64) -> Array2<f64> {
    let mut w = Array2::zeros((ds.n(), ds.k()));
    for i in 0..ds.n() {
        let p0 = floored_logged_propensity(ds, i);
        w[(i, ds.actions()[i])] = ds.costs()[i] / (n_total * p0.powf(alpha));
    }
    w
}

/// Estimate weights for the propensity-floor estimator: c_i / (n max(p0, tau)).
fn w_estimate_tau(ds: &LoggedDataset, tau: f64, n_total: f64) -> Array2<f64> {
    let mut w = Array2::zeros((ds.n(), ds.k()));
    for i in 0..ds.n() {
        let p0 = floored_logged_propensity(ds, i);
        w[(i, ds.actions()[i])] = ds.costs()[i] / (n_total * p0.max(tau));
    }
    w
}

/// Bias-term weights: B = 1 + sum W_B . Pi with W_B[i,a] = -p0^(1-alpha)/n.
fn w_bias(ds: &LoggedDataset, alpha: f64, n_total: f64) -> Array2<f64> {
    let p0 = ds.propensities();
    let mut w = Array2::zeros((ds.n(), ds.k()));
    for i in 0..ds.n() {
        for a in 0..ds.k() {
            w[(i, a)] = -p0[(i, a)].max(PROPENSITY_FLOOR).powf(1.0 - alpha) / n_total;
        }
    }
    w
}

/// Second-moment weights: V = sum W_V . Pi with
/// W_V[i,a] = p0^(1-2 alpha)/n plus c_i^2/(n p0^(2 alpha)) at the logged action.
fn w_second_moment(ds: &LoggedDataset, alpha: f64, n_total: f64) -> Array2<f64> {
    let p0 = ds.propensities();
    let mut w = Array2::zeros((ds.n(), ds.k()));
    for i in 0..ds.n() {
        for a in 0..ds.k() {
            w[(i, a)] = p0[(i, a)].max(PROPENSITY_FLOOR).powf(1.0 - 2.0 * alpha) / n_total;
        }
        let a_i = ds.actions()[i];
        let c = ds.costs()[i];
        w[(i, a_i)] += c * c / (n_total * floored_logged_propensity(ds, i).powf(2.0 * alpha));
    }
    w
}

/// Floored-variance weights: V_tau = sum W . Pi with
/// W[i,a] = p0 / (n max(tau, p0)^2).
fn w_v_tau(ds: &LoggedDataset, tau: f64, n_total: f64) -> Array2<f64> {
    let p0m = ds.propensities();
    let mut w = Array2::zeros((ds.n(), ds.k()));
    for i in 0..ds.n() {
        for a in 0..ds.k() {
            let p0 = p0m[(i, a)].max(PROPENSITY_FLOOR);
            let den = p0.max(tau);
            w[(i, a)] = p0 / (n_total * den * den);
        }
    }
    w
}

// ── Objective evaluation ──────────────────────────────────────────────

struct EvalOutput {
    breakdown: ObjectiveBreakdown,
    grad: Option<(PolicyGrad, f64)>, // policy grad, d/d rho (sakhi1 lambda)
}

struct Objective<'a> {
    ds: &'a LoggedDataset,
    cfg: &'a TrainConfig,
    /// Prior mean in parameter space (already inverse-temperature scaled).
    prior_mu: &'a Array2<f64>,
    sigma0: f64,
    /// Assembly sample size (full n even when evaluating a batch).
    n_total: usize,
    // cached policy-independent weight matrices for fixed alpha/tau
    w_est: Option<Array2<f64>>,
    w_b: Option<Array2<f64>>,
    w_v: Option<Array2<f64>>,
    w_vtau: Option<Array2<f64>>,
    lambda_grid: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(
        ds: &'a LoggedDataset,
        cfg: &'a TrainConfig,
        prior_mu: &'a Array2<f64>,
        n_total: usize,
    ) -> Result<Self> {
        let nf = n_total as f64;
        let mut o = Self {
            ds,
            cfg,
            prior_mu,
            sigma0: 1.0,
            n_total,
            w_est: None,
            w_b: None,
            w_v: None,
            w_vtau: None,
            lambda_grid: Vec::new(),
        };
        match &cfg.objective {
            ObjectiveKind::Ours { alpha, .. } => {
                if let AlphaSetting::Fixed(a) = alpha {
                    if !(0.0..=1.0).contains(a) {
                        return Err(OplError::InvalidArgument("alpha must be in [0,1]".into()));
                    }
                    o.w_est = Some(w_estimate_alpha(ds, *a, nf));
                    o.w_b = Some(w_bias(ds, *a, nf));
                    o.w_v = Some(w_second_moment(ds, *a, nf));
                }
            }
            ObjectiveKind::London { tau, .. } | ObjectiveKind::Sakhi1 { tau, .. } => {
                o.w_est = Some(w_estimate_tau(ds, *tau, nf));
            }
            ObjectiveKind::Sakhi2 { tau, .. } => {
                o.w_est = Some(w_estimate_tau(ds, *tau, nf));
                o.w_vtau = Some(w_v_tau(ds, *tau, nf));
                o.lambda_grid = sakhi2_default_grid(n_total);
            }
            ObjectiveKind::LearningPrinciple { alpha, .. } => {
                o.w_est = Some(w_estimate_alpha(ds, *alpha, nf));
                o.w_b = Some(w_bias(ds, *alpha, nf));
                o.w_v = Some(w_second_moment(ds, *alpha, nf));
            }
            ObjectiveKind::EstimatorOnly { spec } => spec.validate()?,
        }
        Ok(o)
    }

    fn kl_and_grad(
        &self,
        params: &PolicyParams,
        want_grad: bool,
    ) -> Result<(f64, Option<(Array2<f64>, f64)>)> {
        let (mu, sigma) = match params {
            PolicyParams::Softmax(p) => (&p.theta, self.sigma0),
            PolicyParams::Gaussian(p) => (&p.mu, p.sigma()),
            PolicyParams::MixedLogit(p) => (&p.mu, p.sigma()),
        };
        let kl = kl_gaussian_upper(mu, self.prior_mu, sigma, self.sigma0)?;
        if !want_grad {
            return Ok((kl, None));
        }
        let dmu = (mu - self.prior_mu) / (self.sigma0 * self.sigma0);
        let dls = match params {
            PolicyParams::Softmax(_) => 0.0,
            _ => -(mu.len() as f64),
        };
        Ok((kl, Some((dmu, dls))))
    }

    /// Evaluates the objective (and its gradient) at frozen draws `nonce`.
    fn eval(
        &self,
        params: &PolicyParams,
        rho: f64,
        nonce: u64,
        want_grad: bool,
    ) -> Result<EvalOutput> {
        let nf = self.n_total as f64;
        match &self.cfg.objective {
            ObjectiveKind::Ours {
                alpha,
                delta,
                lambda_mode,
            } => {
                let (alpha_val, w_est, w_b, w_v);
                let (kl, klg) = self.kl_and_grad(params, want_grad)?;
                let kl2 = kl + (4.0 / delta).ln();
                match alpha {
                    AlphaSetting::Fixed(a) => {
                        alpha_val = *a;
                        w_est = self.w_est.as_ref().unwrap().clone();
                        w_b = self.w_b.as_ref().unwrap().clone();
                        w_v = self.w_v.as_ref().unwrap().clone();
                    }
                    AlphaSetting::Adaptive => {
                        let pi = params.propensity_matrix(
                            self.ds.features(),
                            &self.cfg.mc,
                            nonce,
                        )?;
                        let (astar, _) =
                            adaptive_alpha(self.ds, &pi, kl2, self.cfg.adaptive_grid)?;
                        alpha_val = astar;
                        w_est = w_estimate_alpha(self.ds, astar, nf);
                        w_b = w_bias(self.ds, astar, nf);
                        w_v = w_second_moment(self.ds, astar, nf);
                    }
                }
                let eval = eval_terms_with_grads(
                    params,
                    self.ds.features(),
                    &[&w_est, &w_b, &w_v],
                    &self.cfg.mc,
                    nonce,
                    want_grad,
                )?;
                let estimate = eval.term_values[0];
                let bias_raw = 1.0 + eval.term_values[1];
                let bias = bias_raw.max(0.0);
                let v = eval.term_values[2];
                let kl1 = kl + (4.0 * nf.sqrt() / delta).ln();
                let lambda = match lambda_mode {
                    LambdaMode::Fixed { lambda } => *lambda,
                    LambdaMode::ClosedFormStar => lambda_star(kl2, self.n_total, v)?,
                    LambdaMode::Grid { lambdas } => {
                        let mut best = (f64::INFINITY, lambdas[0]);
                        for &l in lambdas {
                            let val = kl2 / (nf * l) + 0.5 * l * v;
                            if val < best.0 {
                                best = (val, l);
                            }
                        }
                        best.1
                    }
                };
                let sqrt_term = (kl1 / (2.0 * nf)).sqrt();
                let kl2_term = kl2 / (nf * lambda);
                let v_term = 0.5 * lambda * v;
                let total = estimate + sqrt_term + bias + kl2_term + v_term;
                let grad = if want_grad {
                    let mut g = eval.term_grads[0].clone();
                    if bias_raw > 0.0 {
                        g.scaled_add(1.0, &eval.term_grads[1]);
                    }
                    g.scaled_add(0.5 * lambda, &eval.term_grads[2]);
                    let (dmu, dls) = klg.unwrap();
                    let dkl = 1.0 / (2.0 * (2.0 * nf * kl1).sqrt()) + 1.0 / (nf * lambda);
                    g.mu.scaled_add(dkl, &dmu);
                    g.log_sigma += dkl * dls;
                    Some((g, 0.0))
                } else {
                    None
                };
                Ok(EvalOutput {
                    breakdown: ObjectiveBreakdown {
                        total,
                        estimate,
                        kl: Some(kl),
                        bias: Some(bias),
                        second_moment: Some(v),
                        lambda: Some(lambda),
                        alpha: Some(alpha_val),
                        components: vec![
                            ("estimate".into(), estimate),
                            ("kl1_sqrt".into(), sqrt_term),
                            ("bias".into(), bias),
                            ("kl2_over_n_lambda".into(), kl2_term),
                            ("lambda_v_half".into(), v_term),
                        ],
                    },
                    grad,
                })
            }
            ObjectiveKind::London { tau, delta } => {
                let (kl, klg) = self.kl_and_grad(params, want_grad)?;
                let eval = self.run_terms(params, nonce, want_grad, &[self.w_est.as_ref().unwrap()])?;
                let estimate = eval.term_values[0];
                let kln = kl + (nf / delta).ln();
                let denom = tau * (nf - 1.0);
                let arg = 2.0 * (estimate + 1.0 / tau) * kln / denom;
                let sq = arg.max(0.0).sqrt();
                let lin = 2.0 * kln / denom;
                let total = estimate + sq + lin;
                let grad = if want_grad {
                    let s_est = 1.0 + if sq > 0.0 { kln / (denom * sq) } else { 0.0 };
                    let mut g = PolicyGrad::zeros(eval.term_grads[0].mu.nrows(), eval.term_grads[0].mu.ncols());
                    g.scaled_add(s_est, &eval.term_grads[0]);
                    let dkl = if sq > 0.0 {
                        (estimate + 1.0 / tau) / (denom * sq)
                    } else {
                        0.0
                    } + 2.0 / denom;
                    let (dmu, dls) = klg.unwrap();
                    g.mu.scaled_add(dkl, &dmu);
                    g.log_sigma += dkl * dls;
                    Some((g, 0.0))
                } else {
                    None
                };
                Ok(EvalOutput {
                    breakdown: ObjectiveBreakdown {
                        total,
                        estimate,
                        kl: Some(kl),
                        bias: None,
                        second_moment: None,
                        lambda: None,
                        alpha: Some(*tau),
                        components: vec![
                            ("estimate".into(), estimate),
                            ("sqrt_term".into(), sq),
                            ("linear_term".into(), lin),
                        ],
                    },
                    grad,
                })
            }
            ObjectiveKind::Sakhi1 { tau, delta } => {
                let (kl, klg) = self.kl_and_grad(params, want_grad)?;
                let eval = self.run_terms(params, nonce, want_grad, &[self.w_est.as_ref().unwrap()])?;
                let estimate = eval.term_values[0];
                let clamped = rho.exp() > 30.0;
                let lambda = rho.exp().min(30.0);
                let a_exp = -tau * lambda * estimate + (kl + (2.0 * nf.sqrt() / delta).ln()) / nf;
                let ea = a_exp.exp();
                let c = 1.0 / (tau * (lambda.exp() - 1.0));
                let total = c * (1.0 - ea);
                let grad = if want_grad {
                    let s_est = c * tau * lambda * ea;
                    let mut g = PolicyGrad::zeros(eval.term_grads[0].mu.nrows(), eval.term_grads[0].mu.ncols());
                    g.scaled_add(s_est, &eval.term_grads[0]);
                    let dkl = -c * ea / nf;
                    let (dmu, dls) = klg.unwrap();
                    g.mu.scaled_add(dkl, &dmu);
                    g.log_sigma += dkl * dls;
                    let dc = -lambda.exp() / (tau * (lambda.exp() - 1.0).powi(2));
                    let dtotal_dlambda = dc * (1.0 - ea) + c * tau * estimate * ea;
                    let drho = if clamped { 0.0 } else { dtotal_dlambda * lambda };
                    Some((g, drho))
                } else {
                    None
                };
                Ok(EvalOutput {
                    breakdown: ObjectiveBreakdown {
                        total,
                        estimate,
                        kl: Some(kl),
                        bias: None,
                        second_moment: None,
                        lambda: Some(lambda),
                        alpha: Some(*tau),
                        components: vec![
                            ("estimate".into(), estimate),
                            ("exp_penalty".into(), total - estimate),
                        ],
                    },
                    grad,
                })
            }
            ObjectiveKind::Sakhi2 { tau, delta } => {
                let (kl, klg) = self.kl_and_grad(params, want_grad)?;
                let eval = self.run_terms(
                    params,
                    nonce,
                    want_grad,
                    &[self.w_est.as_ref().unwrap(), self.w_vtau.as_ref().unwrap()],
                )?;
                let estimate = eval.term_values[0];
                let v_tau = eval.term_values[1];
                let kl_sqrt = kl + (4.0 * nf.sqrt() / delta).ln();
                let n_lambda = self.lambda_grid.len() as f64;
                let kl_lin = kl + (2.0 * n_lambda / delta).ln();
                let mut best = (f64::INFINITY, self.lambda_grid[0]);
                for &l in &self.lambda_grid {
                    let t = kl_lin / l + (l / nf) * g_exp(l / (tau * nf)) * v_tau;
                    if t < best.0 {
                        best = (t, l);
                    }
                }
                let lambda = best.1;
                let sqrt_term = (kl_sqrt / (2.0 * nf)).sqrt();
                let lin_term = kl_lin / lambda;
                let v_coef = (lambda / nf) * g_exp(lambda / (tau * nf));
                let v_term = v_coef * v_tau;
                let total = estimate + sqrt_term + lin_term + v_term;
                let grad = if want_grad {
                    let mut g = eval.term_grads[0].clone();
                    g.scaled_add(v_coef, &eval.term_grads[1]);
                    let dkl = 1.0 / (2.0 * (2.0 * nf * kl_sqrt).sqrt()) + 1.0 / lambda;
                    let (dmu, dls) = klg.unwrap();
                    g.mu.scaled_add(dkl, &dmu);
                    g.log_sigma += dkl * dls;
                    Some((g, 0.0))
                } else {
                    None
                };
                Ok(EvalOutput {
                    breakdown: ObjectiveBreakdown {
                        total,
                        estimate,
                        kl: Some(kl),
                        bias: None,
                        second_moment: Some(v_tau),
                        lambda: Some(lambda),
                        alpha: Some(*tau),
                        components: vec![
                            ("estimate".into(), estimate),
                            ("sqrt_term".into(), sqrt_term),
                            ("kl_over_lambda".into(), lin_term),
                            ("variance_term".into(), v_term),
                        ],
                    },
                    grad,
                })
            }
            ObjectiveKind::LearningPrinciple { alpha, lambdas } => {
                let (l1, l2, l3) = *lambdas;
                let eval = self.run_terms(
                    params,
                    nonce,
                    want_grad,
                    &[
                        self.w_est.as_ref().unwrap(),
                        self.w_b.as_ref().unwrap(),
                        self.w_v.as_ref().unwrap(),
                    ],
                )?;
                let estimate = eval.term_values[0];
                let bias_raw = 1.0 + eval.term_values[1];
                let bias = bias_raw.max(0.0);
                let v = eval.term_values[2];
                let mu = match params {
                    PolicyParams::Softmax(p) => &p.theta,
                    PolicyParams::Gaussian(p) => &p.mu,
                    PolicyParams::MixedLogit(p) => &p.mu,
                };
                let diff = mu - self.prior_mu;
                let l2_dist = diff.iter().map(|v| v * v).sum::<f64>();
                let total = estimate + l1 * l2_dist + l2 * v + l3 * bias;
                let grad = if want_grad {
                    let mut g = eval.term_grads[0].clone();
                    if bias_raw > 0.0 {
                        g.scaled_add(l3, &eval.term_grads[1]);
                    }
                    g.scaled_add(l2, &eval.term_grads[2]);
                    g.mu.scaled_add(2.0 * l1, &diff);
                    // sigma frozen for the learning principle
                    g.log_sigma = 0.0;
                    Some((g, 0.0))
                } else {
                    None
                };
                Ok(EvalOutput {
                    breakdown: ObjectiveBreakdown {
                        total,
                        estimate,
                        kl: None,
                        bias: Some(bias),
                        second_moment: Some(v),
                        lambda: None,
                        alpha: Some(*alpha),
                        components: vec![
                            ("estimate".into(), estimate),
                            ("l2_term".into(), l1 * l2_dist),
                            ("variance_term".into(), l2 * v),
                            ("bias_term".into(), l3 * bias),
                        ],
                    },
                    grad,
                })
            }
            ObjectiveKind::EstimatorOnly { spec } => {
                let pi = params.propensity_matrix(self.ds.features(), &self.cfg.mc, nonce)?;
                let n = self.ds.n();
                let mut w = Array2::zeros((n, self.ds.k()));
                let mut estimate = 0.0;
                for i in 0..n {
                    let a_i = self.ds.actions()[i];
                    let p0 = floored_logged_propensity(self.ds, i);
                    let c = self.ds.costs()[i];
                    estimate += c * spec.transform(pi[(i, a_i)], p0);
                    w[(i, a_i)] = c * spec.transform_dpi(pi[(i, a_i)], p0) / nf;
                }
                estimate /= nf;
                let grad = if want_grad {
                    let eval = eval_terms_with_grads(
                        params,
                        self.ds.features(),
                        &[&w],
                        &self.cfg.mc,
                        nonce,
                        true,
                    )?;
                    Some((eval.term_grads.into_iter().next().unwrap(), 0.0))
                } else {
                    None
                };
                Ok(EvalOutput {
                    breakdown: ObjectiveBreakdown {
                        total: estimate,
                        estimate,
                        kl: None,
                        bias: None,
                        second_moment: None,
                        lambda: None,
                        alpha: None,
                        components: vec![("estimate".into(), estimate)],
                    },
                    grad,
                })
            }
        }
    }

    fn run_terms(
        &self,
        params: &PolicyParams,
        nonce: u64,
        want_grad: bool,
        weights: &[&Array2<f64>],
    ) -> Result<TermEval> {
        eval_terms_with_grads(
            params,
            self.ds.features(),
            weights,
            &self.cfg.mc,
            nonce,
            want_grad,
        )
    }
}

// ── Parameter packing ─────────────────────────────────────────────────

fn init_params(class: PolicyClass, prior_mu: &Array2<f64>) -> PolicyParams {
    match class {
        PolicyClass::Softmax => {
            PolicyParams::Softmax(SoftmaxParams::new(prior_mu.clone(), 1.0).unwrap())
        }
        PolicyClass::Gaussian => {
            PolicyParams::Gaussian(GaussianPolicyParams::new(prior_mu.clone(), 0.0).unwrap())
        }
        PolicyClass::MixedLogit => {
            PolicyParams::MixedLogit(MixedLogitParams::new(prior_mu.clone(), 0.0).unwrap())
        }
    }
}

fn pack(params: &PolicyParams, rho: f64, has_rho: bool) -> Vec<f64> {
    let (matrix, ls) = match params {
        PolicyParams::Softmax(p) => (&p.theta, None),
        PolicyParams::Gaussian(p) => (&p.mu, Some(p.log_sigma)),
        PolicyParams::MixedLogit(p) => (&p.mu, Some(p.log_sigma)),
    };
    let mut flat: Vec<f64> = matrix.iter().copied().collect();
    if let Some(ls) = ls {
        flat.push(ls);
    }
    if has_rho {
        flat.push(rho);
    }
    flat
}

fn pack_grad(g: &PolicyGrad, class: PolicyClass, drho: f64, has_rho: bool) -> Vec<f64> {
    let mut flat: Vec<f64> = g.mu.iter().copied().collect();
    if class != PolicyClass::Softmax {
        flat.push(g.log_sigma);
    }
    if has_rho {
        flat.push(drho);
    }
    flat
}

fn unpack(
    class: PolicyClass,
    k: usize,
    d: usize,
    flat: &[f64],
    has_rho: bool,
) -> (PolicyParams, f64) {
    let matrix = Array2::from_shape_vec((k, d), flat[..k * d].to_vec()).unwrap();
    let mut idx = k * d;
    let params = match class {
        PolicyClass::Softmax => PolicyParams::Softmax(SoftmaxParams::new(matrix, 1.0).unwrap()),
        PolicyClass::Gaussian => {
            let ls = flat[idx];
            idx += 1;
            PolicyParams::Gaussian(GaussianPolicyParams::new(matrix, ls).unwrap())
        }
        PolicyClass::MixedLogit => {
            let ls = flat[idx];
            idx += 1;
            PolicyParams::MixedLogit(MixedLogitParams::new(matrix, ls).unwrap())
        }
    };
    let rho = if has_rho { flat[idx] } else { 0.0 };
    (params, rho)
}

/// Prior mean matrix: the inverse-temperature-scaled parameters for a
/// softmax prior, the raw mean otherwise.
pub fn prior_mean(prior: &PolicyParams) -> Array2<f64> {
    match prior {
        PolicyParams::Softmax(p) => p.scaled_theta(),
        PolicyParams::Gaussian(p) => p.mu.clone(),
        PolicyParams::MixedLogit(p) => p.mu.clone(),
    }
}

/// Single forward evaluation with frozen draws (nonce 0); matches the first
/// epoch value logged by `train` under the same seed.
pub fn objective_eval(
    ds: &LoggedDataset,
    params: &PolicyParams,
    cfg: &TrainConfig,
    prior: &PolicyParams,
) -> Result<ObjectiveBreakdown> {
    cfg.validate()?;
    let prior_mu = prior_mean(prior);
    let objective = Objective::new(ds, cfg, &prior_mu, ds.n())?;
    let out = objective.eval(params, 0.0, 0, false)?;
    Ok(out.breakdown)
}

/// Objective value and its exact frozen-draw gradient at the given draw
/// nonce. The same draws evaluated at bumped parameters reproduce the
/// gradient by finite differences. (For the jointly-optimized exponential
/// baseline the internal lambda is held at 1.)
pub fn objective_value_and_grad(
    ds: &LoggedDataset,
    params: &PolicyParams,
    cfg: &TrainConfig,
    prior: &PolicyParams,
    nonce: u64,
) -> Result<(ObjectiveBreakdown, PolicyGrad)> {
    cfg.validate()?;
    let prior_mu = prior_mean(prior);
    let objective = Objective::new(ds, cfg, &prior_mu, ds.n())?;
    let out = objective.eval(params, 0.0, nonce, true)?;
    Ok((out.breakdown, out.grad.unwrap().0))
}

/// Forward evaluation at an explicit draw nonce (no gradient).
pub fn objective_eval_at(
    ds: &LoggedDataset,
    params: &PolicyParams,
    cfg: &TrainConfig,
    prior: &PolicyParams,
    nonce: u64,
) -> Result<ObjectiveBreakdown> {
    cfg.validate()?;
    let prior_mu = prior_mean(prior);
    let objective = Objective::new(ds, cfg, &prior_mu, ds.n())?;
    let out = objective.eval(params, 0.0, nonce, false)?;
    Ok(out.breakdown)
}

/// Trains a policy by Adam on the configured objective. The prior is fixed;
/// learnable parameters start at the prior mean with sigma = 1. When `test`
/// is given, the returned report carries the final test reward.
pub fn train(
    ds: &LoggedDataset,
    cfg: &TrainConfig,
    prior: &PolicyParams,
    test: Option<&SupervisedDataset>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let prior_mu = prior_mean(prior);
    let (k, d) = (prior_mu.nrows(), prior_mu.ncols());
    if k != ds.k() || d != ds.d() {
        return Err(OplError::DimensionMismatch(format!(
            "prior is ({k}, {d}), dataset is ({}, {})",
            ds.k(),
            ds.d()
        )));
    }
    let has_rho = matches!(cfg.objective, ObjectiveKind::Sakhi1 { .. });
    let bound_objective = !matches!(
        cfg.objective,
        ObjectiveKind::EstimatorOnly { .. } | ObjectiveKind::LearningPrinciple { .. }
    );
    let prior_hash = params_fingerprint(prior);

    let mut params = init_params(cfg.policy_class, &prior_mu);
    let mut rho = 0.0;
    let mut flat = pack(&params, rho, has_rho);
    let mut adam = AdamState::new(flat.len());
    let mut records = Vec::with_capacity(cfg.epochs);

    let full = Objective::new(ds, cfg, &prior_mu, ds.n())?;

    // minibatch assignment is reshuffled per epoch with a seeded stream
    let batches: Option<usize> = cfg.batch_size.filter(|&b| b < ds.n());

    for epoch in 0..cfg.epochs {
        match batches {
            None => {
                let out = full.eval(&params, rho, epoch as u64, true)?;
                if !out.breakdown.total.is_finite() {
                    return Err(OplError::NonFinite(format!(
                        "objective at epoch {epoch} (last finite epoch {})",
                        epoch.saturating_sub(1)
                    )));
                }
                records.push(record_from(epoch, &out.breakdown));
                let (g, drho) = out.grad.unwrap();
                let gflat = pack_grad(&g, cfg.policy_class, drho, has_rho);
                adam.step(&mut flat, &gflat, cfg.lr)?;
            }
            Some(b) => {
                // record the full-data objective before this epoch's steps
                let probe = full.eval(&params, rho, epoch as u64, false)?;
                records.push(record_from(epoch, &probe.breakdown));
                let mut order: Vec<usize> = (0..ds.n()).collect();
                let mut rng = crate::rng::stream(cfg.seed, 0x6a7c, epoch as u64);
                for i in (1..order.len()).rev() {
                    let j = rand::Rng::gen_range(&mut rng, 0..=i);
                    order.swap(i, j);
                }
                for (bi, chunk) in order.chunks(b).enumerate() {
                    let sub = LoggedDataset::from_interactions(
                        chunk.iter().map(|&i| ds.interaction(i)).collect(),
                    )?;
                    let obj = Objective::new(&sub, cfg, &prior_mu, ds.n())?;
                    let nonce = (epoch as u64) * 100_003 + bi as u64 + 1;
                    let out = obj.eval(&params, rho, nonce, true)?;
                    if !out.breakdown.total.is_finite() {
                        return Err(OplError::NonFinite(format!(
                            "objective at epoch {epoch} batch {bi}"
                        )));
                    }
                    let (g, drho) = out.grad.unwrap();
                    let gflat = pack_grad(&g, cfg.policy_class, drho, has_rho);
                    adam.step(&mut flat, &gflat, cfg.lr)?;
                    let clamped = clamp_flat(&flat, cfg.policy_class, k, d, bound_objective);
                    flat = clamped;
                    let up = unpack(cfg.policy_class, k, d, &flat, has_rho);
                    params = up.0;
                    rho = up.1;
                }
                continue;
            }
        }
        let clamped = clamp_flat(&flat, cfg.policy_class, k, d, bound_objective);
        flat = clamped;
        let up = unpack(cfg.policy_class, k, d, &flat, has_rho);
        params = up.0;
        rho = up.1;
    }

    let final_test_reward = match test {
        Some(t) => Some(evaluate_policy_reward(t, &params, cfg.seed ^ 0x7e57, 1)?),
        None => None,
    };
    Ok(TrainReport {
        objective_name: cfg.objective.name().to_string(),
        policy_class: cfg.policy_class,
        epochs: records,
        final_params: params,
        final_test_reward,
        prior_hash,
    })
}

/// Keeps sigma inside its clamp range; bound objectives additionally cap
/// sigma at sigma0 = 1 so the KL upper bound stays valid.
fn clamp_flat(
    flat: &[f64],
    class: PolicyClass,
    k: usize,
    d: usize,
    bound_objective: bool,
) -> Vec<f64> {
    let mut out = flat.to_vec();
    if class != PolicyClass::Softmax {
        let hi = if bound_objective { 0.0 } else { SIGMA_MIN.recip().ln() };
        out[k * d] = out[k * d].clamp(SIGMA_MIN.ln(), hi);
    }
    out
}

fn record_from(epoch: usize, b: &ObjectiveBreakdown) -> EpochRecord {
    EpochRecord {
        epoch,
        total: b.total,
        estimate: b.estimate,
        kl: b.kl,
        bias: b.bias,
        second_moment: b.second_moment,
        lambda: b.lambda,
        alpha: b.alpha,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{convert_to_bandit, generate_blobs, BlobSpec};
    use crate::policies::fit_logging_policy;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut adam = AdamState::new(3);
        adam.step(&mut p, &[0.0, 0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![1.0, 1.0];
        let mut adam = AdamState::new(2);
        for _ in 0..200 {
            let g: Vec<f64> = p.iter().map(|&x| 2.0 * x).collect();
            adam.step(&mut p, &g, 0.1).unwrap();
        }
        let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
        assert!(norm <= 1e-3, "|x| = {norm}");
    }

    #[test]
    fn adam_layout_invariant() {
        // same scalars, flattened two ways: updates are elementwise
        let grads = [0.3, -0.7, 0.05, 2.0];
        let mut a = vec![0.5; 4];
        let mut b = vec![0.5; 4];
        let mut sa = AdamState::new(4);
        let mut sb = AdamState::new(4);
        sa.step(&mut a, &grads, 0.1).unwrap();
        let perm = [2, 0, 3, 1];
        let gp: Vec<f64> = perm.iter().map(|&i| grads[i]).collect();
        sb.step(&mut b, &gp, 0.1).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            assert_eq!(a[pi], b[i]);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = vec![0.0];
        let mut adam = AdamState::new(1);
        match adam.step(&mut p, &[f64::NAN], 0.1) {
            Err(OplError::NonFinite(_)) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    fn small_logged(seed: u64) -> (LoggedDataset, PolicyParams, SupervisedDataset) {
        let spec = BlobSpec {
            k: 4,
            d: 5,
            n: 400,
            class_sep: 3.5,
            noise_sd: 0.5,
            seed,
        };
        let ds = generate_blobs(&spec).unwrap();
        let fit = fit_logging_policy(&ds, 0.4, 0.05, seed).unwrap();
        let logging = PolicyParams::Softmax(fit.params);
        let logged = convert_to_bandit(&ds, &logging, &McConfig::default(), seed).unwrap();
        (logged, logging, ds)
    }

    fn ours_cfg(class: PolicyClass, seed: u64) -> TrainConfig {
        TrainConfig {
            mc: McConfig { s: 8, seed },
            epochs: 5,
            ..TrainConfig::new(
                ObjectiveKind::Ours {
                    alpha: AlphaSetting::Fixed(0.8),
                    delta: 0.05,
                    lambda_mode: LambdaMode::ClosedFormStar,
                },
                class,
                seed,
            )
        }
    }

    #[test]
    fn train_is_deterministic_and_prior_hash_constant() {
        let (logged, logging, sup) = small_logged(3);
        let cfg = ours_cfg(PolicyClass::Gaussian, 5);
        let a = train(&logged, &cfg, &logging, Some(&sup)).unwrap();
        let b = train(&logged, &cfg, &logging, Some(&sup)).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.final_test_reward, b.final_test_reward);
        assert_eq!(a.prior_hash, b.prior_hash);
        assert_eq!(a.prior_hash, params_fingerprint(&logging));
        assert_eq!(a.epochs.len(), 5);
        for (ra, rb) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(ra.total, rb.total);
        }
    }

    #[test]
    fn objective_eval_matches_first_epoch() {
        let (logged, logging, _) = small_logged(4);
        for class in [PolicyClass::Softmax, PolicyClass::Gaussian, PolicyClass::MixedLogit] {
            let cfg = ours_cfg(class, 6);
            let report = train(&logged, &cfg, &logging, None).unwrap();
            let prior_mu = prior_mean(&logging);
            let init = init_params(class, &prior_mu);
            let eval = objective_eval(&logged, &init, &cfg, &logging).unwrap();
            assert!(
                (eval.total - report.epochs[0].total).abs() < 1e-12,
                "{class:?}: {} vs {}",
                eval.total,
                report.epochs[0].total
            );
        }
    }

    #[test]
    fn breakdown_components_sum_to_total() {
        let (logged, logging, _) = small_logged(5);
        let prior_mu = prior_mean(&logging);
        for objective in [
            ObjectiveKind::Ours {
                alpha: AlphaSetting::Fixed(0.7),
                delta: 0.05,
                lambda_mode: LambdaMode::ClosedFormStar,
            },
            ObjectiveKind::London { tau: 0.1, delta: 0.05 },
            ObjectiveKind::Sakhi1 { tau: 0.1, delta: 0.05 },
            ObjectiveKind::Sakhi2 { tau: 0.1, delta: 0.05 },
            ObjectiveKind::LearningPrinciple {
                alpha: 0.9,
                lambdas: (1e-5, 1e-5, 1e-5),
            },
            ObjectiveKind::EstimatorOnly {
                spec: EstimatorSpec::IpsMin { m: 100.0 },
            },
        ] {
            let cfg = TrainConfig {
                mc: McConfig { s: 8, seed: 1 },
                ..TrainConfig::new(objective, PolicyClass::Gaussian, 7)
            };
            let init = init_params(PolicyClass::Gaussian, &prior_mu);
            let b = objective_eval(&logged, &init, &cfg, &logging).unwrap();
            let sum: f64 = b.components.iter().map(|(_, v)| v).sum();
            assert!(
                (sum - b.total).abs() < 1e-12,
                "{}: components sum {sum} != total {}",
                cfg.objective.name(),
                b.total
            );
        }
    }

    #[test]
    fn penalty_dominated_regime_stays_near_prior() {
        // tiny n and a small fixed lambda: kl2/(n lambda) dominates, so mu
        // barely moves from the prior mean
        let (logged_full, logging, _) = small_logged(6);
        let sub = LoggedDataset::from_interactions(
            (0..20).map(|i| logged_full.interaction(i)).collect(),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            lr: 0.01,
            mc: McConfig { s: 8, seed: 2 },
            ..TrainConfig::new(
                ObjectiveKind::Ours {
                    alpha: AlphaSetting::Fixed(0.8),
                    delta: 0.05,
                    lambda_mode: LambdaMode::Fixed { lambda: 1e-3 },
                },
                PolicyClass::Gaussian,
                8,
            )
        };
        let report = train(&sub, &cfg, &logging, None).unwrap();
        let prior_mu = prior_mean(&logging);
        let learned = match &report.final_params {
            PolicyParams::Gaussian(p) => p.mu.clone(),
            _ => unreachable!(),
        };
        let diff = &learned - &prior_mu;
        let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dist <= 0.1, "moved {dist} from the prior");
    }

    /// Manual gradient-descent step along the analytic gradient shrinks the
    /// frozen-draw objective by lr * ||g||^2 up to curvature.
    #[test]
    fn descent_direction_sanity() {
        let (logged, logging, _) = small_logged(7);
        let prior_mu = prior_mean(&logging);
        let cfg = ours_cfg(PolicyClass::MixedLogit, 9);
        let objective = Objective::new(&logged, &cfg, &prior_mu, logged.n()).unwrap();
        let params = match init_params(PolicyClass::MixedLogit, &prior_mu) {
            PolicyParams::MixedLogit(mut p) => {
                p.log_sigma = -0.3;
                p.mu[(0, 0)] += 0.2;
                PolicyParams::MixedLogit(p)
            }
            _ => unreachable!(),
        };
        let out = objective.eval(&params, 0.0, 5, true).unwrap();
        let (g, _) = out.grad.unwrap();
        let gflat = pack_grad(&g, PolicyClass::MixedLogit, 0.0, false);
        let mut flat = pack(&params, 0.0, false);
        let lr = 1e-4;
        let gnorm2: f64 = gflat.iter().map(|v| v * v).sum();
        for (p, gi) in flat.iter_mut().zip(&gflat) {
            *p -= lr * gi;
        }
        let (moved, _) = unpack(PolicyClass::MixedLogit, logged.k(), logged.d(), &flat, false);
        let after = objective.eval(&moved, 0.0, 5, false).unwrap();
        let expected_drop = lr * gnorm2;
        let actual_drop = out.breakdown.total - after.breakdown.total;
        assert!(
            (actual_drop - expected_drop).abs() <= 0.2 * expected_drop,
            "drop {actual_drop} vs expected {expected_drop}"
        );
    }

    /// Frozen-draw finite differences of the full objective match the
    /// analytic gradient.
    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let (logged, logging, _) = small_logged(8);
        let prior_mu = prior_mean(&logging);
        for class in [PolicyClass::Softmax, PolicyClass::Gaussian, PolicyClass::MixedLogit] {
            let cfg = TrainConfig {
                mc: McConfig { s: 4, seed: 11 },
                ..ours_cfg(class, 10)
            };
            let objective = Objective::new(&logged, &cfg, &prior_mu, logged.n()).unwrap();
            // move slightly off the prior so KL gradients are nonzero
            let mut params = init_params(class, &prior_mu);
            match &mut params {
                PolicyParams::Softmax(p) => p.theta[(0, 0)] += 0.3,
                PolicyParams::Gaussian(p) => {
                    p.mu[(0, 0)] += 0.3;
                    p.log_sigma = -0.2;
                }
                PolicyParams::MixedLogit(p) => {
                    p.mu[(0, 0)] += 0.3;
                    p.log_sigma = -0.2;
                }
            }
            let out = objective.eval(&params, 0.0, 3, true).unwrap();
            let (g, _) = out.grad.unwrap();
            let gflat = pack_grad(&g, class, 0.0, false);
            let flat = pack(&params, 0.0, false);
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            for idx in 0..flat.len() {
                let mut plus = flat.clone();
                plus[idx] += h;
                let mut minus = flat.clone();
                minus[idx] -= h;
                let (pp, _) = unpack(class, logged.k(), logged.d(), &plus, false);
                let (pm, _) = unpack(class, logged.k(), logged.d(), &minus, false);
                let fp = objective.eval(&pp, 0.0, 3, false).unwrap().breakdown.total;
                let fm = objective.eval(&pm, 0.0, 3, false).unwrap().breakdown.total;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - gflat[idx]).abs() / fd.abs().max(gflat[idx].abs()).max(1.0);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel <= 1e-3, "{class:?}: max rel err {max_rel}");
        }
    }

    #[test]
    fn adaptive_alpha_trajectory_on_grid() {
        let (logged, logging, _) = small_logged(9);
        let cfg = TrainConfig {
            epochs: 4,
            mc: McConfig { s: 8, seed: 3 },
            adaptive_grid: 21,
            ..TrainConfig::new(
                ObjectiveKind::Ours {
                    alpha: AlphaSetting::Adaptive,
                    delta: 0.05,
                    lambda_mode: LambdaMode::ClosedFormStar,
                },
                PolicyClass::Gaussian,
                11,
            )
        };
        let report = train(&logged, &cfg, &logging, None).unwrap();
        for alpha in report.alpha_trajectory() {
            let a = alpha.expect("adaptive objective records alpha");
            let snapped = (a * 20.0).round() / 20.0;
            assert!((a - snapped).abs() < 1e-12, "alpha {a} off the grid");
        }
    }

    #[test]
    fn minibatch_training_runs_and_is_deterministic() {
        let (logged, logging, _) = small_logged(10);
        let cfg = TrainConfig {
            batch_size: Some(64),
            epochs: 3,
            mc: McConfig { s: 4, seed: 5 },
            ..ours_cfg(PolicyClass::Gaussian, 12)
        };
        let a = train(&logged, &cfg, &logging, None).unwrap();
        let b = train(&logged, &cfg, &logging, None).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.epochs.len(), 3);
    }
}

//! Parametric stochastic policy classes: exact softmax, Gaussian-perturbed
//! argmax, and mixed-logit (Gaussian + Gumbel) policies, with propensity
//! evaluation (exact or Monte Carlo), action sampling, and pathwise gradients
//! of propensity-weighted objectives.
//!
//! Monte Carlo draws come from counter-addressed streams keyed by
//! `(seed, nonce, datum index)`: fresh draws per optimizer step (new nonce),
//! frozen draws within a single value + gradient evaluation, so analytic
//! gradients match finite differences of the frozen-draw estimate.

mod fit;
mod kernel;

pub use fit::{fit_logging_policy, LoggingFit};
pub use kernel::{eval_terms_with_grads, weighted_propensity_objective_grad, TermEval};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OplError, Result};
use crate::math::{fmt_f64, softmax_into};
use crate::rng::gumbel;

/// Clamp range for the policy noise scale sigma = exp(log_sigma).
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e3;

/// Monte Carlo configuration for propensity estimation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McConfig {
    /// Draw count per propensity evaluation.
    pub s: usize,
    /// Stream key; combined with a per-step nonce and the datum index.
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { s: 32, seed: 0 }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(OplError::InvalidArgument("mc draw count must be >= 1".into()));
        }
        Ok(())
    }
}

/// A probability vector over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityVector {
    probs: Vec<f64>,
}

impl PropensityVector {
    /// Validates entries >= 0 and sum within `tol` of 1.
    pub fn new(probs: Vec<f64>, tol: f64) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(OplError::NonFinite("propensity entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(OplError::InvalidArgument(format!(
                "propensity vector sums to {sum}, expected 1 within {tol}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

/// Linear softmax policy: pi(a|x) = softmax(eta * theta x)_a.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxParams {
    pub theta: Array2<f64>,
    pub inv_temperature: f64,
}

impl SoftmaxParams {
    pub fn new(theta: Array2<f64>, inv_temperature: f64) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) || !inv_temperature.is_finite() {
            return Err(OplError::NonFinite("softmax parameters".into()));
        }
        Ok(Self {
            theta,
            inv_temperature,
        })
    }

    /// Effective parameter matrix eta * theta; the mean of the matching prior.
    pub fn scaled_theta(&self) -> Array2<f64> {
        &self.theta * self.inv_temperature
    }
}

/// Gaussian policy: aggregate of argmax rules under theta ~ N(mu, sigma^2 I).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyParams {
    pub mu: Array2<f64>,
    pub log_sigma: f64,
}

/// Mixed-logit policy: argmax rules under theta ~ N(mu, sigma^2 I) plus
/// standard Gumbel noise on each action score.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedLogitParams {
    pub mu: Array2<f64>,
    pub log_sigma: f64,
}

fn check_mu(mu: &Array2<f64>, log_sigma: f64) -> Result<()> {
    if mu.iter().any(|v| !v.is_finite()) || !log_sigma.is_finite() {
        return Err(OplError::NonFinite("policy parameters".into()));
    }
    Ok(())
}

impl GaussianPolicyParams {
    pub fn new(mu: Array2<f64>, log_sigma: f64) -> Result<Self> {
        check_mu(&mu, log_sigma)?;
        Ok(Self { mu, log_sigma })
    }
    pub fn sigma(&self) -> f64 {
        clamp_sigma(self.log_sigma)
    }
}

impl MixedLogitParams {
    pub fn new(mu: Array2<f64>, log_sigma: f64) -> Result<Self> {
        check_mu(&mu, log_sigma)?;
        Ok(Self { mu, log_sigma })
    }
    /// Unlike the Gaussian class there is no lower clamp: the softmax noise
    /// scale may vanish, in which case the policy degenerates to the exact
    /// softmax. (Phi arguments never divide by this sigma.)
    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp().min(SIGMA_MAX)
    }
}

pub(crate) fn clamp_sigma(log_sigma: f64) -> f64 {
    log_sigma.exp().clamp(SIGMA_MIN, SIGMA_MAX)
}

/// A policy of any supported class.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyParams {
    Softmax(SoftmaxParams),
    Gaussian(GaussianPolicyParams),
    MixedLogit(MixedLogitParams),
}

impl PolicyParams {
    /// (K, d) of the parameter matrix.
    pub fn shape(&self) -> (usize, usize) {
        let m = match self {
            PolicyParams::Softmax(p) => &p.theta,
            PolicyParams::Gaussian(p) => &p.mu,
            PolicyParams::MixedLogit(p) => &p.mu,
        };
        (m.nrows(), m.ncols())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PolicyParams::Softmax(_) => "softmax",
            PolicyParams::Gaussian(_) => "gaussian",
            PolicyParams::MixedLogit(_) => "mixed_logit",
        }
    }

    /// Propensity vector at a single context. Exact for softmax; Monte Carlo
    /// with `mc.s` draws otherwise (`index` keys the draw stream).
    pub fn propensities(&self, x: &[f64], mc: &McConfig, index: u64) -> Result<PropensityVector> {
        let (_, d) = self.shape();
        if x.len() != d {
            return Err(OplError::DimensionMismatch(format!(
                "context has d={}, policy expects {d}",
                x.len()
            )));
        }
        match self {
            PolicyParams::Softmax(p) => {
                let probs = softmax_propensities(p, x)?;
                PropensityVector::new(probs.into_probs(), 1e-12)
            }
            PolicyParams::Gaussian(_) | PolicyParams::MixedLogit(_) => {
                require_unit_norm(x)?;
                mc.validate()?;
                let features = Array2::from_shape_vec((1, d), x.to_vec()).unwrap();
                let eval = kernel::eval_terms_with_grads(self, &features, &[], mc, index, false)?;
                let row = eval.propensities.row(0).to_vec();
                let tol = match self {
                    PolicyParams::MixedLogit(_) => 1e-12,
                    _ => 1e-6,
                };
                PropensityVector::new(row, tol)
            }
        }
    }

    /// Propensity matrix over all rows of `features`; rows sum to 1.
    pub fn propensity_matrix(
        &self,
        features: &Array2<f64>,
        mc: &McConfig,
        nonce: u64,
    ) -> Result<Array2<f64>> {
        let eval = kernel::eval_terms_with_grads(self, features, &[], mc, nonce, false)?;
        Ok(eval.propensities)
    }

    /// Draws one action. Gaussian: argmax of x^T theta_a under a fresh theta
    /// draw. Mixed-logit: the same plus Gumbel noise. Softmax: a categorical
    /// draw from the exact propensities. Ties break to the lowest index.
    pub fn sample_action<R: Rng>(&self, x: &[f64], rng: &mut R) -> Result<usize> {
        let (k, d) = self.shape();
        if x.len() != d {
            return Err(OplError::DimensionMismatch(format!(
                "context has d={}, policy expects {d}",
                x.len()
            )));
        }
        match self {
            PolicyParams::Softmax(p) => {
                let probs = softmax_propensities(p, x)?;
                Ok(crate::data::sample_categorical(probs.probs(), rng))
            }
            PolicyParams::Gaussian(p) => {
                let scores = sampled_scores(&p.mu, p.sigma(), x, rng, k, d);
                Ok(argmax_lowest(&scores))
            }
            PolicyParams::MixedLogit(p) => {
                let mut scores = sampled_scores(&p.mu, p.sigma(), x, rng, k, d);
                for s in scores.iter_mut() {
                    *s += gumbel(rng);
                }
                Ok(argmax_lowest(&scores))
            }
        }
    }

    /// Serializes parameters in the CSV-with-header convention shared with
    /// datasets.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let (k, d) = self.shape();
        let (kind, extra, matrix) = match self {
            PolicyParams::Softmax(p) => (
                "softmax",
                ("inv_temperature", p.inv_temperature),
                &p.theta,
            ),
            PolicyParams::Gaussian(p) => ("gaussian", ("log_sigma", p.log_sigma), &p.mu),
            PolicyParams::MixedLogit(p) => ("mixed_logit", ("log_sigma", p.log_sigma), &p.mu),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {}",
            serde_json::json!({"kind": kind, "k": k, "d": d, extra.0: extra.1})
        );
        let header: Vec<String> = (0..d).map(|j| format!("w{j}")).collect();
        let _ = writeln!(out, "{}", header.join(","));
        for row in matrix.rows() {
            let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let pstr = path.display().to_string();
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| OplError::Parse {
            path: pstr.clone(),
            line: 1,
            msg: "empty file".into(),
        })?;
        let meta: serde_json::Value = first
            .strip_prefix('#')
            .map(str::trim)
            .and_then(|s| serde_json::from_str(s).ok())
            .ok_or_else(|| OplError::Parse {
                path: pstr.clone(),
                line: 1,
                msg: "expected a JSON comment header".into(),
            })?;
        let kind = meta["kind"].as_str().unwrap_or_default().to_string();
        let k = meta["k"].as_u64().unwrap_or(0) as usize;
        let d = meta["d"].as_u64().unwrap_or(0) as usize;
        if k == 0 || d == 0 {
            return Err(OplError::Parse {
                path: pstr,
                line: 1,
                msg: "header must carry k and d".into(),
            });
        }
        lines.next(); // column header
        let mut matrix = Array2::zeros((k, d));
        let mut row = 0usize;
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if row >= k {
                return Err(OplError::Parse {
                    path: pstr,
                    line: lineno + 1,
                    msg: format!("more than {k} parameter rows"),
                });
            }
            for (j, cell) in line.split(',').enumerate() {
                if j >= d {
                    return Err(OplError::Parse {
                        path: pstr,
                        line: lineno + 1,
                        msg: format!("more than {d} columns"),
                    });
                }
                matrix[(row, j)] = cell.trim().parse().map_err(|e| OplError::Parse {
                    path: pstr.clone(),
                    line: lineno + 1,
                    msg: format!("column {j}: {e}"),
                })?;
            }
            row += 1;
        }
        if row != k {
            return Err(OplError::Parse {
                path: pstr,
                line: 0,
                msg: format!("expected {k} rows, got {row}"),
            });
        }
        match kind.as_str() {
            "softmax" => Ok(PolicyParams::Softmax(SoftmaxParams::new(
                matrix,
                meta["inv_temperature"].as_f64().unwrap_or(1.0),
            )?)),
            "gaussian" => Ok(PolicyParams::Gaussian(GaussianPolicyParams::new(
                matrix,
                meta["log_sigma"].as_f64().unwrap_or(0.0),
            )?)),
            "mixed_logit" => Ok(PolicyParams::MixedLogit(MixedLogitParams::new(
                matrix,
                meta["log_sigma"].as_f64().unwrap_or(0.0),
            )?)),
            other => Err(OplError::Parse {
                path: pstr,
                line: 1,
                msg: format!("unknown policy kind `{other}`"),
            }),
        }
    }
}

fn sampled_scores<R: Rng>(
    mu: &Array2<f64>,
    sigma: f64,
    x: &[f64],
    rng: &mut R,
    k: usize,
    d: usize,
) -> Vec<f64> {
    let mut scores = vec![0.0; k];
    for a in 0..k {
        let mut s = 0.0;
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            s += x[j] * (mu[(a, j)] + sigma * z);
        }
        scores[a] = s;
    }
    scores
}

fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn require_unit_norm(x: &[f64]) -> Result<()> {
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    if (norm2.sqrt() - 1.0).abs() > 1e-6 {
        return Err(OplError::InvalidArgument(format!(
            "context must be L2-normalized, got norm {}",
            norm2.sqrt()
        )));
    }
    Ok(())
}

/// Exact softmax propensities with max-subtraction.
pub fn softmax_propensities(params: &SoftmaxParams, x: &[f64]) -> Result<PropensityVector> {
    let (k, d) = (params.theta.nrows(), params.theta.ncols());
    if x.len() != d {
        return Err(OplError::DimensionMismatch(format!(
            "context has d={}, policy expects {d}",
            x.len()
        )));
    }
    let mut logits = vec![0.0; k];
    for a in 0..k {
        let mut s = 0.0;
        for j in 0..d {
            s += params.theta[(a, j)] * x[j];
        }
        logits[a] = params.inv_temperature * s;
        if !logits[a].is_finite() {
            return Err(OplError::NonFinite(format!("logit for action {a}")));
        }
    }
    let mut probs = vec![0.0; k];
    softmax_into(&logits, &mut probs);
    PropensityVector::new(probs, 1e-12)
}

/// Monte Carlo propensities of the Gaussian policy at one context;
/// the vector is renormalized to sum exactly 1.
pub fn gaussian_propensities(
    params: &GaussianPolicyParams,
    x: &[f64],
    mc: &McConfig,
    index: u64,
) -> Result<PropensityVector> {
    PolicyParams::Gaussian(params.clone()).propensities(x, mc, index)
}

/// Monte Carlo propensities of the mixed-logit policy at one context; an
/// average of softmax vectors, so it sums to 1 for any draw count.
pub fn mixed_logit_propensities(
    params: &MixedLogitParams,
    x: &[f64],
    mc: &McConfig,
    index: u64,
) -> Result<PropensityVector> {
    PolicyParams::MixedLogit(params.clone()).propensities(x, mc, index)
}

/// Gradient of a propensity-weighted objective, same shapes as the policy
/// parameters.
#[derive(Debug, Clone)]
pub struct PolicyGrad {
    pub mu: Array2<f64>,
    pub log_sigma: f64,
}

impl PolicyGrad {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            mu: Array2::zeros((k, d)),
            log_sigma: 0.0,
        }
    }

    pub fn scaled_add(&mut self, c: f64, other: &PolicyGrad) {
        self.mu.scaled_add(c, &other.mu);
        self.log_sigma += c * other.log_sigma;
    }

    pub fn is_finite(&self) -> bool {
        self.log_sigma.is_finite() && self.mu.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    #[test]
    fn softmax_zero_theta_is_uniform() {
        let p = SoftmaxParams::new(Array2::zeros((4, 3)), 1.0).unwrap();
        let x = [0.6, 0.0, 0.8];
        let probs = softmax_propensities(&p, &x).unwrap();
        for &v in probs.probs() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_value() {
        // logits (ln 3, 0) -> (0.75, 0.25)
        let theta = array![[(3.0f64).ln()], [0.0]];
        let p = SoftmaxParams::new(theta, 1.0).unwrap();
        let probs = softmax_propensities(&p, &[1.0]).unwrap();
        assert!((probs.probs()[0] - 0.75).abs() < 1e-12);
        assert!((probs.probs()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let theta = array![[0.3, -0.2], [1.1, 0.4], [-0.5, 0.9]];
        let x = [0.8, 0.6];
        let p1 = softmax_propensities(&SoftmaxParams::new(theta.clone(), 1.0).unwrap(), &x)
            .unwrap();
        // adding a constant vector c to every row shifts all logits by c.x
        let shifted = &theta + &Array2::from_elem((3, 2), 5.0);
        let p2 = softmax_propensities(&SoftmaxParams::new(shifted, 1.0).unwrap(), &x).unwrap();
        for (a, b) in p1.probs().iter().zip(p2.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_logit_dominates() {
        let theta = array![[1e6], [0.0], [0.0]];
        let pol = PolicyParams::Softmax(SoftmaxParams::new(theta, 1.0).unwrap());
        let mut rng = stream(1, 99, 0);
        for _ in 0..1000 {
            assert_eq!(pol.sample_action(&[1.0], &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn sample_action_deterministic_given_seed() {
        let pol = PolicyParams::MixedLogit(
            MixedLogitParams::new(array![[0.4, 0.1], [0.0, -0.3], [0.2, 0.2]], -0.5).unwrap(),
        );
        let x = [0.6, 0.8];
        let a: Vec<usize> = {
            let mut rng = stream(5, 7, 0);
            (0..20).map(|_| pol.sample_action(&x, &mut rng).unwrap()).collect()
        };
        let b: Vec<usize> = {
            let mut rng = stream(5, 7, 0);
            (0..20).map(|_| pol.sample_action(&x, &mut rng).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn params_csv_round_trip() {
        let dir = std::env::temp_dir().join("opl-core-policy-tests");
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("pol.csv");
        let pol = PolicyParams::Gaussian(
            GaussianPolicyParams::new(array![[0.25, -1.5], [3.0 / 7.0, 2e-8]], -0.125).unwrap(),
        );
        pol.save_csv(&p).unwrap();
        let back = PolicyParams::load_csv(&p).unwrap();
        assert_eq!(pol, back);
    }
}

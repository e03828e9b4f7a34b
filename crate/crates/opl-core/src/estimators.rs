//! Risk estimators for logged bandit feedback: plain inverse propensity
//! scoring, hard-clipped variants (weight-clip and propensity-floor),
//! exponentially smoothed variants, and the harmonic / shrinkage weight
//! corrections. Also the population bias/variance bounds for the smoothed
//! variants.
//!
//! One polymorphic `estimate_risk` covers all variants; the weight transform
//! is the only difference. Logging propensities are floored at
//! `PROPENSITY_FLOOR` before any power or ratio.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::LoggedDataset;
use crate::error::{OplError, Result};
use crate::math::PROPENSITY_FLOOR;

/// Which weight transform to apply to the importance ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum EstimatorSpec {
    /// w = pi / pi0.
    Ips,
    /// min(w, m): clips the weight itself.
    IpsMin { m: f64 },
    /// pi / max(pi0, tau): clips only the denominator.
    IpsMax { tau: f64 },
    /// pi / pi0^alpha, alpha in [0, 1]; alpha = 1 recovers IPS.
    IpsAlpha { alpha: f64 },
    /// (pi / pi0)^beta, beta in [0, 1]; beta = 1 recovers IPS.
    IpsBeta { beta: f64 },
    /// lambda1 * w / (lambda1 + w^2).
    Harmonic { lambda1: f64 },
    /// w / (1 - lambda2 + lambda2 * w).
    Shrinkage { lambda2: f64 },
}

impl EstimatorSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EstimatorSpec::Ips => true,
            EstimatorSpec::IpsMin { m } => m > 0.0,
            EstimatorSpec::IpsMax { tau } => (0.0..=1.0).contains(&tau),
            EstimatorSpec::IpsAlpha { alpha } => (0.0..=1.0).contains(&alpha),
            EstimatorSpec::IpsBeta { beta } => (0.0..=1.0).contains(&beta),
            EstimatorSpec::Harmonic { lambda1 } => lambda1 > 0.0,
            EstimatorSpec::Shrinkage { lambda2 } => (0.0..=1.0).contains(&lambda2),
        };
        if ok {
            Ok(())
        } else {
            Err(OplError::InvalidArgument(format!("invalid estimator {self:?}")))
        }
    }

    /// Transformed weight given target propensity `pi` and floored logging
    /// propensity `p0` at the logged action.
    #[inline]
    pub fn transform(&self, pi: f64, p0: f64) -> f64 {
        match *self {
            EstimatorSpec::Ips => pi / p0,
            EstimatorSpec::IpsMin { m } => (pi / p0).min(m),
            EstimatorSpec::IpsMax { tau } => pi / p0.max(tau),
            EstimatorSpec::IpsAlpha { alpha } => pi / p0.powf(alpha),
            EstimatorSpec::IpsBeta { beta } => (pi / p0).powf(beta),
            EstimatorSpec::Harmonic { lambda1 } => {
                let w = pi / p0;
                lambda1 * w / (lambda1 + w * w)
            }
            EstimatorSpec::Shrinkage { lambda2 } => {
                let w = pi / p0;
                w / (1.0 - lambda2 + lambda2 * w)
            }
        }
    }

    /// d transform / d pi at fixed p0 (subgradient 0 on the clipped branch).
    #[inline]
    pub fn transform_dpi(&self, pi: f64, p0: f64) -> f64 {
        match *self {
            EstimatorSpec::Ips => 1.0 / p0,
            EstimatorSpec::IpsMin { m } => {
                if pi / p0 < m {
                    1.0 / p0
                } else {
                    0.0
                }
            }
            EstimatorSpec::IpsMax { tau } => 1.0 / p0.max(tau),
            EstimatorSpec::IpsAlpha { alpha } => 1.0 / p0.powf(alpha),
            EstimatorSpec::IpsBeta { beta } => {
                let w = pi / p0;
                if w <= 0.0 {
                    0.0
                } else {
                    beta * w.powf(beta - 1.0) / p0
                }
            }
            EstimatorSpec::Harmonic { lambda1 } => {
                let w = pi / p0;
                lambda1 * (lambda1 - w * w) / ((lambda1 + w * w) * (lambda1 + w * w) * p0)
            }
            EstimatorSpec::Shrinkage { lambda2 } => {
                let w = pi / p0;
                let den = 1.0 - lambda2 + lambda2 * w;
                (1.0 - lambda2) / (den * den * p0)
            }
        }
    }
}

/// An estimated risk with its per-interaction weighted costs.
#[derive(Debug, Clone)]
pub struct RiskEstimate {
    pub value: f64,
    pub per_point: Vec<f64>,
}

/// Applies the variant's weight transform per interaction and averages.
/// `target_at_logged[i]` is the target policy's propensity of the logged
/// action of interaction i.
pub fn estimate_risk(
    spec: &EstimatorSpec,
    ds: &LoggedDataset,
    target_at_logged: &[f64],
) -> Result<RiskEstimate> {
    spec.validate()?;
    let n = ds.n();
    if target_at_logged.len() != n {
        return Err(OplError::DimensionMismatch(format!(
            "target propensities have length {}, dataset has {n}",
            target_at_logged.len()
        )));
    }
    let mut per_point = Vec::with_capacity(n);
    let mut sum = 0.0;
    for i in 0..n {
        let p0 = ds.logged_propensity(i).max(PROPENSITY_FLOOR);
        let w = spec.transform(target_at_logged[i], p0);
        if !w.is_finite() {
            return Err(OplError::NonFinite(format!("weight at interaction {i}")));
        }
        let v = ds.costs()[i] * w;
        per_point.push(v);
        sum += v;
    }
    Ok(RiskEstimate {
        value: sum / n as f64,
        per_point,
    })
}

/// Same, taking a full n x K target propensity matrix.
pub fn estimate_risk_matrix(
    spec: &EstimatorSpec,
    ds: &LoggedDataset,
    target: &Array2<f64>,
) -> Result<RiskEstimate> {
    if target.nrows() != ds.n() || target.ncols() != ds.k() {
        return Err(OplError::DimensionMismatch(format!(
            "target matrix is {}x{}, expected {}x{}",
            target.nrows(),
            target.ncols(),
            ds.n(),
            ds.k()
        )));
    }
    let at_logged: Vec<f64> = (0..ds.n())
        .map(|i| target[(i, ds.actions()[i])])
        .collect();
    estimate_risk(spec, ds, &at_logged)
}

/// Population bias bound for the propensity-smoothed estimator:
/// E_{x ~ nu, a ~ pi}[1 - pi0(a|x)^(1-alpha)]. Zero at alpha = 1.
pub fn bias_bound_alpha(alpha: f64, nu: &[f64], pi0: &Array2<f64>, target: &Array2<f64>) -> f64 {
    expect_over_target(nu, pi0, target, |p0, _pi| 1.0 - p0.powf(1.0 - alpha))
}

/// Population variance bound for the propensity-smoothed estimator:
/// (1/n) E_{x ~ nu, a ~ pi}[pi(a|x) / pi0(a|x)^(2 alpha - 1)].
pub fn variance_bound_alpha(
    alpha: f64,
    nu: &[f64],
    pi0: &Array2<f64>,
    target: &Array2<f64>,
    n: usize,
) -> f64 {
    expect_over_target(nu, pi0, target, |p0, pi| pi / p0.powf(2.0 * alpha - 1.0)) / n as f64
}

/// Population bias bound for the ratio-smoothed estimator:
/// E_{x ~ nu, a ~ pi}[|(pi/pi0)^(beta-1) - 1|].
pub fn bias_bound_beta(beta: f64, nu: &[f64], pi0: &Array2<f64>, target: &Array2<f64>) -> f64 {
    expect_over_target(nu, pi0, target, |p0, pi| {
        ((pi / p0).powf(beta - 1.0) - 1.0).abs()
    })
}

/// Population variance bound for the ratio-smoothed estimator:
/// (1/n) E_{x ~ nu, a ~ pi}[(pi/pi0)^(2 beta - 1)].
pub fn variance_bound_beta(
    beta: f64,
    nu: &[f64],
    pi0: &Array2<f64>,
    target: &Array2<f64>,
    n: usize,
) -> f64 {
    expect_over_target(nu, pi0, target, |p0, pi| (pi / p0).powf(2.0 * beta - 1.0)) / n as f64
}

/// Sum over contexts and actions of nu(x) pi(a|x) f(pi0, pi); actions with
/// zero target mass contribute nothing, which keeps 0 * inf out of the sums.
fn expect_over_target(
    nu: &[f64],
    pi0: &Array2<f64>,
    target: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> f64 {
    let mut total = 0.0;
    for (x, &nux) in nu.iter().enumerate() {
        if nux == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for a in 0..pi0.ncols() {
            let pi = target[(x, a)];
            if pi <= 0.0 {
                continue;
            }
            let p0 = pi0[(x, a)].max(PROPENSITY_FLOOR);
            inner += pi * f(p0, pi);
        }
        total += nux * inner;
    }
    total
}

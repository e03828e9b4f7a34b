//! Propensity matrices and pathwise gradients of propensity-weighted sums.
//!
//! Everything an objective needs from a policy reduces to values and
//! gradients of `t_j = sum_i sum_a W_j[i,a] * pi(a | x_i)` for a handful of
//! weight matrices `W_j`. One pass over the data evaluates the propensity
//! matrix and all `t_j` gradients against the same frozen draw streams, so
//! the returned gradients are the exact derivatives of the Monte Carlo
//! values. Work is chunked with a fixed chunk size and merged in chunk
//! order, which keeps results identical regardless of thread count.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{OplError, Result};
use crate::math::{norm_cdf, norm_pdf, softmax_into};
use crate::rng::{salt, stream};

use super::{McConfig, PolicyGrad, PolicyParams};

const CHUNK: usize = 128;

/// Result of one fused evaluation pass.
#[derive(Debug)]
pub struct TermEval {
    /// n x K propensity matrix; every row sums to 1.
    pub propensities: Array2<f64>,
    /// One value per weight matrix: `sum W_j . pi`.
    pub term_values: Vec<f64>,
    /// Exact gradients of the term values (empty when `grads` was false).
    pub term_grads: Vec<PolicyGrad>,
}

/// Value and exact frozen-draw gradient of `sum_{i,a} W[i,a] pi(a|x_i)`.
pub fn weighted_propensity_objective_grad(
    params: &PolicyParams,
    features: &Array2<f64>,
    weights: &Array2<f64>,
    mc: &McConfig,
    nonce: u64,
) -> Result<(f64, PolicyGrad)> {
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(OplError::NonFinite("objective weights".into()));
    }
    let eval = eval_terms_with_grads(params, features, &[weights], mc, nonce, true)?;
    Ok((eval.term_values[0], eval.term_grads.into_iter().next().unwrap()))
}

/// Fused pass: propensity matrix plus values/gradients of each weighted sum.
pub fn eval_terms_with_grads(
    params: &PolicyParams,
    features: &Array2<f64>,
    term_weights: &[&Array2<f64>],
    mc: &McConfig,
    nonce: u64,
    grads: bool,
) -> Result<TermEval> {
    let n = features.nrows();
    let d = features.ncols();
    let (k, pd) = params.shape();
    if d != pd {
        return Err(OplError::DimensionMismatch(format!(
            "features have d={d}, policy expects {pd}"
        )));
    }
    for w in term_weights {
        if w.nrows() != n || w.ncols() != k {
            return Err(OplError::DimensionMismatch(format!(
                "weight matrix is {}x{}, expected {n}x{k}",
                w.nrows(),
                w.ncols()
            )));
        }
    }
    mc.validate()?;
    if matches!(
        params,
        PolicyParams::Gaussian(_) | PolicyParams::MixedLogit(_)
    ) {
        for i in 0..n {
            let row = features.row(i);
            let norm2: f64 = row.iter().map(|v| v * v).sum();
            if (norm2.sqrt() - 1.0).abs() > 1e-6 {
                return Err(OplError::InvalidArgument(format!(
                    "context {i} must be L2-normalized for Monte Carlo propensities"
                )));
            }
        }
    }

    let nt = term_weights.len();
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n)))
        .collect();

    let chunks: Vec<ChunkOut> = ranges
        .par_iter()
        .map(|&(lo, hi)| {
            let mut out = ChunkOut::new(hi - lo, k, d, nt, grads);
            let mut scratch = Scratch::new(k, mc.s);
            let ChunkOut { pi, values, grads: gmats } = &mut out;
            for i in lo..hi {
                let x = features.row(i);
                let x = x.as_slice().expect("contiguous feature row");
                let wrows: Vec<&[f64]> = term_weights
                    .iter()
                    .map(|w| w.row(i).to_slice().expect("contiguous weight row"))
                    .collect();
                let pi_row = &mut pi[(i - lo) * k..(i - lo + 1) * k];
                match params {
                    PolicyParams::Softmax(p) => softmax_datum(
                        p.inv_temperature,
                        &p.theta,
                        x,
                        &wrows,
                        grads,
                        pi_row,
                        values,
                        gmats,
                        &mut scratch,
                    ),
                    PolicyParams::MixedLogit(p) => mixl_datum(
                        &p.mu,
                        p.sigma(),
                        x,
                        &wrows,
                        grads,
                        mc,
                        nonce,
                        i as u64,
                        pi_row,
                        values,
                        gmats,
                        &mut scratch,
                    ),
                    PolicyParams::Gaussian(p) => gauss_datum(
                        &p.mu,
                        p.sigma(),
                        x,
                        &wrows,
                        grads,
                        mc,
                        nonce,
                        i as u64,
                        pi_row,
                        values,
                        gmats,
                        &mut scratch,
                    ),
                }
            }
            out
        })
        .collect();

    // Deterministic in-order merge.
    let mut propensities = Array2::zeros((n, k));
    let mut term_values = vec![0.0; nt];
    let mut term_grads: Vec<PolicyGrad> = if grads {
        (0..nt).map(|_| PolicyGrad::zeros(k, d)).collect()
    } else {
        Vec::new()
    };
    for (c, &(lo, hi)) in chunks.iter().zip(&ranges) {
        let rows = hi - lo;
        propensities
            .slice_mut(ndarray::s![lo..hi, ..])
            .assign(&ndarray::ArrayView2::from_shape((rows, k), &c.pi).unwrap());
        for j in 0..nt {
            term_values[j] += c.values[j];
            if grads {
                term_grads[j].scaled_add(1.0, &c.grads[j]);
            }
        }
    }
    Ok(TermEval {
        propensities,
        term_values,
        term_grads,
    })
}

struct ChunkOut {
    pi: Vec<f64>,
    values: Vec<f64>,
    grads: Vec<PolicyGrad>,
}

impl ChunkOut {
    fn new(rows: usize, k: usize, d: usize, nt: usize, grads: bool) -> Self {
        Self {
            pi: vec![0.0; rows * k],
            values: vec![0.0; nt],
            grads: if grads {
                (0..nt).map(|_| PolicyGrad::zeros(k, d)).collect()
            } else {
                Vec::new()
            },
        }
    }
}

struct Scratch {
    base: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    eps: Vec<f64>,
    cdf: Vec<f64>,
    qacc: Vec<f64>,
    dmat: Vec<f64>,
    evec: Vec<f64>,
    loo: Vec<f64>,
    gam: Vec<f64>,
}

impl Scratch {
    fn new(k: usize, _s: usize) -> Self {
        Self {
            base: vec![0.0; k],
            logits: vec![0.0; k],
            probs: vec![0.0; k],
            eps: vec![0.0; k],
            cdf: vec![0.0; k * k],
            qacc: vec![0.0; k],
            dmat: vec![0.0; k * k],
            evec: vec![0.0; k],
            loo: vec![0.0; k],
            gam: vec![0.0; k],
        }
    }
}

#[inline]
fn matvec_into(m: &Array2<f64>, x: &[f64], out: &mut [f64]) {
    let (k, d) = (m.nrows(), m.ncols());
    let ms = m.as_slice().expect("standard layout");
    for a in 0..k {
        let row = &ms[a * d..(a + 1) * d];
        let mut s = 0.0;
        for j in 0..d {
            s += row[j] * x[j];
        }
        out[a] = s;
    }
}

/// Adds `coef[b] * x` to each row b of the gradient matrix.
#[inline]
fn outer_accumulate(g: &mut Array2<f64>, coef: &[f64], x: &[f64]) {
    let d = x.len();
    let gs = g.as_slice_mut().expect("standard layout");
    for (b, &c) in coef.iter().enumerate() {
        if c != 0.0 {
            let row = &mut gs[b * d..(b + 1) * d];
            for j in 0..d {
                row[j] += c * x[j];
            }
        }
    }
}

/// Softmax-Jacobian action: gamma = p .* (w - (w . p)); returns w . p.
#[inline]
pub(crate) fn logit_space_grad_row(p: &[f64], w: &[f64], gamma: &mut [f64]) -> f64 {
    let mut v = 0.0;
    for (pa, wa) in p.iter().zip(w) {
        v += pa * wa;
    }
    for ((g, pa), wa) in gamma.iter_mut().zip(p).zip(w) {
        *g = pa * (wa - v);
    }
    v
}

#[allow(clippy::too_many_arguments)]
fn softmax_datum(
    eta: f64,
    theta: &Array2<f64>,
    x: &[f64],
    wrows: &[&[f64]],
    grads: bool,
    pi_row: &mut [f64],
    values: &mut [f64],
    gmats: &mut [PolicyGrad],
    sc: &mut Scratch,
) {
    let k = theta.nrows();
    matvec_into(theta, x, &mut sc.base);
    for a in 0..k {
        sc.logits[a] = eta * sc.base[a];
    }
    softmax_into(&sc.logits, &mut sc.probs);
    pi_row.copy_from_slice(&sc.probs);
    for (j, w) in wrows.iter().enumerate() {
        let v = logit_space_grad_row(&sc.probs, w, &mut sc.gam);
        values[j] += v;
        if grads {
            for g in sc.gam.iter_mut() {
                *g *= eta;
            }
            outer_accumulate(&mut gmats[j].mu, &sc.gam, x);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn mixl_datum(
    mu: &Array2<f64>,
    sigma: f64,
    x: &[f64],
    wrows: &[&[f64]],
    grads: bool,
    mc: &McConfig,
    nonce: u64,
    index: u64,
    pi_row: &mut [f64],
    values: &mut [f64],
    gmats: &mut [PolicyGrad],
    sc: &mut Scratch,
) {
    let k = mu.nrows();
    matvec_into(mu, x, &mut sc.base);
    let mut rng = stream(mc.seed, salt::MC_PROPENSITY ^ (nonce << 8), index);
    let inv_s = 1.0 / mc.s as f64;
    pi_row.iter_mut().for_each(|p| *p = 0.0);
    let nt = wrows.len();
    // per-term logit-space accumulators and log_sigma sums
    let mut gam_acc = vec![0.0; nt * k];
    let mut ls_acc = vec![0.0; nt];
    for _ in 0..mc.s {
        for e in sc.eps.iter_mut() {
            *e = StandardNormal.sample(&mut rng);
        }
        for a in 0..k {
            sc.logits[a] = sc.base[a] + sigma * sc.eps[a];
        }
        softmax_into(&sc.logits, &mut sc.probs);
        for a in 0..k {
            pi_row[a] += inv_s * sc.probs[a];
        }
        if grads {
            for (j, w) in wrows.iter().enumerate() {
                logit_space_grad_row(&sc.probs, w, &mut sc.gam);
                let acc = &mut gam_acc[j * k..(j + 1) * k];
                let mut eps_dot = 0.0;
                for a in 0..k {
                    acc[a] += sc.gam[a];
                    eps_dot += sc.gam[a] * sc.eps[a];
                }
                ls_acc[j] += eps_dot * sigma;
            }
        }
    }
    for (j, w) in wrows.iter().enumerate() {
        let mut v = 0.0;
        for a in 0..k {
            v += pi_row[a] * w[a];
        }
        values[j] += v;
        if grads {
            let acc = &mut gam_acc[j * k..(j + 1) * k];
            for a in acc.iter_mut() {
                *a *= inv_s;
            }
            outer_accumulate(&mut gmats[j].mu, acc, x);
            gmats[j].log_sigma += ls_acc[j] * inv_s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gauss_datum(
    mu: &Array2<f64>,
    sigma: f64,
    x: &[f64],
    wrows: &[&[f64]],
    grads: bool,
    mc: &McConfig,
    nonce: u64,
    index: u64,
    pi_row: &mut [f64],
    values: &mut [f64],
    gmats: &mut [PolicyGrad],
    sc: &mut Scratch,
) {
    let k = mu.nrows();
    matvec_into(mu, x, &mut sc.base);
    let inv_sigma = 1.0 / sigma;
    let mut rng = stream(mc.seed, salt::MC_PROPENSITY ^ (nonce << 8), index);
    sc.qacc.iter_mut().for_each(|v| *v = 0.0);
    sc.dmat.iter_mut().for_each(|v| *v = 0.0);
    sc.evec.iter_mut().for_each(|v| *v = 0.0);

    for _ in 0..mc.s {
        let eps: f64 = StandardNormal.sample(&mut rng);
        // cdf[a*k+b] = Phi(eps + (s_a - s_b)/sigma), b != a
        for a in 0..k {
            let sa = sc.base[a];
            let row = &mut sc.cdf[a * k..(a + 1) * k];
            for b in 0..k {
                if b != a {
                    row[b] = norm_cdf(eps + (sa - sc.base[b]) * inv_sigma);
                }
            }
            row[a] = 1.0;
        }
        for a in 0..k {
            let row = &sc.cdf[a * k..(a + 1) * k];
            let mut p = 1.0;
            for &c in row.iter() {
                p *= c;
            }
            sc.qacc[a] += p;
            if grads {
                // leave-one-out products via prefix/suffix sweeps
                let mut pre = 1.0;
                for b in 0..k {
                    sc.loo[b] = pre;
                    pre *= row[b];
                }
                let mut suf = 1.0;
                for b in (0..k).rev() {
                    sc.loo[b] *= suf;
                    suf *= row[b];
                }
                let sa = sc.base[a];
                let drow = &mut sc.dmat[a * k..(a + 1) * k];
                let mut diag = 0.0;
                let mut els = 0.0;
                for b in 0..k {
                    if b == a {
                        continue;
                    }
                    let delta = (sa - sc.base[b]) * inv_sigma;
                    let g = norm_pdf(eps + delta) * sc.loo[b];
                    diag += g;
                    drow[b] -= g * inv_sigma;
                    els -= g * delta;
                }
                drow[a] += diag * inv_sigma;
                sc.evec[a] += els;
            }
        }
    }

    let total: f64 = sc.qacc.iter().sum();
    if total < 1e-300 {
        // all products underflowed; fall back to a uniform row, zero gradient
        let u = 1.0 / k as f64;
        pi_row.iter_mut().for_each(|p| *p = u);
        return;
    }
    let inv_t = 1.0 / total;
    for a in 0..k {
        pi_row[a] = sc.qacc[a] * inv_t;
    }
    for (j, w) in wrows.iter().enumerate() {
        let mut v = 0.0;
        for a in 0..k {
            v += pi_row[a] * w[a];
        }
        values[j] += v;
        if grads {
            // kappa_a = (w_a - v)/T ; gamma = D^T kappa ; ls = E . kappa
            sc.gam.iter_mut().for_each(|g| *g = 0.0);
            let mut ls = 0.0;
            for a in 0..k {
                let kap = (w[a] - v) * inv_t;
                if kap != 0.0 {
                    let drow = &sc.dmat[a * k..(a + 1) * k];
                    for c in 0..k {
                        sc.gam[c] += kap * drow[c];
                    }
                    ls += kap * sc.evec[a];
                }
            }
            outer_accumulate(&mut gmats[j].mu, &sc.gam, x);
            gmats[j].log_sigma += ls;
        }
    }
}

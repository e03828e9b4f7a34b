//! Logging-policy construction: a linear softmax fitted by regularized
//! cross-entropy on a small held-in split, then tempered by the inverse
//! temperature eta0. The held-in indices are returned so trainers can
//! exclude them and keep the prior independent of training data.

use ndarray::Array2;
use rand::Rng;

use crate::data::SupervisedDataset;
use crate::error::{OplError, Result};
use crate::math::softmax_into;
use crate::rng::{salt, stream};
use crate::trainer::AdamState;

use super::SoftmaxParams;

const L2_REG: f64 = 1e-6;
const FIT_LR: f64 = 0.1;
const FIT_EPOCHS: usize = 10;
const FIT_BATCH: usize = 100;

/// Fitted logging policy plus the indices it was fitted on.
#[derive(Debug, Clone)]
pub struct LoggingFit {
    pub params: SoftmaxParams,
    /// Sorted indices of the held-in split; trainers must exclude these.
    pub held_in: Vec<usize>,
}

/// Fits mu0 by cross-entropy + 1e-6 L2 on a `split_frac` fraction of `ds`
/// (Adam, lr 0.1, 10 epochs) and returns softmax parameters with inverse
/// temperature `eta0`. With eta0 = 0 the policy is uniform for every x.
pub fn fit_logging_policy(
    ds: &SupervisedDataset,
    eta0: f64,
    split_frac: f64,
    seed: u64,
) -> Result<LoggingFit> {
    if !(0.0..=1.0).contains(&split_frac) {
        return Err(OplError::InvalidArgument("split_frac must be in [0, 1]".into()));
    }
    let n = ds.n();
    let k = ds.k();
    let d = ds.d();
    let m = ((split_frac * n as f64).round() as usize).max(1).min(n);
    if m < k {
        return Err(OplError::InvalidArgument(format!(
            "prior split has {m} examples, fewer than K = {k}"
        )));
    }

    // Seeded partial Fisher-Yates: first m entries are the held-in split.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, salt::SPLIT, 0);
    for i in 0..m {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let mut held_in = order[..m].to_vec();
    held_in.sort_unstable();

    let mut theta = Array2::zeros((k, d));
    let mut adam = AdamState::new(k * d);
    let mut grad = vec![0.0; k * d];
    let mut logits = vec![0.0; k];
    let mut probs = vec![0.0; k];

    for epoch in 0..FIT_EPOCHS {
        let mut batch_order = held_in.clone();
        let mut erng = stream(seed, salt::SPLIT, 1 + epoch as u64);
        for i in (1..batch_order.len()).rev() {
            let j = erng.gen_range(0..=i);
            batch_order.swap(i, j);
        }
        for batch in batch_order.chunks(FIT_BATCH) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = ds.feature_row(i);
                let x = x.as_slice().unwrap();
                for a in 0..k {
                    let mut s = 0.0;
                    for j in 0..d {
                        s += theta[(a, j)] * x[j];
                    }
                    logits[a] = s;
                }
                softmax_into(&logits, &mut probs);
                let y = ds.labels()[i];
                for a in 0..k {
                    let coef = (probs[a] - if a == y { 1.0 } else { 0.0 }) * scale;
                    if coef != 0.0 {
                        for j in 0..d {
                            grad[a * d + j] += coef * x[j];
                        }
                    }
                }
            }
            let flat = theta.as_slice_mut().unwrap();
            for (g, t) in grad.iter_mut().zip(flat.iter()) {
                *g += 2.0 * L2_REG * *t;
            }
            adam.step(flat, &grad, FIT_LR)?;
        }
    }

    Ok(LoggingFit {
        params: SoftmaxParams::new(theta, eta0)?,
        held_in,
    })
}

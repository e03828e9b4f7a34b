//! Dataset representation and I/O: supervised sets, logged bandit feedback,
//! synthetic generators, and supervised-to-bandit conversion.
//!
//! Logged interactions carry the *full* logging propensity vector per row
//! (not just the taken-action propensity), so bound terms that expand over
//! all actions can be computed without a live logging-policy object.
//!
//! File formats are CSV with a one-line JSON comment header `{"n","d","k"}`;
//! floats are written with 17 significant digits so a save/load round trip
//! is bit exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OplError, Result};
use crate::math::fmt_f64;
use crate::policies::{McConfig, PolicyParams};
use crate::rng::{salt, stream};

/// One supervised example; features are L2-normalized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedExample {
    pub features: Array1<f64>,
    pub label: usize,
}

impl SupervisedExample {
    /// Normalizes `features` to unit L2 norm; rejects zero or non-finite
    /// vectors. Already-normalized vectors pass through untouched, so
    /// save/load round trips are bit exact.
    pub fn new(features: Array1<f64>, label: usize, index: usize) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(OplError::NonFinite(format!("features of example {index}")));
        }
        let norm = features.dot(&features).sqrt();
        if norm < 1e-12 {
            return Err(OplError::ZeroFeatureVector { index });
        }
        let features = if (norm - 1.0).abs() <= 1e-9 {
            features
        } else {
            features / norm
        };
        Ok(Self { features, label })
    }
}

/// A labelled dataset with unit-norm features, stored column-major per field.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    k: usize,
}

impl SupervisedDataset {
    pub fn from_examples(examples: Vec<SupervisedExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(OplError::EmptyDataset);
        }
        let d = examples[0].features.len();
        let n = examples.len();
        let mut features = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        let mut k = 0;
        for (i, ex) in examples.into_iter().enumerate() {
            if ex.features.len() != d {
                return Err(OplError::DimensionMismatch(format!(
                    "example {i} has d={}, expected {d}",
                    ex.features.len()
                )));
            }
            features.row_mut(i).assign(&ex.features);
            k = k.max(ex.label + 1);
            labels.push(ex.label);
        }
        Ok(Self {
            features,
            labels,
            k,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }
    pub fn d(&self) -> usize {
        self.features.ncols()
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn feature_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Sub-dataset restricted to `indices` (order preserved); class count is kept.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(OplError::EmptyDataset);
        }
        let mut features = Array2::zeros((indices.len(), self.d()));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            features.row_mut(row).assign(&self.features.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            features,
            labels,
            k: self.k,
        })
    }

    /// Parses `f0,..,f{d-1},label` rows; an optional leading `#` comment line
    /// is skipped. Features are L2-normalized; `k` is `max(label) + 1`.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let pstr = path.display().to_string();
        let mut lines = text.lines().enumerate().peekable();
        if let Some((_, l)) = lines.peek() {
            if l.starts_with('#') {
                lines.next();
            }
        }
        let (hline, header) = lines.next().ok_or_else(|| OplError::Parse {
            path: pstr.clone(),
            line: 1,
            msg: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[cols.len() - 1] != "label" {
            return Err(OplError::Parse {
                path: pstr,
                line: hline + 1,
                msg: "expected header `f0,..,f{d-1},label`".into(),
            });
        }
        let d = cols.len() - 1;
        let mut examples = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(OplError::Parse {
                    path: pstr,
                    line: lineno + 1,
                    msg: format!("expected {} fields, got {}", d + 1, fields.len()),
                });
            }
            let mut feats = Array1::zeros(d);
            for (j, f) in fields[..d].iter().enumerate() {
                feats[j] = f.trim().parse::<f64>().map_err(|e| OplError::Parse {
                    path: pstr.clone(),
                    line: lineno + 1,
                    msg: format!("feature {j}: {e}"),
                })?;
            }
            let raw_label: i64 = fields[d].trim().parse().map_err(|e| OplError::Parse {
                path: pstr.clone(),
                line: lineno + 1,
                msg: format!("label: {e}"),
            })?;
            if raw_label < 0 {
                return Err(OplError::LabelOutOfRange {
                    label: raw_label,
                    path: pstr,
                    line: lineno + 1,
                });
            }
            examples.push(SupervisedExample::new(
                feats,
                raw_label as usize,
                examples.len(),
            )?);
        }
        Self::from_examples(examples)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {}",
            serde_json::json!({"n": self.n(), "d": self.d(), "k": self.k})
        );
        let header: Vec<String> = (0..self.d()).map(|j| format!("f{j}")).collect();
        let _ = writeln!(out, "{},label", header.join(","));
        for i in 0..self.n() {
            let row: Vec<String> = self.features.row(i).iter().map(|&v| fmt_f64(v)).collect();
            let _ = writeln!(out, "{},{}", row.join(","), self.labels[i]);
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// One logged bandit interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedInteraction {
    pub features: Array1<f64>,
    pub action: usize,
    pub cost: f64,
    pub logging_propensities: Array1<f64>,
}

impl LoggedInteraction {
    pub fn validate(&self, index: usize) -> Result<()> {
        let k = self.logging_propensities.len();
        if self.action >= k {
            return Err(OplError::InvalidArgument(format!(
                "interaction {index}: action {} out of range [0, {k})",
                self.action
            )));
        }
        if !(-1.0..=0.0).contains(&self.cost) {
            return Err(OplError::InvalidArgument(format!(
                "interaction {index}: cost {} outside [-1, 0]",
                self.cost
            )));
        }
        let sum: f64 = self.logging_propensities.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(OplError::InvalidArgument(format!(
                "interaction {index}: propensities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        if self.logging_propensities.iter().any(|&p| p < 0.0) {
            return Err(OplError::InvalidArgument(format!(
                "interaction {index}: negative propensity"
            )));
        }
        if self.logging_propensities[self.action] <= 0.0 {
            return Err(OplError::InvalidArgument(format!(
                "interaction {index}: zero propensity at logged action {}",
                self.action
            )));
        }
        Ok(())
    }
}

/// Logged bandit data `D_n`, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedDataset {
    features: Array2<f64>,
    actions: Vec<usize>,
    costs: Vec<f64>,
    propensities: Array2<f64>,
}

impl LoggedDataset {
    pub fn from_interactions(interactions: Vec<LoggedInteraction>) -> Result<Self> {
        if interactions.is_empty() {
            return Err(OplError::EmptyDataset);
        }
        let n = interactions.len();
        let d = interactions[0].features.len();
        let k = interactions[0].logging_propensities.len();
        let mut features = Array2::zeros((n, d));
        let mut propensities = Array2::zeros((n, k));
        let mut actions = Vec::with_capacity(n);
        let mut costs = Vec::with_capacity(n);
        for (i, it) in interactions.into_iter().enumerate() {
            if it.features.len() != d || it.logging_propensities.len() != k {
                return Err(OplError::DimensionMismatch(format!(
                    "interaction {i} has (d, k) = ({}, {}), expected ({d}, {k})",
                    it.features.len(),
                    it.logging_propensities.len()
                )));
            }
            it.validate(i)?;
            features.row_mut(i).assign(&it.features);
            propensities.row_mut(i).assign(&it.logging_propensities);
            actions.push(it.action);
            costs.push(it.cost);
        }
        Ok(Self {
            features,
            actions,
            costs,
            propensities,
        })
    }

    pub fn n(&self) -> usize {
        self.actions.len()
    }
    pub fn d(&self) -> usize {
        self.features.ncols()
    }
    pub fn k(&self) -> usize {
        self.propensities.ncols()
    }
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }
    pub fn actions(&self) -> &[usize] {
        &self.actions
    }
    pub fn costs(&self) -> &[f64] {
        &self.costs
    }
    /// Full logging propensity matrix, one row per interaction.
    pub fn propensities(&self) -> &Array2<f64> {
        &self.propensities
    }
    /// Logging propensity of the taken action, per interaction.
    pub fn logged_propensity(&self, i: usize) -> f64 {
        self.propensities[(i, self.actions[i])]
    }

    pub fn interaction(&self, i: usize) -> LoggedInteraction {
        LoggedInteraction {
            features: self.features.row(i).to_owned(),
            action: self.actions[i],
            cost: self.costs[i],
            logging_propensities: self.propensities.row(i).to_owned(),
        }
    }

    /// Reorders interactions; used by permutation-invariance tests.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(OplError::InvalidArgument("permutation length".into()));
        }
        let interactions = perm.iter().map(|&i| self.interaction(i)).collect();
        Self::from_interactions(interactions)
    }

    /// Parses `f0,..,f{d-1},action,cost,p0,..,p{K-1}` rows.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let pstr = path.display().to_string();
        let mut lines = text.lines().enumerate().peekable();
        if let Some((_, l)) = lines.peek() {
            if l.starts_with('#') {
                lines.next();
            }
        }
        let (hline, header) = lines.next().ok_or_else(|| OplError::Parse {
            path: pstr.clone(),
            line: 1,
            msg: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        let d = cols.iter().take_while(|c| c.starts_with('f')).count();
        let k = cols.iter().filter(|c| c.starts_with('p')).count();
        if k == 0 || cols.len() != d + 2 + k || cols.get(d) != Some(&"action") {
            return Err(OplError::Parse {
                path: pstr,
                line: hline + 1,
                msg: "expected header `f0,..,action,cost,p0,..`".into(),
            });
        }
        let mut interactions = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 + k {
                return Err(OplError::Parse {
                    path: pstr,
                    line: lineno + 1,
                    msg: format!("expected {} fields, got {}", d + 2 + k, fields.len()),
                });
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| OplError::Parse {
                    path: pstr.clone(),
                    line: lineno + 1,
                    msg: format!("{what}: {e}"),
                })
            };
            let features =
                Array1::from_iter(fields[..d].iter().map(|s| parse(s, "feature")).collect::<Result<Vec<_>>>()?);
            let action: usize = fields[d].trim().parse().map_err(|e| OplError::Parse {
                path: pstr.clone(),
                line: lineno + 1,
                msg: format!("action: {e}"),
            })?;
            let cost = parse(fields[d + 1], "cost")?;
            let props = Array1::from_iter(
                fields[d + 2..]
                    .iter()
                    .map(|s| parse(s, "propensity"))
                    .collect::<Result<Vec<_>>>()?,
            );
            interactions.push(LoggedInteraction {
                features,
                action,
                cost,
                logging_propensities: props,
            });
        }
        Self::from_interactions(interactions)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {}",
            serde_json::json!({"n": self.n(), "d": self.d(), "k": self.k()})
        );
        let fcols: Vec<String> = (0..self.d()).map(|j| format!("f{j}")).collect();
        let pcols: Vec<String> = (0..self.k()).map(|j| format!("p{j}")).collect();
        let _ = writeln!(out, "{},action,cost,{}", fcols.join(","), pcols.join(","));
        for i in 0..self.n() {
            let feats: Vec<String> = self.features.row(i).iter().map(|&v| fmt_f64(v)).collect();
            let props: Vec<String> = self
                .propensities
                .row(i)
                .iter()
                .map(|&v| fmt_f64(v))
                .collect();
            let _ = writeln!(
                out,
                "{},{},{},{}",
                feats.join(","),
                self.actions[i],
                fmt_f64(self.costs[i]),
                props.join(",")
            );
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Synthetic Gaussian-cluster classification spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobSpec {
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub class_sep: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.d == 0 || self.n == 0 {
            return Err(OplError::InvalidArgument(
                "blobs require k >= 2, d >= 1, n >= 1".into(),
            ));
        }
        if !(self.class_sep > 0.0) || !(self.noise_sd > 0.0) {
            return Err(OplError::InvalidArgument(
                "class_sep and noise_sd must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// K Gaussian clusters at pairwise distance `class_sep`, balanced classes
/// (class of example i is `i % k`), unit-normalized features. Deterministic
/// given the spec seed.
pub fn generate_blobs(spec: &BlobSpec) -> Result<SupervisedDataset> {
    spec.validate()?;
    let centers = cluster_centers(spec);
    let mut examples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let label = i % spec.k;
        let mut rng = stream(spec.seed, salt::BLOBS, i as u64);
        loop {
            let mut x = Array1::zeros(spec.d);
            for j in 0..spec.d {
                let z: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                x[j] = centers[(label, j)] + spec.noise_sd * z;
            }
            if x.dot(&x).sqrt() >= 1e-12 {
                examples.push(SupervisedExample::new(x, label, i)?);
                break;
            }
        }
    }
    SupervisedDataset::from_examples(examples)
}

/// Generates `spec.n + test_n` examples from one cluster geometry and splits
/// them into a train and a held-out test set. Both halves see the same
/// class centers (the spec seed drives the geometry), so test rewards are
/// comparable across policies trained on the first half.
pub fn generate_blobs_split(
    spec: &BlobSpec,
    test_n: usize,
) -> Result<(SupervisedDataset, SupervisedDataset)> {
    let full = generate_blobs(&BlobSpec {
        n: spec.n + test_n,
        ..spec.clone()
    })?;
    let train_idx: Vec<usize> = (0..spec.n).collect();
    let test_idx: Vec<usize> = (spec.n..spec.n + test_n).collect();
    Ok((full.subset(&train_idx)?, full.subset(&test_idx)?))
}

/// Orthonormal directions scaled so pairwise center distance is `class_sep`
/// exactly when k <= d; falls back to random unit directions otherwise.
fn cluster_centers(spec: &BlobSpec) -> Array2<f64> {
    let mut rng = stream(spec.seed, salt::BLOBS, u64::MAX);
    let mut centers = Array2::zeros((spec.k, spec.d));
    let radius = spec.class_sep / std::f64::consts::SQRT_2;
    for c in 0..spec.k {
        loop {
            let mut v = Array1::zeros(spec.d);
            for j in 0..spec.d {
                v[j] = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            }
            if spec.k <= spec.d {
                for prev in 0..c {
                    let prev_row = centers.row(prev).to_owned();
                    let proj: f64 = v.dot(&prev_row) / radius.powi(2);
                    v.scaled_add(-proj, &prev_row);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-9 {
                centers.row_mut(c).assign(&(v * (radius / norm)));
                break;
            }
        }
    }
    centers
}

/// Supervised-to-bandit conversion: samples `a_i` from the logging policy's
/// propensity vector, reveals only the correctness cost `-1{a_i = y_i}`, and
/// stores the full propensity vector.
pub fn convert_to_bandit(
    ds: &SupervisedDataset,
    logging: &PolicyParams,
    mc: &McConfig,
    seed: u64,
) -> Result<LoggedDataset> {
    let (k, d) = logging.shape();
    if d != ds.d() || k != ds.k() {
        return Err(OplError::DimensionMismatch(format!(
            "logging policy is ({k}, {d}), dataset is ({}, {})",
            ds.k(),
            ds.d()
        )));
    }
    let mut interactions = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        let x = ds.feature_row(i);
        let props = logging.propensities(x.as_slice().unwrap(), mc, i as u64)?;
        let mut rng = stream(seed, salt::CONVERT, i as u64);
        let action = sample_categorical(props.probs(), &mut rng);
        let cost = if action == ds.labels()[i] { -1.0 } else { 0.0 };
        interactions.push(LoggedInteraction {
            features: x.to_owned(),
            action,
            cost,
            logging_propensities: Array1::from(props.into_probs()),
        });
    }
    LoggedDataset::from_interactions(interactions)
}

/// Mean test reward of a policy on held-out labels: one sampled action per
/// context per repeat, reward `1{a = y}`. Deterministic given seed.
pub fn evaluate_policy_reward(
    ds: &SupervisedDataset,
    policy: &PolicyParams,
    seed: u64,
    repeats: usize,
) -> Result<f64> {
    let (k, d) = policy.shape();
    if d != ds.d() || k < ds.k() {
        return Err(OplError::DimensionMismatch(format!(
            "policy is ({k}, {d}), dataset is ({}, {})",
            ds.k(),
            ds.d()
        )));
    }
    let reps = repeats.max(1);
    let mut hits = 0usize;
    for i in 0..ds.n() {
        let mut rng = stream(seed, salt::EVALUATE, i as u64);
        let x = ds.feature_row(i);
        for _ in 0..reps {
            let a = policy.sample_action(x.as_slice().unwrap(), &mut rng)?;
            if a == ds.labels()[i] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (ds.n() * reps) as f64)
}

/// Non-contextual 100-action example: epsilon-greedy logging centered on one
/// action, Bernoulli rewards decaying linearly in the action index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fig1Spec {
    pub n_actions: usize,
    pub eps: f64,
    /// Zero-based center action (the 1-based 50 of the usual description).
    pub center: usize,
    pub n_samples: usize,
}

impl Default for Fig1Spec {
    fn default() -> Self {
        Self {
            n_actions: 100,
            eps: 0.05,
            center: 49,
            n_samples: 50_000,
        }
    }
}

impl Fig1Spec {
    /// Expected reward of zero-based action `a`: 0.1 - 1e-3 * a.
    pub fn true_reward(&self, a: usize) -> f64 {
        0.1 - 1e-3 * a as f64
    }

    /// Logging probabilities; the center entry absorbs the rounding residual
    /// so the vector sums to exactly 1.
    pub fn logging_probs(&self) -> Array1<f64> {
        let k = self.n_actions;
        let p_other = self.eps / (k - 1) as f64;
        let mut p = Array1::from_elem(k, p_other);
        p[self.center] = 1.0 - self.eps;
        for _ in 0..4 {
            let s: f64 = p.sum();
            if s == 1.0 {
                break;
            }
            p[self.center] -= s - 1.0;
        }
        p
    }

    /// Softmax parameters over a single constant feature that reproduce the
    /// logging distribution exactly: theta_a = ln pi0(a).
    pub fn logging_softmax_params(&self) -> crate::policies::SoftmaxParams {
        let probs = self.logging_probs();
        let mut theta = Array2::zeros((self.n_actions, 1));
        for a in 0..self.n_actions {
            theta[(a, 0)] = probs[a].ln();
        }
        crate::policies::SoftmaxParams::new(theta, 1.0).expect("finite log propensities")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_actions < 2 || self.center >= self.n_actions || self.n_samples == 0 {
            return Err(OplError::InvalidArgument("invalid fig1 spec".into()));
        }
        if !(0.0..1.0).contains(&self.eps) {
            return Err(OplError::InvalidArgument("eps must be in [0, 1)".into()));
        }
        if self.true_reward(self.n_actions - 1) <= 0.0 {
            return Err(OplError::InvalidArgument(
                "reward must stay positive over the action range".into(),
            ));
        }
        Ok(())
    }
}

/// Draws the non-contextual logged dataset: d = 1 constant feature, actions
/// from the epsilon-greedy logging, costs `-Bern(r(a))`.
pub fn generate_fig1_bandit(spec: &Fig1Spec, seed: u64) -> Result<LoggedDataset> {
    spec.validate()?;
    let probs = spec.logging_probs();
    let probs_slice: Vec<f64> = probs.to_vec();
    let mut interactions = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut rng = stream(seed, salt::FIG1, i as u64);
        let action = sample_categorical(&probs_slice, &mut rng);
        let reward = if rng.gen::<f64>() < spec.true_reward(action) {
            1.0
        } else {
            0.0
        };
        interactions.push(LoggedInteraction {
            features: Array1::from(vec![1.0]),
            action,
            cost: -reward,
            logging_propensities: probs.clone(),
        });
    }
    LoggedDataset::from_interactions(interactions)
}

/// Inverse-CDF draw from a probability vector; if rounding leaves residual
/// mass, the draw falls to the last positive entry.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

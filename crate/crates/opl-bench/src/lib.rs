//! Shared instance builders for the benchmark suite.

use ndarray::Array2;
use opl_core::data::{convert_to_bandit, generate_blobs, BlobSpec};
use opl_core::policies::{fit_logging_policy, McConfig, PolicyParams};
use opl_core::LoggedDataset;

/// A converted blobs dataset plus its logging policy, at benchmark scale.
pub fn bench_instance(n: usize, k: usize, d: usize) -> (LoggedDataset, PolicyParams) {
    let spec = BlobSpec {
        k,
        d,
        n,
        class_sep: 4.0,
        noise_sd: 1.0,
        seed: 17,
    };
    let sup = generate_blobs(&spec).expect("blobs");
    let fit = fit_logging_policy(&sup, 0.25, 0.05, 17).expect("fit");
    let logging = PolicyParams::Softmax(fit.params);
    let logged =
        convert_to_bandit(&sup, &logging, &McConfig::default(), 17).expect("convert");
    (logged, logging)
}

/// Dense unit weight matrix for propensity-gradient benchmarks.
pub fn unit_weights(n: usize, k: usize) -> Array2<f64> {
    Array2::from_elem((n, k), 1.0 / (n * k) as f64)
}

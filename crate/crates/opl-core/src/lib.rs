//! Off-policy evaluation and learning from logged bandit feedback.
//!
//! The crate covers the full loop at desk scale:
//!
//! - [`data`]: logged datasets with full per-interaction propensity vectors,
//!   CSV I/O, synthetic generators, and supervised-to-bandit conversion.
//! - [`policies`]: softmax, Gaussian and mixed-logit policy classes with
//!   exact or Monte Carlo propensities and pathwise gradients.
//! - [`estimators`]: inverse propensity scoring with hard-clipped, smoothed,
//!   harmonic and shrinkage weight corrections.
//! - [`bounds`]: two-sided PAC-Bayes bound objectives, closed-form lambda,
//!   adaptive smoothing exponent, and clipped-IPS baseline bounds.
//! - [`oracle`]: exact risk / bias / variance by enumeration on small
//!   problems, and bound-coverage experiments.
//! - [`trainer`]: Adam minimization of any of the objectives over policy
//!   parameters.

pub mod bounds;
pub mod data;
pub mod error;
pub mod estimators;
pub mod math;
pub mod oracle;
pub mod policies;
pub mod rng;
pub mod trainer;

pub use bounds::{BoundConfig, BoundReport, BoundTerms, LambdaMode};
pub use data::{
    convert_to_bandit, evaluate_policy_reward, generate_blobs, generate_blobs_split,
    generate_fig1_bandit, BlobSpec,
    Fig1Spec, LoggedDataset, LoggedInteraction, SupervisedDataset, SupervisedExample,
};
pub use error::{OplError, Result};
pub use estimators::{estimate_risk, estimate_risk_matrix, EstimatorSpec, RiskEstimate};
pub use oracle::{CostNoise, CoverageBound, EnumerableProblem};
pub use policies::{
    fit_logging_policy, weighted_propensity_objective_grad, GaussianPolicyParams, LoggingFit,
    McConfig, MixedLogitParams, PolicyGrad, PolicyParams, PropensityVector, SoftmaxParams,
};
pub use trainer::{
    objective_eval, train, AdamState, AlphaSetting, ObjectiveKind, PolicyClass, TrainConfig,
    TrainReport,
};

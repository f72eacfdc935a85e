//! Activation-pattern analyses and the toy sparsity-emergence experiment.

mod emergence;
mod inertia;
mod patterns;

pub use emergence::{
    cluster_data, emergence_experiment, gradient_check, ClusterData, EmergenceConfig, Gradients,
    SparsityTrajectory, ToyNetwork, ToyVariant, TrajectoryPoint, NEAR_ZERO,
};
pub use inertia::{
    builtin_samples, inertia_battery, ordinal_checks, similarity_matrix, InertiaOptions,
    InertiaReport, OrdinalCheck, Sample, SimilarityMatrix,
};
pub use patterns::{
    activation_frequency, extract_all_layers, extract_pattern, flocking_csv, flocking_export, gini,
    pattern_similarity, ActivationPattern, PatternMode, PatternSource, ReportThreshold,
    SimilarityMetric,
};

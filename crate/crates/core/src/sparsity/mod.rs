//! Neuron magnitudes, CETT calibration and the sparse FFN strategies.

mod cett;
mod kernels;
mod masks;
mod strategy;

pub use cett::{
    cett, cett_with, search_profile, search_threshold, CalibrationMeta, CettCurve, CettReduce,
    SearchOptions, SearchOutcome, ThresholdProfile, DEFAULT_CETT_TARGET, SEARCH_MAX_ITERS,
    SEARCH_REL_TOL,
};
pub use kernels::{
    dense_ffn, dense_ffn_into, gated_hidden, gated_hidden_into, magnitudes_from_hidden,
    neuron_magnitudes, neuron_magnitudes_with, tda_ffn_forward, tt_ffn_forward, tt_ffn_into,
    MagnitudeDef, SlicedFfn,
};
pub use masks::{
    aggregate, build_griffin_masks, build_tda_masks, griffin_keep, profile_for_sparsity,
    sparsity_report, Aggregation, LayerMaskSet, LayerScores, SparsityReport,
};
pub use strategy::{FfnStrategy, StrategyRunner, StrategyStats};

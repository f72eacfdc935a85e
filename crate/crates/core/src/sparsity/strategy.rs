use serde::{Deserialize, Serialize};

use super::cett::ThresholdProfile;
use super::kernels::{dense_ffn_into, tt_ffn_into, MagnitudeDef, SlicedFfn};
use super::masks::{
    build_griffin_masks, build_tda_masks, sparsity_report, Aggregation, LayerMaskSet,
};
use crate::error::{Error, Result};
use crate::model::{FfnBackend, LayerWeights, ModelWeights, PrefillTrace};
use crate::tensor::{ActivationKind, MulAddCounter};

/// Which FFN execution path the generation phase uses.
#[derive(Clone, Debug, PartialEq)]
pub enum FfnStrategy {
    Dense,
    /// Per-token threshold truncation.
    Tt(ThresholdProfile),
    /// Fixed top-k per layer from prompt statistics.
    Griffin {
        sparsity: f64,
    },
    /// Threshold masks from the prompt, reused for every generated token.
    Tda(ThresholdProfile),
}

impl FfnStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            FfnStrategy::Dense => "dense",
            FfnStrategy::Tt(_) => "tt",
            FfnStrategy::Griffin { .. } => "griffin",
            FfnStrategy::Tda(_) => "tda",
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        match self {
            FfnStrategy::Dense => Ok(()),
            FfnStrategy::Tt(p) | FfnStrategy::Tda(p) => p.validate(n_layers),
            FfnStrategy::Griffin { sparsity } => {
                if *sparsity > 0.0 && *sparsity < 1.0 {
                    Ok(())
                } else {
                    Err(Error::contract(format!(
                        "griffin sparsity {sparsity} not in (0, 1)"
                    )))
                }
            }
        }
    }

    pub fn uses_masks(&self) -> bool {
        matches!(self, FfnStrategy::Griffin { .. } | FfnStrategy::Tda(_))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrategyStats {
    pub strategy: String,
    /// FFN invocations after `prepare` (one per layer per token).
    pub ffn_calls: u64,
    pub ffn_mul_adds: u64,
    pub per_layer_active_fraction: Vec<f64>,
    pub mean_active_fraction: f64,
}

/// Executes one [`FfnStrategy`] for a single sequence.
///
/// Owns the per-sequence state: the mask set (Griffin/TDA) with the sliced
/// weights derived from it, counters, and scratch buffers.
pub struct StrategyRunner {
    strategy: FfnStrategy,
    kind: ActivationKind,
    d_ff: usize,
    griffin_def: MagnitudeDef,
    griffin_aggregation: Aggregation,
    masks: Option<LayerMaskSet>,
    sliced: Vec<SlicedFfn>,
    counter: MulAddCounter,
    calls_per_layer: Vec<u64>,
    active_per_layer: Vec<u64>,
    h: Vec<f32>,
    active: Vec<usize>,
}

impl StrategyRunner {
    pub fn new(strategy: FfnStrategy, weights: &ModelWeights) -> Result<Self> {
        let n = weights.layers.len();
        strategy.validate(n)?;
        let d_ff = weights.config.d_ff;
        Ok(Self {
            strategy,
            kind: weights.config.activation_kind,
            d_ff,
            griffin_def: MagnitudeDef::Full,
            griffin_aggregation: Aggregation::Flocking,
            masks: None,
            sliced: Vec::new(),
            counter: MulAddCounter::default(),
            calls_per_layer: vec![0; n],
            active_per_layer: vec![0; n],
            h: vec![0.0; d_ff],
            active: Vec::with_capacity(d_ff),
        })
    }

    /// Magnitude definition and aggregation used for Griffin rankings.
    pub fn with_griffin_ranking(mut self, def: MagnitudeDef, how: Aggregation) -> Self {
        self.griffin_def = def;
        self.griffin_aggregation = how;
        self
    }

    pub fn strategy(&self) -> &FfnStrategy {
        &self.strategy
    }
}

impl FfnBackend for StrategyRunner {
    fn prepare(&mut self, weights: &ModelWeights, trace: &PrefillTrace) -> Result<()> {
        let masks = match &self.strategy {
            FfnStrategy::Dense | FfnStrategy::Tt(_) => return Ok(()),
            FfnStrategy::Griffin { sparsity } => build_griffin_masks(
                trace,
                *sparsity,
                weights,
                self.griffin_def,
                self.griffin_aggregation,
            )?,
            FfnStrategy::Tda(profile) => build_tda_masks(trace, profile, weights)?,
        };
        self.sliced = weights
            .layers
            .iter()
            .zip(masks.layers())
            .map(|(l, m)| SlicedFfn::new(l, m))
            .collect();
        self.masks = Some(masks);
        Ok(())
    }

    fn forward(&mut self, layer_idx: usize, layer: &LayerWeights, x: &[f32], out: &mut [f32]) {
        let active = match &self.strategy {
            FfnStrategy::Dense => {
                dense_ffn_into(layer, x, self.kind, &mut self.h, out, &mut self.counter);
                self.d_ff
            }
            FfnStrategy::Tt(profile) => {
                tt_ffn_into(
                    layer,
                    x,
                    self.kind,
                    profile.per_layer_epsilon[layer_idx],
                    profile.magnitude_def,
                    &mut self.h,
                    &mut self.active,
                    out,
                    &mut self.counter,
                );
                self.active.len()
            }
            FfnStrategy::Griffin { .. } | FfnStrategy::Tda(_) => {
                let s = self
                    .sliced
                    .get(layer_idx)
                    .expect("prepare() must run before a masked strategy is used");
                s.forward_into(x, self.kind, &mut self.h, out, &mut self.counter);
                s.active_count()
            }
        };
        self.calls_per_layer[layer_idx] += 1;
        self.active_per_layer[layer_idx] += active as u64;
    }

    fn masks(&self) -> Option<&LayerMaskSet> {
        self.masks.as_ref()
    }

    fn stats(&self) -> StrategyStats {
        let per_layer: Vec<f64> = match &self.masks {
            Some(m) => sparsity_report(m).per_layer_active_fraction,
            None => self
                .calls_per_layer
                .iter()
                .zip(&self.active_per_layer)
                .map(|(&c, &a)| {
                    if c == 0 {
                        1.0
                    } else {
                        a as f64 / (c as f64 * self.d_ff as f64)
                    }
                })
                .collect(),
        };
        let mean = per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64;
        StrategyStats {
            strategy: self.strategy.name().to_string(),
            ffn_calls: self.calls_per_layer.iter().sum(),
            ffn_mul_adds: self.counter.0,
            per_layer_active_fraction: per_layer,
            mean_active_fraction: mean,
        }
    }
}

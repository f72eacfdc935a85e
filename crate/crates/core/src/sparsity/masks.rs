//! Sequence-level neuron masks built from prompt activations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::cett::{CalibrationMeta, ThresholdProfile};
use super::kernels::{magnitudes_from_hidden, MagnitudeDef};
use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelWeights, PrefillTrace};

/// How per-token magnitudes are folded into one score per neuron.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `s_i = Σ_t (m_{t,i} / ‖m_t‖₂)²`.
    #[default]
    Flocking,
    /// `s_i = sqrt(Σ_t m_{t,i}²)`.
    L2,
}

/// Aggregated neuron scores for one layer of a prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerScores {
    pub scores: Vec<f64>,
    /// Tokens with a non-zero magnitude vector.
    pub n_tokens: usize,
    /// Mean ‖m_t‖₂ over those tokens.
    pub mean_token_norm: f64,
}

impl LayerScores {
    pub fn max(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    /// Score a neuron would reach if its magnitude were exactly `epsilon`
    /// on the mean prompt token, at every token.
    pub fn score_cut(&self, epsilon: f64, how: Aggregation) -> f64 {
        let t = self.n_tokens as f64;
        match how {
            Aggregation::Flocking => {
                let r = epsilon / self.mean_token_norm;
                t * r * r
            }
            Aggregation::L2 => epsilon * t.sqrt(),
        }
    }

    /// Inverse of [`Self::score_cut`].
    pub fn epsilon_for_cut(&self, cut: f64, how: Aggregation) -> f64 {
        let t = self.n_tokens as f64;
        match how {
            Aggregation::Flocking => self.mean_token_norm * (cut / t).sqrt(),
            Aggregation::L2 => cut / t.sqrt(),
        }
    }
}

/// Folds the magnitudes of every token's hidden vector into neuron scores.
pub fn aggregate<H: AsRef<[f32]>>(
    layer: &LayerWeights,
    hidden: &[H],
    def: MagnitudeDef,
    how: Aggregation,
) -> LayerScores {
    let d_ff = layer.d_ff();
    let mut scores = vec![0f64; d_ff];
    let mut n_tokens = 0;
    let mut norm_sum = 0f64;
    for h in hidden {
        let m = magnitudes_from_hidden(layer, h.as_ref(), def);
        let norm = m
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            continue;
        }
        n_tokens += 1;
        norm_sum += norm;
        for (s, &v) in scores.iter_mut().zip(&m) {
            let v = f64::from(v);
            *s += match how {
                Aggregation::Flocking => (v / norm) * (v / norm),
                Aggregation::L2 => v * v,
            };
        }
    }
    if how == Aggregation::L2 {
        scores.iter_mut().for_each(|s| *s = s.sqrt());
    }
    LayerScores {
        scores,
        n_tokens,
        mean_token_norm: if n_tokens > 0 {
            norm_sum / n_tokens as f64
        } else {
            0.0
        },
    }
}

/// One boolean mask per layer; `true` marks a computed neuron.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerMaskSet {
    masks: Vec<Vec<bool>>,
}

impl LayerMaskSet {
    pub fn new(masks: Vec<Vec<bool>>) -> Self {
        Self { masks }
    }

    pub fn all_active(n_layers: usize, d_ff: usize) -> Self {
        Self {
            masks: vec![vec![true; d_ff]; n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.masks.len()
    }

    pub fn layer(&self, i: usize) -> &[bool] {
        &self.masks[i]
    }

    pub fn layers(&self) -> impl Iterator<Item = &[bool]> {
        self.masks.iter().map(Vec::as_slice)
    }

    pub fn active_count(&self, i: usize) -> usize {
        self.masks[i].iter().filter(|&&m| m).count()
    }

    /// FNV-1a over the mask bits, for cheap equality checks across steps.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in &self.masks {
            for &b in m {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// One line per layer: `<layer> <d_ff> <hex bitmap>`, most significant
    /// bit of each nibble first, final nibble zero-padded.
    pub fn to_hex(&self) -> String {
        let mut out = String::new();
        for (i, m) in self.masks.iter().enumerate() {
            write!(out, "{i} {} ", m.len()).unwrap();
            for chunk in m.chunks(4) {
                let mut nib = 0u8;
                for (k, &b) in chunk.iter().enumerate() {
                    if b {
                        nib |= 8 >> k;
                    }
                }
                write!(out, "{nib:x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_hex(text: &str) -> Result<Self> {
        let mut masks = Vec::new();
        for (lineno, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let bad = || Error::contract(format!("mask dump line {}: malformed", lineno + 1));
            let mut parts = line.split_whitespace();
            let idx: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let len: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let hex = parts.next().unwrap_or("");
            if idx != masks.len() || hex.len() != len.div_ceil(4) {
                return Err(bad());
            }
            let mut m = Vec::with_capacity(len);
            for c in hex.chars() {
                let nib = c.to_digit(16).ok_or_else(bad)?;
                for k in 0..4 {
                    if m.len() < len {
                        m.push(nib & (8 >> k) != 0);
                    }
                }
            }
            masks.push(m);
        }
        Ok(Self { masks })
    }
}

fn check_trace(weights: &ModelWeights, trace: &PrefillTrace) -> Result<()> {
    if trace.n_layers() != weights.layers.len() {
        return Err(Error::contract("trace layer count differs from model"));
    }
    if trace.n_tokens() == 0 {
        return Err(Error::contract("trace covers no tokens"));
    }
    Ok(())
}

/// TDA masks: aggregate the prompt, normalize to relative magnitudes
/// `R = s / max(s)` and keep neurons with `R ≥ r_cut`, where `r_cut` is the
/// profile's ε mapped into score space (see [`LayerScores::score_cut`]).
/// A layer whose aggregate is all zero keeps every neuron.
pub fn build_tda_masks(
    trace: &PrefillTrace,
    profile: &ThresholdProfile,
    weights: &ModelWeights,
) -> Result<LayerMaskSet> {
    check_trace(weights, trace)?;
    profile.validate(weights.layers.len())?;
    let masks = weights
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let agg = aggregate(
                layer,
                &trace.hidden[l],
                profile.magnitude_def,
                profile.aggregation,
            );
            let max = agg.max();
            if max <= 0.0 {
                return vec![true; layer.d_ff()];
            }
            let r_cut = agg.score_cut(profile.per_layer_epsilon[l], profile.aggregation) / max;
            agg.scores.iter().map(|&s| s / max >= r_cut).collect()
        })
        .collect();
    Ok(LayerMaskSet { masks })
}

/// Number of neurons Griffin keeps: ⌈(1 − sparsity) · d_ff⌉.
pub fn griffin_keep(d_ff: usize, sparsity: f64) -> usize {
    // d - ⌊s·d⌋ equals ⌈(1 - s)·d⌉; the nudge absorbs binary rounding of s·d
    let pruned = (sparsity * d_ff as f64 + 1e-9).floor() as usize;
    d_ff.saturating_sub(pruned).max(1)
}

fn top_k(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

/// Griffin-style masks: fixed top-k per layer by the prompt aggregate,
/// lower index winning ties.
pub fn build_griffin_masks(
    trace: &PrefillTrace,
    sparsity: f64,
    weights: &ModelWeights,
    def: MagnitudeDef,
    how: Aggregation,
) -> Result<LayerMaskSet> {
    if !(sparsity > 0.0 && sparsity < 1.0) {
        return Err(Error::contract(format!(
            "sparsity {sparsity} not in (0, 1)"
        )));
    }
    check_trace(weights, trace)?;
    let masks = weights
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let agg = aggregate(layer, &trace.hidden[l], def, how);
            top_k(&agg.scores, griffin_keep(layer.d_ff(), sparsity))
        })
        .collect();
    Ok(LayerMaskSet { masks })
}

/// Thresholds that make the TDA mask of `trace` keep
/// ⌈(1 − sparsity) · d_ff⌉ neurons per layer (up to ties at the cut).
pub fn profile_for_sparsity(
    trace: &PrefillTrace,
    sparsity: f64,
    weights: &ModelWeights,
    def: MagnitudeDef,
    how: Aggregation,
    dataset_tag: &str,
) -> Result<ThresholdProfile> {
    if !(sparsity > 0.0 && sparsity < 1.0) {
        return Err(Error::contract(format!(
            "sparsity {sparsity} not in (0, 1)"
        )));
    }
    check_trace(weights, trace)?;
    let mut eps = Vec::with_capacity(weights.layers.len());
    for (l, layer) in weights.layers.iter().enumerate() {
        let agg = aggregate(layer, &trace.hidden[l], def, how);
        if agg.n_tokens == 0 {
            return Err(Error::DegenerateCalibration(format!(
                "layer {l} has no active tokens"
            )));
        }
        let mut sorted = agg.scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cut = sorted[griffin_keep(layer.d_ff(), sparsity) - 1];
        eps.push(agg.epsilon_for_cut(cut, how));
    }
    Ok(ThresholdProfile {
        cett_target: super::cett::DEFAULT_CETT_TARGET,
        per_layer_epsilon: eps,
        magnitude_def: def,
        aggregation: how,
        calibration: CalibrationMeta {
            n_tokens: trace.n_tokens(),
            dataset_tag: dataset_tag.to_string(),
            target_sparsity: Some(sparsity),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub per_layer_active_fraction: Vec<f64>,
    pub mean_active_fraction: f64,
}

pub fn sparsity_report(masks: &LayerMaskSet) -> SparsityReport {
    let per: Vec<f64> = masks
        .masks
        .iter()
        .map(|m| {
            if m.is_empty() {
                0.0
            } else {
                m.iter().filter(|&&b| b).count() as f64 / m.len() as f64
            }
        })
        .collect();
    let mean = if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    };
    SparsityReport {
        per_layer_active_fraction: per,
        mean_active_fraction: mean,
    }
}

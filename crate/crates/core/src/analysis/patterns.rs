use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{prefill_tokens, ModelWeights, PrefillTrace};
use crate::sparsity::{magnitudes_from_hidden, MagnitudeDef, ThresholdProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternMode {
    /// Every token runs alone with an empty context.
    PerToken,
    /// Tokens run jointly; one pattern per position.
    AsSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternSource {
    SingleToken(u32),
    Sequence(usize),
}

/// Binarized neuron activity of one layer for one token or position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationPattern {
    pub layer: usize,
    pub active: Vec<bool>,
    pub source: PatternSource,
}

impl ActivationPattern {
    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Binarization rule applied to neuron magnitudes.
#[derive(Clone, Copy, Debug)]
pub enum ReportThreshold<'a> {
    /// Per-layer ε of a threshold profile.
    Profile(&'a ThresholdProfile),
    Fixed(f64),
    /// 10⁻³ × the largest magnitude of the pattern itself.
    RelativeToMax,
}

impl ReportThreshold<'_> {
    fn resolve(&self, layer: usize, magnitudes: &[f32]) -> f64 {
        match self {
            ReportThreshold::Profile(p) => p.per_layer_epsilon[layer],
            ReportThreshold::Fixed(t) => *t,
            ReportThreshold::RelativeToMax => {
                1e-3 * magnitudes.iter().copied().fold(0f32, f32::max) as f64
            }
        }
    }

    fn def(&self) -> MagnitudeDef {
        match self {
            ReportThreshold::Profile(p) => p.magnitude_def,
            _ => MagnitudeDef::Full,
        }
    }
}

fn binarize(magnitudes: &[f32], thr: f64) -> Vec<bool> {
    magnitudes
        .iter()
        .map(|&m| m > 0.0 && f64::from(m) >= thr)
        .collect()
}

fn patterns_from_trace(
    weights: &ModelWeights,
    trace: &PrefillTrace,
    positions: impl Iterator<Item = (usize, PatternSource)> + Clone,
    threshold: &ReportThreshold,
) -> Vec<Vec<ActivationPattern>> {
    weights
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            positions
                .clone()
                .map(|(t, source)| {
                    let m = magnitudes_from_hidden(layer, &trace.hidden[l][t], threshold.def());
                    ActivationPattern {
                        layer: l,
                        active: binarize(&m, threshold.resolve(l, &m)),
                        source,
                    }
                })
                .collect()
        })
        .collect()
}

/// Patterns of every layer, indexed `[layer][token or position]`.
pub fn extract_all_layers(
    weights: &ModelWeights,
    tokens: &[u32],
    mode: PatternMode,
    threshold: ReportThreshold,
) -> Result<Vec<Vec<ActivationPattern>>> {
    if tokens.is_empty() {
        return Err(Error::contract("no tokens to extract patterns from"));
    }
    if let ReportThreshold::Profile(p) = threshold {
        p.validate(weights.layers.len())?;
    }
    match mode {
        PatternMode::AsSequence => {
            let trace = prefill_tokens(weights, tokens)?.trace;
            let pos = (0..tokens.len()).map(|t| (t, PatternSource::Sequence(t)));
            Ok(patterns_from_trace(weights, &trace, pos, &threshold))
        }
        PatternMode::PerToken => {
            let mut out = vec![Vec::with_capacity(tokens.len()); weights.layers.len()];
            for &tok in tokens {
                let trace = prefill_tokens(weights, &[tok])?.trace;
                let one = patterns_from_trace(
                    weights,
                    &trace,
                    std::iter::once((0, PatternSource::SingleToken(tok))),
                    &threshold,
                );
                for (dst, mut src) in out.iter_mut().zip(one) {
                    dst.append(&mut src);
                }
            }
            Ok(out)
        }
    }
}

/// Patterns of a single layer.
pub fn extract_pattern(
    weights: &ModelWeights,
    tokens: &[u32],
    mode: PatternMode,
    layer: usize,
    threshold: ReportThreshold,
) -> Result<Vec<ActivationPattern>> {
    if layer >= weights.layers.len() {
        return Err(Error::contract(format!("layer {layer} out of range")));
    }
    Ok(extract_all_layers(weights, tokens, mode, threshold)?.swap_remove(layer))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    #[default]
    Jaccard,
    Cosine,
}

/// Similarity of two equal-length binary patterns, in `[0, 1]`. Two empty
/// patterns are identical.
pub fn pattern_similarity(a: &[bool], b: &[bool], metric: SimilarityMetric) -> f64 {
    assert_eq!(a.len(), b.len(), "pattern lengths differ");
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        both += usize::from(x && y);
        na += usize::from(x);
        nb += usize::from(y);
    }
    if na == 0 && nb == 0 {
        return 1.0;
    }
    match metric {
        SimilarityMetric::Jaccard => both as f64 / (na + nb - both) as f64,
        SimilarityMetric::Cosine => {
            if na == 0 || nb == 0 {
                0.0
            } else if na == nb && both == na {
                1.0
            } else {
                (both as f64 / ((na as f64) * (nb as f64)).sqrt()).min(1.0)
            }
        }
    }
}

/// Per-neuron activation frequency (column means).
pub fn activation_frequency(patterns: &[ActivationPattern]) -> Vec<f64> {
    let Some(first) = patterns.first() else {
        return Vec::new();
    };
    let mut freq = vec![0f64; first.active.len()];
    for p in patterns {
        for (f, &a) in freq.iter_mut().zip(&p.active) {
            *f += f64::from(u8::from(a));
        }
    }
    let n = patterns.len() as f64;
    freq.iter_mut().for_each(|f| *f /= n);
    freq
}

/// Gini coefficient of non-negative values; 0 for uniform or all-zero input.
pub fn gini(values: &[f64]) -> f64 {
    let total: f64 = values.iter().sum();
    if values.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let weighted: f64 = v
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    weighted / (n * total)
}

/// CSV text: one 0/1 row per pattern, then a row of activation frequencies.
pub fn flocking_csv(patterns: &[ActivationPattern]) -> Result<String> {
    let Some(first) = patterns.first() else {
        return Err(Error::contract("no patterns to export"));
    };
    let width = first.active.len();
    if patterns.iter().any(|p| p.active.len() != width) {
        return Err(Error::contract("patterns have different lengths"));
    }
    let mut out = String::with_capacity((patterns.len() + 1) * width * 2);
    for p in patterns {
        let row: Vec<&str> = p
            .active
            .iter()
            .map(|&a| if a { "1" } else { "0" })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    for (i, f) in activation_frequency(patterns).iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{f:.6}").expect("writing to a String");
    }
    out.push('\n');
    Ok(out)
}

pub fn flocking_export(patterns: &[ActivationPattern], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, flocking_csv(patterns)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::ActivationKind;
    use proptest::prelude::*;

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    fn pat(s: &str) -> ActivationPattern {
        ActivationPattern {
            layer: 0,
            active: bits(s),
            source: PatternSource::Sequence(0),
        }
    }

    fn model(seed: u64) -> ModelWeights {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 48,
            n_heads: 2,
            activation_kind: ActivationKind::Relu,
            max_seq_len: 64,
            ..ModelConfig::default()
        };
        ModelWeights::random(cfg, seed).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        assert!(
            (pattern_similarity(&bits("1100"), &bits("1010"), SimilarityMetric::Jaccard)
                - 1.0 / 3.0)
                .abs()
                < 1e-15
        );
        assert_eq!(
            pattern_similarity(&bits("1100"), &bits("1100"), SimilarityMetric::Jaccard),
            1.0
        );
        assert_eq!(
            pattern_similarity(&bits("1100"), &bits("0011"), SimilarityMetric::Jaccard),
            0.0
        );
        assert_eq!(
            pattern_similarity(&bits("0000"), &bits("0000"), SimilarityMetric::Jaccard),
            1.0
        );
    }

    #[test]
    fn cosine_examples() {
        let c = pattern_similarity(&bits("1100"), &bits("1010"), SimilarityMetric::Cosine);
        assert!((c - 0.5).abs() < 1e-15);
        assert_eq!(
            pattern_similarity(&bits("0110"), &bits("0110"), SimilarityMetric::Cosine),
            1.0
        );
        assert_eq!(
            pattern_similarity(&bits("1000"), &bits("0000"), SimilarityMetric::Cosine),
            0.0
        );
    }

    proptest! {
        #[test]
        fn similarity_axioms(a in prop::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            for metric in [SimilarityMetric::Jaccard, SimilarityMetric::Cosine] {
                let ab = pattern_similarity(&a, &b, metric);
                prop_assert_eq!(ab, pattern_similarity(&b, &a, metric));
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(pattern_similarity(&a, &a, metric), 1.0);
            }
        }
    }

    #[test]
    fn csv_format() {
        let csv = flocking_csv(&[pat("1100"), pat("1010")]).unwrap();
        assert_eq!(
            csv,
            "1,1,0,0\n1,0,1,0\n1.000000,0.500000,0.500000,0.000000\n"
        );
        assert_eq!(csv.lines().count(), 3);
        assert!(flocking_csv(&[]).is_err());
        assert!(flocking_csv(&[pat("1"), pat("10")]).is_err());
    }

    #[test]
    fn export_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.csv");
        flocking_export(&[pat("01")], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(path).unwrap(),
            "0,1\n0.000000,1.000000\n"
        );
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(gini(&[0.0, 0.0]), 0.0);
        // one holder of everything among n: (n-1)/n
        assert!((gini(&[0.0, 0.0, 0.0, 5.0]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_token_modes_agree() {
        let w = model(1);
        for layer in 0..2 {
            let a = extract_pattern(
                &w,
                &[72],
                PatternMode::PerToken,
                layer,
                ReportThreshold::RelativeToMax,
            )
            .unwrap();
            let b = extract_pattern(
                &w,
                &[72],
                PatternMode::AsSequence,
                layer,
                ReportThreshold::RelativeToMax,
            )
            .unwrap();
            assert_eq!(a[0].active, b[0].active);
            assert_eq!(a[0].source, PatternSource::SingleToken(72));
            assert_eq!(b[0].source, PatternSource::Sequence(0));
        }
    }

    #[test]
    fn per_token_patterns_are_isolated() {
        let w = model(2);
        let toks = [10u32, 20, 30, 40];
        let a = extract_all_layers(
            &w,
            &toks,
            PatternMode::PerToken,
            ReportThreshold::RelativeToMax,
        )
        .unwrap();
        let rev: Vec<u32> = toks.iter().rev().copied().collect();
        let b = extract_all_layers(
            &w,
            &rev,
            PatternMode::PerToken,
            ReportThreshold::RelativeToMax,
        )
        .unwrap();
        for l in 0..2 {
            for i in 0..4 {
                assert_eq!(a[l][i], b[l][3 - i]);
            }
        }
    }

    #[test]
    fn sequence_patterns_depend_on_history() {
        let w = model(3);
        let a = extract_pattern(
            &w,
            &[1, 2, 3],
            PatternMode::AsSequence,
            1,
            ReportThreshold::Fixed(0.02),
        )
        .unwrap();
        let b = extract_pattern(
            &w,
            &[1, 9, 3],
            PatternMode::AsSequence,
            1,
            ReportThreshold::Fixed(0.02),
        )
        .unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[2].active, b[2].active);
    }

    #[test]
    fn thresholds_are_applied() {
        let w = model(4);
        let none = extract_pattern(
            &w,
            &[5],
            PatternMode::PerToken,
            0,
            ReportThreshold::Fixed(f64::INFINITY),
        )
        .unwrap();
        assert_eq!(none[0].count(), 0);
        let mut p = ThresholdProfile::zeros(2);
        let zero = extract_pattern(
            &w,
            &[5],
            PatternMode::PerToken,
            0,
            ReportThreshold::Profile(&p),
        )
        .unwrap();
        let rel = extract_pattern(
            &w,
            &[5],
            PatternMode::PerToken,
            0,
            ReportThreshold::RelativeToMax,
        )
        .unwrap();
        // ε = 0 keeps exactly the strictly positive magnitudes
        assert!(zero[0].count() >= rel[0].count());
        p.per_layer_epsilon = vec![1.0; 3];
        assert!(extract_pattern(
            &w,
            &[5],
            PatternMode::PerToken,
            0,
            ReportThreshold::Profile(&p)
        )
        .is_err());
        assert!(extract_pattern(
            &w,
            &[],
            PatternMode::PerToken,
            0,
            ReportThreshold::RelativeToMax
        )
        .is_err());
        assert!(extract_pattern(
            &w,
            &[5],
            PatternMode::PerToken,
            2,
            ReportThreshold::RelativeToMax
        )
        .is_err());
    }
}

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::patterns::{
    extract_all_layers, pattern_similarity, PatternMode, ReportThreshold, SimilarityMetric,
};
use crate::error::{Error, Result};
use crate::model::{tokenize, ModelWeights};
use crate::sparsity::ThresholdProfile;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub text: String,
    pub treatment: String,
}

const BUILTIN: [(&str, &str); 13] = [
    (
        "### Article: Almost one million people visited the city",
        "Baseline",
    ),
    (
        "Article: Almost one million people visited the city",
        "Remove beginning token",
    ),
    (
        "Almost one million people visited the city",
        "Remove beginning tokens",
    ),
    (
        "### Article: Nearly one million people visited the city",
        "Modify the word at the beginning of the sequence",
    ),
    (
        "Nearly one million people visited the city",
        "Remove beginning tokens",
    ),
    (
        "### Article: Less than one million people visited the city",
        "Change to antonym",
    ),
    (
        "Less than one million people visited the city",
        "Remove beginning tokens",
    ),
    (
        "### Article: Almost one million people visited the city",
        "Similarity threshold",
    ),
    (
        "### Article: Almost one million people visited the restaurant",
        "Change to synonyms",
    ),
    (
        "Almost one million people visited the restaurant",
        "Modify the word at the end of the sequence",
    ),
    (
        "Almost one million people visited the planet",
        "Modify the word at the end of the sequence",
    ),
    (
        "Almost one million tourists visited the restaurant",
        "Modify the words at the middle and end",
    ),
    (
        "Almost one million aliens visited the planet",
        "Dissimilarity threshold",
    ),
];

/// The thirteen-sample inertia battery, indexed from 1.
pub fn builtin_samples() -> Vec<Sample> {
    BUILTIN
        .iter()
        .enumerate()
        .map(|(i, (text, treatment))| Sample {
            index: i + 1,
            text: (*text).to_string(),
            treatment: (*treatment).to_string(),
        })
        .collect()
}

/// Symmetric matrix of pairwise similarities with a unit diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Similarity of samples `a` and `b`, 1-indexed.
    pub fn sim(&self, a: usize, b: usize) -> f64 {
        self.values[a - 1][b - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample");
        for l in &self.labels {
            write!(out, ",{l}").unwrap();
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            write!(out, "{l}").unwrap();
            for v in row {
                write!(out, ",{v:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdinalCheck {
    pub check_id: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `None` when the weights carry no semantics (not pretrained).
    pub pass: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InertiaOptions {
    pub metric: SimilarityMetric,
    /// Restrict to one layer instead of averaging over all layers.
    pub layer: Option<usize>,
    /// Binarize at the profile's per-layer ε.
    pub profile: Option<ThresholdProfile>,
    /// Fixed threshold, used when no profile is given. With neither,
    /// 10⁻³ × the pattern's max magnitude.
    pub threshold: Option<f64>,
}

impl Default for InertiaOptions {
    fn default() -> Self {
        Self {
            metric: SimilarityMetric::Jaccard,
            layer: None,
            profile: None,
            threshold: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InertiaReport {
    pub matrix: SimilarityMatrix,
    /// Empty unless the battery is the thirteen built-in samples.
    pub checks: Vec<OrdinalCheck>,
    pub pretrained: bool,
}

impl InertiaReport {
    /// `Some(all pass)` for pretrained weights, `None` otherwise.
    pub fn verdict(&self) -> Option<bool> {
        if !self.pretrained || self.checks.is_empty() {
            return None;
        }
        Some(self.checks.iter().all(|c| c.pass == Some(true)))
    }
}

fn last_position_patterns(
    weights: &ModelWeights,
    sample: &Sample,
    opts: &InertiaOptions,
) -> Result<Vec<Vec<bool>>> {
    let thr = match (&opts.profile, opts.threshold) {
        (Some(p), _) => ReportThreshold::Profile(p),
        (None, Some(t)) => ReportThreshold::Fixed(t),
        (None, None) => ReportThreshold::RelativeToMax,
    };
    let tokens = tokenize(&sample.text);
    let all = extract_all_layers(weights, &tokens, PatternMode::AsSequence, thr)?;
    Ok(all
        .into_iter()
        .enumerate()
        .filter(|(l, _)| opts.layer.is_none_or(|sel| sel == *l))
        .map(|(_, mut per_pos)| per_pos.pop().expect("non-empty sequence").active)
        .collect())
}

/// Pairwise similarity of the samples' final-position patterns.
pub fn similarity_matrix(
    weights: &ModelWeights,
    samples: &[Sample],
    opts: &InertiaOptions,
) -> Result<SimilarityMatrix> {
    if samples.len() < 2 {
        return Err(Error::contract("the battery needs at least two samples"));
    }
    if let Some(l) = opts.layer {
        if l >= weights.layers.len() {
            return Err(Error::contract(format!("layer {l} out of range")));
        }
    }
    let patterns: Vec<Vec<Vec<bool>>> = samples
        .par_iter()
        .map(|s| last_position_patterns(weights, s, opts))
        .collect::<Result<_>>()?;
    let n = samples.len();
    let mut values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let layers = patterns[i].len();
            let s = patterns[i]
                .iter()
                .zip(&patterns[j])
                .map(|(a, b)| pattern_similarity(a, b, opts.metric))
                .sum::<f64>()
                / layers as f64;
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    Ok(SimilarityMatrix {
        labels: samples.iter().map(|s| s.index).collect(),
        values,
    })
}

fn max_over(m: &SimilarityMatrix, s: usize, others: impl IntoIterator<Item = usize>) -> f64 {
    others
        .into_iter()
        .map(|j| m.sim(s, j))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Five ordinal relations over the thirteen-sample matrix, split into one
/// entry per (sample, target) comparison.
pub fn ordinal_checks(m: &SimilarityMatrix, pretrained: bool) -> Vec<OrdinalCheck> {
    let mut out = Vec::new();
    let mut push = |id: String, lhs: f64, rhs: f64| {
        out.push(OrdinalCheck {
            check_id: id,
            lhs,
            rhs,
            pass: pretrained.then_some(lhs > rhs),
        })
    };
    for s in [4, 6, 9] {
        push(
            format!("a:{s}~1>{s}~2,3"),
            m.sim(s, 1),
            max_over(m, s, [2, 3]),
        );
    }
    for s in [1, 6, 8, 9] {
        push(format!("b:{s}~4>{s}~5"), m.sim(s, 4), m.sim(s, 5));
    }
    // sample 8 repeats sample 1 verbatim, so 1 is excluded from the rivals
    let rivals_c = [2, 3, 5, 7, 10, 11, 12, 13];
    for t in [4, 6, 8] {
        push(
            format!("c:9~{t}>9~rest"),
            m.sim(9, t),
            max_over(m, 9, rivals_c),
        );
    }
    for s in [11, 12] {
        for t in [9, 10] {
            push(
                format!("d:{s}~{t}>{s}~1..8"),
                m.sim(s, t),
                max_over(m, s, 1..=8),
            );
        }
    }
    for s in [10, 11, 12] {
        let rest = (1..=13).filter(|&j| j != s && j != 13);
        push(
            format!("e:{s}~13>{s}~any"),
            m.sim(s, 13),
            max_over(m, s, rest),
        );
    }
    out
}

/// Similarity matrix plus, for the built-in battery, the ordinal checks.
pub fn inertia_battery(
    weights: &ModelWeights,
    samples: &[Sample],
    opts: &InertiaOptions,
) -> Result<InertiaReport> {
    let matrix = similarity_matrix(weights, samples, opts)?;
    let pretrained = weights.config.pretrained;
    let is_builtin =
        samples.len() == 13 && samples.iter().enumerate().all(|(i, s)| s.index == i + 1);
    let checks = if is_builtin {
        ordinal_checks(&matrix, pretrained)
    } else {
        Vec::new()
    };
    Ok(InertiaReport {
        matrix,
        checks,
        pretrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> ModelWeights {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 64,
            n_heads: 2,
            max_seq_len: 128,
            ..ModelConfig::default()
        };
        ModelWeights::random(cfg, 11).unwrap()
    }

    #[test]
    fn builtin_has_thirteen_rows() {
        let s = builtin_samples();
        assert_eq!(s.len(), 13);
        assert_eq!(s[0].text, s[7].text);
        assert_eq!(s[12].index, 13);
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let w = model();
        let r = inertia_battery(&w, &builtin_samples(), &InertiaOptions::default()).unwrap();
        let m = &r.matrix;
        assert_eq!(m.n(), 13);
        for i in 0..13 {
            assert_eq!(m.values[i][i], 1.0);
            for j in 0..13 {
                assert_eq!(m.values[i][j], m.values[j][i]);
                assert!((0.0..=1.0).contains(&m.values[i][j]));
            }
        }
        // identical texts give identical patterns
        assert_eq!(m.sim(1, 8), 1.0);
        assert_eq!(r.checks.len(), 3 + 4 + 3 + 4 + 3);
        assert!(r.checks.iter().all(|c| c.pass.is_none()));
        assert_eq!(r.verdict(), None);
    }

    #[test]
    fn pretrained_flag_turns_checks_on() {
        let mut w = model();
        w.config.pretrained = true;
        let r = inertia_battery(&w, &builtin_samples(), &InertiaOptions::default()).unwrap();
        assert!(r.checks.iter().all(|c| c.pass == Some(c.lhs > c.rhs)));
        assert!(r.verdict().is_some());
    }

    #[test]
    fn custom_battery() {
        let w = model();
        let samples = vec![
            Sample {
                index: 1,
                text: "one".into(),
                treatment: String::new(),
            },
            Sample {
                index: 2,
                text: "two".into(),
                treatment: String::new(),
            },
        ];
        let opts = InertiaOptions {
            layer: Some(1),
            metric: SimilarityMetric::Cosine,
            ..InertiaOptions::default()
        };
        let r = inertia_battery(&w, &samples, &opts).unwrap();
        assert_eq!(r.matrix.n(), 2);
        assert!(r.checks.is_empty());
        let csv = r.matrix.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("sample,1,2\n1,1.000000,"));
        assert!(inertia_battery(&w, &samples[..1], &opts).is_err());
        let bad = InertiaOptions {
            layer: Some(5),
            ..InertiaOptions::default()
        };
        assert!(inertia_battery(&w, &samples, &bad).is_err());
    }

    #[test]
    fn ordinal_check_arithmetic() {
        // matrix where sim(i, j) = 1 / (1 + |i - j|)
        let values = (1..=13)
            .map(|i: i32| {
                (1..=13)
                    .map(|j: i32| 1.0 / (1.0 + (i - j).abs() as f64))
                    .collect()
            })
            .collect();
        let m = SimilarityMatrix {
            labels: (1..=13).collect(),
            values,
        };
        let checks = ordinal_checks(&m, true);
        let a4 = &checks[0];
        assert_eq!(a4.check_id, "a:4~1>4~2,3");
        assert_eq!(a4.lhs, 0.25);
        assert_eq!(a4.rhs, 0.5);
        assert_eq!(a4.pass, Some(false));
        let e12 = checks.last().unwrap();
        assert_eq!(e12.lhs, 0.5);
        assert_eq!(e12.rhs, 0.5);
        assert_eq!(e12.pass, Some(false));
    }
}

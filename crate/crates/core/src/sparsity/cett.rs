//! Cumulative error of tail truncation and the layer-wise threshold search.
//!
//! For a layer input `x` the FFN output decomposes into per-neuron
//! contributions `n_i(x) = h_i · W_out[:, i]`. Removing the set
//! `D = {i : ‖n_i(x)‖₂ < ε}` leaves a relative error
//! `‖Σ_{i∈D} n_i(x)‖₂ / ‖Σ_i n_i(x)‖₂`, the CETT. Calibration picks the
//! largest ε whose CETT, reduced over a set of calibration inputs, stays at
//! or below a target.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{gated_hidden, magnitudes_from_hidden, MagnitudeDef};
use super::masks::Aggregation;
use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelWeights};
use crate::tensor::{dot, dot_gather, ActivationKind};

/// CETT target used when none is given.
pub const DEFAULT_CETT_TARGET: f64 = 0.2;
/// Relative bracket width at which bisection stops.
pub const SEARCH_REL_TOL: f64 = 1e-3;
pub const SEARCH_MAX_ITERS: usize = 60;

/// CETT of one input at threshold `epsilon`.
pub fn cett(layer: &LayerWeights, x: &[f32], kind: ActivationKind, epsilon: f64) -> Result<f64> {
    cett_with(layer, x, kind, epsilon, MagnitudeDef::Full)
}

pub fn cett_with(
    layer: &LayerWeights,
    x: &[f32],
    kind: ActivationKind,
    epsilon: f64,
    def: MagnitudeDef,
) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::contract("epsilon must be non-negative"));
    }
    let h = gated_hidden(layer, x, kind);
    let mags = magnitudes_from_hidden(layer, &h, def);
    let pruned: Vec<usize> = (0..h.len())
        .filter(|&i| f64::from(mags[i]) < epsilon)
        .collect();
    let down = &layer.ffn_down;
    let mut num = 0f64;
    let mut den = 0f64;
    for r in 0..down.rows() {
        let full = dot(down.row(r), &h);
        let tail = dot_gather(down.row(r), &h, &pruned);
        den += full * full;
        num += tail * tail;
    }
    if den == 0.0 {
        return Err(Error::UndefinedCett);
    }
    Ok((num / den).sqrt())
}

/// CETT of one calibration input as a step function of ε.
///
/// Neurons are sorted by magnitude so `D(ε)` is always a prefix; the curve
/// stores the CETT of every prefix, making each evaluation a binary search.
#[derive(Clone, Debug)]
pub struct CettCurve {
    sorted_mags: Vec<f32>,
    prefix_cett: Vec<f64>,
}

impl CettCurve {
    /// `None` when the FFN output for `x` is exactly zero.
    pub fn new(
        layer: &LayerWeights,
        x: &[f32],
        kind: ActivationKind,
        def: MagnitudeDef,
    ) -> Option<Self> {
        let h = gated_hidden(layer, x, kind);
        let mags = magnitudes_from_hidden(layer, &h, def);
        let down = &layer.ffn_down;
        let d_model = down.rows();
        let den: f64 = (0..d_model)
            .map(|r| dot(down.row(r), &h).powi(2))
            .sum::<f64>()
            .sqrt();
        if den == 0.0 {
            return None;
        }
        let mut order: Vec<usize> = (0..h.len()).collect();
        order.sort_by(|&a, &b| mags[a].total_cmp(&mags[b]).then(a.cmp(&b)));

        let mut acc = vec![0f64; d_model];
        let mut prefix_cett = Vec::with_capacity(h.len() + 1);
        prefix_cett.push(0.0);
        for &i in &order {
            let hi = f64::from(h[i]);
            if hi != 0.0 {
                for (r, a) in acc.iter_mut().enumerate() {
                    *a += f64::from(down.get(r, i)) * hi;
                }
            }
            let n: f64 = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
            prefix_cett.push(n / den);
        }
        // every neuron pruned is exactly the full output
        *prefix_cett.last_mut().expect("non-empty") = 1.0;
        Some(Self {
            sorted_mags: order.iter().map(|&i| mags[i]).collect(),
            prefix_cett,
        })
    }

    pub fn eval(&self, epsilon: f64) -> f64 {
        let k = self
            .sorted_mags
            .partition_point(|&m| f64::from(m) < epsilon);
        self.prefix_cett[k]
    }

    pub fn magnitudes(&self) -> &[f32] {
        &self.sorted_mags
    }
}

/// How per-input CETT values are combined into one feasibility number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CettReduce {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug)]
pub struct SearchOptions {
    pub kind: ActivationKind,
    pub def: MagnitudeDef,
    pub reduce: CettReduce,
}

impl SearchOptions {
    pub fn new(kind: ActivationKind) -> Self {
        Self {
            kind,
            def: MagnitudeDef::Full,
            reduce: CettReduce::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub epsilon: f64,
    /// Reduced CETT at `epsilon`.
    pub cett: f64,
    pub iterations: usize,
    /// Calibration inputs with non-zero FFN output.
    pub n_used: usize,
    /// Every evaluated point agreed with a single feasible/infeasible cut.
    pub monotone: bool,
}

fn reduce(curves: &[CettCurve], epsilon: f64, how: CettReduce) -> f64 {
    match how {
        CettReduce::Mean => {
            curves.iter().map(|c| c.eval(epsilon)).sum::<f64>() / curves.len() as f64
        }
        CettReduce::Max => curves.iter().map(|c| c.eval(epsilon)).fold(0.0, f64::max),
    }
}

/// Largest ε with reduced CETT ≤ `cett_target` over `calibration`.
///
/// Bisects on `[0, max observed magnitude]` until the bracket is within
/// [`SEARCH_REL_TOL`], then snaps the feasible end up to the next observed
/// magnitude: CETT is constant between consecutive magnitudes, so that
/// value is the supremum of the feasible interval found.
pub fn search_threshold<X: AsRef<[f32]>>(
    layer: &LayerWeights,
    calibration: &[X],
    cett_target: f64,
    opts: SearchOptions,
) -> Result<SearchOutcome> {
    if calibration.is_empty() {
        return Err(Error::contract("calibration set is empty"));
    }
    if !(cett_target > 0.0 && cett_target < 1.0) {
        return Err(Error::contract(format!(
            "cett_target {cett_target} not in (0, 1)"
        )));
    }
    let curves: Vec<CettCurve> = calibration
        .iter()
        .filter_map(|x| CettCurve::new(layer, x.as_ref(), opts.kind, opts.def))
        .collect();
    if curves.is_empty() {
        return Err(Error::DegenerateCalibration(
            "every calibration input produced a zero FFN output".into(),
        ));
    }
    let max_mag = curves
        .iter()
        .flat_map(|c| c.magnitudes().last().copied())
        .fold(0f32, f32::max);
    if max_mag <= 0.0 {
        return Err(Error::DegenerateCalibration(
            "all neuron magnitudes are zero".into(),
        ));
    }
    let f = |e: f64| reduce(&curves, e, opts.reduce);
    let hi0 = f64::from(max_mag);

    let mut evals: Vec<(f64, bool)> = vec![(0.0, true)];
    let at_max = f(hi0);
    evals.push((hi0, at_max <= cett_target));
    if at_max <= cett_target {
        return Ok(SearchOutcome {
            epsilon: hi0,
            cett: at_max,
            iterations: 0,
            n_used: curves.len(),
            monotone: true,
        });
    }

    let (mut lo, mut hi) = (0f64, hi0);
    let mut iterations = 0;
    while iterations < SEARCH_MAX_ITERS && hi - lo > SEARCH_REL_TOL * hi {
        let mid = 0.5 * (lo + hi);
        let ok = f(mid) <= cett_target;
        evals.push((mid, ok));
        if ok {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }

    let mut epsilon = lo;
    let snap = curves
        .iter()
        .filter_map(|c| {
            let m = c.magnitudes();
            let k = m.partition_point(|&v| f64::from(v) < lo);
            m.get(k).map(|&v| f64::from(v))
        })
        .fold(f64::INFINITY, f64::min);
    if snap.is_finite() && snap < hi {
        let ok = f(snap) <= cett_target;
        evals.push((snap, ok));
        if ok {
            epsilon = snap;
        }
    }

    evals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let first_bad = evals.iter().position(|e| !e.1).unwrap_or(evals.len());
    let monotone = evals[first_bad..].iter().all(|e| !e.1);

    Ok(SearchOutcome {
        epsilon,
        cett: f(epsilon),
        iterations,
        n_used: curves.len(),
        monotone,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMeta {
    pub n_tokens: usize,
    pub dataset_tag: String,
    /// Present when thresholds were fitted to a neuron budget rather than a
    /// CETT target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_sparsity: Option<f64>,
}

/// Per-layer ε thresholds with the conventions used to derive them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdProfile {
    pub cett_target: f64,
    pub per_layer_epsilon: Vec<f64>,
    pub magnitude_def: MagnitudeDef,
    pub aggregation: Aggregation,
    pub calibration: CalibrationMeta,
}

impl ThresholdProfile {
    /// All thresholds zero: nothing is ever pruned.
    pub fn zeros(n_layers: usize) -> Self {
        Self {
            cett_target: DEFAULT_CETT_TARGET,
            per_layer_epsilon: vec![0.0; n_layers],
            magnitude_def: MagnitudeDef::Full,
            aggregation: Aggregation::default(),
            calibration: CalibrationMeta {
                n_tokens: 0,
                dataset_tag: "zero".into(),
                target_sparsity: None,
            },
        }
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer_epsilon.len()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.per_layer_epsilon.len() != n_layers {
            return Err(Error::contract(format!(
                "profile has {} layers, model has {n_layers}",
                self.per_layer_epsilon.len()
            )));
        }
        if self.per_layer_epsilon.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::contract("profile thresholds must be non-negative"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Runs [`search_threshold`] for every layer in parallel. `per_layer_inputs`
/// holds the FFN inputs observed at each layer.
pub fn search_profile(
    weights: &ModelWeights,
    per_layer_inputs: &[Vec<Vec<f32>>],
    cett_target: f64,
    def: MagnitudeDef,
    reduce: CettReduce,
    dataset_tag: &str,
) -> Result<(ThresholdProfile, Vec<SearchOutcome>)> {
    if per_layer_inputs.len() != weights.layers.len() {
        return Err(Error::contract("one calibration set per layer is required"));
    }
    let opts = SearchOptions {
        kind: weights.config.activation_kind,
        def,
        reduce,
    };
    let outcomes = weights
        .layers
        .par_iter()
        .zip(per_layer_inputs.par_iter())
        .map(|(layer, xs)| search_threshold(layer, xs, cett_target, opts))
        .collect::<Result<Vec<_>>>()?;
    let profile = ThresholdProfile {
        cett_target,
        per_layer_epsilon: outcomes.iter().map(|o| o.epsilon).collect(),
        magnitude_def: def,
        aggregation: Aggregation::default(),
        calibration: CalibrationMeta {
            n_tokens: per_layer_inputs.first().map_or(0, Vec::len),
            dataset_tag: dataset_tag.to_string(),
            target_sparsity: None,
        },
    };
    Ok((profile, outcomes))
}

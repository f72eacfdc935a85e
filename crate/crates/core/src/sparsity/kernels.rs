//! Gated FFN kernels: dense, per-token threshold truncation, and sliced.
//!
//! All three share the hidden computation `h = σ(W_in x) ⊙ (V_in x)` and
//! the lane-compatible dot products from [`crate::tensor`], so a TT call
//! that prunes nothing is bitwise dense and a sliced call with a full mask
//! is bitwise dense.

use serde::{Deserialize, Serialize};

use crate::model::LayerWeights;
use crate::tensor::{
    dot, matvec_gather_into, matvec_into, ActivationKind, Matrix, MulAddCounter, Vector,
};

/// How a neuron's size is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeDef {
    /// ‖n_i(x)‖₂ = |h_i| · ‖W_out[:, i]‖₂.
    #[default]
    Full,
    /// |h_i| only, ignoring the down projection.
    GatedOnly,
}

impl MagnitudeDef {
    #[inline]
    pub fn magnitude(self, h: f32, col_norm: f32) -> f32 {
        match self {
            MagnitudeDef::Full => h.abs() * col_norm,
            MagnitudeDef::GatedOnly => h.abs(),
        }
    }
}

/// Writes `h = σ(W_in x) ⊙ (V_in x)` into `h`.
#[inline]
pub fn gated_hidden_into(
    layer: &LayerWeights,
    x: &[f32],
    kind: ActivationKind,
    h: &mut [f32],
    counter: &mut MulAddCounter,
) {
    gated_rows_into(&layer.ffn_gate, &layer.ffn_up, x, kind, h, counter);
}

#[inline]
fn gated_rows_into(
    gate: &Matrix,
    up: &Matrix,
    x: &[f32],
    kind: ActivationKind,
    h: &mut [f32],
    counter: &mut MulAddCounter,
) {
    for (i, hi) in h.iter_mut().enumerate() {
        let g = dot(gate.row(i), x) as f32;
        let u = dot(up.row(i), x) as f32;
        *hi = kind.apply(g) * u;
    }
    counter.add(2 * gate.rows() * gate.cols());
}

pub fn gated_hidden(layer: &LayerWeights, x: &[f32], kind: ActivationKind) -> Vector {
    let mut h = vec![0.0; layer.d_ff()];
    gated_hidden_into(layer, x, kind, &mut h, &mut MulAddCounter::default());
    h.into()
}

/// Per-neuron magnitudes for a precomputed hidden vector.
pub fn magnitudes_from_hidden(layer: &LayerWeights, h: &[f32], def: MagnitudeDef) -> Vec<f32> {
    h.iter()
        .zip(layer.down_col_norms())
        .map(|(&hi, &c)| def.magnitude(hi, c))
        .collect()
}

/// ‖n_i(x)‖₂ for every neuron of the layer.
pub fn neuron_magnitudes(layer: &LayerWeights, x: &[f32], kind: ActivationKind) -> Vector {
    neuron_magnitudes_with(layer, x, kind, MagnitudeDef::Full)
}

pub fn neuron_magnitudes_with(
    layer: &LayerWeights,
    x: &[f32],
    kind: ActivationKind,
    def: MagnitudeDef,
) -> Vector {
    let h = gated_hidden(layer, x, kind);
    magnitudes_from_hidden(layer, &h, def).into()
}

/// Dense FFN, writing the hidden vector to `h` and the output to `out`.
pub fn dense_ffn_into(
    layer: &LayerWeights,
    x: &[f32],
    kind: ActivationKind,
    h: &mut [f32],
    out: &mut [f32],
    counter: &mut MulAddCounter,
) {
    gated_hidden_into(layer, x, kind, h, counter);
    matvec_into(&layer.ffn_down, h, out, counter);
}

pub fn dense_ffn(layer: &LayerWeights, x: &[f32], kind: ActivationKind) -> Vector {
    let mut h = vec![0.0; layer.d_ff()];
    let mut out = vec![0.0; layer.d_model()];
    dense_ffn_into(
        layer,
        x,
        kind,
        &mut h,
        &mut out,
        &mut MulAddCounter::default(),
    );
    out.into()
}

/// Threshold truncation for one token. Computes the full gate and up
/// projections, drops neurons whose magnitude is `< epsilon`, then runs the
/// down projection over the survivors only. `active` receives the surviving
/// indices in ascending order.
#[allow(clippy::too_many_arguments)]
pub fn tt_ffn_into(
    layer: &LayerWeights,
    x: &[f32],
    kind: ActivationKind,
    epsilon: f64,
    def: MagnitudeDef,
    h: &mut [f32],
    active: &mut Vec<usize>,
    out: &mut [f32],
    counter: &mut MulAddCounter,
) {
    gated_hidden_into(layer, x, kind, h, counter);
    active.clear();
    let norms = layer.down_col_norms();
    for (i, (&hi, &c)) in h.iter().zip(norms).enumerate() {
        // strict `<` prunes; a magnitude equal to epsilon survives
        if f64::from(def.magnitude(hi, c)) >= epsilon {
            active.push(i);
        }
    }
    matvec_gather_into(&layer.ffn_down, h, active, out, counter);
}

pub fn tt_ffn_forward(
    layer: &LayerWeights,
    x: &[f32],
    kind: ActivationKind,
    epsilon: f64,
) -> Vector {
    let mut h = vec![0.0; layer.d_ff()];
    let mut active = Vec::with_capacity(layer.d_ff());
    let mut out = vec![0.0; layer.d_model()];
    tt_ffn_into(
        layer,
        x,
        kind,
        epsilon,
        MagnitudeDef::Full,
        &mut h,
        &mut active,
        &mut out,
        &mut MulAddCounter::default(),
    );
    out.into()
}

/// FFN restricted to a fixed neuron subset, with the active rows of `W_in`,
/// `V_in` and columns of `W_out` copied into compact matrices once.
#[derive(Clone, Debug)]
pub struct SlicedFfn {
    active: Vec<usize>,
    gate: Matrix,
    up: Matrix,
    down: Matrix,
    d_ff: usize,
}

impl SlicedFfn {
    pub fn new(layer: &LayerWeights, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), layer.d_ff(), "mask length must equal d_ff");
        let active: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        Self {
            gate: layer.ffn_gate.select_rows(&active),
            up: layer.ffn_up.select_rows(&active),
            down: layer.ffn_down.select_cols(&active),
            active,
            d_ff: layer.d_ff(),
        }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff
    }

    /// `h` must hold at least `active_count()` entries.
    pub fn forward_into(
        &self,
        x: &[f32],
        kind: ActivationKind,
        h: &mut [f32],
        out: &mut [f32],
        counter: &mut MulAddCounter,
    ) {
        let k = self.active.len();
        if k == 0 {
            out.fill(0.0);
            return;
        }
        let h = &mut h[..k];
        gated_rows_into(&self.gate, &self.up, x, kind, h, counter);
        matvec_into(&self.down, h, out, counter);
    }
}

/// Sliced FFN for one token under `mask` (true = neuron computed).
pub fn tda_ffn_forward(
    layer: &LayerWeights,
    x: &[f32],
    kind: ActivationKind,
    mask: &[bool],
) -> Vector {
    let sliced = SlicedFfn::new(layer, mask);
    let mut h = vec![0.0; sliced.active_count()];
    let mut out = vec![0.0; layer.d_model()];
    sliced.forward_into(x, kind, &mut h, &mut out, &mut MulAddCounter::default());
    out.into()
}

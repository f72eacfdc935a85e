use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tda_core::model::{
    forward_sequence, forward_token, generate, GenerationRequest, KvCache, LayerWeights,
    ModelConfig, ModelWeights,
};
use tda_core::sparsity::*;
use tda_core::tensor::{ActivationKind, Matrix, MulAddCounter};

fn tiny(seed: u64, kind: ActivationKind) -> ModelWeights {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_ff: 40,
        n_heads: 4,
        activation_kind: kind,
        max_seq_len: 48,
        ..ModelConfig::default()
    };
    ModelWeights::random(cfg, seed).unwrap()
}

fn kind_strategy() -> impl Strategy<Value = ActivationKind> {
    prop_oneof![
        Just(ActivationKind::Relu),
        Just(ActivationKind::Silu),
        Just(ActivationKind::ReluSquared)
    ]
}

fn random_layer(rng: &mut ChaCha8Rng, d: usize, f: usize) -> LayerWeights {
    let mut m = |r, c, s: f32| Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0) * s);
    let gate = m(f, d, 0.5);
    let up = m(f, d, 0.5);
    let down = m(d, f, 0.3);
    LayerWeights::ffn_only(gate, up, down).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| f64::from(*y).powi(2)).sum();
    (num / den).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causality_under_suffix_perturbation(
        seed in 0u64..1000,
        prefix in prop::collection::vec(0u32..257, 1..12),
        a in prop::collection::vec(0u32..257, 1..8),
        b in prop::collection::vec(0u32..257, 1..8),
    ) {
        let w = tiny(seed, ActivationKind::Silu);
        let sa: Vec<u32> = prefix.iter().chain(&a).copied().collect();
        let sb: Vec<u32> = prefix.iter().chain(&b).copied().collect();
        let la = forward_sequence(&w, &sa).unwrap();
        let lb = forward_sequence(&w, &sb).unwrap();
        for t in 0..prefix.len() {
            prop_assert_eq!(&la[t], &lb[t]);
        }
    }

    #[test]
    fn kv_cache_equals_full_recompute(seed in 0u64..1000, toks in prop::collection::vec(0u32..257, 1..32), kind in kind_strategy()) {
        let w = tiny(seed, kind);
        let full = forward_sequence(&w, &toks).unwrap();
        let mut cache = KvCache::new(&w);
        let mut h = vec![0.0; 40];
        let mut c = MulAddCounter::default();
        for (t, &tok) in toks.iter().enumerate() {
            let l = forward_token(&w, &mut cache, tok, |_, layer, x, out| dense_ffn_into(layer, x, kind, &mut h, out, &mut c)).unwrap();
            for (x, y) in l.iter().zip(full[t].iter()) {
                prop_assert!((x - y).abs() <= 1e-4, "position {}: {} vs {}", t, x, y);
            }
        }
    }

    #[test]
    fn greedy_generation_is_deterministic(seed in 0u64..1000, prompt in prop::collection::vec(0u32..257, 1..10)) {
        let w = tiny(seed, ActivationKind::Relu);
        for strategy in [FfnStrategy::Dense, FfnStrategy::Griffin { sparsity: 0.4 }] {
            let req = GenerationRequest::new(prompt.clone(), 8, strategy);
            prop_assert_eq!(generate(&w, &req).unwrap().tokens, generate(&w, &req).unwrap().tokens);
        }
    }

    #[test]
    fn dense_output_is_sum_of_neuron_outputs(seed in any::<u64>(), kind in kind_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, 12, 30);
        let x = rand_vec(&mut rng, 12);
        let h = gated_hidden(&layer, &x, kind);
        let mut sum = [0f64; 12];
        for (i, hi) in h.iter().enumerate() {
            for (r, s) in sum.iter_mut().enumerate() {
                *s += f64::from(*hi) * f64::from(layer.ffn_down.get(r, i));
            }
        }
        let sum: Vec<f32> = sum.iter().map(|&v| v as f32).collect();
        let dense = dense_ffn(&layer, &x, kind);
        prop_assert!(rel_l2(&sum, &dense) <= 1e-4);
    }

    #[test]
    fn pruned_sets_are_nested(seed in any::<u64>(), e1 in 0.0f64..0.5, de in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, 10, 24);
        let x = rand_vec(&mut rng, 10);
        let m = neuron_magnitudes(&layer, &x, ActivationKind::Silu);
        let e2 = e1 + de;
        for &mi in m.iter() {
            let v = f64::from(mi);
            prop_assert!(!(v < e1) || v < e2);
        }
    }

    #[test]
    fn tt_error_equals_cett(seed in any::<u64>(), frac in 0.0f64..1.0, kind in kind_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, 16, 48);
        let x = rand_vec(&mut rng, 16);
        let m = neuron_magnitudes(&layer, &x, kind);
        let eps = frac * f64::from(m.iter().copied().fold(0f32, f32::max));
        let dense = dense_ffn(&layer, &x, kind);
        let tt = tt_ffn_forward(&layer, &x, kind, eps);
        let c = cett(&layer, &x, kind, eps).unwrap();
        let dn = dense.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        let err = tt.iter().zip(dense.iter()).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>().sqrt() / dn;
        // f32 output rounding leaves an absolute floor of a few ulps of ‖dense‖
        prop_assert!((err - c).abs() <= 1e-5 * c.max(1.0), "err {} cett {}", err, c);
    }

    #[test]
    fn sliced_equals_zero_masked(seed in any::<u64>(), kind in kind_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(&mut rng, 12, 32);
        let mask: Vec<bool> = (0..32).map(|_| rng.gen_bool(0.5)).collect();
        let sliced = SlicedFfn::new(&layer, &mask);
        for _ in 0..10 {
            let x = rand_vec(&mut rng, 12);
            let mut h = gated_hidden(&layer, &x, kind).into_inner();
            h.iter_mut().zip(&mask).for_each(|(v, &keep)| if !keep { *v = 0.0 });
            let mut out = vec![0.0; 12];
            let mut scratch = vec![0.0; 32];
            let mut c = MulAddCounter::default();
            sliced.forward_into(&x, kind, &mut scratch, &mut out, &mut c);
            prop_assert_eq!(c.0, (3 * 12 * sliced.active_count()) as u64);
            for r in 0..12 {
                let oracle: f64 = h.iter().enumerate().map(|(i, hi)| f64::from(*hi) * f64::from(layer.ffn_down.get(r, i))).sum();
                prop_assert!((f64::from(out[r]) - oracle).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn masks_stay_fixed_and_griffin_counts_are_exact() {
    let w = tiny(3, ActivationKind::Silu);
    let prompt: Vec<u32> = vec![256, 72, 101, 108, 108, 111];
    let mut tda_profile = ThresholdProfile::zeros(2);
    tda_profile.per_layer_epsilon = vec![0.05, 0.05];
    for strategy in [
        FfnStrategy::Griffin { sparsity: 0.3 },
        FfnStrategy::Tda(tda_profile),
    ] {
        let mut req = GenerationRequest::new(prompt.clone(), 40, strategy.clone());
        req.record_masks = true;
        let r = generate(&w, &req).unwrap();
        assert_eq!(r.mask_fingerprints.len(), 40);
        assert!(r
            .mask_fingerprints
            .iter()
            .all(|&f| f == r.mask_fingerprints[0]));
        if let FfnStrategy::Griffin { sparsity } = strategy {
            let keep = griffin_keep(40, sparsity);
            assert_eq!(keep, 28);
            assert!(r
                .stats
                .per_layer_active_fraction
                .iter()
                .all(|&f| f == keep as f64 / 40.0));
            assert_eq!(r.stats.ffn_mul_adds, 39 * 2 * 3 * 16 * keep as u64);
        }
    }
}

#[test]
fn runner_counts_match_active_neurons() {
    let w = tiny(5, ActivationKind::Relu);
    let prompt: Vec<u32> = (0..12).map(|i| 40 + i).collect();
    let mut profile = ThresholdProfile::zeros(2);
    profile.per_layer_epsilon = vec![0.02, 0.03];
    let r = generate(
        &w,
        &GenerationRequest::new(prompt.clone(), 10, FfnStrategy::Tda(profile)),
    )
    .unwrap();
    let pre = tda_core::model::prefill_tokens(&w, &prompt).unwrap();
    let mut p2 = ThresholdProfile::zeros(2);
    p2.per_layer_epsilon = vec![0.02, 0.03];
    let masks = build_tda_masks(&pre.trace, &p2, &w).unwrap();
    let active: usize = (0..2).map(|l| masks.active_count(l)).sum();
    assert_eq!(r.stats.ffn_mul_adds, 9 * 3 * 16 * active as u64);
    assert_eq!(r.stats.ffn_calls, 9 * 2);
}

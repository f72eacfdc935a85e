//! Weight storage and the flat tensor container (safetensors layout).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

/// One decoder block. Immutable after construction; the down-projection
/// column norms are derived once here.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub attn_q: Matrix,
    pub attn_k: Matrix,
    pub attn_v: Matrix,
    pub attn_o: Matrix,
    /// `W_in`, d_ff × d_model.
    pub ffn_gate: Matrix,
    /// `V_in`, d_ff × d_model.
    pub ffn_up: Matrix,
    /// `W_out`, d_model × d_ff.
    pub ffn_down: Matrix,
    pub norm1: Vector,
    pub norm2: Vector,
    down_col_norms: Vec<f32>,
}

impl LayerWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        attn_q: Matrix,
        attn_k: Matrix,
        attn_v: Matrix,
        attn_o: Matrix,
        ffn_gate: Matrix,
        ffn_up: Matrix,
        ffn_down: Matrix,
        norm1: Vector,
        norm2: Vector,
    ) -> Result<Self> {
        let d_model = attn_q.rows();
        let d_ff = ffn_gate.rows();
        let checks = [
            ("attn.q", attn_q.shape(), (d_model, d_model)),
            ("attn.k", attn_k.shape(), (d_model, d_model)),
            ("attn.v", attn_v.shape(), (d_model, d_model)),
            ("attn.o", attn_o.shape(), (d_model, d_model)),
            ("ffn.gate", ffn_gate.shape(), (d_ff, d_model)),
            ("ffn.up", ffn_up.shape(), (d_ff, d_model)),
            ("ffn.down", ffn_down.shape(), (d_model, d_ff)),
            ("norm1", (norm1.len(), 1), (d_model, 1)),
            ("norm2", (norm2.len(), 1), (d_model, 1)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: vec![want.0, want.1],
                    got: vec![got.0, got.1],
                });
            }
        }
        let down_col_norms = ffn_down.column_norms();
        Ok(Self {
            attn_q,
            attn_k,
            attn_v,
            attn_o,
            ffn_gate,
            ffn_up,
            ffn_down,
            norm1,
            norm2,
            down_col_norms,
        })
    }

    /// Layer with only the FFN populated (identity attention, unit norms).
    /// Handy for exercising the sparsity kernels in isolation.
    pub fn ffn_only(ffn_gate: Matrix, ffn_up: Matrix, ffn_down: Matrix) -> Result<Self> {
        let d = ffn_gate.cols();
        Self::new(
            Matrix::identity(d),
            Matrix::identity(d),
            Matrix::identity(d),
            Matrix::identity(d),
            ffn_gate,
            ffn_up,
            ffn_down,
            Vector::ones(d),
            Vector::ones(d),
        )
    }

    #[inline]
    pub fn d_model(&self) -> usize {
        self.ffn_gate.cols()
    }

    #[inline]
    pub fn d_ff(&self) -> usize {
        self.ffn_gate.rows()
    }

    /// ‖W_out[:, i]‖₂ for every neuron.
    #[inline]
    pub fn down_col_norms(&self) -> &[f32] {
        &self.down_col_norms
    }
}

/// Full parameter set of the decoder.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// vocab_size × d_model.
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vector,
    /// vocab_size × d_model.
    pub lm_head: Matrix,
}

fn layer_key(i: usize, suffix: &str) -> String {
    format!("layers.{i}.{suffix}")
}

/// Tensor names with their expected shapes, in a fixed order.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = vec![("embed.weight".to_string(), vec![v, d])];
    for i in 0..cfg.n_layers {
        for p in ["q", "k", "v", "o"] {
            out.push((layer_key(i, &format!("attn.{p}.weight")), vec![d, d]));
        }
        out.push((layer_key(i, "ffn.gate.weight"), vec![f, d]));
        out.push((layer_key(i, "ffn.up.weight"), vec![f, d]));
        out.push((layer_key(i, "ffn.down.weight"), vec![d, f]));
        out.push((layer_key(i, "norm1.gain"), vec![d]));
        out.push((layer_key(i, "norm2.gain"), vec![d]));
    }
    out.push(("final_norm.gain".to_string(), vec![d]));
    out.push(("lm_head.weight".to_string(), vec![v, d]));
    out
}

impl ModelWeights {
    /// Random initialization, deterministic in `seed`.
    ///
    /// Linear maps draw from N(0, 1/fan_in), embeddings from N(0, 1), norm
    /// gains are one.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("finite std");
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng) as f32)
        };
        let embed = gauss(v, d, 1.0);
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let q = gauss(d, d, sd);
            let k = gauss(d, d, sd);
            let vv = gauss(d, d, sd);
            let o = gauss(d, d, sd);
            let gate = gauss(f, d, sd);
            let up = gauss(f, d, sd);
            let down = gauss(d, f, sf);
            layers.push(LayerWeights::new(
                q,
                k,
                vv,
                o,
                gate,
                up,
                down,
                Vector::ones(d),
                Vector::ones(d),
            )?);
        }
        let lm_head = gauss(v, d, sd);
        Ok(Self {
            config,
            embed,
            layers,
            final_norm: Vector::ones(d),
            lm_head,
        })
    }

    /// Serializes into the flat tensor container.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        let d = self.config.d_model;
        named.push((
            "embed.weight".into(),
            vec![self.embed.rows(), d],
            self.embed.data(),
        ));
        for (i, l) in self.layers.iter().enumerate() {
            for (p, m) in [
                ("q", &l.attn_q),
                ("k", &l.attn_k),
                ("v", &l.attn_v),
                ("o", &l.attn_o),
            ] {
                named.push((
                    layer_key(i, &format!("attn.{p}.weight")),
                    vec![m.rows(), m.cols()],
                    m.data(),
                ));
            }
            for (p, m) in [
                ("gate", &l.ffn_gate),
                ("up", &l.ffn_up),
                ("down", &l.ffn_down),
            ] {
                named.push((
                    layer_key(i, &format!("ffn.{p}.weight")),
                    vec![m.rows(), m.cols()],
                    m.data(),
                ));
            }
            named.push((layer_key(i, "norm1.gain"), vec![d], &l.norm1));
            named.push((layer_key(i, "norm2.gain"), vec![d], &l.norm2));
        }
        named.push(("final_norm.gain".into(), vec![d], &self.final_norm));
        named.push((
            "lm_head.weight".into(),
            vec![self.lm_head.rows(), d],
            self.lm_head.data(),
        ));

        let bytes: Vec<Vec<u8>> = named
            .iter()
            .map(|(_, _, data)| data.iter().flat_map(|x| x.to_le_bytes()).collect())
            .collect();
        let views = named
            .iter()
            .zip(&bytes)
            .map(|((name, shape, _), b)| {
                TensorView::new(Dtype::F32, shape.clone(), b)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::contract(format!("tensor `{name}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, None).map_err(|e| Error::contract(format!("serialize: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Parses a flat tensor container and checks every tensor against
    /// `config`.
    pub fn from_bytes(bytes: &[u8], config: ModelConfig, origin: &Path) -> Result<Self> {
        config.validate()?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Header {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let view = st
                .tensor(name)
                .map_err(|_| Error::MissingTensor(name.to_string()))?;
            if view.dtype() != Dtype::F32 {
                return Err(Error::Dtype {
                    name: name.to_string(),
                    dtype: format!("{:?}", view.dtype()),
                });
            }
            if view.shape() != shape {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    got: view.shape().to_vec(),
                });
            }
            Ok(view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let mat = |name: &str, r: usize, c: usize| -> Result<Matrix> {
            Matrix::new(r, c, fetch(name, &[r, c])?)
        };
        let vec = |name: &str, n: usize| -> Result<Vector> { Ok(Vector::from(fetch(name, &[n])?)) };

        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let embed = mat("embed.weight", v, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let k = |s: &str| layer_key(i, s);
            layers.push(LayerWeights::new(
                mat(&k("attn.q.weight"), d, d)?,
                mat(&k("attn.k.weight"), d, d)?,
                mat(&k("attn.v.weight"), d, d)?,
                mat(&k("attn.o.weight"), d, d)?,
                mat(&k("ffn.gate.weight"), f, d)?,
                mat(&k("ffn.up.weight"), f, d)?,
                mat(&k("ffn.down.weight"), d, f)?,
                vec(&k("norm1.gain"), d)?,
                vec(&k("norm2.gain"), d)?,
            )?);
        }
        let final_norm = vec("final_norm.gain", d)?;
        let lm_head = mat("lm_head.weight", v, d)?;
        Ok(Self {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
        })
    }
}

/// Reads a weight file and validates it against `config`.
pub fn load_weights(path: impl AsRef<Path>, config: ModelConfig) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    ModelWeights::from_bytes(&bytes, config, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ActivationKind;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
            vocab_size: 257,
            activation_kind: ActivationKind::Silu,
            max_seq_len: 32,
            ..ModelConfig::default()
        }
    }

    /// Writes a container with the tensors from `w`, letting the caller
    /// drop or reshape individual entries.
    fn write_custom(
        w: &ModelWeights,
        edit: impl Fn(&str, Vec<usize>) -> Option<Vec<usize>>,
    ) -> Vec<u8> {
        let st_bytes = w.to_bytes().unwrap();
        let st = SafeTensors::deserialize(&st_bytes).unwrap();
        let mut keep = Vec::new();
        for (name, shape) in tensor_layout(&w.config) {
            if let Some(new_shape) = edit(&name, shape) {
                let data = st.tensor(&name).unwrap().data().to_vec();
                keep.push((name, new_shape, data));
            }
        }
        let views: Vec<_> = keep
            .iter()
            .map(|(n, s, d)| {
                (
                    n.clone(),
                    TensorView::new(Dtype::F32, s.clone(), d).unwrap(),
                )
            })
            .collect();
        safetensors::serialize(views, None).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let w = ModelWeights::random(tiny(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        w.save(&p).unwrap();
        let back = load_weights(&p, tiny()).unwrap();
        assert_eq!(back.layers.len(), 2);
        assert_eq!(back.layers[1].ffn_down, w.layers[1].ffn_down);
        assert_eq!(back.embed, w.embed);
        assert_eq!(
            back.layers[0].down_col_norms(),
            w.layers[0].down_col_norms()
        );
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = ModelWeights::random(tiny(), 3).unwrap().to_bytes().unwrap();
        let b = ModelWeights::random(tiny(), 3).unwrap().to_bytes().unwrap();
        let c = ModelWeights::random(tiny(), 4).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn missing_tensor_is_named() {
        let w = ModelWeights::random(tiny(), 1).unwrap();
        let bytes = write_custom(&w, |n, s| (n != "layers.1.ffn.down.weight").then_some(s));
        let err = ModelWeights::from_bytes(&bytes, tiny(), Path::new("x")).unwrap_err();
        match err {
            Error::MissingTensor(name) => assert_eq!(name, "layers.1.ffn.down.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn swapped_shape_is_reported() {
        let w = ModelWeights::random(tiny(), 1).unwrap();
        let bytes = write_custom(&w, |n, s| {
            Some(if n == "layers.0.ffn.gate.weight" {
                vec![s[1], s[0]]
            } else {
                s
            })
        });
        let err = ModelWeights::from_bytes(&bytes, tiny(), Path::new("x")).unwrap_err();
        match err {
            Error::ShapeMismatch {
                name,
                expected,
                got,
            } => {
                assert_eq!(name, "layers.0.ffn.gate.weight");
                assert_eq!(expected, vec![12, 8]);
                assert_eq!(got, vec![8, 12]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbage_header_is_a_header_error() {
        let err = ModelWeights::from_bytes(&[1, 2, 3], tiny(), Path::new("bad")).unwrap_err();
        assert!(matches!(err, Error::Header { .. }));
    }
}

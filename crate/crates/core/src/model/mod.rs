//! A small decoder-only transformer with a pluggable FFN.

mod config;
mod runtime;
mod tokenizer;
mod weights;

pub use config::ModelConfig;
pub use runtime::{
    forward_sequence, forward_token, generate, generate_with, prefill, prefill_tokens, FfnBackend,
    GenerationRequest, GenerationResult, KvCache, Prefill, PrefillTrace, Sampling,
};
pub use tokenizer::{detokenize, tokenize, BOS, BYTE_VOCAB, N_SPECIAL};
pub use weights::{load_weights, tensor_layout, LayerWeights, ModelWeights};

//! Named backbone configurations. The large presets exist for the analytic
//! cost and memory estimators only — nobody instantiates their weights here.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const PRESET_NAMES: &[&str] = &[
    "toy",
    "llama-7b",
    "llama2-7b",
    "llama2-13b",
    "vicuna-7b",
    "llama3.1-8b",
    "qwen3-8b",
    "qwen3-14b",
];

fn llama(n_layers: usize, d_model: usize, ffn_dim: usize, n_heads: usize, n_kv_heads: usize, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads,
        n_kv_heads,
        head_dim: d_model / n_heads,
        ffn_dim,
        vocab_size,
        rope_base: 10000.0,
        norm_eps: 1e-5,
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "toy" => ModelConfig::toy(),
        "llama-7b" => llama(32, 4096, 11008, 32, 32, 32000),
        "llama2-7b" => llama(32, 4096, 11008, 32, 32, 32000),
        "llama2-13b" => llama(40, 5120, 13824, 40, 40, 32000),
        "vicuna-7b" => llama(32, 4096, 11008, 32, 32, 32000),
        "llama3.1-8b" => llama(32, 4096, 14336, 32, 8, 128256),
        "qwen3-8b" => llama(36, 4096, 12288, 32, 8, 151936),
        "qwen3-14b" => llama(40, 5120, 17408, 40, 8, 151936),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset '{name}' (expected one of {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

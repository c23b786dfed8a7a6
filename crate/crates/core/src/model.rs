//! LLaMA-style toy decoder: RMSNorm pre-norm, RoPE, grouped-query attention,
//! SwiGLU FFN, with gate multiplier injection points on every FFN intermediate
//! channel and every KV head group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::InvalidConfig("head_dim must be even for RoPE".into()));
        }
        Ok(())
    }

    /// Query-group size G = H / H_kv.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Default desk-scale configuration.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 8,
            n_kv_heads: 2,
            head_dim: 8,
            ffn_dim: 256,
            vocab_size: 256,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S: Scalar> {
    /// [d, H·d_h]
    pub q_proj: Tensor<S>,
    /// [d, H_kv·d_h]
    pub k_proj: Tensor<S>,
    /// [d, H_kv·d_h]
    pub v_proj: Tensor<S>,
    /// [H·d_h, d]
    pub o_proj: Tensor<S>,
    /// [d, ffn]
    pub ffn_gate: Tensor<S>,
    /// [d, ffn]
    pub ffn_up: Tensor<S>,
    /// [ffn, d]
    pub ffn_down: Tensor<S>,
    /// [d]
    pub attn_norm: Tensor<S>,
    /// [d]
    pub ffn_norm: Tensor<S>,
}

/// Per-layer structural sizes, read off the actual tensors so pruned
/// checkpoints (whose layers differ in width) evaluate with the same code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub ffn_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMeta {
    pub keep_ratio: f64,
    pub retained_ffn: Vec<Vec<usize>>,
    pub retained_kv: Vec<Vec<usize>>,
    pub folded: bool,
    pub seed: Option<u64>,
    pub hyperparams: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights<S>>,
    /// [V, d]
    pub embed: Tensor<S>,
    /// [d]
    pub final_norm: Tensor<S>,
    /// [d, V] (untied from the input embedding)
    pub head: Tensor<S>,
    pub prune_meta: Option<PruneMeta>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn layer_dims(&self, layer: usize) -> LayerDims {
        let lw = &self.layers[layer];
        let dh = self.config.head_dim;
        LayerDims {
            n_heads: lw.q_proj.cols() / dh,
            n_kv_heads: lw.k_proj.cols() / dh,
            ffn_dim: lw.ffn_gate.cols(),
        }
    }

    pub fn param_count(&self) -> u64 {
        let mut n = (self.embed.len() + self.final_norm.len() + self.head.len()) as u64;
        for lw in &self.layers {
            n += (lw.q_proj.len()
                + lw.k_proj.len()
                + lw.v_proj.len()
                + lw.o_proj.len()
                + lw.ffn_gate.len()
                + lw.ffn_up.len()
                + lw.ffn_down.len()
                + lw.attn_norm.len()
                + lw.ffn_norm.len()) as u64;
        }
        n
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("final_norm".to_string(), &self.final_norm),
            ("head".to_string(), &self.head),
        ];
        for (i, lw) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.q_proj"), &lw.q_proj));
            out.push((format!("layers.{i}.k_proj"), &lw.k_proj));
            out.push((format!("layers.{i}.v_proj"), &lw.v_proj));
            out.push((format!("layers.{i}.o_proj"), &lw.o_proj));
            out.push((format!("layers.{i}.ffn_gate"), &lw.ffn_gate));
            out.push((format!("layers.{i}.ffn_up"), &lw.ffn_up));
            out.push((format!("layers.{i}.ffn_down"), &lw.ffn_down));
            out.push((format!("layers.{i}.attn_norm"), &lw.attn_norm));
            out.push((format!("layers.{i}.ffn_norm"), &lw.ffn_norm));
        }
        out
    }
}

impl Checkpoint<f32> {
    pub fn to_f64(&self) -> Checkpoint<f64> {
        Checkpoint {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|lw| LayerWeights {
                    q_proj: lw.q_proj.to_f64(),
                    k_proj: lw.k_proj.to_f64(),
                    v_proj: lw.v_proj.to_f64(),
                    o_proj: lw.o_proj.to_f64(),
                    ffn_gate: lw.ffn_gate.to_f64(),
                    ffn_up: lw.ffn_up.to_f64(),
                    ffn_down: lw.ffn_down.to_f64(),
                    attn_norm: lw.attn_norm.to_f64(),
                    ffn_norm: lw.ffn_norm.to_f64(),
                })
                .collect(),
            embed: self.embed.to_f64(),
            final_norm: self.final_norm.to_f64(),
            head: self.head.to_f64(),
            prune_meta: self.prune_meta.clone(),
        }
    }
}

/// Random initialization for pretraining: N(0, 0.02) weights, unit norms.
pub fn init_checkpoint<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Checkpoint<S>> {
    config.validate()?;
    let mut rng = Rng::seeded(seed);
    let mut mat = |r: usize, c: usize| -> Tensor<S> {
        let data = (0..r * c).map(|_| S::from_f64(rng.normal() * 0.02)).collect();
        Tensor::new(vec![r, c], data).unwrap()
    };
    let d = config.d_model;
    let dh = config.head_dim;
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            q_proj: mat(d, config.n_heads * dh),
            k_proj: mat(d, config.n_kv_heads * dh),
            v_proj: mat(d, config.n_kv_heads * dh),
            o_proj: mat(config.n_heads * dh, d),
            ffn_gate: mat(d, config.ffn_dim),
            ffn_up: mat(d, config.ffn_dim),
            ffn_down: mat(config.ffn_dim, d),
            attn_norm: Tensor::filled(vec![d], S::one()),
            ffn_norm: Tensor::filled(vec![d], S::one()),
        })
        .collect();
    Ok(Checkpoint {
        config: config.clone(),
        embed: mat(config.vocab_size, d),
        final_norm: Tensor::filled(vec![d], S::one()),
        head: mat(d, config.vocab_size),
        layers,
        prune_meta: None,
    })
}

/// Per-unit gate multipliers: one per FFN intermediate channel and one per KV
/// head group, per layer. All-ones reproduces the ungated model bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GateHooks<S: Scalar> {
    pub ffn_mult: Vec<Vec<S>>,
    pub kv_mult: Vec<Vec<S>>,
}

impl<S: Scalar> GateHooks<S> {
    pub fn ones_for(ckpt: &Checkpoint<S>) -> Self {
        let mut ffn_mult = Vec::new();
        let mut kv_mult = Vec::new();
        for layer in 0..ckpt.layers.len() {
            let dims = ckpt.layer_dims(layer);
            ffn_mult.push(vec![S::one(); dims.ffn_dim]);
            kv_mult.push(vec![S::one(); dims.n_kv_heads]);
        }
        GateHooks { ffn_mult, kv_mult }
    }
}

/// How gate multipliers enter the forward pass.
pub enum HookSpec<'a, S: Scalar> {
    /// No gating at all.
    None,
    /// Fixed multiplier values registered as constants.
    Fixed(&'a GateHooks<S>),
    /// Pre-registered tape tensors (trainable path).
    Tape(&'a [LayerHookIds]),
}

#[derive(Debug, Clone, Copy)]
pub struct LayerHookIds {
    pub ffn: TensorId,
    pub kv: TensorId,
}

/// Tape ids of every checkpoint tensor, as registered by [`register_checkpoint`].
pub struct CheckpointIds {
    pub layers: Vec<LayerIds>,
    pub embed: TensorId,
    pub final_norm: TensorId,
    pub head: TensorId,
}

pub struct LayerIds {
    pub q_proj: TensorId,
    pub k_proj: TensorId,
    pub v_proj: TensorId,
    pub o_proj: TensorId,
    pub ffn_gate: TensorId,
    pub ffn_up: TensorId,
    pub ffn_down: TensorId,
    pub attn_norm: TensorId,
    pub ffn_norm: TensorId,
}

pub fn register_checkpoint<S: Scalar>(
    tape: &mut Tape<S>,
    ckpt: &Checkpoint<S>,
    trainable: bool,
) -> CheckpointIds {
    CheckpointIds {
        layers: ckpt
            .layers
            .iter()
            .map(|lw| LayerIds {
                q_proj: tape.leaf(lw.q_proj.clone(), trainable),
                k_proj: tape.leaf(lw.k_proj.clone(), trainable),
                v_proj: tape.leaf(lw.v_proj.clone(), trainable),
                o_proj: tape.leaf(lw.o_proj.clone(), trainable),
                ffn_gate: tape.leaf(lw.ffn_gate.clone(), trainable),
                ffn_up: tape.leaf(lw.ffn_up.clone(), trainable),
                ffn_down: tape.leaf(lw.ffn_down.clone(), trainable),
                attn_norm: tape.leaf(lw.attn_norm.clone(), trainable),
                ffn_norm: tape.leaf(lw.ffn_norm.clone(), trainable),
            })
            .collect(),
        embed: tape.leaf(ckpt.embed.clone(), trainable),
        final_norm: tape.leaf(ckpt.final_norm.clone(), trainable),
        head: tape.leaf(ckpt.head.clone(), trainable),
    }
}

/// Causal LM forward. Returns the logits tensor id ([T × V]).
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    ckpt: &Checkpoint<S>,
    ids: &CheckpointIds,
    hooks: &HookSpec<'_, S>,
    tokens: &[usize],
) -> Result<TensorId> {
    let cfg = &ckpt.config;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::IndexOutOfRange {
            op: "forward",
            detail: format!("token {} >= vocab {}", bad, cfg.vocab_size),
        });
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = tape.embedding(ids.embed, tokens)?;
    for (layer, lids) in ids.layers.iter().enumerate() {
        let dims = ckpt.layer_dims(layer);
        let h = tape.rmsnorm(x, lids.attn_norm, cfg.norm_eps)?;
        let q = tape.matmul(h, lids.q_proj)?;
        let k = tape.matmul(h, lids.k_proj)?;
        let v = tape.matmul(h, lids.v_proj)?;
        let q = tape.rope(q, dims.n_heads, cfg.head_dim, cfg.rope_base, &positions)?;
        let k = tape.rope(k, dims.n_kv_heads, cfg.head_dim, cfg.rope_base, &positions)?;
        let kv_mult = match hooks {
            HookSpec::None => {
                tape.constant(Tensor::filled(vec![dims.n_kv_heads], S::one()))
            }
            HookSpec::Fixed(gh) => {
                let m = &gh.kv_mult[layer];
                if m.len() != dims.n_kv_heads {
                    return Err(Error::ShapeMismatch {
                        op: "forward",
                        detail: format!(
                            "layer {layer} kv hook len {} != {} groups",
                            m.len(),
                            dims.n_kv_heads
                        ),
                    });
                }
                tape.constant(Tensor::new(vec![dims.n_kv_heads], m.clone())?)
            }
            HookSpec::Tape(hids) => hids[layer].kv,
        };
        let att = tape.gqa_attention(q, k, v, kv_mult, dims.n_heads, dims.n_kv_heads, cfg.head_dim)?;
        let att = tape.matmul(att, lids.o_proj)?;
        x = tape.add(x, att)?;

        let h = tape.rmsnorm(x, lids.ffn_norm, cfg.norm_eps)?;
        let a = tape.matmul(h, lids.ffn_gate)?;
        let a = tape.silu(a)?;
        let b = tape.matmul(h, lids.ffn_up)?;
        let mut hidden = tape.mul(a, b)?;
        match hooks {
            HookSpec::None => {}
            HookSpec::Fixed(gh) => {
                let m = &gh.ffn_mult[layer];
                if m.len() != dims.ffn_dim {
                    return Err(Error::ShapeMismatch {
                        op: "forward",
                        detail: format!(
                            "layer {layer} ffn hook len {} != {} channels",
                            m.len(),
                            dims.ffn_dim
                        ),
                    });
                }
                let mid = tape.constant(Tensor::new(vec![dims.ffn_dim], m.clone())?);
                hidden = tape.mul_rowvec(hidden, mid)?;
            }
            HookSpec::Tape(hids) => {
                hidden = tape.mul_rowvec(hidden, hids[layer].ffn)?;
            }
        }
        let y = tape.matmul(hidden, lids.ffn_down)?;
        x = tape.add(x, y)?;
    }
    let x = tape.rmsnorm(x, ids.final_norm, cfg.norm_eps)?;
    tape.matmul(x, ids.head)
}

/// Logits of a window without any gradient bookkeeping.
pub fn eval_logits<S: Scalar>(
    ckpt: &Checkpoint<S>,
    hooks: &HookSpec<'_, S>,
    tokens: &[usize],
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let ids = register_checkpoint(&mut tape, ckpt, false);
    let logits = forward(&mut tape, ckpt, &ids, hooks, tokens)?;
    Ok(tape.value(logits).clone())
}

/// Mean token cross-entropy of one window ([tokens..., target for each]).
pub fn window_loss<S: Scalar>(
    ckpt: &Checkpoint<S>,
    hooks: &HookSpec<'_, S>,
    inputs: &[usize],
    targets: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = register_checkpoint(&mut tape, ckpt, false);
    let logits = forward(&mut tape, ckpt, &ids, hooks, inputs)?;
    let loss = tape.softmax_ce(logits, targets)?;
    Ok(tape.value(loss).item().to_f64_())
}

/// Exact parameter total for a config, optionally restricted to retained
/// per-layer FFN channel and KV group index lists.
pub fn param_count(
    config: &ModelConfig,
    retained: Option<(&[Vec<usize>], &[Vec<usize>])>,
) -> u64 {
    let d = config.d_model as u64;
    let dh = config.head_dim as u64;
    let g = config.group_size() as u64;
    let v = config.vocab_size as u64;
    // untied input/output embeddings plus the final norm
    let mut total = 2 * v * d + d;
    for layer in 0..config.n_layers {
        let (ffn_r, kv_r) = match retained {
            Some((ffn, kv)) => (ffn[layer].len() as u64, kv[layer].len() as u64),
            None => (config.ffn_dim as u64, config.n_kv_heads as u64),
        };
        let heads_r = kv_r * g;
        total += d * heads_r * dh; // q
        total += 2 * d * kv_r * dh; // k, v
        total += heads_r * dh * d; // o
        total += 3 * d * ffn_r; // gate, up, down
        total += 2 * d; // norms
    }
    total
}

//! Backbone pretraining: byte-level AdamW language-model training of the toy
//! decoder. The pruning stages assume a pretrained backbone; at desk scale we
//! make one ourselves.

use crate::data::TokenDataset;
use crate::error::{Error, Result};
use crate::model::{forward, register_checkpoint, Checkpoint, HookSpec, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tape::Tape;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Linear warmup steps; scales the learning rate up from zero.
    pub warmup: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 2000, lr: 3e-3, seed: 0, warmup: 100 }
    }
}

pub struct PretrainResult {
    pub checkpoint: Checkpoint<f32>,
    pub loss_trace: Vec<f64>,
}

pub fn pretrain_backbone(
    config: &ModelConfig,
    dataset: &TokenDataset,
    pc: &PretrainConfig,
) -> Result<PretrainResult> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining dataset".into()));
    }
    let mut ckpt: Checkpoint<f32> = crate::model::init_checkpoint(config, pc.seed)?;
    let sizes: Vec<usize> = ckpt.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig { lr: pc.lr, weight_decay: 0.01, ..Default::default() },
        &sizes,
    );
    let mut rng = Rng::seeded(pc.seed ^ 0xda7a);
    let mut trace = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let (inputs, targets) = dataset.window(rng.below(dataset.len()));
        let mut tape = Tape::new();
        let ids = register_checkpoint(&mut tape, &ckpt, true);
        let logits = forward(&mut tape, &ckpt, &ids, &HookSpec::None, &inputs)?;
        let loss = tape.softmax_ce(logits, &targets)?;
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::Diverged(format!("loss {loss_val} at step {step}")));
        }
        trace.push(loss_val);
        let grads = tape.backward(loss);

        let id_list = tensor_ids(&ids);
        let zero_shapes: Vec<Vec<usize>> = id_list
            .iter()
            .map(|&id| tape.value(id).shape().to_vec())
            .collect();
        let grad_bufs: Vec<Vec<f32>> = id_list
            .iter()
            .zip(&zero_shapes)
            .map(|(&id, shape)| match grads.grad(id) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; shape.iter().product()],
            })
            .collect();
        let mut params: Vec<&mut [f32]> = Vec::with_capacity(id_list.len());
        {
            let mut named = checkpoint_params_mut(&mut ckpt);
            params.append(&mut named);
        }
        let grad_slices: Vec<&[f32]> = grad_bufs.iter().map(|g| g.as_slice()).collect();
        let lr_scale = if pc.warmup > 0 && step < pc.warmup {
            (step + 1) as f64 / pc.warmup as f64
        } else {
            1.0
        };
        opt.update(&mut params, &grad_slices, lr_scale);
    }
    Ok(PretrainResult { checkpoint: ckpt, loss_trace: trace })
}

/// Tape ids in the same order as [`Checkpoint::named_tensors`].
fn tensor_ids(ids: &crate::model::CheckpointIds) -> Vec<crate::tape::TensorId> {
    let mut out = vec![ids.embed, ids.final_norm, ids.head];
    for l in &ids.layers {
        out.extend([
            l.q_proj, l.k_proj, l.v_proj, l.o_proj, l.ffn_gate, l.ffn_up, l.ffn_down,
            l.attn_norm, l.ffn_norm,
        ]);
    }
    out
}

/// Mutable parameter slices in the same order as [`Checkpoint::named_tensors`].
fn checkpoint_params_mut(ckpt: &mut Checkpoint<f32>) -> Vec<&mut [f32]> {
    let mut out: Vec<&mut [f32]> = vec![];
    out.push(ckpt.embed.data_mut());
    out.push(ckpt.final_norm.data_mut());
    out.push(ckpt.head.data_mut());
    for l in &mut ckpt.layers {
        out.push(l.q_proj.data_mut());
        out.push(l.k_proj.data_mut());
        out.push(l.v_proj.data_mut());
        out.push(l.o_proj.data_mut());
        out.push(l.ffn_gate.data_mut());
        out.push(l.ffn_up.data_mut());
        out.push(l.ffn_down.data_mut());
        out.push(l.attn_norm.data_mut());
        out.push(l.ffn_norm.data_mut());
    }
    out
}

/// Mean cross-entropy over every window of a dataset.
pub fn dataset_loss(ckpt: &Checkpoint<f32>, dataset: &TokenDataset) -> Result<f64> {
    dataset_loss_hooked(ckpt, &HookSpec::None, dataset)
}

pub fn dataset_loss_hooked(
    ckpt: &Checkpoint<f32>,
    hooks: &HookSpec<'_, f32>,
    dataset: &TokenDataset,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut total = 0.0;
    for i in 0..dataset.len() {
        let (inputs, targets) = dataset.window(i);
        total += crate::model::window_loss(ckpt, hooks, &inputs, &targets)?;
    }
    Ok(total / dataset.len() as f64)
}

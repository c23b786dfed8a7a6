//! Scaling calibration: with the hard mask frozen, learn one scalar γ per
//! retained unit on the calibration loss. Pruned units stay at exactly zero
//! and the backbone never moves; only |I| scalars are trainable.

use crate::data::TokenDataset;
use crate::error::{Error, Result};
use crate::gates::mask_hooks;
use crate::model::{forward, register_checkpoint, Checkpoint, GateHooks, HookSpec, LayerHookIds};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::dataset_loss_hooked;
use crate::registry::{PrunableRegistry, UnitKind};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ScaleState {
    /// Global indices of retained units, ascending.
    pub retained: Vec<usize>,
    /// γ parallel to `retained`; starts at 1.
    pub gamma: Vec<f64>,
}

impl ScaleState {
    pub fn ones(keep: &[bool]) -> Self {
        let retained: Vec<usize> =
            (0..keep.len()).filter(|&i| keep[i]).collect();
        let gamma = vec![1.0; retained.len()];
        ScaleState { retained, gamma }
    }

    /// Retained units whose multiplier drifted past |γ − 1| > 2.
    pub fn anomalies(&self) -> Vec<usize> {
        self.retained
            .iter()
            .zip(&self.gamma)
            .filter(|(_, &g)| (g - 1.0).abs() > 2.0)
            .map(|(&i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CalibrateConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig { epochs: 1, lr: 1e-2, seed: 0 }
    }
}

pub struct CalibrateResult {
    pub state: ScaleState,
    pub loss_trace: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// True when optimization hurt the calibration loss and γ was reset to 1.
    pub reverted: bool,
}

/// Fixed hook multipliers: γ on retained units, 0 on pruned units, 1 on units
/// outside the registry.
pub fn gamma_hooks(
    ckpt: &Checkpoint<f32>,
    registry: &PrunableRegistry,
    keep: &[bool],
    state: &ScaleState,
) -> GateHooks<f32> {
    let mut hooks = mask_hooks(ckpt, registry, keep);
    for (&global, &g) in state.retained.iter().zip(&state.gamma) {
        let u = &registry.units[global];
        match u.kind {
            UnitKind::FfnChannel => hooks.ffn_mult[u.layer][u.local_index] = g as f32,
            UnitKind::KvGroup => hooks.kv_mult[u.layer][u.local_index] = g as f32,
        }
    }
    hooks
}

/// AdamW over γ only, mask immutable, keep-the-initial-γ fallback if the full
/// calibration loss ends up worse than γ ≡ 1.
pub fn calibrate_scales(
    ckpt: &Checkpoint<f32>,
    registry: &PrunableRegistry,
    keep: &[bool],
    dataset: &TokenDataset,
    cfg: &CalibrateConfig,
) -> Result<CalibrateResult> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty calibration dataset".into()));
    }
    if keep.len() != registry.len() {
        return Err(Error::InvalidArgument(format!(
            "mask length {} != |S| {}",
            keep.len(),
            registry.len()
        )));
    }
    let mut state = ScaleState::ones(keep);
    let n_layers = ckpt.layers.len();

    // gamma index of each retained global unit
    let mut gamma_idx = vec![usize::MAX; registry.len()];
    for (gi, &global) in state.retained.iter().enumerate() {
        gamma_idx[global] = gi;
    }
    // per layer: (local index, gamma index) of retained units and the local
    // indices of pruned units, split by kind
    let mut ffn_ret: Vec<Vec<(usize, usize)>> = vec![vec![]; n_layers];
    let mut kv_ret: Vec<Vec<(usize, usize)>> = vec![vec![]; n_layers];
    let mut ffn_cut: Vec<Vec<usize>> = vec![vec![]; n_layers];
    let mut kv_cut: Vec<Vec<usize>> = vec![vec![]; n_layers];
    for u in &registry.units {
        let (ret, cut) = match u.kind {
            UnitKind::FfnChannel => (&mut ffn_ret, &mut ffn_cut),
            UnitKind::KvGroup => (&mut kv_ret, &mut kv_cut),
        };
        if keep[u.global_index] {
            ret[u.layer].push((u.local_index, gamma_idx[u.global_index]));
        } else {
            cut[u.layer].push(u.local_index);
        }
    }

    let initial_loss =
        dataset_loss_hooked(ckpt, &HookSpec::Fixed(&gamma_hooks(ckpt, registry, keep, &state)), dataset)?;

    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() },
        &[state.gamma.len()],
    );
    let mut order_rng = Rng::seeded(cfg.seed ^ 0x5ca1e);
    let mut loss_trace = Vec::with_capacity(cfg.epochs * dataset.len());
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order_rng.shuffle(&mut order);
        for &w in &order {
            let (inputs, targets) = dataset.window(w);
            let mut tape: Tape<f32> = Tape::new();
            let ids = register_checkpoint(&mut tape, ckpt, false);
            let mut hook_ids: Vec<LayerHookIds> = Vec::with_capacity(n_layers);
            let mut leaf_ids: Vec<(usize, usize)> = Vec::with_capacity(n_layers);
            for layer in 0..n_layers {
                let dims = ckpt.layer_dims(layer);
                let make = |ret: &[(usize, usize)],
                            cut: &[usize],
                            len: usize,
                            tape: &mut Tape<f32>|
                 -> Result<usize> {
                    let mut vals = vec![1.0f32; len];
                    for &(local, gi) in ret {
                        vals[local] = state.gamma[gi] as f32;
                    }
                    for &local in cut {
                        vals[local] = 0.0;
                    }
                    Ok(tape.leaf(Tensor::new(vec![len], vals)?, true))
                };
                let ffn = make(&ffn_ret[layer], &ffn_cut[layer], dims.ffn_dim, &mut tape)?;
                let kv = make(&kv_ret[layer], &kv_cut[layer], dims.n_kv_heads, &mut tape)?;
                hook_ids.push(LayerHookIds { ffn, kv });
                leaf_ids.push((ffn, kv));
            }
            let logits = forward(&mut tape, ckpt, &ids, &HookSpec::Tape(&hook_ids), &inputs)?;
            let loss = tape.softmax_ce(logits, &targets)?;
            let loss_val = tape.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!("calibration loss {loss_val}")));
            }
            loss_trace.push(loss_val);

            let grads = tape.backward(loss);
            let mut dgamma = vec![0.0f64; state.gamma.len()];
            for (layer, &(ffn_id, kv_id)) in leaf_ids.iter().enumerate() {
                if let Some(g) = grads.grad(ffn_id) {
                    for &(local, gi) in &ffn_ret[layer] {
                        dgamma[gi] += g.data()[local] as f64;
                    }
                }
                if let Some(g) = grads.grad(kv_id) {
                    for &(local, gi) in &kv_ret[layer] {
                        dgamma[gi] += g.data()[local] as f64;
                    }
                }
            }
            opt.update(&mut [state.gamma.as_mut_slice()], &[dgamma.as_slice()], 1.0);
        }
    }

    let final_loss =
        dataset_loss_hooked(ckpt, &HookSpec::Fixed(&gamma_hooks(ckpt, registry, keep, &state)), dataset)?;
    // calibration must never end worse than γ ≡ 1 on its own objective
    let (state, final_loss, reverted) = if final_loss > initial_loss + 1e-6 {
        (ScaleState::ones(keep), initial_loss, true)
    } else {
        (state, final_loss, false)
    };
    Ok(CalibrateResult { state, loss_trace, initial_loss, final_loss, reverted })
}

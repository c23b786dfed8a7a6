//! Gate learning: relaxed probabilities over prunable units, projected to a
//! budget-feasible hard mask each step, trained hard-forward / soft-backward
//! with an STE surrogate. Backbone weights stay frozen throughout.

use std::time::Instant;

use crate::data::TokenDataset;
use crate::error::{Error, Result};
use crate::model::{forward, register_checkpoint, Checkpoint, HookSpec, LayerHookIds};
use crate::optim::{AdamW, AdamWConfig};
use crate::projection::{project, HardMask, RankVariant, RankingRule, ScanMode};
use crate::registry::{Budget, PrunableRegistry, UnitKind};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Gate scores and their temperature. Probabilities are always derived as
/// σ(s/τ), never stored, so they can't drift out of sync with the scores.
#[derive(Debug, Clone)]
pub struct GateState {
    pub scores: Vec<f64>,
    pub tau: f64,
}

impl GateState {
    /// Scores start at zero, so every unit opens at p = 0.5.
    pub fn new(n_units: usize, tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::InvalidArgument(format!("tau {tau} must be positive")));
        }
        Ok(GateState { scores: vec![0.0; n_units], tau })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.scores.iter().map(|&s| crate::tape::sigmoid_scalar(s / self.tau)).collect()
    }
}

/// dL/ds_i = (1/τ) · dL/dz̃_i · p_i(1 − p_i)
pub fn score_gradient(dl_dz: &[f64], p: &[f64], tau: f64) -> Vec<f64> {
    assert_eq!(dl_dz.len(), p.len());
    dl_dz
        .iter()
        .zip(p)
        .map(|(&g, &pi)| g * pi * (1.0 - pi) / tau)
        .collect()
}

#[derive(Debug, Clone)]
pub struct GateTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub rule: RankingRule,
    pub scan: ScanMode,
    /// Mask snapshot spacing in steps; `None` picks 200, or 50 for runs
    /// shorter than 1000 steps.
    pub snapshot_interval: Option<usize>,
    pub seed: u64,
}

impl Default for GateTrainConfig {
    fn default() -> Self {
        GateTrainConfig {
            epochs: 4,
            lr: 1e-2,
            tau: 1.5,
            rule: RankingRule::score_p(),
            scan: ScanMode::SkipAndContinue,
            snapshot_interval: None,
            seed: 0,
        }
    }
}

pub fn default_snapshot_interval(total_steps: usize) -> usize {
    if total_steps < 1000 {
        50
    } else {
        200
    }
}

/// Mask snapshots taken every `interval` steps (plus one at step 0).
#[derive(Debug, Clone)]
pub struct StabilityTrace {
    pub interval: usize,
    pub snapshots: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct StabilitySeries {
    pub overall: Vec<f64>,
    pub ffn: Vec<f64>,
    pub kv: Vec<f64>,
}

/// Fraction of units whose on/off state is unchanged between consecutive
/// snapshots, overall and per kind.
pub fn mask_stability(trace: &StabilityTrace, registry: &PrunableRegistry) -> Result<StabilitySeries> {
    if trace.snapshots.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "stability needs >= 2 snapshots, got {}",
            trace.snapshots.len()
        )));
    }
    let stable_fraction = |a: &[bool], b: &[bool], kind: Option<UnitKind>| -> f64 {
        let mut total = 0usize;
        let mut same = 0usize;
        for u in &registry.units {
            if let Some(k) = kind {
                if u.kind != k {
                    continue;
                }
            }
            total += 1;
            if a[u.global_index] == b[u.global_index] {
                same += 1;
            }
        }
        if total == 0 {
            1.0
        } else {
            same as f64 / total as f64
        }
    };
    let mut out = StabilitySeries { overall: vec![], ffn: vec![], kv: vec![] };
    for pair in trace.snapshots.windows(2) {
        out.overall.push(stable_fraction(&pair[0], &pair[1], None));
        out.ffn.push(stable_fraction(&pair[0], &pair[1], Some(UnitKind::FfnChannel)));
        out.kv.push(stable_fraction(&pair[0], &pair[1], Some(UnitKind::KvGroup)));
    }
    debug_assert!(out.overall.iter().all(|&s| (0.0..=1.0).contains(&s)));
    Ok(out)
}

pub struct GateTrainResult {
    pub state: GateState,
    pub final_mask: HardMask,
    pub loss_trace: Vec<f64>,
    pub stability: StabilityTrace,
    /// Mean |p − 0.5| per step.
    pub polarization_trace: Vec<f64>,
    pub guard_fires: usize,
    pub evictions: usize,
    /// Wall-clock share of each step spent in sort-and-scan projection.
    pub projection_time_fraction: f64,
}

/// Local-unit lookup: which registry units live in each layer, per kind.
fn layer_unit_maps(
    registry: &PrunableRegistry,
    n_layers: usize,
) -> (Vec<Vec<(usize, usize)>>, Vec<Vec<(usize, usize)>>) {
    let mut ffn: Vec<Vec<(usize, usize)>> = vec![vec![]; n_layers];
    let mut kv: Vec<Vec<(usize, usize)>> = vec![vec![]; n_layers];
    for u in &registry.units {
        match u.kind {
            UnitKind::FfnChannel => ffn[u.layer].push((u.local_index, u.global_index)),
            UnitKind::KvGroup => kv[u.layer].push((u.local_index, u.global_index)),
        }
    }
    (ffn, kv)
}

/// Per-step ranking rule. Gumbel noise is resampled each step from a
/// step-derived seed so the mask actually fluctuates; the other rules are
/// noise-free and pass through unchanged.
fn step_rule(rule: &RankingRule, seed: u64, step: usize) -> RankingRule {
    match rule.variant {
        RankVariant::GumbelTopK => RankingRule::gumbel(
            seed ^ rule.gumbel_seed.unwrap_or(0) ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            rule.gumbel_scale,
        ),
        _ => rule.clone(),
    }
}

/// The full gate-learning loop: project, masked forward with the surrogate
/// gates, backprop to the probabilities, chain into score space, AdamW on the
/// scores only. Deterministic given `cfg.seed`.
pub fn train_gates(
    ckpt: &Checkpoint<f32>,
    registry: &PrunableRegistry,
    budget: &Budget,
    dataset: &TokenDataset,
    cfg: &GateTrainConfig,
) -> Result<GateTrainResult> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty gate-training dataset".into()));
    }
    if registry.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    let n = registry.len();
    let n_layers = ckpt.layers.len();
    let (ffn_map, kv_map) = layer_unit_maps(registry, n_layers);
    let mut state = GateState::new(n, cfg.tau)?;
    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() },
        &[n],
    );

    let total_steps = cfg.epochs * dataset.len();
    let interval = cfg
        .snapshot_interval
        .unwrap_or_else(|| default_snapshot_interval(total_steps));
    let mut order_rng = Rng::seeded(cfg.seed ^ 0x6a7e);

    let mut loss_trace = Vec::with_capacity(total_steps);
    let mut polarization_trace = Vec::with_capacity(total_steps);
    let mut snapshots: Vec<Vec<bool>> = Vec::new();
    let mut guard_fires = 0usize;
    let mut evictions = 0usize;
    let mut projection_secs = 0.0f64;
    let mut total_secs = 0.0f64;
    let mut last_mask: Option<HardMask> = None;

    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order_rng.shuffle(&mut order);
        for &w in &order {
            let step_start = Instant::now();
            let p = state.probabilities();
            polarization_trace.push(
                p.iter().map(|&pi| (pi - 0.5).abs()).sum::<f64>() / n as f64,
            );

            let proj_start = Instant::now();
            let mask = project(&p, registry, &budget.budget, &step_rule(&cfg.rule, cfg.seed, step), cfg.scan)?;
            projection_secs += proj_start.elapsed().as_secs_f64();
            // the budget constraint must hold at every training step, exactly
            assert!(
                mask.consumed_cost <= budget.budget,
                "step {step}: mask cost exceeds the budget"
            );
            guard_fires += mask.guard_interventions.len();
            evictions += mask.evictions.len();
            if step % interval == 0 {
                snapshots.push(mask.keep.clone());
            }

            let (inputs, targets) = dataset.window(w);
            let mut tape: Tape<f32> = Tape::new();
            let ids = register_checkpoint(&mut tape, ckpt, false);
            let mut hook_ids: Vec<LayerHookIds> = Vec::with_capacity(n_layers);
            let mut soft_ids: Vec<(usize, usize)> = Vec::with_capacity(n_layers);
            for layer in 0..n_layers {
                let dims = ckpt.layer_dims(layer);
                let make = |locals: &[(usize, usize)], len: usize, tape: &mut Tape<f32>| -> Result<(usize, usize)> {
                    let mut soft = vec![1.0f32; len];
                    let mut hard = vec![1.0f32; len];
                    for &(local, global) in locals {
                        soft[local] = p[global] as f32;
                        hard[local] = if mask.keep[global] { 1.0 } else { 0.0 };
                    }
                    let soft_id = tape.leaf(Tensor::new(vec![len], soft)?, true);
                    let st = tape.straight_through(soft_id, Tensor::new(vec![len], hard)?)?;
                    Ok((soft_id, st))
                };
                let (ffn_soft, ffn_st) = make(&ffn_map[layer], dims.ffn_dim, &mut tape)?;
                let (kv_soft, kv_st) = make(&kv_map[layer], dims.n_kv_heads, &mut tape)?;
                hook_ids.push(LayerHookIds { ffn: ffn_st, kv: kv_st });
                soft_ids.push((ffn_soft, kv_soft));
            }
            let logits = forward(&mut tape, ckpt, &ids, &HookSpec::Tape(&hook_ids), &inputs)?;
            let loss = tape.softmax_ce(logits, &targets)?;
            let loss_val = tape.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!("gate loss {loss_val} at step {step}")));
            }
            loss_trace.push(loss_val);

            let grads = tape.backward(loss);
            let mut dl_dz = vec![0.0f64; n];
            for (layer, &(ffn_soft, kv_soft)) in soft_ids.iter().enumerate() {
                if let Some(g) = grads.grad(ffn_soft) {
                    for &(local, global) in &ffn_map[layer] {
                        dl_dz[global] = g.data()[local] as f64;
                    }
                }
                if let Some(g) = grads.grad(kv_soft) {
                    for &(local, global) in &kv_map[layer] {
                        dl_dz[global] = g.data()[local] as f64;
                    }
                }
            }
            let dl_ds = score_gradient(&dl_dz, &p, state.tau);
            opt.update(&mut [state.scores.as_mut_slice()], &[dl_ds.as_slice()], 1.0);

            last_mask = Some(mask);
            total_secs += step_start.elapsed().as_secs_f64();
            step += 1;
        }
    }

    let p = state.probabilities();
    let final_mask = project(
        &p,
        registry,
        &budget.budget,
        &step_rule(&cfg.rule, cfg.seed, step),
        cfg.scan,
    )?;
    let _ = last_mask;
    Ok(GateTrainResult {
        state,
        final_mask,
        loss_trace,
        stability: StabilityTrace { interval, snapshots },
        polarization_trace,
        guard_fires,
        evictions,
        projection_time_fraction: if total_secs > 0.0 { projection_secs / total_secs } else { 0.0 },
    })
}

/// Fixed hook multipliers realizing a hard mask (γ ≡ 1 on retained units).
pub fn mask_hooks(ckpt: &Checkpoint<f32>, registry: &PrunableRegistry, keep: &[bool]) -> crate::model::GateHooks<f32> {
    let mut hooks = crate::model::GateHooks::ones_for(ckpt);
    for u in &registry.units {
        if !keep[u.global_index] {
            match u.kind {
                UnitKind::FfnChannel => hooks.ffn_mult[u.layer][u.local_index] = 0.0,
                UnitKind::KvGroup => hooks.kv_mult[u.layer][u.local_index] = 0.0,
            }
        }
    }
    hooks
}

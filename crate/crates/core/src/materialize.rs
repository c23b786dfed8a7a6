//! Materialization: slice every projection along the final mask, fold the
//! calibrated γ into the sliced weights (down-projection rows for FFN
//! channels, V column blocks for KV groups), and emit a smaller dense
//! checkpoint plus a forward-equivalence verifier.

use crate::calibrate::{gamma_hooks, ScaleState};
use crate::error::{Error, Result};
use crate::model::{
    eval_logits, param_count, Checkpoint, HookSpec, LayerWeights, PruneMeta,
};
use crate::registry::{PrunableRegistry, UnitKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-layer retained indices (sorted ascending) plus the γ that folds into
/// each retained unit's weights.
#[derive(Debug, Clone)]
pub struct SlicePlan {
    pub retained_ffn: Vec<Vec<usize>>,
    pub retained_kv: Vec<Vec<usize>>,
    pub gamma_ffn: Vec<Vec<f64>>,
    pub gamma_kv: Vec<Vec<f64>>,
}

impl SlicePlan {
    /// Maps the global mask through the registry bijection. Kinds outside the
    /// registry (target filters) are fully retained with γ = 1.
    pub fn build(
        ckpt: &Checkpoint<f32>,
        registry: &PrunableRegistry,
        keep: &[bool],
        scales: Option<&ScaleState>,
    ) -> Result<Self> {
        if keep.len() != registry.len() {
            return Err(Error::InvalidArgument(format!(
                "mask length {} != |S| {}",
                keep.len(),
                registry.len()
            )));
        }
        let n_layers = ckpt.layers.len();
        let has_ffn = registry.units.iter().any(|u| u.kind == UnitKind::FfnChannel);
        let has_kv = registry.units.iter().any(|u| u.kind == UnitKind::KvGroup);
        let (mut retained_ffn, mut retained_kv) = registry.retained_by_layer(keep);
        for layer in 0..n_layers {
            let dims = ckpt.layer_dims(layer);
            if !has_ffn {
                retained_ffn[layer] = (0..dims.ffn_dim).collect();
            }
            if !has_kv {
                retained_kv[layer] = (0..dims.n_kv_heads).collect();
            }
            if retained_ffn[layer].is_empty() || retained_kv[layer].is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer} would lose all of one unit kind"
                )));
            }
        }

        let mut gamma_ffn: Vec<Vec<f64>> =
            retained_ffn.iter().map(|r| vec![1.0; r.len()]).collect();
        let mut gamma_kv: Vec<Vec<f64>> =
            retained_kv.iter().map(|r| vec![1.0; r.len()]).collect();
        if let Some(st) = scales {
            for (&global, &g) in st.retained.iter().zip(&st.gamma) {
                let u = &registry.units[global];
                let (ret, gam) = match u.kind {
                    UnitKind::FfnChannel => (&retained_ffn[u.layer], &mut gamma_ffn[u.layer]),
                    UnitKind::KvGroup => (&retained_kv[u.layer], &mut gamma_kv[u.layer]),
                };
                let pos = ret.binary_search(&u.local_index).map_err(|_| {
                    Error::InvalidArgument(format!(
                        "γ given for unit {global}, which the mask prunes"
                    ))
                })?;
                gam[pos] = g;
            }
        }
        Ok(SlicePlan { retained_ffn, retained_kv, gamma_ffn, gamma_kv })
    }
}

/// Keep the listed columns of a [r, c] matrix, scaling column j of the output
/// by `scale[j]`.
fn take_cols(t: &Tensor<f32>, cols: &[usize], scale: Option<&[f64]>) -> Result<Tensor<f32>> {
    let (r, c) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(r * cols.len());
    for i in 0..r {
        for (j, &col) in cols.iter().enumerate() {
            if col >= c {
                return Err(Error::IndexOutOfRange {
                    op: "take_cols",
                    detail: format!("column {col} >= {c}"),
                });
            }
            let s = scale.map_or(1.0, |sc| sc[j]);
            data.push((t.at2(i, col) as f64 * s) as f32);
        }
    }
    Tensor::new(vec![r, cols.len()], data)
}

/// Keep the listed rows of a [r, c] matrix, scaling row i of the output by
/// `scale[i]`.
fn take_rows(t: &Tensor<f32>, rows: &[usize], scale: Option<&[f64]>) -> Result<Tensor<f32>> {
    let (r, c) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(rows.len() * c);
    for (i, &row) in rows.iter().enumerate() {
        if row >= r {
            return Err(Error::IndexOutOfRange {
                op: "take_rows",
                detail: format!("row {row} >= {r}"),
            });
        }
        let s = scale.map_or(1.0, |sc| sc[i]);
        for j in 0..c {
            data.push((t.at2(row, j) as f64 * s) as f32);
        }
    }
    Tensor::new(vec![rows.len(), c], data)
}

/// Expand retained head-group indices into the flat column/row indices of the
/// dh-wide blocks they own.
fn block_indices(groups: &[usize], block: usize) -> Vec<usize> {
    groups
        .iter()
        .flat_map(|&g| g * block..(g + 1) * block)
        .collect()
}

fn block_scales(gamma: &[f64], block: usize) -> Vec<f64> {
    gamma.iter().flat_map(|&g| std::iter::repeat(g).take(block)).collect()
}

/// Slices a checkpoint to the mask and folds γ in. All gate and scale
/// parameters are discarded; the result is a plain dense checkpoint.
pub fn materialize(
    ckpt: &Checkpoint<f32>,
    registry: &PrunableRegistry,
    keep: &[bool],
    scales: Option<&ScaleState>,
    keep_ratio: f64,
    seed: Option<u64>,
    hyperparams: Option<serde_json::Value>,
) -> Result<Checkpoint<f32>> {
    let plan = SlicePlan::build(ckpt, registry, keep, scales)?;
    let cfg = &ckpt.config;
    let dh = cfg.head_dim;
    let g = cfg.group_size();
    let mut layers = Vec::with_capacity(ckpt.layers.len());
    for (layer, lw) in ckpt.layers.iter().enumerate() {
        let ffn = &plan.retained_ffn[layer];
        let kv = &plan.retained_kv[layer];
        // a retained KV group keeps its G query heads
        let q_heads: Vec<usize> = kv
            .iter()
            .flat_map(|&grp| grp * g..(grp + 1) * g)
            .collect();
        let q_cols = block_indices(&q_heads, dh);
        let kv_cols = block_indices(kv, dh);
        let v_scale = block_scales(&plan.gamma_kv[layer], dh);
        layers.push(LayerWeights {
            q_proj: take_cols(&lw.q_proj, &q_cols, None)?,
            k_proj: take_cols(&lw.k_proj, &kv_cols, None)?,
            v_proj: take_cols(&lw.v_proj, &kv_cols, Some(&v_scale))?,
            o_proj: take_rows(&lw.o_proj, &q_cols, None)?,
            ffn_gate: take_cols(&lw.ffn_gate, ffn, None)?,
            ffn_up: take_cols(&lw.ffn_up, ffn, None)?,
            ffn_down: take_rows(&lw.ffn_down, ffn, Some(&plan.gamma_ffn[layer]))?,
            attn_norm: lw.attn_norm.clone(),
            ffn_norm: lw.ffn_norm.clone(),
        });
    }
    let pruned = Checkpoint {
        config: cfg.clone(),
        layers,
        embed: ckpt.embed.clone(),
        final_norm: ckpt.final_norm.clone(),
        head: ckpt.head.clone(),
        prune_meta: Some(PruneMeta {
            keep_ratio,
            retained_ffn: plan.retained_ffn.clone(),
            retained_kv: plan.retained_kv.clone(),
            folded: true,
            seed,
            hyperparams,
        }),
    };
    let expected = param_count(cfg, Some((&plan.retained_ffn, &plan.retained_kv)));
    assert_eq!(
        pruned.param_count(),
        expected,
        "sliced parameter count disagrees with the closed form"
    );
    Ok(pruned)
}

#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub n_probes: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares the pruned checkpoint's logits against the original run with
/// mask-and-γ hooks, over random token windows.
pub fn verify_equivalence(
    original: &Checkpoint<f32>,
    registry: &PrunableRegistry,
    keep: &[bool],
    scales: Option<&ScaleState>,
    pruned: &Checkpoint<f32>,
    n_probes: usize,
    probe_len: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    let state = match scales {
        Some(st) => st.clone(),
        None => ScaleState::ones(keep),
    };
    let hooks = gamma_hooks(original, registry, keep, &state);
    let mut rng = Rng::seeded(seed);
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for _ in 0..n_probes {
        let tokens: Vec<usize> =
            (0..probe_len).map(|_| rng.below(original.config.vocab_size)).collect();
        let reference = eval_logits(original, &HookSpec::Fixed(&hooks), &tokens)?;
        let sliced = eval_logits(pruned, &HookSpec::None, &tokens)?;
        if reference.shape() != sliced.shape() {
            return Err(Error::ShapeMismatch {
                op: "verify_equivalence",
                detail: format!("{:?} vs {:?}", reference.shape(), sliced.shape()),
            });
        }
        for (&a, &b) in reference.data().iter().zip(sliced.data()) {
            let abs = (a as f64 - b as f64).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / (a as f64).abs().max(1e-8));
        }
    }
    Ok(EquivalenceReport { n_probes, max_abs, max_rel, tolerance, pass: max_abs <= tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    
    use crate::model::ModelConfig;
    use crate::projection::{project, RankingRule, ScanMode};
    use crate::registry::{build_registry, BudgetSpec};

    fn setup(keep_ratio: f64) -> (Checkpoint<f32>, PrunableRegistry, Vec<bool>) {
        let mut cfg = ModelConfig::toy();
        cfg.n_layers = 2;
        cfg.ffn_dim = 32;
        let ckpt: Checkpoint<f32> = crate::model::init_checkpoint(&cfg, 8).unwrap();
        let (registry, budget) =
            build_registry(&cfg, &BudgetSpec { keep_ratio, ..Default::default() }).unwrap();
        let mut rng = Rng::seeded(4);
        let p: Vec<f64> = (0..registry.len()).map(|_| rng.uniform()).collect();
        let mask = project(&p, &registry, &budget.budget, &RankingRule::score_p(), ScanMode::SkipAndContinue)
            .unwrap();
        (ckpt, registry, mask.keep)
    }

    #[test]
    fn all_ones_mask_is_the_identity() {
        let (ckpt, registry, _) = setup(1.0);
        let keep = vec![true; registry.len()];
        let pruned = materialize(&ckpt, &registry, &keep, None, 1.0, None, None).unwrap();
        for ((name_a, a), (name_b, b)) in
            ckpt.named_tensors().iter().zip(pruned.named_tensors().iter())
        {
            assert_eq!(name_a, name_b);
            assert_eq!(a.data(), b.data(), "{name_a} changed");
        }
    }

    #[test]
    fn pruned_logits_match_masked_logits() {
        let (ckpt, registry, keep) = setup(0.5);
        let pruned = materialize(&ckpt, &registry, &keep, None, 0.5, None, None).unwrap();
        let report =
            verify_equivalence(&ckpt, &registry, &keep, None, &pruned, 16, 16, 1e-5, 99).unwrap();
        assert!(report.pass, "max abs dev {}", report.max_abs);
    }

    #[test]
    fn folded_gamma_matches_hooked_gamma() {
        let (ckpt, registry, keep) = setup(0.5);
        let mut st = ScaleState::ones(&keep);
        let mut rng = Rng::seeded(12);
        for gmm in st.gamma.iter_mut() {
            *gmm = 1.0 + 0.3 * rng.normal();
        }
        let pruned = materialize(&ckpt, &registry, &keep, Some(&st), 0.5, None, None).unwrap();
        let report =
            verify_equivalence(&ckpt, &registry, &keep, Some(&st), &pruned, 16, 16, 1e-5, 77)
                .unwrap();
        assert!(report.pass, "max abs dev {}", report.max_abs);
    }

    #[test]
    fn corrupted_slice_fails_verification() {
        let (ckpt, registry, keep) = setup(0.5);
        let mut pruned = materialize(&ckpt, &registry, &keep, None, 0.5, None, None).unwrap();
        let v = pruned.layers[0].ffn_down.data_mut();
        v[0] += 10.0;
        let report =
            verify_equivalence(&ckpt, &registry, &keep, None, &pruned, 4, 16, 1e-5, 5).unwrap();
        assert!(!report.pass);
        assert!(report.max_abs > 1e-3);
    }

    #[test]
    fn parameter_count_and_meta_contract() {
        let (ckpt, registry, keep) = setup(0.5);
        let pruned = materialize(&ckpt, &registry, &keep, None, 0.5, Some(42), None).unwrap();
        let meta = pruned.prune_meta.as_ref().unwrap();
        assert!(meta.folded);
        assert_eq!(meta.seed, Some(42));
        assert_eq!(
            pruned.param_count(),
            param_count(&ckpt.config, Some((&meta.retained_ffn, &meta.retained_kv)))
        );
        assert!(pruned.param_count() < ckpt.param_count());
        // retained lists are sorted ascending
        for layer in meta.retained_ffn.iter().chain(&meta.retained_kv) {
            assert!(layer.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn gamma_on_pruned_unit_is_rejected() {
        let (ckpt, registry, keep) = setup(0.5);
        let mut st = ScaleState::ones(&keep);
        let pruned_unit = (0..keep.len()).find(|&i| !keep[i]).unwrap();
        st.retained.push(pruned_unit);
        st.gamma.push(2.0);
        assert!(SlicePlan::build(&ckpt, &registry, &keep, Some(&st)).is_err());
    }

    #[test]
    fn ffn_only_registry_keeps_all_kv_groups() {
        let mut cfg = ModelConfig::toy();
        cfg.n_layers = 2;
        cfg.ffn_dim = 32;
        let ckpt: Checkpoint<f32> = crate::model::init_checkpoint(&cfg, 8).unwrap();
        let (registry, budget) = build_registry(
            &cfg,
            &BudgetSpec {
                keep_ratio: 0.5,
                target_filter: crate::registry::TargetFilter::FfnOnly,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = Rng::seeded(4);
        let p: Vec<f64> = (0..registry.len()).map(|_| rng.uniform()).collect();
        let mask =
            project(&p, &registry, &budget.budget, &RankingRule::score_p(), ScanMode::SkipAndContinue)
                .unwrap();
        let pruned = materialize(&ckpt, &registry, &mask.keep, None, 0.5, None, None).unwrap();
        let meta = pruned.prune_meta.as_ref().unwrap();
        assert!(meta.retained_kv.iter().all(|kv| kv.len() == cfg.n_kv_heads));
        let report = verify_equivalence(
            &ckpt, &registry, &mask.keep, None, &pruned, 8, 16, 1e-5, 3,
        )
        .unwrap();
        assert!(report.pass, "max abs dev {}", report.max_abs);
    }
}

//! Evaluation and reporting: perplexity, the analytic weight/KV-cache memory
//! estimator, and retention/allocation summaries emitted as JSON and CSV.

use serde::{Deserialize, Serialize};

use crate::data::TokenDataset;
use crate::error::{Error, Result};
use crate::model::{param_count, Checkpoint, ModelConfig, PruneMeta};
use crate::pretrain::dataset_loss;
use crate::projection::BiasReport;
use crate::registry::{PrunableRegistry, UnitKind};

/// exp(mean token NLL) over every window of the dataset.
pub fn perplexity(ckpt: &Checkpoint<f32>, dataset: &TokenDataset) -> Result<f64> {
    let loss = dataset_loss(ckpt, dataset)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "perplexity" });
    }
    Ok(loss.exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub params: u64,
    pub weights_mib: f64,
    pub kv_cache_mib: f64,
    pub seq_len: usize,
    pub batch: usize,
    pub bytes_per_scalar: usize,
    pub per_layer_kv_groups: Vec<usize>,
}

/// Weights are independent of T; the KV cache stores K and V for every
/// retained KV group at every position: 2 · Σ_l (groups_l · d_h) · T · batch
/// scalars.
pub fn estimate_memory(
    config: &ModelConfig,
    meta: Option<&PruneMeta>,
    seq_len: usize,
    batch: usize,
    bytes_per_scalar: usize,
) -> Result<MemoryEstimate> {
    if seq_len == 0 || batch == 0 || bytes_per_scalar == 0 {
        return Err(Error::InvalidArgument(
            "seq_len, batch, and bytes_per_scalar must be >= 1".into(),
        ));
    }
    config.validate()?;
    let per_layer_kv_groups: Vec<usize> = match meta {
        Some(m) => m.retained_kv.iter().map(|g| g.len()).collect(),
        None => vec![config.n_kv_heads; config.n_layers],
    };
    let params = match meta {
        Some(m) => param_count(config, Some((&m.retained_ffn, &m.retained_kv))),
        None => param_count(config, None),
    };
    let mib = |bytes: f64| bytes / (1u64 << 20) as f64;
    let kv_scalars: u64 = 2
        * per_layer_kv_groups.iter().map(|&g| (g * config.head_dim) as u64).sum::<u64>()
        * seq_len as u64
        * batch as u64;
    Ok(MemoryEstimate {
        params,
        weights_mib: mib(params as f64 * bytes_per_scalar as f64),
        kv_cache_mib: mib(kv_scalars as f64 * bytes_per_scalar as f64),
        seq_len,
        batch,
        bytes_per_scalar,
        per_layer_kv_groups,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KindRetention {
    pub kind: String,
    pub kept: usize,
    pub total: usize,
    pub ratio: f64,
    pub per_layer: Vec<LayerRetention>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRetention {
    pub layer: usize,
    pub kept: usize,
    pub total: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetentionReport {
    pub kinds: Vec<KindRetention>,
}

impl RetentionReport {
    /// Plot-ready rows: kind, layer ("all" for the global row), kept, total, ratio.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,layer,kept,total,ratio\n");
        for k in &self.kinds {
            out.push_str(&format!("{},all,{},{},{}\n", k.kind, k.kept, k.total, k.ratio));
            for l in &k.per_layer {
                out.push_str(&format!("{},{},{},{},{}\n", k.kind, l.layer, l.kept, l.total, l.ratio));
            }
        }
        out
    }
}

pub fn retention_report(keep: &[bool], registry: &PrunableRegistry) -> Result<RetentionReport> {
    if keep.len() != registry.len() {
        return Err(Error::InvalidArgument(format!(
            "mask length {} != |S| {}",
            keep.len(),
            registry.len()
        )));
    }
    let mut kinds = Vec::new();
    for kind in [UnitKind::FfnChannel, UnitKind::KvGroup] {
        let units: Vec<_> = registry.units.iter().filter(|u| u.kind == kind).collect();
        if units.is_empty() {
            continue;
        }
        let n_layers = registry.n_layers;
        let mut per_layer: Vec<LayerRetention> = (0..n_layers)
            .map(|layer| LayerRetention { layer, kept: 0, total: 0, ratio: 0.0 })
            .collect();
        let mut kept = 0usize;
        for u in &units {
            per_layer[u.layer].total += 1;
            if keep[u.global_index] {
                per_layer[u.layer].kept += 1;
                kept += 1;
            }
        }
        for l in per_layer.iter_mut() {
            l.ratio = if l.total > 0 { l.kept as f64 / l.total as f64 } else { 1.0 };
        }
        per_layer.retain(|l| l.total > 0);
        kinds.push(KindRetention {
            kind: kind.label().to_string(),
            kept,
            total: units.len(),
            ratio: kept as f64 / units.len() as f64,
            per_layer,
        });
    }
    let report = RetentionReport { kinds };
    debug_assert!(report.kinds.iter().all(|k| {
        (0.0..=1.0).contains(&k.ratio)
            && k.per_layer.iter().map(|l| l.kept).sum::<usize>() == k.kept
    }));
    Ok(report)
}

/// Everything a pruning run reports, bundled for JSON emission.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub keep_ratio: f64,
    pub retention: RetentionReport,
    pub loss_trace: Vec<f64>,
    pub stability_overall: Vec<f64>,
    pub stability_ffn: Vec<f64>,
    pub stability_kv: Vec<f64>,
    pub polarization_trace: Vec<f64>,
    pub guard_fires: usize,
    pub evictions: usize,
    pub projection_time_fraction: f64,
    pub memory: Option<MemoryEstimate>,
    pub selection_bias: Option<BiasReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_checkpoint, ModelConfig};
    use crate::presets::preset;
    use crate::registry::{build_registry, BudgetSpec};

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let mut cfg = ModelConfig::toy();
        cfg.n_layers = 1;
        cfg.ffn_dim = 32;
        let mut ckpt: Checkpoint<f32> = init_checkpoint(&cfg, 1).unwrap();
        // a zeroed output head makes the predictive distribution exactly uniform
        ckpt.head = crate::tensor::Tensor::zeros(vec![cfg.d_model, cfg.vocab_size]);
        let corpus: Vec<u8> = (0..800u32).map(|i| (i * 37 % 256) as u8).collect();
        let ds = TokenDataset::from_bytes(&corpus, 24, 0, 8).unwrap();
        let ppl = perplexity(&ckpt, &ds).unwrap();
        assert!((ppl - 256.0).abs() < 1.0, "ppl {ppl}");
    }

    #[test]
    fn llama2_7b_memory_table() {
        let cfg = preset("llama2-7b").unwrap();
        for (t, expect_kv) in [(256, 512.0), (512, 1024.0), (1024, 2048.0), (2048, 4096.0)] {
            let est = estimate_memory(&cfg, None, t, 4, 2).unwrap();
            assert!((est.weights_mib - 12852.5).abs() < 0.1, "weights {}", est.weights_mib);
            assert_eq!(est.kv_cache_mib, expect_kv);
        }
    }

    #[test]
    fn kv_cache_is_linear_in_t_and_batch() {
        let cfg = preset("llama3.1-8b").unwrap();
        let a = estimate_memory(&cfg, None, 300, 2, 2).unwrap();
        let b = estimate_memory(&cfg, None, 600, 2, 2).unwrap();
        let c = estimate_memory(&cfg, None, 300, 4, 2).unwrap();
        assert_eq!(b.kv_cache_mib, 2.0 * a.kv_cache_mib);
        assert_eq!(c.kv_cache_mib, 2.0 * a.kv_cache_mib);
        assert_eq!(a.weights_mib, b.weights_mib);
    }

    #[test]
    fn pruned_meta_shrinks_both_components() {
        let cfg = ModelConfig::toy();
        let meta = PruneMeta {
            keep_ratio: 0.5,
            retained_ffn: vec![(0..128).collect(); cfg.n_layers],
            retained_kv: vec![vec![0]; cfg.n_layers],
            folded: true,
            seed: None,
            hyperparams: None,
        };
        let full = estimate_memory(&cfg, None, 128, 1, 4).unwrap();
        let pruned = estimate_memory(&cfg, Some(&meta), 128, 1, 4).unwrap();
        assert!(pruned.weights_mib < full.weights_mib);
        assert_eq!(pruned.kv_cache_mib, full.kv_cache_mib / 2.0);
        assert_eq!(pruned.per_layer_kv_groups, vec![1; cfg.n_layers]);
    }

    #[test]
    fn retention_trivial_cases() {
        let cfg = ModelConfig::toy();
        let (registry, _) = build_registry(&cfg, &BudgetSpec::default()).unwrap();
        let all = vec![true; registry.len()];
        let r = retention_report(&all, &registry).unwrap();
        assert!(r.kinds.iter().all(|k| k.ratio == 1.0));
        assert!(r.kinds.iter().flat_map(|k| &k.per_layer).all(|l| l.ratio == 1.0));

        // prune 2 of the first layer's FFN channels
        let mut keep = all.clone();
        keep[0] = false;
        keep[1] = false;
        let r = retention_report(&keep, &registry).unwrap();
        let ffn = r.kinds.iter().find(|k| k.kind == "ffn").unwrap();
        let l0 = &ffn.per_layer[0];
        assert_eq!(l0.kept, cfg.ffn_dim - 2);
        assert!((l0.ratio - (cfg.ffn_dim - 2) as f64 / cfg.ffn_dim as f64).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.starts_with("kind,layer,kept,total,ratio\n"));
        assert!(csv.contains("ffn,all,"));
    }
}

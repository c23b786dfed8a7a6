//! The global flat set S of prunable units (FFN channels and KV head groups)
//! with heterogeneous costs and the budget derived from a keep ratio.
//!
//! Costs are exact rationals (the KV group cost has denominator 3), so budget
//! feasibility comparisons never depend on float summation order.

use num::{BigRational, FromPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    FfnChannel,
    KvGroup,
}

impl UnitKind {
    pub fn label(self) -> &'static str {
        match self {
            UnitKind::FfnChannel => "ffn",
            UnitKind::KvGroup => "kv",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrunableUnit {
    pub global_index: usize,
    pub layer: usize,
    pub kind: UnitKind,
    pub local_index: usize,
    pub cost: BigRational,
    /// Float view of the cost, for ranking keys only.
    pub cost_f64: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetFilter {
    Both,
    FfnOnly,
    KvOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetSpec {
    /// Keep ratio ρ ∈ (0, 1].
    pub keep_ratio: f64,
    /// Multiplies the KV-group unit cost (the α perturbation knob).
    pub cost_scale: f64,
    pub target_filter: TargetFilter,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        BudgetSpec { keep_ratio: 0.5, cost_scale: 1.0, target_filter: TargetFilter::Both }
    }
}

#[derive(Debug, Clone)]
pub struct Budget {
    pub spec: BudgetSpec,
    pub total_cost: BigRational,
    /// B = ρ · Σ c_i, exact.
    pub budget: BigRational,
}

#[derive(Debug, Clone)]
pub struct PrunableRegistry {
    pub units: Vec<PrunableUnit>,
    pub n_layers: usize,
    /// Cost of one KV head group in FFN-channel units, before cost_scale.
    pub alpha: BigRational,
    /// Unit indices per (layer, kind) group, in local order.
    groups: Vec<((usize, UnitKind), Vec<usize>)>,
}

/// Cost ratio α = (2G + 2)·d_h / 3 with G = H / H_kv.
pub fn alpha(config: &ModelConfig) -> Result<BigRational> {
    config.validate()?;
    let g = config.group_size();
    Ok(BigRational::new(
        ((2 * g + 2) * config.head_dim).into(),
        3.into(),
    ))
}

pub fn build_registry(config: &ModelConfig, spec: &BudgetSpec) -> Result<(PrunableRegistry, Budget)> {
    if !(spec.keep_ratio > 0.0 && spec.keep_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep_ratio {} outside (0, 1]", spec.keep_ratio)));
    }
    if spec.cost_scale <= 0.0 {
        return Err(Error::InvalidArgument(format!("cost_scale {} must be > 0", spec.cost_scale)));
    }
    let alpha = alpha(config)?;
    let scale = BigRational::from_f64(spec.cost_scale)
        .ok_or_else(|| Error::InvalidArgument("non-finite cost_scale".into()))?;
    let kv_cost = &alpha * &scale;
    let ffn_cost = BigRational::from_integer(1.into());

    let mut units = Vec::new();
    let mut groups: Vec<((usize, UnitKind), Vec<usize>)> = Vec::new();
    for layer in 0..config.n_layers {
        if spec.target_filter != TargetFilter::KvOnly {
            let mut g = Vec::with_capacity(config.ffn_dim);
            for local in 0..config.ffn_dim {
                g.push(units.len());
                units.push(PrunableUnit {
                    global_index: units.len(),
                    layer,
                    kind: UnitKind::FfnChannel,
                    local_index: local,
                    cost: ffn_cost.clone(),
                    cost_f64: 1.0,
                });
            }
            groups.push(((layer, UnitKind::FfnChannel), g));
        }
        if spec.target_filter != TargetFilter::FfnOnly {
            let mut g = Vec::with_capacity(config.n_kv_heads);
            for local in 0..config.n_kv_heads {
                g.push(units.len());
                units.push(PrunableUnit {
                    global_index: units.len(),
                    layer,
                    kind: UnitKind::KvGroup,
                    local_index: local,
                    cost: kv_cost.clone(),
                    cost_f64: rational_to_f64(&kv_cost),
                });
            }
            groups.push(((layer, UnitKind::KvGroup), g));
        }
    }
    if units.is_empty() {
        return Err(Error::EmptyRegistry);
    }
    let total_cost: BigRational = units.iter().map(|u| u.cost.clone()).sum();
    let rho = BigRational::from_f64(spec.keep_ratio)
        .ok_or_else(|| Error::InvalidArgument("non-finite keep_ratio".into()))?;
    let budget = &rho * &total_cost;
    Ok((
        PrunableRegistry { units, n_layers: config.n_layers, alpha, groups },
        Budget { spec: spec.clone(), total_cost, budget },
    ))
}

impl PrunableRegistry {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn groups(&self) -> &[((usize, UnitKind), Vec<usize>)] {
        &self.groups
    }

    /// Σ c_i over kept units, exact.
    pub fn mask_cost(&self, mask: &[bool]) -> Result<BigRational> {
        if mask.len() != self.units.len() {
            return Err(Error::InvalidArgument(format!(
                "mask length {} != |S| {}",
                mask.len(),
                self.units.len()
            )));
        }
        Ok(self
            .units
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(u, _)| u.cost.clone())
            .fold(BigRational::zero(), |a, b| a + b))
    }

    /// Cheapest way to keep one unit per (layer, kind) group, exact.
    pub fn min_guard_cost(&self) -> BigRational {
        self.groups
            .iter()
            .map(|(_, g)| g.iter().map(|&i| self.units[i].cost.clone()).min().unwrap())
            .fold(BigRational::zero(), |a, b| a + b)
    }

    /// Per-layer retained local indices, split by kind, from a global mask.
    pub fn retained_by_layer(&self, mask: &[bool]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let mut ffn = vec![Vec::new(); self.n_layers];
        let mut kv = vec![Vec::new(); self.n_layers];
        for (u, &kept) in self.units.iter().zip(mask) {
            if kept {
                match u.kind {
                    UnitKind::FfnChannel => ffn[u.layer].push(u.local_index),
                    UnitKind::KvGroup => kv[u.layer].push(u.local_index),
                }
            }
        }
        for v in ffn.iter_mut().chain(kv.iter_mut()) {
            v.sort_unstable();
        }
        (ffn, kv)
    }
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    use num::ToPrimitive;
    r.to_f64().expect("rational out of f64 range")
}

pub fn rational_to_string(r: &BigRational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

//! The budget projection operator: rank units, scan once against the budget,
//! apply the degeneracy guard, and restore feasibility if the guard overshot.

use std::time::Instant;

use num::BigRational;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{PrunableRegistry, UnitKind};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankVariant {
    /// Rank by p_i; cost enters only through feasibility.
    ScoreP,
    /// Rank by p_i / c_i.
    ValuePerCost,
    /// Rank by logit(p_i) perturbed with Gumbel noise.
    GumbelTopK,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingRule {
    pub variant: RankVariant,
    pub gumbel_seed: Option<u64>,
    pub gumbel_scale: f64,
}

impl RankingRule {
    pub fn score_p() -> Self {
        RankingRule { variant: RankVariant::ScoreP, gumbel_seed: None, gumbel_scale: 1.0 }
    }

    pub fn value_per_cost() -> Self {
        RankingRule { variant: RankVariant::ValuePerCost, gumbel_seed: None, gumbel_scale: 1.0 }
    }

    pub fn gumbel(seed: u64, scale: f64) -> Self {
        RankingRule { variant: RankVariant::GumbelTopK, gumbel_seed: Some(seed), gumbel_scale: scale }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanMode {
    /// Keep each unit iff it fits the remaining budget.
    SkipAndContinue,
    /// Stop at the first unit that does not fit.
    HaltAtFirstViolation,
}

#[derive(Debug, Clone)]
pub struct HardMask {
    pub keep: Vec<bool>,
    pub consumed_cost: BigRational,
    /// Units force-kept by the degeneracy guard.
    pub guard_interventions: Vec<usize>,
    /// Units evicted to restore feasibility after the guard.
    pub evictions: Vec<usize>,
}

impl HardMask {
    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&m| m).count()
    }
}

/// Ranking keys for a rule. Gumbel noise is a pure function of the seed.
fn ranking_keys(p: &[f64], registry: &PrunableRegistry, rule: &RankingRule) -> Vec<f64> {
    match rule.variant {
        RankVariant::ScoreP => p.to_vec(),
        RankVariant::ValuePerCost => p
            .iter()
            .zip(&registry.units)
            .map(|(&pi, u)| pi / u.cost_f64)
            .collect(),
        RankVariant::GumbelTopK => {
            let mut rng = Rng::seeded(rule.gumbel_seed.unwrap_or(0));
            p.iter()
                .map(|&pi| {
                    let logit = (pi / (1.0 - pi)).ln();
                    logit + rule.gumbel_scale * rng.gumbel()
                })
                .collect()
        }
    }
}

/// Maps relaxed probabilities to a budget-feasible hard mask.
///
/// Steps: rank descending (ties by ascending global index), scan once against
/// the remaining budget, force-keep the max-p unit of any emptied (layer,
/// kind) group, then evict lowest-p kept units (never emptying a group) until
/// the consumed cost is back within B. Feasibility is checked exactly.
pub fn project(
    p: &[f64],
    registry: &PrunableRegistry,
    budget: &BigRational,
    rule: &RankingRule,
    scan: ScanMode,
) -> Result<HardMask> {
    if p.len() != registry.len() {
        return Err(Error::InvalidArgument(format!(
            "p length {} != |S| {}",
            p.len(),
            registry.len()
        )));
    }
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::InvalidArgument("probabilities outside [0, 1]".into()));
    }
    if registry.min_guard_cost() > *budget {
        return Err(Error::InfeasibleBudget(format!(
            "budget {} below the cheapest one-unit-per-group selection {}",
            budget,
            registry.min_guard_cost()
        )));
    }

    let keys = ranking_keys(p, registry, rule);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).unwrap().then(a.cmp(&b)));

    let mut keep = vec![false; p.len()];
    let mut remaining = budget.clone();
    for &i in &order {
        let cost = &registry.units[i].cost;
        if *cost <= remaining {
            keep[i] = true;
            remaining -= cost;
        } else if scan == ScanMode::HaltAtFirstViolation {
            break;
        }
    }

    // degeneracy guard: no (layer, kind) group may end up empty
    let mut guard_interventions = Vec::new();
    for (_, members) in registry.groups() {
        if members.iter().any(|&i| keep[i]) {
            continue;
        }
        let forced = *members
            .iter()
            .max_by(|&&a, &&b| p[a].partial_cmp(&p[b]).unwrap().then(b.cmp(&a)))
            .expect("groups are nonempty");
        keep[forced] = true;
        guard_interventions.push(forced);
    }

    // guard overshoot: evict lowest-p kept units whose removal keeps all groups nonempty
    let mut consumed = registry.mask_cost(&keep)?;
    let mut evictions = Vec::new();
    if consumed > *budget {
        let mut group_kept: Vec<usize> = registry
            .groups()
            .iter()
            .map(|(_, members)| members.iter().filter(|&&i| keep[i]).count())
            .collect();
        let group_of: Vec<usize> = {
            let mut v = vec![0usize; registry.len()];
            for (gi, (_, members)) in registry.groups().iter().enumerate() {
                for &i in members {
                    v[i] = gi;
                }
            }
            v
        };
        let mut candidates: Vec<usize> = (0..registry.len()).filter(|&i| keep[i]).collect();
        // lowest p evicted first; ties broken by larger global index
        candidates.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(b.cmp(&a)));
        for i in candidates {
            if consumed <= *budget {
                break;
            }
            let g = group_of[i];
            if group_kept[g] <= 1 {
                continue;
            }
            keep[i] = false;
            group_kept[g] -= 1;
            consumed -= &registry.units[i].cost;
            evictions.push(i);
        }
        if consumed > *budget {
            return Err(Error::InfeasibleBudget(
                "could not evict back into budget without emptying a group".into(),
            ));
        }
    }

    assert!(consumed <= *budget, "projection produced an infeasible mask");
    Ok(HardMask { keep, consumed_cost: consumed, guard_interventions, evictions })
}

/// A random budget-feasible mask (baseline for learned-mask comparisons):
/// projects uniform-random utilities with the default rule.
pub fn random_feasible_mask(
    registry: &PrunableRegistry,
    budget: &BigRational,
    seed: u64,
) -> Result<HardMask> {
    let mut rng = Rng::seeded(seed);
    let p: Vec<f64> = (0..registry.len()).map(|_| rng.uniform()).collect();
    project(&p, registry, budget, &RankingRule::score_p(), ScanMode::SkipAndContinue)
}

/// One row of the allocation-bias table, per unit kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KindAllocation {
    pub kind: String,
    pub kept: usize,
    pub total: usize,
    pub keep_ratio: f64,
    /// Fraction of the consumed budget absorbed by this kind.
    pub budget_share: f64,
    /// Mean p over this kind's selected units.
    pub mean_p_selected: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub score_p: Vec<KindAllocation>,
    pub value_per_cost: Vec<KindAllocation>,
}

fn kind_allocations(p: &[f64], registry: &PrunableRegistry, mask: &HardMask) -> Vec<KindAllocation> {
    let consumed = crate::registry::rational_to_f64(&mask.consumed_cost);
    [UnitKind::FfnChannel, UnitKind::KvGroup]
        .into_iter()
        .filter_map(|kind| {
            let total = registry.units.iter().filter(|u| u.kind == kind).count();
            if total == 0 {
                return None;
            }
            let selected: Vec<&crate::registry::PrunableUnit> = registry
                .units
                .iter()
                .filter(|u| u.kind == kind && mask.keep[u.global_index])
                .collect();
            let kept = selected.len();
            let kind_cost: f64 = selected.iter().map(|u| u.cost_f64).sum();
            let mean_p = if kept == 0 {
                0.0
            } else {
                selected.iter().map(|u| p[u.global_index]).sum::<f64>() / kept as f64
            };
            Some(KindAllocation {
                kind: kind.label().to_string(),
                kept,
                total,
                keep_ratio: kept as f64 / total as f64,
                budget_share: if consumed > 0.0 { kind_cost / consumed } else { 0.0 },
                mean_p_selected: mean_p,
            })
        })
        .collect()
}

/// Compares where the budget goes under p-ranking vs p/c-ranking for the same
/// utilities (retained ratios by count, budget share, mean selected utility).
pub fn selection_bias_report(
    p: &[f64],
    registry: &PrunableRegistry,
    budget: &BigRational,
) -> Result<BiasReport> {
    let by_p = project(p, registry, budget, &RankingRule::score_p(), ScanMode::SkipAndContinue)?;
    let by_pc = project(p, registry, budget, &RankingRule::value_per_cost(), ScanMode::SkipAndContinue)?;
    Ok(BiasReport {
        score_p: kind_allocations(p, registry, &by_p),
        value_per_cost: kind_allocations(p, registry, &by_pc),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionTiming {
    pub n: usize,
    pub trials: usize,
    pub mean_secs: f64,
    pub min_secs: f64,
}

impl ProjectionTiming {
    /// Sort+scan time as a fraction of a reference step time.
    pub fn fraction_of(&self, reference_step_secs: f64) -> f64 {
        self.mean_secs / reference_step_secs
    }
}

/// Times the sort+scan core on a synthetic instance of size n.
pub fn projection_timer(n: usize, trials: usize) -> Result<ProjectionTiming> {
    if n == 0 || trials == 0 {
        return Err(Error::InvalidArgument("projection_timer needs n >= 1, trials >= 1".into()));
    }
    let mut rng = Rng::seeded(0x711e);
    let p: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let costs: Vec<f64> = (0..n).map(|i| if i % 129 == 0 { 80.0 / 3.0 } else { 1.0 }).collect();
    let budget: f64 = costs.iter().sum::<f64>() * 0.5;
    let mut best = f64::INFINITY;
    let mut total = 0.0;
    for _ in 0..trials {
        let start = Instant::now();
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| {
            p[b as usize].partial_cmp(&p[a as usize]).unwrap().then(a.cmp(&b))
        });
        let mut remaining = budget;
        let mut kept = 0usize;
        for &i in &order {
            let c = costs[i as usize];
            if c <= remaining {
                remaining -= c;
                kept += 1;
            }
        }
        std::hint::black_box(kept);
        let dt = start.elapsed().as_secs_f64();
        best = best.min(dt);
        total += dt;
    }
    Ok(ProjectionTiming { n, trials, mean_secs: total / trials as f64, min_secs: best })
}

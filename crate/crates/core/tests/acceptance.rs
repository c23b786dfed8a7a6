//! Acceptance suite: the ten primary criteria, one test (and one PASS line)
//! each. Heavy artifacts — the pretrained toy backbone and the two full gate
//! runs — are built once and shared.

use std::sync::OnceLock;
use std::time::Instant;

use num::rational::BigRational;

use gbsp_core::calibrate::{calibrate_scales, CalibrateConfig, ScaleState};
use gbsp_core::data::TokenDataset;
use gbsp_core::gates::{
    mask_hooks, mask_stability, score_gradient, train_gates, GateTrainConfig, GateTrainResult,
};
use gbsp_core::materialize::{materialize, verify_equivalence};
use gbsp_core::model::{
    forward, init_checkpoint, register_checkpoint, Checkpoint, GateHooks, HookSpec, LayerHookIds,
    ModelConfig,
};
use gbsp_core::presets::preset;
use gbsp_core::pretrain::{dataset_loss_hooked, pretrain_backbone, PretrainConfig};
use gbsp_core::projection::{
    project, random_feasible_mask, selection_bias_report, RankVariant, RankingRule, ScanMode,
};
use gbsp_core::registry::{alpha, build_registry, Budget, BudgetSpec, PrunableRegistry, UnitKind};
use gbsp_core::report::estimate_memory;
use gbsp_core::rng::Rng;
use gbsp_core::tape::{sigmoid_scalar, Tape};
use gbsp_core::tensor::Tensor;

/// Margin pinned from the first baseline run (criterion 7): the learned mask
/// beat the mean of 10 random feasible masks by this much held-out
/// cross-entropy. Committed at half the observed gap for seed robustness.
const LEARNED_MASK_MARGIN: f64 = 0.25;

const WINDOW: usize = 128;
const CALIB_WINDOWS: usize = 512;
const GATE_SEED: u64 = 7;

struct Shared {
    backbone: Checkpoint<f32>,
    registry: PrunableRegistry,
    budget: Budget,
    heldout: TokenDataset,
    main_run: GateTrainResult,
    gumbel_run: GateTrainResult,
}

fn corpus() -> Vec<u8> {
    std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt"))
        .expect("bundled corpus")
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let cfg = ModelConfig::toy();
        let bytes = corpus();
        let pretrain_ds = TokenDataset::from_bytes(&bytes, WINDOW, 0, 1024).unwrap();
        let train = TokenDataset::from_bytes(&bytes, WINDOW, 0, CALIB_WINDOWS).unwrap();
        let heldout = TokenDataset::from_bytes(&bytes, WINDOW, 1700, 32).unwrap();
        let backbone = pretrain_backbone(
            &cfg,
            &pretrain_ds,
            &PretrainConfig { steps: 2000, seed: 11, ..Default::default() },
        )
        .unwrap()
        .checkpoint;
        let (registry, budget) =
            build_registry(&cfg, &BudgetSpec { keep_ratio: 0.5, ..Default::default() }).unwrap();
        let base = GateTrainConfig {
            epochs: 4,
            seed: GATE_SEED,
            snapshot_interval: Some(64),
            ..Default::default()
        };
        let main_run = train_gates(&backbone, &registry, &budget, &train, &base).unwrap();
        let gumbel_run = train_gates(
            &backbone,
            &registry,
            &budget,
            &train,
            &GateTrainConfig { rule: RankingRule::gumbel(GATE_SEED, 1.0), ..base.clone() },
        )
        .unwrap();
        Shared { backbone, registry, budget, heldout, main_run, gumbel_run }
    })
}

fn heldout_loss_for_mask(sh: &Shared, keep: &[bool]) -> f64 {
    let hooks = mask_hooks(&sh.backbone, &sh.registry, keep);
    dataset_loss_hooked(&sh.backbone, &HookSpec::Fixed(&hooks), &sh.heldout).unwrap()
}

#[test]
fn criterion_01_memory_table_reproduction() {
    let start = Instant::now();
    let cfg = preset("llama2-7b").unwrap();
    for (t, kv) in [(256usize, 512.0), (512, 1024.0), (1024, 2048.0), (2048, 4096.0)] {
        let est = estimate_memory(&cfg, None, t, 4, 2).unwrap();
        assert!((est.weights_mib - 12852.5).abs() <= 0.1, "weights {}", est.weights_mib);
        assert_eq!(est.kv_cache_mib, kv, "kv at T={t}");
    }
    assert!(start.elapsed().as_secs_f64() < 1.0);
    println!("PASS criterion 1: memory table reproduced (weights 12852.5 MiB, kv 512/1024/2048/4096 MiB)");
}

#[test]
fn criterion_02_cost_model_values() {
    let mk = |heads: usize, kv: usize, dh: usize| ModelConfig {
        n_layers: 1,
        d_model: heads * dh,
        n_heads: heads,
        n_kv_heads: kv,
        head_dim: dh,
        ffn_dim: 8,
        vocab_size: 8,
        rope_base: 10000.0,
        norm_eps: 1e-5,
    };
    let a1 = alpha(&mk(4, 4, 128)).unwrap();
    assert_eq!(a1, BigRational::new(512.into(), 3.into()));
    let a4 = alpha(&mk(8, 2, 128)).unwrap();
    assert_eq!(a4, BigRational::new(1280.into(), 3.into()));
    println!("PASS criterion 2: alpha exact rationals 512/3 (G=1) and 1280/3 (G=4)");
}

#[test]
fn criterion_03_budget_feasibility_over_full_run() {
    let sh = shared();
    // the training loop asserts Σ c·m ≤ B exactly at every one of its steps;
    // completing ≥2000 steps without tripping it is the certificate
    assert!(sh.main_run.loss_trace.len() >= 2000, "{} steps", sh.main_run.loss_trace.len());
    assert!(sh.main_run.final_mask.consumed_cost <= sh.budget.budget);

    // forced-fire fixture: a hostile utility vector that empties every group
    // except layer-0 FFN, so the guard must fire and stay exactly feasible
    let n = sh.registry.len();
    let mut hostile = vec![0.0f64; n];
    for u in &sh.registry.units {
        if u.layer == 0 && u.kind == UnitKind::FfnChannel {
            hostile[u.global_index] = 1.0;
        }
    }
    let mask = project(
        &hostile,
        &sh.registry,
        &sh.budget.budget,
        &RankingRule::score_p(),
        ScanMode::SkipAndContinue,
    )
    .unwrap();
    assert!(!mask.guard_interventions.is_empty(), "guard did not fire");
    assert!(mask.consumed_cost <= sh.budget.budget);

    // and a short training run in a guard-hostile regime (tight budget, tied
    // scores) must keep the in-loop assertion quiet while the guard fires
    let (registry, budget) = build_registry(
        &sh.backbone.config,
        &BudgetSpec { keep_ratio: 0.2, ..Default::default() },
    )
    .unwrap();
    let small = TokenDataset::from_bytes(&corpus(), WINDOW, 0, 8).unwrap();
    let run = train_gates(
        &sh.backbone,
        &registry,
        &budget,
        &small,
        &GateTrainConfig { epochs: 1, seed: 1, ..Default::default() },
    )
    .unwrap();
    assert!(run.guard_fires > 0, "hostile regime never fired the guard");
    println!(
        "PASS criterion 3: per-step exact feasibility held over {} steps (+{} guard fires in the hostile fixture)",
        sh.main_run.loss_trace.len(),
        run.guard_fires
    );
}

mod reference {
    use super::*;

    /// Independent simulator of the documented selection rule (argmax loop
    /// instead of sort, recomputed costs, remove-worst eviction).
    pub fn project_ref(
        p: &[f64],
        registry: &PrunableRegistry,
        budget: &BigRational,
        variant: RankVariant,
    ) -> Option<Vec<bool>> {
        let n = p.len();
        let keys: Vec<f64> = match variant {
            RankVariant::ScoreP => p.to_vec(),
            RankVariant::ValuePerCost => {
                (0..n).map(|i| p[i] / registry.units[i].cost_f64).collect()
            }
            RankVariant::GumbelTopK => unreachable!(),
        };
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut keep = vec![false; n];
        let mut left = budget.clone();
        while !remaining.is_empty() {
            let mut best = 0;
            for j in 1..remaining.len() {
                let (a, b) = (remaining[j], remaining[best]);
                if keys[a] > keys[b] || (keys[a] == keys[b] && a < b) {
                    best = j;
                }
            }
            let i = remaining.swap_remove(best);
            let cost = &registry.units[i].cost;
            if *cost <= left {
                keep[i] = true;
                left -= cost;
            }
        }
        for (_, members) in registry.groups() {
            if members.iter().any(|&i| keep[i]) {
                continue;
            }
            let mut forced = members[0];
            for &i in members {
                if p[i] > p[forced] {
                    forced = i;
                }
            }
            keep[forced] = true;
        }
        loop {
            let consumed = registry.mask_cost(&keep).unwrap();
            if consumed <= *budget {
                return Some(keep);
            }
            let removable: Vec<usize> = (0..n)
                .filter(|&i| {
                    keep[i]
                        && registry
                            .groups()
                            .iter()
                            .find(|(_, m)| m.contains(&i))
                            .map(|(_, m)| m.iter().filter(|&&j| keep[j]).count() > 1)
                            .unwrap_or(false)
                })
                .collect();
            if removable.is_empty() {
                return None;
            }
            let mut worst = removable[0];
            for &i in &removable {
                if p[i] < p[worst] || (p[i] == p[worst] && i > worst) {
                    worst = i;
                }
            }
            keep[worst] = false;
        }
    }
}

#[test]
fn criterion_04_projection_oracle() {
    let start = Instant::now();
    let mut rng = Rng::seeded(404);
    for _ in 0..1000 {
        let n_kv = 1 + rng.below(2);
        let group = 1 + rng.below(2);
        let n_layers = 1 + rng.below(2);
        let ffn = 1 + rng.below((12 / n_layers - n_kv).min(6));
        let cfg = ModelConfig {
            n_layers,
            d_model: n_kv * group * 2,
            n_heads: n_kv * group,
            n_kv_heads: n_kv,
            head_dim: 2,
            ffn_dim: ffn,
            vocab_size: 8,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        };
        let spec = BudgetSpec {
            keep_ratio: (rng.uniform() * 0.99 + 0.01).min(1.0),
            cost_scale: 0.05 + rng.uniform() * 2.0,
            ..Default::default()
        };
        // deliberate ties: half the utilities snap to a coarse grid
        let p: Vec<f64> = (0..n_layers * (ffn + n_kv))
            .map(|_| {
                if rng.uniform() < 0.5 {
                    (rng.uniform() * 4.0).floor() / 4.0
                } else {
                    rng.uniform()
                }
            })
            .collect();
        let (registry, budget) = build_registry(&cfg, &spec).unwrap();
        for (variant, rule) in [
            (RankVariant::ScoreP, RankingRule::score_p()),
            (RankVariant::ValuePerCost, RankingRule::value_per_cost()),
        ] {
            let mine = project(&p, &registry, &budget.budget, &rule, ScanMode::SkipAndContinue);
            let expected = reference::project_ref(&p, &registry, &budget.budget, variant);
            match (mine, expected) {
                (Ok(m), Some(e)) => assert_eq!(m.keep, e, "{cfg:?} {spec:?} {p:?}"),
                (Err(_), None) => {}
                (m, e) => panic!("feasibility disagreement: {} vs {}", m.is_ok(), e.is_some()),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "{secs:.2}s");
    println!("PASS criterion 4: 1000 random instances match the reference simulator exactly ({secs:.2}s)");
}

#[test]
fn criterion_05_gradient_suite() {
    let start = Instant::now();
    // (a) analytic score-gradient dp/ds vs finite differences, rel err < 1e-8
    let tau = 1.5;
    let mut rng = Rng::seeded(55);
    for _ in 0..50 {
        let s = rng.normal() * 3.0;
        let p = sigmoid_scalar(s / tau);
        let analytic = score_gradient(&[1.0], &[p], tau)[0];
        let h = 1e-6;
        let fd = (sigmoid_scalar((s + h) / tau) - sigmoid_scalar((s - h) / tau)) / (2.0 * h);
        assert!((analytic - fd).abs() / fd.abs().max(1e-300) < 1e-8, "s={s}");
    }

    // (b) end-to-end dL/dz̃ vs finite differences on a 2-layer f64 model
    let mut cfg = ModelConfig::toy();
    cfg.n_layers = 2;
    cfg.ffn_dim = 16;
    let ckpt: Checkpoint<f64> = init_checkpoint(&cfg, 13).unwrap();
    let (registry, _) = build_registry(&cfg, &BudgetSpec::default()).unwrap();
    let mut trng = Rng::seeded(5);
    let inputs: Vec<usize> = (0..10).map(|_| trng.below(cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..10).map(|_| trng.below(cfg.vocab_size)).collect();
    let keep: Vec<bool> = (0..registry.len()).map(|i| i % 3 != 0).collect();

    let mut tape: Tape<f64> = Tape::new();
    let ids = register_checkpoint(&mut tape, &ckpt, false);
    let mut hook_ids = Vec::new();
    let mut soft_ids = Vec::new();
    for layer in 0..cfg.n_layers {
        let dims = ckpt.layer_dims(layer);
        let build = |len: usize, kind: UnitKind, tape: &mut Tape<f64>| {
            let mut hard = vec![1.0f64; len];
            for u in registry.units.iter().filter(|u| u.layer == layer && u.kind == kind) {
                hard[u.local_index] = if keep[u.global_index] { 1.0 } else { 0.0 };
            }
            let soft = tape.leaf(Tensor::filled(vec![len], 0.5), true);
            let st = tape.straight_through(soft, Tensor::new(vec![len], hard).unwrap()).unwrap();
            (soft, st)
        };
        let (fs, fst) = build(dims.ffn_dim, UnitKind::FfnChannel, &mut tape);
        let (ks, kst) = build(dims.n_kv_heads, UnitKind::KvGroup, &mut tape);
        hook_ids.push(LayerHookIds { ffn: fst, kv: kst });
        soft_ids.push((fs, ks));
    }
    let logits = forward(&mut tape, &ckpt, &ids, &HookSpec::Tape(&hook_ids), &inputs).unwrap();
    let loss = tape.softmax_ce(logits, &targets).unwrap();
    let grads = tape.backward(loss);
    let loss_at = |hooks: &GateHooks<f64>| -> f64 {
        let mut t: Tape<f64> = Tape::new();
        let ids = register_checkpoint(&mut t, &ckpt, false);
        let l = forward(&mut t, &ckpt, &ids, &HookSpec::Fixed(hooks), &inputs).unwrap();
        let l = t.softmax_ce(l, &targets).unwrap();
        t.value(l).item()
    };
    let mut base = GateHooks::ones_for(&ckpt);
    for u in &registry.units {
        let m = if keep[u.global_index] { 1.0 } else { 0.0 };
        match u.kind {
            UnitKind::FfnChannel => base.ffn_mult[u.layer][u.local_index] = m,
            UnitKind::KvGroup => base.kv_mult[u.layer][u.local_index] = m,
        }
    }
    let mut probe = Rng::seeded(50);
    let mut checked = 0;
    while checked < 6 {
        let u = &registry.units[probe.below(registry.len())];
        let (fs, ks) = soft_ids[u.layer];
        let id = if u.kind == UnitKind::FfnChannel { fs } else { ks };
        let analytic = grads.grad(id).map(|g| g.data()[u.local_index]).unwrap_or(0.0);
        let h = 1e-3;
        let at = |d: f64| {
            let mut hk = base.clone();
            match u.kind {
                UnitKind::FfnChannel => hk.ffn_mult[u.layer][u.local_index] += d,
                UnitKind::KvGroup => hk.kv_mult[u.layer][u.local_index] += d,
            }
            loss_at(&hk)
        };
        let fd = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
        if fd.abs() < 1e-10 && analytic.abs() < 1e-10 {
            continue;
        }
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        assert!(rel < 1e-6, "unit {}: rel {rel:.2e}", u.global_index);
        checked += 1;
    }

    // (c) every tensor-core op: the dedicated finite-difference suite covers
    // matmul/add/mul/sigmoid/silu/mul_rowvec/rmsnorm/softmax_ce/rope/
    // embedding/gqa_attention; spot-check two composite ops here as well
    let check = |f: &dyn Fn(&mut Tape<f64>, &[f64]) -> usize, x: &[f64], shape: Vec<usize>| {
        let eval = |xs: &[f64]| {
            let mut t: Tape<f64> = Tape::new();
            let out = f(&mut t, xs);
            t.value(out).data().iter().sum::<f64>()
        };
        let mut t: Tape<f64> = Tape::new();
        let out = f(&mut t, x);
        let g = t.backward(out);
        let g = g.grad(0).unwrap().data().to_vec();
        let _ = shape;
        for i in 0..x.len() {
            let mut plus = x.to_vec();
            plus[i] += 1e-5;
            let mut minus = x.to_vec();
            minus[i] -= 1e-5;
            let fd = (eval(&plus) - eval(&minus)) / 2e-5;
            if fd.abs() < 1e-10 && g[i].abs() < 1e-10 {
                continue;
            }
            assert!((g[i] - fd).abs() / g[i].abs().max(fd.abs()) < 1e-6);
        }
    };
    let mut xr = Rng::seeded(56);
    let x: Vec<f64> = (0..12).map(|_| xr.normal()).collect();
    check(
        &|t, xs| {
            let a = t.leaf(Tensor::new(vec![2, 6], xs.to_vec()).unwrap(), true);
            let w = t.constant(Tensor::filled(vec![6], 1.3));
            t.rmsnorm(a, w, 1e-6).unwrap()
        },
        &x,
        vec![2, 6],
    );
    check(
        &|t, xs| {
            let a = t.leaf(Tensor::new(vec![3, 4], xs.to_vec()).unwrap(), true);
            t.silu(a).unwrap()
        },
        &x,
        vec![3, 4],
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0);
    println!("PASS criterion 5: score-gradient formula (<1e-8), end-to-end gate gradient (<1e-6), op gradient checks ({secs:.1}s)");
}

#[test]
fn criterion_06_materialization_equivalence() {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let ckpt: Checkpoint<f32> = init_checkpoint(&cfg, 61).unwrap();
    let small = TokenDataset::from_bytes(&corpus(), 32, 0, 8).unwrap();
    for ratio in [0.8, 0.5] {
        let (registry, budget) =
            build_registry(&cfg, &BudgetSpec { keep_ratio: ratio, ..Default::default() }).unwrap();
        let mask = random_feasible_mask(&registry, &budget.budget, 600 + (ratio * 10.0) as u64).unwrap();
        // without γ
        let pruned = materialize(&ckpt, &registry, &mask.keep, None, ratio, None, None).unwrap();
        let report =
            verify_equivalence(&ckpt, &registry, &mask.keep, None, &pruned, 16, 24, 1e-5, 6).unwrap();
        assert!(report.pass, "ratio {ratio} no-γ: max abs {}", report.max_abs);
        // with trained γ
        let calib = calibrate_scales(
            &ckpt,
            &registry,
            &mask.keep,
            &small,
            &CalibrateConfig { epochs: 1, ..Default::default() },
        )
        .unwrap();
        let pruned = materialize(
            &ckpt,
            &registry,
            &mask.keep,
            Some(&calib.state),
            ratio,
            None,
            None,
        )
        .unwrap();
        let report = verify_equivalence(
            &ckpt,
            &registry,
            &mask.keep,
            Some(&calib.state),
            &pruned,
            16,
            24,
            1e-5,
            7,
        )
        .unwrap();
        assert!(report.pass, "ratio {ratio} with γ: max abs {}", report.max_abs);
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0);
    println!("PASS criterion 6: sliced+folded logits within 1e-5 of masked forward at rho 0.8 and 0.5, with and without trained gamma ({secs:.1}s)");
}

#[test]
fn criterion_07_learned_mask_quality() {
    let sh = shared();
    let learned = heldout_loss_for_mask(sh, &sh.main_run.final_mask.keep);
    let mut random_losses = Vec::new();
    for seed in 0..10u64 {
        let mask = random_feasible_mask(&sh.registry, &sh.budget.budget, 7000 + seed).unwrap();
        random_losses.push(heldout_loss_for_mask(sh, &mask.keep));
    }
    let random_mean = random_losses.iter().sum::<f64>() / random_losses.len() as f64;
    assert!(
        learned + LEARNED_MASK_MARGIN <= random_mean,
        "learned {learned:.4} vs random mean {random_mean:.4} (margin {LEARNED_MASK_MARGIN})"
    );
    println!(
        "PASS criterion 7: learned mask held-out CE {learned:.4} beats random-mask mean {random_mean:.4} by >= {LEARNED_MASK_MARGIN}"
    );
}

#[test]
fn criterion_08_ranking_bias_direction() {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let (registry, budget) =
        build_registry(&cfg, &BudgetSpec { keep_ratio: 0.8, ..Default::default() }).unwrap();
    let mut wins = 0;
    for seed in 0..100u64 {
        let mut rng = Rng::seeded(800 + seed);
        let p: Vec<f64> = (0..registry.len()).map(|_| rng.uniform()).collect();
        let bias = selection_bias_report(&p, &registry, &budget.budget).unwrap();
        let share = |rows: &[gbsp_core::projection::KindAllocation]| {
            rows.iter().find(|r| r.kind == "ffn").map(|r| r.budget_share).unwrap()
        };
        if share(&bias.value_per_cost) >= share(&bias.score_p) {
            wins += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(wins >= 95, "p/c shifted budget to FFN in only {wins}/100 instances");
    assert!(secs < 10.0);
    println!("PASS criterion 8: value-per-cost FFN budget share >= score ranking in {wins}/100 instances ({secs:.1}s)");
}

#[test]
fn criterion_09_stability_comparison() {
    let sh = shared();
    let score = mask_stability(&sh.main_run.stability, &sh.registry).unwrap();
    let gumbel = mask_stability(&sh.gumbel_run.stability, &sh.registry).unwrap();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let quarter = xs_len(&score.overall);
    let late = |xs: &[f64]| mean(&xs[xs.len() - quarter..]);
    let early = |xs: &[f64]| mean(&xs[..quarter]);
    assert!(
        late(&score.overall) > late(&gumbel.overall),
        "late stability: score {} vs gumbel {}",
        late(&score.overall),
        late(&gumbel.overall)
    );
    assert!(
        late(&score.overall) > early(&score.overall),
        "score run did not stabilize: {} -> {}",
        early(&score.overall),
        late(&score.overall)
    );
    assert!(
        late(&gumbel.overall) > early(&gumbel.overall),
        "gumbel run did not stabilize: {} -> {}",
        early(&gumbel.overall),
        late(&gumbel.overall)
    );
    println!(
        "PASS criterion 9: late-phase stability score {:.4} > gumbel {:.4}; both runs stabilize over time",
        late(&score.overall),
        late(&gumbel.overall)
    );
}

fn xs_len(xs: &[f64]) -> usize {
    (xs.len() / 4).max(1)
}

#[test]
fn criterion_10_scaling_stage_direction() {
    let sh = shared();
    let keep = &sh.main_run.final_mask.keep;
    let calib = TokenDataset::from_bytes(&corpus(), WINDOW, 0, 128).unwrap();
    let pre = {
        let state = ScaleState::ones(keep);
        let hooks =
            gbsp_core::calibrate::gamma_hooks(&sh.backbone, &sh.registry, keep, &state);
        dataset_loss_hooked(&sh.backbone, &HookSpec::Fixed(&hooks), &sh.heldout).unwrap()
    };
    let mut improved = 0;
    for seed in 0..10u64 {
        let res = calibrate_scales(
            &sh.backbone,
            &sh.registry,
            keep,
            &calib,
            &CalibrateConfig { seed, ..Default::default() },
        )
        .unwrap();
        let hooks =
            gbsp_core::calibrate::gamma_hooks(&sh.backbone, &sh.registry, keep, &res.state);
        let post = dataset_loss_hooked(&sh.backbone, &HookSpec::Fixed(&hooks), &sh.heldout).unwrap();
        if post <= pre {
            improved += 1;
        }
    }
    assert!(improved >= 8, "calibration improved held-out loss in only {improved}/10 seeds");
    println!("PASS criterion 10: post-calibration held-out loss <= pre-calibration in {improved}/10 seeds");
}

//! `gbsp` — the pruning pipeline driver. Subcommands cover the whole flow:
//! pretrain a toy backbone, learn gates under a budget, calibrate scales,
//! materialize a sliced checkpoint, evaluate, estimate memory, and run
//! ablation sweeps. Every run writes a reproducibility manifest.
//!
//! Exit codes: 0 success, 1 usage error, 2 invariant violation,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gbsp_core::calibrate::{calibrate_scales, CalibrateConfig, ScaleState};
use gbsp_core::checkpoint_io::{load_checkpoint, read_manifest, save_checkpoint};
use gbsp_core::data::TokenDataset;
use gbsp_core::gates::{mask_hooks, mask_stability, train_gates, GateTrainConfig};
use gbsp_core::materialize::{materialize, verify_equivalence};
use gbsp_core::model::HookSpec;
use gbsp_core::presets::preset;
use gbsp_core::pretrain::{dataset_loss_hooked, pretrain_backbone, PretrainConfig};
use gbsp_core::projection::{selection_bias_report, RankingRule, ScanMode};
use gbsp_core::registry::{build_registry, rational_to_string, BudgetSpec, TargetFilter};
use gbsp_core::report::{estimate_memory, perplexity, retention_report, PruneReport};
use gbsp_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "gbsp", version, about = "Global budgeted structured pruning pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankArg {
    P,
    #[value(name = "p-over-c")]
    POverC,
    Gumbel,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScanArg {
    Skip,
    Halt,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Both,
    Ffn,
    Kv,
}

impl RankArg {
    fn rule(self, seed: u64) -> RankingRule {
        match self {
            RankArg::P => RankingRule::score_p(),
            RankArg::POverC => RankingRule::value_per_cost(),
            RankArg::Gumbel => RankingRule::gumbel(seed, 1.0),
        }
    }
    fn label(self) -> &'static str {
        match self {
            RankArg::P => "p",
            RankArg::POverC => "p-over-c",
            RankArg::Gumbel => "gumbel",
        }
    }
}

impl ScanArg {
    fn mode(self) -> ScanMode {
        match self {
            ScanArg::Skip => ScanMode::SkipAndContinue,
            ScanArg::Halt => ScanMode::HaltAtFirstViolation,
        }
    }
    fn label(self) -> &'static str {
        match self {
            ScanArg::Skip => "skip",
            ScanArg::Halt => "halt",
        }
    }
}

impl TargetArg {
    fn filter(self) -> TargetFilter {
        match self {
            TargetArg::Both => TargetFilter::Both,
            TargetArg::Ffn => TargetFilter::FfnOnly,
            TargetArg::Kv => TargetFilter::KvOnly,
        }
    }
    fn label(self) -> &'static str {
        match self {
            TargetArg::Both => "both",
            TargetArg::Ffn => "ffn",
            TargetArg::Kv => "kv",
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a toy byte-level backbone on a plain-bytes corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "toy")]
        config_preset: String,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        window: usize,
        #[arg(long, default_value_t = 512)]
        max_windows: usize,
    },
    /// Learn gates under the budget and emit the final mask plus a report.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long)]
        out_report: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, value_enum, default_value_t = RankArg::P)]
        rank: RankArg,
        #[arg(long, value_enum, default_value_t = ScanArg::Skip)]
        scan: ScanArg,
        #[arg(long, value_enum, default_value_t = TargetArg::Both)]
        target: TargetArg,
        #[arg(long, default_value_t = 1.0)]
        cost_scale: f64,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 1.5)]
        tau: f64,
        #[arg(long)]
        snapshot_interval: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        window: usize,
        #[arg(long, default_value_t = 512)]
        max_windows: usize,
    },
    /// Learn per-retained-unit scales γ on the frozen mask.
    Calibrate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_scales: PathBuf,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        window: usize,
        #[arg(long, default_value_t = 512)]
        max_windows: usize,
    },
    /// Slice the checkpoint along the mask, fold γ, verify equivalence.
    Materialize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        scales: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        verify_probes: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report loss and perplexity of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        start_window: usize,
        #[arg(long, default_value_t = 64)]
        max_windows: usize,
    },
    /// Analytic weight and KV-cache memory estimate.
    EstimateMemory {
        #[arg(long)]
        config_preset: Option<String>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        bytes: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 256)]
        seq: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retention and memory report for a pruned checkpoint.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long, default_value_t = 2)]
        bytes: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 256)]
        seq: usize,
    },
    /// Sweep one axis (rank rule, target filter, or cost scale) end to end.
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = AblateAxis::Rank)]
        axis: AblateAxis,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 1.5)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        window: usize,
        #[arg(long, default_value_t = 128)]
        max_windows: usize,
        #[arg(long, default_value_t = 32)]
        heldout_windows: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateAxis {
    Rank,
    Target,
    CostScale,
}

/// On-disk mask artifact: everything needed to rebuild the same registry and
/// reproduce the projection downstream.
#[derive(Serialize, Deserialize)]
struct MaskFile {
    keep: Vec<bool>,
    keep_ratio: f64,
    cost_scale: f64,
    target: String,
    rank: String,
    scan: String,
    seed: u64,
    consumed_cost: String,
    guard_fires: usize,
    evictions: usize,
}

#[derive(Serialize, Deserialize)]
struct ScalesFile {
    retained: Vec<usize>,
    gamma: Vec<f64>,
    anomalies: Vec<usize>,
    initial_loss: f64,
    final_loss: f64,
    reverted: bool,
}

#[derive(Serialize)]
struct RunManifest {
    tool: String,
    subcommand: String,
    argv: Vec<String>,
    seed: Option<u64>,
    input_sha256: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String, CoreError> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_manifest(
    subcommand: &str,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<(), CoreError> {
    let mut input_sha256 = BTreeMap::new();
    for p in inputs {
        input_sha256.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        tool: format!("gbsp {}", env!("CARGO_PKG_VERSION")),
        subcommand: subcommand.to_string(),
        argv: std::env::args().collect(),
        seed,
        input_sha256,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = match outputs.first() {
        Some(out) => {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            out.with_file_name(name)
        }
        None => PathBuf::from(format!("gbsp-{subcommand}.manifest.json")),
    };
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn load_dataset(
    corpus: &Path,
    window: usize,
    start: usize,
    max_windows: usize,
) -> Result<TokenDataset, CoreError> {
    let bytes = std::fs::read(corpus)?;
    TokenDataset::from_bytes(&bytes, window, start, max_windows)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CoreError> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CoreError> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.cmd {
        Cmd::Pretrain { corpus, out, config_preset, steps, lr, seed, window, max_windows } => {
            let cfg = preset(&config_preset)?;
            let ds = load_dataset(&corpus, window, 0, max_windows)?;
            let pc = PretrainConfig { steps, lr, seed, ..Default::default() };
            let res = pretrain_backbone(&cfg, &ds, &pc)?;
            save_checkpoint(&res.checkpoint, &out)?;
            let first = res.loss_trace.first().copied().unwrap_or(f64::NAN);
            let last = res.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!("pretrained {steps} steps: loss {first:.4} -> {last:.4}");
            write_manifest("pretrain", Some(seed), &[&corpus], &[&out])?;
        }
        Cmd::Prune {
            ckpt,
            corpus,
            out_mask,
            out_report,
            ratio,
            rank,
            scan,
            target,
            cost_scale,
            epochs,
            lr,
            tau,
            snapshot_interval,
            seed,
            window,
            max_windows,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&corpus, window, 0, max_windows)?;
            let spec = BudgetSpec { keep_ratio: ratio, cost_scale, target_filter: target.filter() };
            let (registry, budget) = build_registry(&model.config, &spec)?;
            let cfg = GateTrainConfig {
                epochs,
                lr,
                tau,
                rule: rank.rule(seed),
                scan: scan.mode(),
                snapshot_interval,
                seed,
            };
            let res = train_gates(&model, &registry, &budget, &ds, &cfg)?;
            let mask_file = MaskFile {
                keep: res.final_mask.keep.clone(),
                keep_ratio: ratio,
                cost_scale,
                target: target.label().to_string(),
                rank: rank.label().to_string(),
                scan: scan.label().to_string(),
                seed,
                consumed_cost: rational_to_string(&res.final_mask.consumed_cost),
                guard_fires: res.guard_fires,
                evictions: res.evictions,
            };
            write_json(&out_mask, &mask_file)?;
            let retention = retention_report(&res.final_mask.keep, &registry)?;
            let stability = if res.stability.snapshots.len() >= 2 {
                mask_stability(&res.stability, &registry)?
            } else {
                gbsp_core::gates::StabilitySeries { overall: vec![], ffn: vec![], kv: vec![] }
            };
            let bias = selection_bias_report(
                &res.state.probabilities(),
                &registry,
                &budget.budget,
            )
            .ok();
            let report = PruneReport {
                keep_ratio: ratio,
                retention,
                loss_trace: res.loss_trace.clone(),
                stability_overall: stability.overall,
                stability_ffn: stability.ffn,
                stability_kv: stability.kv,
                polarization_trace: res.polarization_trace.clone(),
                guard_fires: res.guard_fires,
                evictions: res.evictions,
                projection_time_fraction: res.projection_time_fraction,
                memory: None,
                selection_bias: bias,
            };
            let mut outputs: Vec<&Path> = vec![&out_mask];
            if let Some(ref rp) = out_report {
                write_json(rp, &report)?;
                outputs.push(rp);
            }
            println!(
                "pruned at ratio {ratio}: kept {}/{} units, cost {}",
                res.final_mask.kept_count(),
                registry.len(),
                mask_file.consumed_cost
            );
            write_manifest("prune", Some(seed), &[&ckpt, &corpus], &outputs)?;
        }
        Cmd::Calibrate { ckpt, mask, corpus, out_scales, epochs, lr, seed, window, max_windows } => {
            let model = load_checkpoint(&ckpt)?;
            let mask_file: MaskFile = read_json(&mask)?;
            let (registry, _) = rebuild_registry(&model.config, &mask_file)?;
            let ds = load_dataset(&corpus, window, 0, max_windows)?;
            let cfg = CalibrateConfig { epochs, lr, seed };
            let res = calibrate_scales(&model, &registry, &mask_file.keep, &ds, &cfg)?;
            let scales = ScalesFile {
                retained: res.state.retained.clone(),
                gamma: res.state.gamma.clone(),
                anomalies: res.state.anomalies(),
                initial_loss: res.initial_loss,
                final_loss: res.final_loss,
                reverted: res.reverted,
            };
            write_json(&out_scales, &scales)?;
            println!(
                "calibrated {} scales: loss {:.6} -> {:.6}{}",
                scales.gamma.len(),
                res.initial_loss,
                res.final_loss,
                if res.reverted { " (reverted to 1)" } else { "" }
            );
            write_manifest("calibrate", Some(seed), &[&ckpt, &mask, &corpus], &[&out_scales])?;
        }
        Cmd::Materialize { ckpt, mask, scales, out, verify_probes, tolerance, seed } => {
            let model = load_checkpoint(&ckpt)?;
            let mask_file: MaskFile = read_json(&mask)?;
            let (registry, _) = rebuild_registry(&model.config, &mask_file)?;
            let state = match &scales {
                Some(p) => {
                    let sf: ScalesFile = read_json(p)?;
                    Some(ScaleState { retained: sf.retained, gamma: sf.gamma })
                }
                None => None,
            };
            let hyper = serde_json::json!({
                "rank": mask_file.rank,
                "scan": mask_file.scan,
                "cost_scale": mask_file.cost_scale,
                "target": mask_file.target,
            });
            let pruned = materialize(
                &model,
                &registry,
                &mask_file.keep,
                state.as_ref(),
                mask_file.keep_ratio,
                Some(mask_file.seed),
                Some(hyper),
            )?;
            let report = verify_equivalence(
                &model,
                &registry,
                &mask_file.keep,
                state.as_ref(),
                &pruned,
                verify_probes,
                32,
                tolerance,
                seed,
            )?;
            if !report.pass {
                return Err(CoreError::Diverged(format!(
                    "materialized checkpoint deviates {:.3e} > tolerance {tolerance:.3e}",
                    report.max_abs
                )));
            }
            save_checkpoint(&pruned, &out)?;
            println!(
                "materialized {} -> {} params; max abs logit deviation {:.3e} over {} probes",
                model.param_count(),
                pruned.param_count(),
                report.max_abs,
                report.n_probes
            );
            let mut inputs: Vec<&Path> = vec![&ckpt, &mask];
            if let Some(ref s) = scales {
                inputs.push(s);
            }
            write_manifest("materialize", Some(seed), &inputs, &[&out])?;
        }
        Cmd::Eval { ckpt, corpus, out, window, start_window, max_windows } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&corpus, window, start_window, max_windows)?;
            let loss = dataset_loss_hooked(&model, &HookSpec::None, &ds)?;
            let ppl = perplexity(&model, &ds)?;
            println!("windows {} loss {loss:.6} perplexity {ppl:.4}", ds.len());
            let mut outputs: Vec<&Path> = vec![];
            if let Some(ref p) = out {
                write_json(p, &serde_json::json!({ "loss": loss, "perplexity": ppl, "windows": ds.len() }))?;
                outputs.push(p);
            }
            write_manifest("eval", None, &[&ckpt, &corpus], &outputs)?;
        }
        Cmd::EstimateMemory { config_preset, ckpt, bytes, batch, seq, out } => {
            let (config, meta, inputs): (_, _, Vec<PathBuf>) = match (&config_preset, &ckpt) {
                (Some(name), None) => (preset(name)?, None, vec![]),
                (None, Some(path)) => {
                    let m = read_manifest(path)?;
                    (m.config, m.prune_meta, vec![path.clone()])
                }
                _ => {
                    return Err(CoreError::InvalidArgument(
                        "pass exactly one of --config-preset or --ckpt".into(),
                    ))
                }
            };
            let est = estimate_memory(&config, meta.as_ref(), seq, batch, bytes)?;
            println!(
                "weights {:.1} MiB, kv-cache {:.1} MiB (T={}, batch={}, bytes={})",
                est.weights_mib, est.kv_cache_mib, seq, batch, bytes
            );
            let mut outputs: Vec<&Path> = vec![];
            if let Some(ref p) = out {
                write_json(p, &est)?;
                outputs.push(p);
            }
            let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
            write_manifest("estimate-memory", None, &input_refs, &outputs)?;
        }
        Cmd::Report { ckpt, out_json, out_csv, bytes, batch, seq } => {
            let manifest = read_manifest(&ckpt)?;
            let meta = manifest.prune_meta.as_ref().ok_or_else(|| {
                CoreError::InvalidArgument(format!(
                    "{} carries no prune metadata; report needs a pruned checkpoint",
                    ckpt.display()
                ))
            })?;
            // reconstruct the mask over a full two-kind registry for reporting
            let spec = BudgetSpec { keep_ratio: meta.keep_ratio, ..Default::default() };
            let (registry, _) = build_registry(&manifest.config, &spec)?;
            let mut keep = vec![false; registry.len()];
            for u in &registry.units {
                let retained = match u.kind {
                    gbsp_core::registry::UnitKind::FfnChannel => &meta.retained_ffn[u.layer],
                    gbsp_core::registry::UnitKind::KvGroup => &meta.retained_kv[u.layer],
                };
                if retained.binary_search(&u.local_index).is_ok() {
                    keep[u.global_index] = true;
                }
            }
            let retention = retention_report(&keep, &registry)?;
            let memory = estimate_memory(&manifest.config, Some(meta), seq, batch, bytes)?;
            write_json(
                &out_json,
                &serde_json::json!({
                    "keep_ratio": meta.keep_ratio,
                    "retention": retention,
                    "memory": memory,
                }),
            )?;
            std::fs::write(&out_csv, retention.to_csv())?;
            println!(
                "report written: {} kinds, weights {:.1} MiB, kv {:.1} MiB",
                retention.kinds.len(),
                memory.weights_mib,
                memory.kv_cache_mib
            );
            write_manifest("report", None, &[&ckpt], &[&out_json, &out_csv])?;
        }
        Cmd::Ablate {
            ckpt,
            corpus,
            out,
            axis,
            ratio,
            epochs,
            lr,
            tau,
            seed,
            window,
            max_windows,
            heldout_windows,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let train = load_dataset(&corpus, window, 0, max_windows)?;
            let heldout = load_dataset(&corpus, window, max_windows, heldout_windows)?;
            let variants: Vec<(String, BudgetSpec, RankingRule)> = match axis {
                AblateAxis::Rank => [RankArg::P, RankArg::POverC, RankArg::Gumbel]
                    .into_iter()
                    .map(|r| {
                        (
                            format!("rank={}", r.label()),
                            BudgetSpec { keep_ratio: ratio, ..Default::default() },
                            r.rule(seed),
                        )
                    })
                    .collect(),
                AblateAxis::Target => [TargetArg::Both, TargetArg::Ffn, TargetArg::Kv]
                    .into_iter()
                    .map(|t| {
                        (
                            format!("target={}", t.label()),
                            BudgetSpec {
                                keep_ratio: ratio,
                                cost_scale: 1.0,
                                target_filter: t.filter(),
                            },
                            RankingRule::score_p(),
                        )
                    })
                    .collect(),
                AblateAxis::CostScale => [0.5, 1.0, 2.0]
                    .into_iter()
                    .map(|cs| {
                        (
                            format!("cost-scale={cs}"),
                            BudgetSpec {
                                keep_ratio: ratio,
                                cost_scale: cs,
                                target_filter: TargetFilter::Both,
                            },
                            RankingRule::score_p(),
                        )
                    })
                    .collect(),
            };
            let mut rows = Vec::new();
            for (label, spec, rule) in variants {
                let (registry, budget) = build_registry(&model.config, &spec)?;
                let cfg = GateTrainConfig {
                    epochs,
                    lr,
                    tau,
                    rule,
                    scan: ScanMode::SkipAndContinue,
                    snapshot_interval: None,
                    seed,
                };
                let res = train_gates(&model, &registry, &budget, &train, &cfg)?;
                let hooks = mask_hooks(&model, &registry, &res.final_mask.keep);
                let heldout_loss = dataset_loss_hooked(&model, &HookSpec::Fixed(&hooks), &heldout)?;
                println!("{label}: held-out loss {heldout_loss:.6}");
                rows.push(serde_json::json!({
                    "variant": label,
                    "heldout_loss": heldout_loss,
                    "kept_units": res.final_mask.kept_count(),
                    "consumed_cost": rational_to_string(&res.final_mask.consumed_cost),
                    "guard_fires": res.guard_fires,
                }));
            }
            write_json(&out, &rows)?;
            write_manifest("ablate", Some(seed), &[&ckpt, &corpus], &[&out])?;
        }
    }
    Ok(())
}

fn rebuild_registry(
    config: &gbsp_core::model::ModelConfig,
    mask_file: &MaskFile,
) -> Result<(gbsp_core::registry::PrunableRegistry, gbsp_core::registry::Budget), CoreError> {
    let target_filter = match mask_file.target.as_str() {
        "both" => TargetFilter::Both,
        "ffn" => TargetFilter::FfnOnly,
        "kv" => TargetFilter::KvOnly,
        other => {
            return Err(CoreError::InvalidArgument(format!("bad target '{other}' in mask file")))
        }
    };
    let spec = BudgetSpec {
        keep_ratio: mask_file.keep_ratio,
        cost_scale: mask_file.cost_scale,
        target_filter,
    };
    let (registry, budget) = build_registry(config, &spec)?;
    if mask_file.keep.len() != registry.len() {
        return Err(CoreError::InvalidArgument(format!(
            "mask file has {} units but the checkpoint's registry has {}",
            mask_file.keep.len(),
            registry.len()
        )));
    }
    Ok((registry, budget))
}

/// 1 usage, 2 invariant violation, 3 numerical failure.
fn exit_code(err: &CoreError) -> i32 {
    match err {
        CoreError::InvalidArgument(_)
        | CoreError::InvalidConfig(_)
        | CoreError::Io(_)
        | CoreError::Json(_)
        | CoreError::CheckpointFormat(_) => 1,
        CoreError::ShapeMismatch { .. }
        | CoreError::IndexOutOfRange { .. }
        | CoreError::InfeasibleBudget(_)
        | CoreError::EmptyRegistry => 2,
        CoreError::NonFinite { .. } | CoreError::Diverged(_) => 3,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 by default; the contract here is 1 for usage errors
            let _ = e.print();
            std::process::exit(if e.exit_code() == 0 { 0 } else { 1 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

#!/usr/bin/env python3
"""Plot pruning reports produced by the gbsp CLI.

Consumes the retention CSV written by `gbsp report` / `gbsp prune --out-report`
(columns: kind,layer,kept,total,ratio) and, optionally, the prune-report JSON
(loss trace, mask-stability series, polarization trace). Writes PNG figures;
the core tool never plots anything itself.
"""

import argparse
import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def plot_retention(csv_path: Path, out_dir: Path) -> None:
    per_layer: dict[str, list[tuple[int, float]]] = {}
    overall: dict[str, float] = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            kind, layer, ratio = row["kind"], row["layer"], float(row["ratio"])
            if layer == "all":
                overall[kind] = ratio
            else:
                per_layer.setdefault(kind, []).append((int(layer), ratio))

    fig, ax = plt.subplots(figsize=(7, 4))
    for kind, pts in sorted(per_layer.items()):
        pts.sort()
        ax.plot([l for l, _ in pts], [r for _, r in pts], marker="o", label=kind)
    for kind, ratio in sorted(overall.items()):
        ax.axhline(ratio, linestyle="--", linewidth=0.8, alpha=0.5)
    ax.set_xlabel("layer")
    ax.set_ylabel("keep ratio")
    ax.set_ylim(0, 1.05)
    ax.set_title("per-layer retention by unit kind")
    ax.legend()
    fig.tight_layout()
    out = out_dir / "retention.png"
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


def plot_traces(report_path: Path, out_dir: Path) -> None:
    report = json.loads(report_path.read_text())

    if report.get("loss_trace"):
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(report["loss_trace"], linewidth=0.8)
        ax.set_xlabel("gate-training step")
        ax.set_ylabel("masked cross-entropy")
        ax.set_title("gate-training loss")
        fig.tight_layout()
        out = out_dir / "loss_trace.png"
        fig.savefig(out, dpi=150)
        print(f"wrote {out}")

    series = {
        "overall": report.get("stability_overall") or [],
        "ffn": report.get("stability_ffn") or [],
        "kv": report.get("stability_kv") or [],
    }
    if any(series.values()):
        fig, ax = plt.subplots(figsize=(7, 4))
        for name, xs in series.items():
            if xs:
                ax.plot(xs, marker="o", markersize=3, label=name)
        ax.set_xlabel("snapshot interval")
        ax.set_ylabel("fraction of mask unchanged")
        ax.set_ylim(0, 1.05)
        ax.set_title("mask stability between snapshots")
        ax.legend()
        fig.tight_layout()
        out = out_dir / "stability.png"
        fig.savefig(out, dpi=150)
        print(f"wrote {out}")

    if report.get("polarization_trace"):
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(report["polarization_trace"], linewidth=0.8)
        ax.set_xlabel("gate-training step")
        ax.set_ylabel("mean |p - 0.5|")
        ax.set_ylim(0, 0.55)
        ax.set_title("gate polarization")
        fig.tight_layout()
        out = out_dir / "polarization.png"
        fig.savefig(out, dpi=150)
        print(f"wrote {out}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--csv", type=Path, help="retention CSV from `gbsp report`")
    parser.add_argument(
        "--report", type=Path, help="prune-report JSON from `gbsp prune --out-report`"
    )
    parser.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    args = parser.parse_args()
    if not args.csv and not args.report:
        parser.error("give at least one of --csv / --report")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    if args.csv:
        plot_retention(args.csv, args.out_dir)
    if args.report:
        plot_traces(args.report, args.out_dir)


if __name__ == "__main__":
    main()

"""Figures for the report command, written next to the CSV they summarise."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def metric_bars(rows: list[dict], path) -> Path:
    """Grouped bars of DSC / mIoU / NSD per variant."""
    keys = [("dsc", "DSC"), ("miou", "mIoU"), ("nsd", "NSD")]
    x = np.arange(len(rows))
    width = 0.8 / len(keys)
    fig, ax = plt.subplots(figsize=(1.6 * len(rows) + 2, 3.2))
    for i, (k, label) in enumerate(keys):
        ax.bar(x + (i - 1) * width, [r[k] for r in rows], width, label=label)
    ax.set_xticks(x, [r["variant"] for r in rows])
    ax.set_ylim(0, 1)
    ax.set_ylabel("test score (foreground mean)")
    ax.legend(frameon=False, ncol=3, loc="upper center", bbox_to_anchor=(0.5, 1.15))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def read_train_log(path) -> tuple[list, list, list, list]:
    ep, loss, vep, vdsc = [], [], [], []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            ep.append(int(r["epoch"]))
            loss.append(float(r["train_loss"]))
            if r["val_dsc"]:
                vep.append(int(r["epoch"]))
                vdsc.append(float(r["val_dsc"]))
    return ep, loss, vep, vdsc


def training_curves(logs: dict[str, Path], path) -> Path:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.2))
    for name, p in logs.items():
        ep, loss, vep, vdsc = read_train_log(p)
        a1.plot(ep, loss, label=name)
        a2.plot(vep, vdsc, marker="o", label=name)
    a1.set_xlabel("epoch")
    a1.set_ylabel("train loss")
    a2.set_xlabel("epoch")
    a2.set_ylabel("val DSC")
    a2.set_ylim(0, 1)
    a2.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def bench_scaling(rows: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    for k in sorted({r["kernel"] for r in rows}):
        pts = sorted((int(r["L"]), float(r["wall_ns"])) for r in rows if r["kernel"] == k)
        ax.loglog([p[0] for p in pts], [p[1] / 1e6 for p in pts], marker="o", base=2, label=k)
    ax.set_xlabel("sequence length L")
    ax.set_ylabel("wall time (ms)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)

"""Overlap and boundary metrics on integer label volumes.

Empty-vs-empty scores 1.0 for every metric; exactly one empty mask scores 0.0.
Surface distances are Euclidean in mm.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    num_classes: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.labels.ndim != 3:
            raise ValueError(f"label volume must be (D, H, W), got {self.labels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.num_classes is not None and self.labels.size and (
                self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")


def _masks(pred, gt, c):
    p = pred.labels if isinstance(pred, LabelVolume) else np.asarray(pred)
    g = gt.labels if isinstance(gt, LabelVolume) else np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    return p == c, g == c


def dsc(pred, gt, c: int) -> float:
    P, G = _masks(pred, gt, c)
    sp, sg = int(P.sum()), int(G.sum())
    if sp == 0 and sg == 0:
        return 1.0
    return 2.0 * int(np.logical_and(P, G).sum()) / (sp + sg)


def miou(pred, gt, c: int) -> float:
    P, G = _masks(pred, gt, c)
    union = int(np.logical_or(P, G).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(P, G).sum()) / union


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour;
    outside the volume counts as background."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    core = m[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for ax in range(3):
        for off in (-1, 1):
            interior &= np.roll(m, off, axis=ax)[1:-1, 1:-1, 1:-1]
    return core & ~interior


def _min_dists_brute(src: np.ndarray, dst: np.ndarray, spacing, chunk: int = 2048) -> np.ndarray:
    a = src * np.asarray(spacing)
    b = dst * np.asarray(spacing)
    out = np.empty(len(a))
    for i in range(0, len(a), chunk):
        diff = a[i:i + chunk, None, :] - b[None, :, :]
        out[i:i + chunk] = np.sqrt((diff * diff).sum(axis=-1)).min(axis=1)
    return out


def nsd(pred, gt, c: int, tau: float, spacing=None, method: str = "brute") -> float:
    """Normalised surface dice at tolerance ``tau`` mm.

    ``method="brute"`` compares every surface pair; ``"edt"`` reads the
    distances off a Euclidean distance transform.
    """
    if tau <= 0:
        raise ValueError(f"tolerance must be positive, got {tau}")
    if spacing is None:
        spacing = pred.spacing if isinstance(pred, LabelVolume) else (1.0, 1.0, 1.0)
        if isinstance(pred, LabelVolume) and isinstance(gt, LabelVolume) and pred.spacing != gt.spacing:
            raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    P, G = _masks(pred, gt, c)
    SP, SG = surface(P), surface(G)
    nP, nG = int(SP.sum()), int(SG.sum())
    if nP == 0 and nG == 0:
        return 1.0
    if nP == 0 or nG == 0:
        return 0.0
    if method == "brute":
        dp = _min_dists_brute(np.argwhere(SP), np.argwhere(SG), spacing)
        dg = _min_dists_brute(np.argwhere(SG), np.argwhere(SP), spacing)
    elif method == "edt":
        dp = ndimage.distance_transform_edt(~SG, sampling=spacing)[SP]
        dg = ndimage.distance_transform_edt(~SP, sampling=spacing)[SG]
    else:
        raise ValueError(f"unknown NSD method {method!r}")
    return (int((dp <= tau).sum()) + int((dg <= tau).sum())) / (nP + nG)


@dataclass
class MetricsReport:
    per_class: dict = field(default_factory=dict)  # class -> {"dsc", "miou", "nsd"}
    n_voxels: int = 0
    tau_mm: float = 1.0

    @property
    def mean(self) -> dict:
        fg = [v for c, v in self.per_class.items() if c != 0]
        if not fg:
            return {"dsc": float("nan"), "miou": float("nan"), "nsd": float("nan")}
        return {k: float(np.mean([v[k] for v in fg])) for k in ("dsc", "miou", "nsd")}

    def csv_rows(self, variant: str) -> list[list]:
        rows = [[variant, c, v["dsc"], v["miou"], v["nsd"], self.tau_mm] for c, v in sorted(self.per_class.items())]
        m = self.mean
        rows.append([variant, "mean", m["dsc"], m["miou"], m["nsd"], self.tau_mm])
        return rows


def default_tau(spacing) -> float:
    return 1.0 * max(spacing)


def evaluate(pred, gt, num_classes: int, spacing=(1.0, 1.0, 1.0), tau: float | None = None,
             method: str = "edt") -> MetricsReport:
    tau = default_tau(spacing) if tau is None else float(tau)
    p = np.asarray(pred.labels if isinstance(pred, LabelVolume) else pred)
    g = np.asarray(gt.labels if isinstance(gt, LabelVolume) else gt)
    rep = MetricsReport(n_voxels=int(g.size), tau_mm=tau)
    for c in range(num_classes):
        rep.per_class[c] = {"dsc": dsc(p, g, c), "miou": miou(p, g, c),
                            "nsd": nsd(p, g, c, tau, spacing, method)}
    return rep


def average_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Per-class metrics averaged over volumes."""
    if not reports:
        raise ValueError("no reports to average")
    classes = sorted(reports[0].per_class)
    out = MetricsReport(n_voxels=sum(r.n_voxels for r in reports), tau_mm=reports[0].tau_mm)
    for c in classes:
        out.per_class[c] = {k: float(np.mean([r.per_class[c][k] for r in reports])) for k in ("dsc", "miou", "nsd")}
    return out


CSV_HEADER = ["variant", "class", "dsc", "miou", "nsd", "tau_mm"]


def report_csv(reports: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for variant, rep in reports.items():
        for row in rep.csv_rows(variant):
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def table_grid(rows: list[dict], columns=("dsc", "miou", "nsd")) -> str:
    """Plain-text comparison grid: one row per method."""
    head = ["Method"] + [c.upper() if c in ("dsc", "nsd") else ("mIoU" if c == "miou" else c) for c in columns]
    body = [[str(r["variant"])] + [_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    line = "+".join("-" * (w + 2) for w in widths)
    out = [" | ".join(h.ljust(w) for h, w in zip(head, widths)), line]
    out += [" | ".join(x.ljust(w) for x, w in zip(r, widths)) for r in body]
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}" if abs(v) < 1000 else f"{v:.1f}"
    return str(v)

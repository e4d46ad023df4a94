"""Training loop, Dice+CE loss, Adam, checkpoint selection and the variant comparison."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import metrics
from . import tensor as T
from .blocks3d import BlockKind
from .rng import SplitMix64
from .segnet import SegConfig, SegNet, build_model
from .synthdata import VolumeFile, read_manifest
from .tensor import Precision, Tensor


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 1
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    val_interval: int = 5
    seed: int = 0
    precision: Precision = Precision.TRAIN

    def __post_init__(self):
        self.precision = Precision.parse(self.precision)

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.val_interval < 1:
            raise ValueError("batch_size and val_interval must be >= 1")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["precision"] = self.precision.value
        return d


def one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label values outside [0, {num_classes}): min {labels.min()}, max {labels.max()}")
    return (np.arange(num_classes).reshape(-1, *([1] * labels.ndim)) == labels[None]).astype(dtype)


def soft_dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1e-5) -> Tensor:
    C = logits.shape[0]
    g = one_hot(labels, C, logits.dtype)[1:]
    p = T.softmax(logits, axis=0)[1:]
    axes = tuple(range(1, logits.ndim))
    inter = T.tsum(p * g, axis=axes)
    denom = T.tsum(p, axis=axes) + g.sum(axis=axes)
    return 1.0 - T.mean((2.0 * inter + smooth) / (denom + smooth))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    g = one_hot(labels, logits.shape[0], logits.dtype)
    return T.neg(T.mean(T.tsum(T.log_softmax(logits, axis=0) * g, axis=0)))


def loss(logits: Tensor, labels: np.ndarray, dice_weight: float = 1.0, ce_weight: float = 1.0) -> Tensor:
    """dice_weight * soft-Dice (foreground classes) + ce_weight * mean voxel cross-entropy.
    ``logits`` is (C, D, H, W), ``labels`` is (D, H, W)."""
    if logits.shape[1:] != np.shape(labels):
        raise T.ShapeError(f"logits {logits.shape} do not match labels {np.shape(labels)}")
    return dice_weight * soft_dice_loss(logits, labels) + ce_weight * cross_entropy(logits, labels)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# data


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    spacing: tuple


def load_split(manifest, split: str) -> list[Sample]:
    out = []
    for e in read_manifest(manifest):
        if e.split != split:
            continue
        img, lab = VolumeFile.load(e.image), VolumeFile.load(e.label)
        if img.data.shape[1:] != lab.data.shape:
            raise ValueError(f"{e.image}: image {img.data.shape} does not match labels {lab.data.shape}")
        out.append(Sample(img.data, lab.data, img.spacing))
    if not out:
        raise ValueError(f"manifest {manifest} has no {split!r} volumes")
    return out


def predict(net: SegNet, image: np.ndarray) -> np.ndarray:
    with T.no_grad():
        logits = net(T.Tensor(image.astype(net.dtype)))
    return np.argmax(logits.data, axis=0).astype(np.uint8)


def mean_foreground_dsc(net: SegNet, samples: list[Sample]) -> float:
    C = net.cfg.num_classes
    scores = []
    for s in samples:
        pred = predict(net, s.image)
        scores.append(np.mean([metrics.dsc(pred, s.labels, c) for c in range(1, C)]))
    return float(np.mean(scores))


def evaluate_split(net: SegNet, samples: list[Sample], tau: float | None = None) -> metrics.MetricsReport:
    reps = [metrics.evaluate(predict(net, s.image), s.labels, net.cfg.num_classes, s.spacing, tau)
            for s in samples]
    return metrics.average_reports(reps)


# ---------------------------------------------------------------------------
# checkpoints: CKPT weights plus a JSON sidecar holding the model config


def save_model(net: SegNet, path):
    path = Path(path)
    checkpoint.save(path, net.state_dict())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(net.cfg.as_dict(), sort_keys=True))


def load_model(path, precision=None) -> SegNet:
    path = Path(path)
    side = path.with_suffix(path.suffix + ".json")
    if not side.exists():
        raise FileNotFoundError(f"missing model config {side}")
    cfg = SegConfig(**json.loads(side.read_text()))
    if precision is not None:
        cfg.precision = Precision.parse(precision)
    net = SegNet(cfg)
    net.load_state_dict(checkpoint.load(path))
    return net


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    best_val_dsc: float
    best_epoch: int
    history: list = field(default_factory=list)  # (epoch, train_loss, val_dsc or None)
    n_params: int = 0
    seconds: float = 0.0


LOG_HEADER = ["epoch", "train_loss", "val_dsc"]


def train(cfg: TrainConfig, seg: SegConfig, manifest, out_dir, log=None) -> TrainResult:
    """Train ``seg`` on the manifest's train split; keeps the best-val-DSC checkpoint
    at ``out_dir/best.ckpt`` and writes ``out_dir/train_log.csv``."""
    cfg.validate()
    seg = SegConfig(**seg.as_dict())
    seg.precision = cfg.precision
    seg.seed = cfg.seed
    train_set = load_split(manifest, "train")
    val_set = load_split(manifest, "val")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = out / "best.ckpt", out / "train_log.csv"

    net, n_params = build_model(seg)
    opt = Adam(net.parameters(), cfg.lr)
    order_rng = SplitMix64(cfg.seed).spawn(7)
    dtype = seg.precision.dtype
    history = []
    best, best_epoch = -1.0, 0
    t0 = time.perf_counter()
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for epoch in range(1, cfg.epochs + 1):
            order = order_rng.permutation(len(train_set))
            losses = []
            for step in range(0, len(order), cfg.batch_size):
                batch = order[step:step + cfg.batch_size]
                opt.zero_grad()
                total = 0.0
                try:
                    for i in batch:
                        s = train_set[int(i)]
                        logits = net(T.Tensor(s.image.astype(dtype)))
                        L = loss(logits, s.labels, cfg.dice_weight, cfg.ce_weight) * (1.0 / len(batch))
                        if not np.isfinite(L.item()):
                            raise T.NonFiniteError("loss is not finite")
                        L.backward()
                        total += L.item()
                except T.NonFiniteError as exc:
                    raise T.NonFiniteError(f"non-finite value at epoch {epoch}, step {step // cfg.batch_size}: {exc}") from None
                opt.step()
                losses.append(total)
            train_loss = float(np.mean(losses))
            val = None
            if epoch % cfg.val_interval == 0 or epoch == cfg.epochs:
                val = mean_foreground_dsc(net, val_set)
                if val > best:
                    best, best_epoch = val, epoch
                    save_model(net, ckpt_path)
            history.append((epoch, train_loss, val))
            w.writerow([epoch, f"{train_loss:.8f}", "" if val is None else f"{val:.6f}"])
            fh.flush()
            if log is not None:
                log(f"epoch {epoch:3d}  loss {train_loss:.5f}" + ("" if val is None else f"  val_dsc {val:.4f}"))
    return TrainResult(ckpt_path, log_path, best, best_epoch, history, n_params, time.perf_counter() - t0)


def compare_variants(base: SegConfig, cfg: TrainConfig, manifest, out_dir, variants=None,
                     tau: float | None = None, log=None) -> list[dict]:
    """Train and test each variant under one TrainConfig.

    Returns one row per variant with dsc, miou, nsd (test split, foreground mean),
    params and seconds; writes ``compare.csv`` and per-class ``compare_metrics.csv``.
    """
    variants = [BlockKind.parse(v) for v in (variants or list(BlockKind))]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    test_set = load_split(manifest, "test")
    rows, reports = [], {}
    for v in variants:
        seg = SegConfig(**{**base.as_dict(), "variant": v.value})
        if log is not None:
            log(f"== {v.value}")
        res = train(cfg, seg, manifest, out / v.value, log=log)
        net = load_model(res.checkpoint, cfg.precision)
        rep = evaluate_split(net, test_set, tau)
        reports[v.value] = rep
        m = rep.mean
        rows.append({"variant": v.value, "dsc": m["dsc"], "miou": m["miou"], "nsd": m["nsd"],
                     "params": res.n_params, "seconds": round(res.seconds, 2)})
    write_compare_csv(rows, out / "compare.csv")
    (out / "compare_metrics.csv").write_text(metrics.report_csv(reports))
    return rows


COMPARE_HEADER = ["variant", "dsc", "miou", "nsd", "params", "seconds"]


def write_compare_csv(rows: list[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, COMPARE_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if k in ("dsc", "miou", "nsd") else r[k]) for k in COMPARE_HEADER})


def read_compare_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(COMPARE_HEADER) - set(rows[0]):
        raise ValueError(f"{path}: not a compare CSV (need columns {COMPARE_HEADER})")
    out = []
    for r in rows:
        out.append({"variant": r["variant"], "dsc": float(r["dsc"]), "miou": float(r["miou"]),
                    "nsd": float(r["nsd"]), "params": int(r["params"]), "seconds": float(r["seconds"])})
    return out

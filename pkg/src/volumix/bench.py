"""Wall-clock scaling of the sequence-mixer kernels against the dense oracle."""
from __future__ import annotations

import csv
import io
import time

import numpy as np

from . import seqmix
from . import tensor as T
from .rng import SplitMix64

KERNELS = ("scan", "qs", "dense")
DEFAULT_LENGTHS = (256, 512, 1024, 2048)
CSV_HEADER = ["kernel", "L", "N", "d", "wall_ns", "checksum"]


def _setup(kernel: str, L: int, N: int, d: int, seed: int):
    rng = SplitMix64(seed)
    x = rng.normal((L, d))
    if kernel == "qs":
        q = seqmix.random_quasi_params(rng, L, N, d)
        return lambda: seqmix.quasiseparable_matmul(x, q).data
    p = seqmix.random_ssm_params(rng, L, d, N)
    if kernel == "scan":
        return lambda: seqmix.ssm_scan(x, p).data
    if kernel == "dense":
        return lambda: seqmix.apply_channelwise(seqmix.materialize_semiseparable(p, L), x)
    raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")


def time_kernel(kernel: str, L: int, N: int = 4, d: int = 8, repeats: int | None = None, seed: int = 0) -> dict:
    """Best-of-``repeats`` wall time in ns; checksum is the output sum.

    The linear-time kernels default to 9 repeats, the dense oracle to 2.
    """
    if repeats is None:
        repeats = 2 if kernel == "dense" else 9
    fn = _setup(kernel, L, N, d, seed)
    best = None
    with T.no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            y = fn()
            dt = time.perf_counter_ns() - t0
            best = dt if best is None else min(best, dt)
    return {"kernel": kernel, "L": L, "N": N, "d": d, "wall_ns": int(best), "checksum": float(np.sum(y))}


def run(kernels=KERNELS, lengths=DEFAULT_LENGTHS, N: int = 4, d: int = 8, repeats: int | None = None, seed: int = 0) -> list[dict]:
    return [time_kernel(k, L, N, d, repeats, seed) for k in kernels for L in lengths]


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "checksum": f"{r['checksum']:.10e}"})
    return buf.getvalue()


def growth_ratios(rows: list[dict], kernel: str) -> list[float]:
    """Time ratio between consecutive doublings of L for one kernel."""
    pts = sorted((r["L"], r["wall_ns"]) for r in rows if r["kernel"] == kernel)
    return [b[1] / a[1] for a, b in zip(pts, pts[1:])]

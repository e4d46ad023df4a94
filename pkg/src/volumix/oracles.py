"""Independent dense oracles and the equivalence sweep used by ``oracle-check``."""
from __future__ import annotations

import numpy as np

from . import metrics
from . import seqmix
from . import tensor as T
from .rng import SplitMix64


def dense_semiseparable(trans: np.ndarray, in_gen: np.ndarray, out_gen: np.ndarray, full: bool) -> np.ndarray:
    """(d, L, L) lower-triangular M[c, k, j] = out_kᵀ T_k ⋯ T_{j+1} in_j (k >= j).

    ``in_gen``/``out_gen`` are (L, d, N); ``trans`` is (L, d, N) diagonal or
    (L, N, N) full.
    """
    L, d, N = in_gen.shape
    M = np.zeros((d, L, L))
    for c in range(d):
        for j in range(L):
            v = in_gen[j, c].copy()
            M[c, j, j] = out_gen[j, c] @ v
            for k in range(j + 1, L):
                v = trans[k] @ v if full else trans[k, c] * v
                M[c, k, j] = out_gen[k, c] @ v
    return M


def _per_channel(v, L, d):
    v = np.asarray(v, dtype=np.float64)
    return np.broadcast_to(v if v.ndim == 3 else v[:, None, :], (L, d, v.shape[-1]))


def decomposed_quasiseparable(q: seqmix.QuasiParams, d: int) -> np.ndarray:
    """Dense S·M_f + J·S·M_b·J + diag(delta) from explicit shift (S) and exchange (J) matrices."""
    L = q.length
    fb, fc, bb, bc = (_per_channel(seqmix._data(v), L, d) for v in (q.fwd_b, q.fwd_c, q.bwd_b, q.bwd_c))
    fa, ba = (np.asarray(seqmix._data(v), dtype=np.float64) for v in (q.fwd_a, q.bwd_a))
    if not q.full:
        fa, ba = _per_channel(fa, L, d), _per_channel(ba, L, d)
    S = np.eye(L, k=-1)
    J = np.eye(L)[::-1]

    def readout(a, c):  # A_kᵀ c_k
        return np.einsum("lnm,ldn->ldm", a, c) if q.full else a * c

    # forward: row k of M_f reads out with the generator of token k+1
    f_out = np.zeros_like(fc)
    f_out[:-1] = readout(fa, fc)[1:]
    Mf = dense_semiseparable(fa, fb, f_out, q.full)
    # backward, on the reversed sequence
    rb_trans = ba[::-1].transpose(0, 2, 1) if q.full else ba[::-1]
    rb_in = readout(ba, bc)[::-1]
    rb_out = np.zeros_like(bb)
    rb_out[:-1] = bb[::-1][1:]
    Mb = dense_semiseparable(rb_trans, rb_in, rb_out, q.full)
    dl = np.asarray(seqmix._data(q.delta), dtype=np.float64)
    dl = np.broadcast_to(dl if dl.ndim == 2 else dl[:, None], (L, d))
    out = np.empty((d, L, L))
    for c in range(d):
        out[c] = S @ Mf[c] + J @ S @ Mb[c] @ J + np.diag(dl[:, c])
    return out


def _case_shape(rng: SplitMix64):
    return int(rng.integers(1, 33)), int(rng.integers(1, 5)), int(rng.integers(1, 5))


def scan_vs_dense(n_cases: int = 200, seed: int = 0) -> float:
    rng = SplitMix64(seed)
    worst = 0.0
    for _ in range(n_cases):
        L, N, d = _case_shape(rng)
        p = seqmix.random_ssm_params(rng, L, d, N)
        x = rng.normal((L, d))
        y = seqmix.ssm_scan(x, p).data
        ref = seqmix.apply_channelwise(seqmix.materialize_semiseparable(p, L), x)
        worst = max(worst, float(np.abs(y - ref).max()))
    return worst


def _random_quasi(rng: SplitMix64, i: int):
    L, N, d = _case_shape(rng)
    mode = i % 3  # shared generators, per-channel generators, full transitions
    q = seqmix.random_quasi_params(rng, L, N, None if mode == 0 else d, full=(mode == 2))
    if mode == 2:
        # full transitions stay channel-free; let b/c vary per channel
        q.fwd_b, q.bwd_c = rng.normal((L, d, N)), rng.normal((L, d, N))
    return q, L, d


def quasi_vs_dense(n_cases: int = 200, seed: int = 1) -> float:
    rng = SplitMix64(seed)
    worst = 0.0
    for i in range(n_cases):
        q, L, d = _random_quasi(rng, i)
        x = rng.normal((L, d))
        y = seqmix.quasiseparable_matmul(x, q).data
        M = seqmix.quasiseparable_materialize(q)
        worst = max(worst, float(np.abs(y - seqmix.apply_channelwise(M, x)).max()))
    return worst


def decomposition_vs_dense(n_cases: int = 200, seed: int = 2) -> tuple[float, float]:
    """Max error of the dense shift/flip composition against (a) the direct
    quasiseparable materialisation and (b) ``quasiseparable_matmul``."""
    rng = SplitMix64(seed)
    w_mat, w_mul = 0.0, 0.0
    for i in range(n_cases):
        q, L, d = _random_quasi(rng, i)
        x = rng.normal((L, d))
        Md = decomposed_quasiseparable(q, d)
        M = seqmix.quasiseparable_materialize(q)
        M = np.broadcast_to(M, (d, L, L)) if M.ndim == 2 else M
        w_mat = max(w_mat, float(np.abs(Md - M).max()))
        y = seqmix.quasiseparable_matmul(x, q).data
        w_mul = max(w_mul, float(np.abs(y - seqmix.apply_channelwise(Md, x)).max()))
    return w_mat, w_mul


def conv_vs_reference(n_cases: int = 20, seed: int = 3) -> float:
    rng = SplitMix64(seed)
    worst = 0.0
    for i in range(n_cases):
        groups = (1, 2, 4)[i % 3]
        cin, cout = 4, 4 if groups != 4 else 4
        k = 1 + 2 * int(rng.integers(0, 2))
        stride = int(rng.integers(1, 3))
        x = rng.normal((cin, 5, 6, 7))
        w = rng.normal((cout, cin // groups, k, k, k))
        b = rng.normal((cout,))
        y = T.conv3d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=k // 2, groups=groups).data
        ref = T.conv3d_reference(x, w, b, stride=stride, padding=k // 2, groups=groups)
        worst = max(worst, float(np.abs(y - ref).max()))
    return worst


def nsd_edt_vs_brute(n_cases: int = 50, seed: int = 4) -> float:
    rng = SplitMix64(seed)
    worst = 0.0
    for _ in range(n_cases):
        shape = tuple(int(v) for v in rng.integers(4, 11, (3,)))
        a = rng.uniform(shape) < 0.3
        b = rng.uniform(shape) < 0.3
        spacing = tuple(float(v) for v in rng.uniform((3,), 0.5, 3.0))
        tau = float(rng.uniform((), 0.3, 4.0))
        e = metrics.nsd(a.astype(int), b.astype(int), 1, tau, spacing, "edt")
        r = metrics.nsd(a.astype(int), b.astype(int), 1, tau, spacing, "brute")
        worst = max(worst, abs(e - r))
    return worst


def dsc_iou_identity(n_cases: int = 100, seed: int = 5) -> float:
    rng = SplitMix64(seed)
    worst = 0.0
    for _ in range(n_cases):
        a = (rng.uniform((6, 6, 6)) < rng.uniform((), 0.05, 0.9)).astype(int)
        b = (rng.uniform((6, 6, 6)) < rng.uniform((), 0.05, 0.9)).astype(int)
        iou = metrics.miou(a, b, 1)
        worst = max(worst, abs(metrics.dsc(a, b, 1) - 2 * iou / (1 + iou)))
    return worst


ORACLES = {
    "ssm_scan vs dense semiseparable": scan_vs_dense,
    "quasiseparable_matmul vs dense": quasi_vs_dense,
    "shift/flip composition vs dense": lambda: max(decomposition_vs_dense()),
    "conv3d vs reference": conv_vs_reference,
    "nsd edt vs brute force": nsd_edt_vs_brute,
    "dsc vs 2iou/(1+iou)": dsc_iou_identity,
}


def run_all() -> dict[str, float]:
    with T.no_grad():
        return {name: float(fn()) for name, fn in ORACLES.items()}

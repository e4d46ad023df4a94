"""Sequence mixers: selective scan, quasiseparable (bidirectional) mixer and
the gated-CNN depthwise mixer, each with a dense materialisation oracle.

Sequences are (L, d) token matrices.  Per-token state parameters carry a
trailing state axis N; a channel axis d may be present where the parameter
differs per channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .rng import SplitMix64
from .tensor import Tensor, make_op


# ---------------------------------------------------------------------------
# linear recurrence primitive


def linear_recurrence(a, u, full: bool = False) -> Tensor:
    """h_t = A_t h_{t-1} + u_t with h_{-1} = 0, returned for every t.

    ``u`` is (L, d, N).  Diagonal transitions ``a`` are (L, d, N) or
    (L, 1, N); with ``full=True`` ``a`` is (L, N, N) and acts on the state
    axis of every channel.
    """
    a = T.as_tensor(a)
    u = T.as_tensor(u, a)
    if a.dtype != u.dtype:
        raise TypeError(f"unsupported dtype mix: {a.dtype} and {u.dtype}")
    ad, ud = a.data, u.data
    L = ud.shape[0]
    if ad.shape[0] != L:
        raise T.ShapeError(f"shape mismatch: transitions {ad.shape} vs inputs {ud.shape}")
    h = np.empty_like(ud)
    if full:
        if ad.shape[1:] != (ud.shape[2], ud.shape[2]):
            raise T.ShapeError(f"shape mismatch: transitions {ad.shape} vs inputs {ud.shape}")
        h[0] = ud[0]
        for t in range(1, L):
            np.matmul(h[t - 1], ad[t].T, out=h[t])
            h[t] += ud[t]
    else:
        try:
            np.broadcast_shapes(ad.shape, ud.shape)
        except ValueError:
            raise T.ShapeError(f"shape mismatch: transitions {ad.shape} vs inputs {ud.shape}") from None
        h[0] = ud[0]
        for t in range(1, L):
            np.multiply(ad[t], h[t - 1], out=h[t])
            h[t] += ud[t]

    def back(g):
        G = np.empty_like(g)
        G[L - 1] = g[L - 1]
        if full:
            for t in range(L - 2, -1, -1):
                np.matmul(G[t + 1], ad[t + 1], out=G[t])
                G[t] += g[t]
        else:
            for t in range(L - 2, -1, -1):
                np.multiply(ad[t + 1], G[t + 1], out=G[t])
                G[t] += g[t]
        ga = None
        if a.requires_grad:
            if full:
                ga = np.zeros_like(ad)
                ga[1:] = np.einsum("tdn,tdm->tnm", G[1:], h[:-1])
            else:
                prod = np.zeros_like(G)
                prod[1:] = G[1:] * h[:-1]
                ga = T.unbroadcast(prod, ad.shape)
        return ga, G

    return make_op(h, (a, u), back, "linear_recurrence")


# ---------------------------------------------------------------------------
# selective state space scan


@dataclass
class SsmParams:
    """Realised per-token parameters of a diagonal selective SSM.

    abar (L, d, N) decays in (0, 1); delta (L, d) step sizes > 0;
    B, C (L, N) input/output projections; D (d,) skip gain.  Entries may be
    numpy arrays or Tensors.
    """

    abar: object
    delta: object
    B: object
    C: object
    D: object

    @property
    def length(self) -> int:
        return int(np.shape(_data(self.delta))[0])

    @property
    def state_dim(self) -> int:
        return int(np.shape(_data(self.B))[1])

    @classmethod
    def from_log_decay(cls, a_log, delta, B, C, D) -> "SsmParams":
        """Zero-order-hold style: Ā_t = exp(-softplus(a) * Δ_t) per channel and state."""
        a_log, delta = T.as_tensor(a_log), T.as_tensor(delta)
        rate = T.softplus(a_log)  # (d, N)
        abar = T.exp(T.neg(T.reshape(delta, delta.shape + (1,)) * rate))
        return cls(abar, delta, B, C, D)


def _data(v):
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def random_ssm_params(rng: SplitMix64, L: int, d: int, N: int) -> SsmParams:
    a_log = rng.normal((d, N))
    delta = np.logaddexp(0, rng.normal((L, d)))
    p = SsmParams.from_log_decay(a_log, delta, rng.normal((L, N)), rng.normal((L, N)), rng.normal((d,)))
    return SsmParams(_data(p.abar), delta, _data(p.B), _data(p.C), _data(p.D))


def ssm_scan(x, p: SsmParams) -> Tensor:
    """Causal selective scan over an (L, d) sequence.

    h_t = Ā_t ⊙ h_{t-1} + (Δ_t B_t) x_t,  y_t = C_tᵀ h_t + D x_t,  h_0 = 0.
    """
    x = T.as_tensor(x)
    abar, delta, B, C, D = (T.as_tensor(v, x) for v in (p.abar, p.delta, p.B, p.C, p.D))
    if x.ndim != 2:
        raise T.ShapeError(f"ssm_scan expects an (L, d) sequence, got {x.shape}")
    L, d = x.shape
    N = B.shape[-1]
    if delta.shape != (L, d) or abar.shape != (L, d, N) or B.shape != (L, N) or C.shape != (L, N) \
            or D.shape != (d,):
        raise T.ShapeError(
            f"shape mismatch: x {x.shape} vs params abar {abar.shape}, delta {delta.shape}, "
            f"B {B.shape}, C {C.shape}, D {D.shape}")
    u = T.reshape(delta * x, (L, d, 1)) * T.reshape(B, (L, 1, N))
    h = linear_recurrence(abar, u)
    y = T.tsum(h * T.reshape(C, (L, 1, N)), axis=-1)
    return y + x * D


def materialize_semiseparable(p: SsmParams, L: int) -> np.ndarray:
    """Dense (d, L, L) matrices M with y[:, c] = M[c] @ x[:, c].

    M[c, i, j] = C_iᵀ diag(∏_{k=j+1..i} Ā_k[c]) Δ_j[c] B_j for i > j, the
    same with an empty product plus D[c] on the diagonal, zero above it.
    """
    if L <= 0:
        raise ValueError(f"sequence length must be positive, got {L}")
    abar, delta, B, C, D = (_data(v) for v in (p.abar, p.delta, p.B, p.C, p.D))
    if abar.shape[0] != L:
        raise T.ShapeError(f"shape mismatch: params of length {abar.shape[0]} vs L={L}")
    d = delta.shape[1]
    idx = np.arange(L)
    later = idx[:, None] > idx[None, :]  # k > j
    out = np.empty((d, L, L), dtype=np.result_type(abar, B))
    for c in range(d):
        # G[k, j, n] = Ā_k if k > j else 1;  cumprod over k gives ∏_{k=j+1..i}
        G = np.where(later[:, :, None], abar[:, None, c, :], 1.0)
        P = np.cumprod(G, axis=0)
        M = np.einsum("in,ijn,jn->ij", C, P, delta[:, c, None] * B)
        M = np.tril(M)
        M[idx, idx] += D[c]
        out[c] = M
    return out


def apply_channelwise(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y[:, c] = M[c] @ x[:, c] for (d, L, L) M, or M @ x for a single (L, L) matrix."""
    if M.ndim == 2:
        return M @ x
    return np.einsum("cij,jc->ic", M, x)


# ---------------------------------------------------------------------------
# quasiseparable (bidirectional) mixer


@dataclass
class QuasiParams:
    """Generators of an N-quasiseparable matrix.

    Forward triple (fwd_b, fwd_c, fwd_a) fills the strict lower triangle,
    backward triple (bwd_b, bwd_c, bwd_a) the strict upper triangle, delta the
    diagonal.  b/c are (L, N) or channel-specific (L, d, N).  Transitions are
    diagonal, (L, N) or (L, d, N), unless ``full`` is set, in which case they
    are (L, N, N) matrices.  delta is (L,) or (L, d).
    """

    fwd_b: object
    fwd_c: object
    fwd_a: object
    bwd_b: object
    bwd_c: object
    bwd_a: object
    delta: object
    full: bool = False

    @property
    def length(self) -> int:
        return int(np.shape(_data(self.delta))[0])


def random_quasi_params(rng: SplitMix64, L: int, N: int, d: int | None = None, full: bool = False,
                        decay: bool = True) -> QuasiParams:
    lead = (L,) if d is None else (L, d)

    def trans():
        if full:
            return rng.normal((L, N, N)) / math.sqrt(N)
        a = rng.uniform(lead + (N,), 0.2, 1.0) if decay else rng.normal(lead + (N,))
        return a

    return QuasiParams(rng.normal(lead + (N,)), rng.normal(lead + (N,)), trans(),
                       rng.normal(lead + (N,)), rng.normal(lead + (N,)), trans(),
                       rng.normal(lead), full=full)


def _channel_free(q: QuasiParams) -> bool:
    gens = [_data(v) for v in (q.fwd_b, q.fwd_c, q.bwd_b, q.bwd_c)]
    if not q.full:
        gens += [_data(q.fwd_a), _data(q.bwd_a)]
    return all(v.ndim == 2 for v in gens) and _data(q.delta).ndim == 1


def quasiseparable_materialize(q: QuasiParams) -> np.ndarray:
    """Dense matrix by direct evaluation of the three quasiseparable cases.

    m_ij = c_iᵀ A_i ⋯ A_{j+1} b_j (forward triple) for i > j, delta_i for
    i = j, and ←c_jᵀ ←A_j ⋯ ←A_{i+1} ←b_i (backward triple) for i < j.
    Returns (L, L) when no generator is channel-specific, else (d, L, L).
    """
    fb, fc, fa, bb, bc, ba, dl = (np.asarray(_data(v), dtype=np.float64) for v in
                                  (q.fwd_b, q.fwd_c, q.fwd_a, q.bwd_b, q.bwd_c, q.bwd_a, q.delta))
    L = dl.shape[0]
    for name, v in (("fwd_b", fb), ("fwd_c", fc), ("fwd_a", fa), ("bwd_b", bb), ("bwd_c", bc), ("bwd_a", ba)):
        if v.shape[0] != L:
            raise T.ShapeError(f"shape mismatch: {name} {v.shape} vs delta {dl.shape}")
    single = _channel_free(q)
    d = 1
    for v in (fb, fc, bb, bc) + (() if q.full else (fa, ba)):
        if v.ndim == 3:
            d = max(d, v.shape[1])
    if dl.ndim == 2:
        d = max(d, dl.shape[1])

    def per_channel(v):  # -> (L, d, N)
        return np.broadcast_to(v if v.ndim == 3 else v[:, None, :], (L, d, v.shape[-1]))

    def as_mats(a):  # -> (L, d, N, N)
        if q.full:
            return np.broadcast_to(a[:, None], (L, d) + a.shape[1:])
        a = per_channel(a)
        return a[..., :, None] * np.eye(a.shape[-1])

    fb, fc, bb, bc = (per_channel(v) for v in (fb, fc, bb, bc))
    FA, BA = as_mats(fa), as_mats(ba)
    dl = np.broadcast_to(dl if dl.ndim == 2 else dl[:, None], (L, d))
    N = fb.shape[-1]
    M = np.zeros((d, L, L))
    eye = np.broadcast_to(np.eye(N), (d, N, N))
    for j in range(L):
        P = eye
        for i in range(j + 1, L):
            P = FA[i] @ P  # A_i ⋯ A_{j+1}
            M[:, i, j] = np.einsum("cn,cnm,cm->c", fc[i], P, fb[j])
    for i in range(L):
        Q = eye
        for j in range(i + 1, L):
            Q = BA[j] @ Q  # ←A_j ⋯ ←A_{i+1}
            M[:, i, j] = np.einsum("cn,cnm,cm->c", bc[j], Q, bb[i])
    idx = np.arange(L)
    M[:, idx, idx] = dl.T
    return M[0] if single else M


def _semiseparable_shifted(x: Tensor, trans: Tensor, in_gen: Tensor, out_gen: Tensor, full: bool) -> Tensor:
    """shift(SS(x)) for a semiseparable SS whose output generator at slot k is
    taken from token k+1: the state sequence is shifted one token later and
    read out by ``out_gen`` at the token it lands on."""
    L, d = x.shape
    u = in_gen * T.reshape(x, (L, d, 1))
    h = linear_recurrence(trans, u, full=full)
    return T.tsum(out_gen * T.shift(h, axis=0), axis=-1)


def _ensure3(v: Tensor) -> Tensor:
    return v if v.ndim == 3 else T.reshape(v, (v.shape[0], 1, v.shape[1]))


def _transpose_apply(a: Tensor, v: Tensor) -> Tensor:
    """Per token Aᵀ v for full (L, N, N) ``a`` and (L, d, N) ``v``."""
    return v @ a  # (L, d, N) @ (L, N, N): row vector times A == (Aᵀ v)ᵀ


def quasiseparable_matmul(x, q: QuasiParams) -> Tensor:
    """QS(x) = shift(SS(x)) + flip(shift(SS(flip(x)))) + diag(delta) x.

    The forward semiseparable pass uses (fwd_a, fwd_b, fwd_c) left to right;
    the backward pass runs the same kernel on the flipped sequence with the
    backward triple.  Cost O(L·N·d) for diagonal transitions.
    """
    x = T.as_tensor(x)
    if x.ndim != 2:
        raise T.ShapeError(f"quasiseparable_matmul expects an (L, d) sequence, got {x.shape}")
    fb, fc, fa, bb, bc, ba, dl = (T.as_tensor(v, x) for v in
                                  (q.fwd_b, q.fwd_c, q.fwd_a, q.bwd_b, q.bwd_c, q.bwd_a, q.delta))
    L, d = x.shape
    for name, v in (("fwd_b", fb), ("fwd_c", fc), ("fwd_a", fa), ("bwd_b", bb), ("bwd_c", bc),
                    ("bwd_a", ba), ("delta", dl)):
        if v.shape[0] != L:
            raise T.ShapeError(f"length mismatch: x {x.shape} vs {name} {v.shape}")
    fb, fc, bb, bc = (_ensure3(v) for v in (fb, fc, bb, bc))
    if q.full:
        # readout c_iᵀ A_i  and backward input ←A_jᵀ ←c_j
        f_out = _transpose_apply(fa, fc)
        b_in = _transpose_apply(ba, bc)
        f_trans, b_trans = fa, T.permute(ba, (0, 2, 1))
    else:
        fa, ba = _ensure3(fa), _ensure3(ba)
        f_out = fa * fc
        b_in = ba * bc
        f_trans, b_trans = fa, ba
    lower = _semiseparable_shifted(x, f_trans, fb, f_out, q.full)
    upper = T.flip(_semiseparable_shifted(T.flip(x, 0), T.flip(b_trans, 0), T.flip(b_in, 0),
                                          T.flip(bb, 0), q.full), 0)
    diag = x * (dl if dl.ndim == 2 else T.reshape(dl, (L, 1)))
    return lower + upper + diag


# ---------------------------------------------------------------------------
# gated-CNN token mixer


def gated_cnn_mix(x, weight, bias=None) -> Tensor:
    """Depthwise 7³ convolution (pad 3, groups = C) over a (C, D, H, W) map."""
    x = T.as_tensor(x)
    weight = T.as_tensor(weight, x)
    bias = None if bias is None else T.as_tensor(bias, x)
    if x.ndim != 4:
        raise T.ShapeError(f"gated_cnn_mix expects a (C, D, H, W) map, got {x.shape}")
    if weight.shape != (x.shape[0], 1, 7, 7, 7):
        raise T.ShapeError(f"channel mismatch: input {x.shape} vs depthwise kernel {weight.shape}")
    return T.conv3d(x, weight, bias, stride=1, padding=3, groups=x.shape[0])


# ---------------------------------------------------------------------------
# learnable mixers used inside the encoder blocks


def _seq_conv(x: Tensor, weight: Tensor, bias: Tensor, causal: bool) -> Tensor:
    """Depthwise 1-D convolution along tokens of an (L, C) sequence."""
    L, C = x.shape
    k = weight.shape[2]
    v = T.reshape(T.permute(x, (1, 0)), (C, L, 1, 1))
    if causal:
        y = T.conv3d(v, weight, bias, padding=(k - 1, 0, 0), groups=C)[:, :L]
    else:
        y = T.conv3d(v, weight, bias, padding=(k // 2, 0, 0), groups=C)
    return T.permute(T.reshape(y, (C, L)), (1, 0))


class SelectiveSSM(nn.Module):
    """Input-dependent Δ, B, C from linear projections; diagonal decays."""

    def __init__(self, rng: SplitMix64, d: int, state_dim: int, dtype):
        self.dt_proj = nn.Linear(rng, d, d, dtype)
        self.b_proj = nn.Linear(rng, d, state_dim, dtype)
        self.c_proj = nn.Linear(rng, d, state_dim, dtype)
        # log-decay init spreads rates over states like S4D-real
        self.a_log = nn.param(np.log(np.expm1(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (d, 1)) * 0.5)),
                              dtype)
        self.D = nn.param(np.ones(d), dtype)

    def params_for(self, u: Tensor) -> SsmParams:
        delta = T.softplus(self.dt_proj(u))
        return SsmParams.from_log_decay(self.a_log, delta, self.b_proj(u), self.c_proj(u), self.D)

    def forward(self, u: Tensor) -> Tensor:
        return ssm_scan(u, self.params_for(u))


class QuasiMixer(nn.Module):
    """Data-dependent quasiseparable mixer (shared step size, separate triples)."""

    def __init__(self, rng: SplitMix64, d: int, state_dim: int, dtype):
        self.dt_proj = nn.Linear(rng, d, d, dtype)
        self.fb_proj = nn.Linear(rng, d, state_dim, dtype)
        self.fc_proj = nn.Linear(rng, d, state_dim, dtype)
        self.bb_proj = nn.Linear(rng, d, state_dim, dtype)
        self.bc_proj = nn.Linear(rng, d, state_dim, dtype)
        init = np.log(np.expm1(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (d, 1)) * 0.5))
        self.fa_log = nn.param(init, dtype)
        self.ba_log = nn.param(init.copy(), dtype)
        self.diag_proj = nn.Linear(rng, d, 1, dtype, bias=False)
        self.D = nn.param(np.ones(d), dtype)

    def params_for(self, u: Tensor) -> QuasiParams:
        L, d = u.shape
        delta = T.softplus(self.dt_proj(u))
        dl3 = T.reshape(delta, (L, d, 1))
        fa = T.exp(T.neg(dl3 * T.softplus(self.fa_log)))
        ba = T.exp(T.neg(dl3 * T.softplus(self.ba_log)))
        N = self.fb_proj.weight.shape[0]
        fb = dl3 * T.reshape(self.fb_proj(u), (L, 1, N))
        bc = dl3 * T.reshape(self.bc_proj(u), (L, 1, N))
        diag = self.diag_proj(u) + self.D  # (L, d)
        return QuasiParams(fb, self.fc_proj(u), fa, self.bb_proj(u), bc, ba, diag)

    def forward(self, u: Tensor) -> Tensor:
        return quasiseparable_matmul(u, self.params_for(u))


class SequenceMixerBlock(nn.Module):
    """Gated mixer over one flattened orientation:
    out_proj(core(silu(conv(value))) ⊙ silu(gate)), gate/value from one input projection.

    ``core`` is a selective SSM (causal token conv) or a quasiseparable mixer
    (centred token conv).
    """

    def __init__(self, rng: SplitMix64, d: int, state_dim: int, dtype, kind: str = "ssm"):
        self.in_proj = nn.Linear(rng, d, 2 * d, dtype)
        self.causal = kind == "ssm"
        k = 4 if self.causal else 3
        self.conv_weight = nn.uniform_fan_in(rng, (d, 1, k, 1, 1), k, dtype)
        self.conv_bias = nn.param(np.zeros(d), dtype)
        if kind == "ssm":
            self.core = SelectiveSSM(rng, d, state_dim, dtype)
        elif kind == "quasi":
            self.core = QuasiMixer(rng, d, state_dim, dtype)
        else:
            raise ValueError(f"unknown mixer kind {kind!r}")
        self.out_proj = nn.Linear(rng, d, d, dtype)
        self.d = d

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d:
            raise T.ShapeError(f"mixer/params mismatch: sequence {x.shape} vs mixer width {self.d}")
        d = self.d
        z = self.in_proj(x)
        value, gate = z[:, :d], z[:, d:]
        u = T.silu(_seq_conv(value, self.conv_weight, self.conv_bias, self.causal))
        y = self.core(u) * T.silu(gate)
        return self.out_proj(y)

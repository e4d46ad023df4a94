import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volumix import seqmix
from volumix import tensor as T
from volumix.rng import SplitMix64
from volumix.seqmix import QuasiParams, SsmParams
from volumix.tensor import ShapeError, Tensor


def _dense_ssm(p, x):
    return seqmix.apply_channelwise(seqmix.materialize_semiseparable(p, x.shape[0]), x)


# ---------------------------------------------------------------------------
# selective scan


def test_scan_matches_dense_example():
    rng = SplitMix64(1)
    p = seqmix.random_ssm_params(rng, 16, 2, 4)
    x = rng.normal((16, 2))
    assert np.abs(seqmix.ssm_scan(x, p).data - _dense_ssm(p, x)).max() < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 32), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_scan_matches_dense_property(L, N, d, seed):
    rng = SplitMix64(seed)
    p = seqmix.random_ssm_params(rng, L, d, N)
    x = rng.normal((L, d))
    assert np.abs(seqmix.ssm_scan(x, p).data - _dense_ssm(p, x)).max() < 1e-10


def test_scan_c_zero_is_skip(rng):
    p = seqmix.random_ssm_params(rng, 9, 3, 2)
    p.C = np.zeros_like(p.C)
    x = rng.normal((9, 3))
    assert np.allclose(seqmix.ssm_scan(x, p).data, x * p.D, atol=0, rtol=1e-15)


def test_scan_single_step(rng):
    p = seqmix.random_ssm_params(rng, 1, 2, 3)
    x = rng.normal((1, 2))
    want = (p.C[0] @ p.B[0]) * p.delta[0] * x[0] + p.D * x[0]
    assert np.allclose(seqmix.ssm_scan(x, p).data[0], want, rtol=1e-14)


def test_semiseparable_prefix_sum():
    L = 4
    p = SsmParams(np.ones((L, 1, 1)), np.ones((L, 1)), np.ones((L, 1)), np.ones((L, 1)), np.zeros(1))
    M = seqmix.materialize_semiseparable(p, L)[0]
    assert np.array_equal(M, np.tril(np.ones((L, L))))
    assert np.array_equal(M @ np.ones(L), [1.0, 2.0, 3.0, 4.0])


def test_semiseparable_zero_decay_keeps_only_diagonal(rng):
    L = 5
    p = SsmParams(np.zeros((L, 1, 1)), np.ones((L, 1)), rng.normal((L, 1)), rng.normal((L, 1)), np.zeros(1))
    M = seqmix.materialize_semiseparable(p, L)[0]
    assert np.array_equal(M, np.diag(np.diag(M)))
    assert np.allclose(np.diag(M), p.C[:, 0] * p.B[:, 0])


def test_semiseparable_rejects_bad_length(rng):
    p = seqmix.random_ssm_params(rng, 4, 1, 1)
    with pytest.raises(ValueError):
        seqmix.materialize_semiseparable(p, 0)


def test_scan_shape_mismatch(rng):
    p = seqmix.random_ssm_params(rng, 4, 2, 2)
    with pytest.raises(ShapeError):
        seqmix.ssm_scan(rng.normal((5, 2)), p)


@pytest.mark.parametrize("t", [0, 3, 7])
def test_scan_is_causal(rng, t):
    L = 10
    p = seqmix.random_ssm_params(rng, L, 2, 3)
    x = rng.normal((L, 2))
    x2 = x.copy()
    x2[t] += 1.0
    y, y2 = seqmix.ssm_scan(x, p).data, seqmix.ssm_scan(x2, p).data
    assert np.array_equal(y[:t], y2[:t])
    assert np.abs(y[t:] - y2[t:]).max() > 0


def test_scan_gradients(rng):
    L, d, N = 6, 2, 3
    p = seqmix.random_ssm_params(rng, L, d, N)
    R = Tensor(rng.normal((L, d)))
    x = Tensor(rng.normal((L, d)), requires_grad=True)
    assert T.grad_check(lambda v: T.tsum(seqmix.ssm_scan(v, p) * R), x) < 1e-6
    for field in ("abar", "delta", "B", "C", "D"):
        t = Tensor(getattr(p, field), requires_grad=True)
        q = SsmParams(**{**vars(p), field: t})
        assert T.grad_check(lambda _t: T.tsum(seqmix.ssm_scan(x.detach(), q) * R), t) < 1e-6, field


def test_full_transition_recurrence_gradient(rng):
    a = Tensor(rng.normal((5, 3, 3)) * 0.5, requires_grad=True)
    u = Tensor(rng.normal((5, 2, 3)), requires_grad=True)
    R = Tensor(rng.normal((5, 2, 3)))
    f = lambda _v: T.tsum(seqmix.linear_recurrence(a, u, full=True) * R)
    assert T.grad_check(f, a) < 1e-6
    assert T.grad_check(f, u) < 1e-6


# ---------------------------------------------------------------------------
# quasiseparable


def _qs_dense(q, x):
    return seqmix.apply_channelwise(seqmix.quasiseparable_materialize(q), x)


def test_qs_matches_dense_example():
    rng = SplitMix64(2)
    q = seqmix.random_quasi_params(rng, 8, 2)
    x = rng.normal((8, 1))
    assert np.abs(seqmix.quasiseparable_matmul(x, q).data - _qs_dense(q, x)).max() < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 32), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2), st.integers(0, 2**31))
def test_qs_matches_dense_property(L, N, d, mode, seed):
    rng = SplitMix64(seed)
    q = seqmix.random_quasi_params(rng, L, N, None if mode == 0 else d, full=mode == 2)
    x = rng.normal((L, d))
    assert np.abs(seqmix.quasiseparable_matmul(x, q).data - _qs_dense(q, x)).max() < 1e-10


def test_qs_zero_generators_is_diagonal(rng):
    q = seqmix.random_quasi_params(rng, 7, 3, 2)
    for f in ("fwd_b", "fwd_c", "bwd_b", "bwd_c"):
        setattr(q, f, np.zeros_like(getattr(q, f)))
    x = rng.normal((7, 2))
    assert np.array_equal(seqmix.quasiseparable_matmul(x, q).data, x * q.delta)


def test_qs_identity_matrix(rng):
    q = seqmix.random_quasi_params(rng, 6, 2)
    for f in ("fwd_b", "fwd_c", "bwd_b", "bwd_c"):
        setattr(q, f, np.zeros_like(getattr(q, f)))
    q.delta = np.ones(6)
    assert np.array_equal(seqmix.quasiseparable_materialize(q), np.eye(6))


def test_qs_zero_input(rng):
    q = seqmix.random_quasi_params(rng, 6, 2, 3)
    assert np.array_equal(seqmix.quasiseparable_matmul(np.zeros((6, 3)), q).data, np.zeros((6, 3)))


def test_qs_symmetric_under_swapped_triples(rng):
    L, N = 7, 3
    b, c, a = rng.normal((L, N)), rng.normal((L, N)), rng.uniform((L, N), 0.2, 1.0)
    q = QuasiParams(b, c, a, b, c, a, rng.normal((L,)))
    M = seqmix.quasiseparable_materialize(q)
    assert np.allclose(M, M.T, rtol=0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_qs_linearity(alpha, beta, seed):
    rng = SplitMix64(seed)
    q = seqmix.random_quasi_params(rng, 12, 3, 2)
    x, y = rng.normal((12, 2)), rng.normal((12, 2))
    lhs = seqmix.quasiseparable_matmul(alpha * x + beta * y, q).data
    rhs = alpha * seqmix.quasiseparable_matmul(x, q).data + beta * seqmix.quasiseparable_matmul(y, q).data
    assert np.abs(lhs - rhs).max() < 1e-9


def test_qs_length_mismatch(rng):
    q = seqmix.random_quasi_params(rng, 6, 2)
    with pytest.raises(ShapeError, match="length"):
        seqmix.quasiseparable_matmul(rng.normal((5, 1)), q)


def test_qs_is_not_causal(rng):
    L, t = 10, 6
    q = seqmix.random_quasi_params(rng, L, 2, 2)
    x = rng.normal((L, 2))
    x2 = x.copy()
    x2[t] += 1.0
    y, y2 = seqmix.quasiseparable_matmul(x, q).data, seqmix.quasiseparable_matmul(x2, q).data
    assert np.abs(y[:t] - y2[:t]).max() > 1e-6


@pytest.mark.parametrize("full", [False, True])
def test_qs_gradients(rng, full):
    L, N, d = 6, 2, 2
    q = seqmix.random_quasi_params(rng, L, N, None if full else d, full=full)
    R = Tensor(rng.normal((L, d)))
    x = Tensor(rng.normal((L, d)), requires_grad=True)
    assert T.grad_check(lambda v: T.tsum(seqmix.quasiseparable_matmul(v, q) * R), x) < 1e-6
    for field in ("fwd_b", "fwd_c", "fwd_a", "bwd_b", "bwd_c", "bwd_a", "delta"):
        t = Tensor(getattr(q, field), requires_grad=True)
        q2 = QuasiParams(**{**vars(q), field: t})
        err = T.grad_check(lambda _t: T.tsum(seqmix.quasiseparable_matmul(x.detach(), q2) * R), t)
        assert err < 1e-6, field


# ---------------------------------------------------------------------------
# gated CNN mixer and learnable blocks


def test_gated_cnn_zero_and_identity(rng):
    x = rng.normal((2, 4, 5, 3))
    zero = np.zeros((2, 1, 7, 7, 7))
    assert np.array_equal(seqmix.gated_cnn_mix(x, zero, np.zeros(2)).data, np.zeros_like(x))
    ident = zero.copy()
    ident[:, :, 3, 3, 3] = 1.0
    assert np.array_equal(seqmix.gated_cnn_mix(x, ident).data, x)


def test_gated_cnn_gradient(rng):
    w = Tensor(rng.normal((2, 1, 7, 7, 7)) * 0.1)
    R = Tensor(rng.normal((2, 4, 4, 4)))
    x = Tensor(rng.normal((2, 4, 4, 4)), requires_grad=True)
    assert T.grad_check(lambda v: T.tsum(seqmix.gated_cnn_mix(v, w) * R), x) < 1e-4


def test_gated_cnn_channel_mismatch(rng):
    with pytest.raises(ShapeError, match="channel"):
        seqmix.gated_cnn_mix(rng.normal((3, 4, 4, 4)), np.zeros((2, 1, 7, 7, 7)))


def test_ssm_mixer_block_is_causal():
    rng = SplitMix64(3)
    blk = seqmix.SequenceMixerBlock(rng, 4, 2, np.float64, "ssm")
    x = rng.normal((12, 4))
    x2 = x.copy()
    x2[8] += 1.0
    y, y2 = blk(Tensor(x)).data, blk(Tensor(x2)).data
    assert np.array_equal(y[:8], y2[:8])


def test_quasi_mixer_block_sees_future():
    rng = SplitMix64(3)
    blk = seqmix.SequenceMixerBlock(rng, 4, 2, np.float64, "quasi")
    x = rng.normal((12, 4))
    x2 = x.copy()
    x2[8] += 1.0
    y, y2 = blk(Tensor(x)).data, blk(Tensor(x2)).data
    assert np.abs(y[:7] - y2[:7]).max() > 1e-8


def test_mixer_block_width_mismatch():
    blk = seqmix.SequenceMixerBlock(SplitMix64(0), 4, 2, np.float64)
    with pytest.raises(ShapeError, match="mismatch"):
        blk(Tensor(np.zeros((5, 3))))

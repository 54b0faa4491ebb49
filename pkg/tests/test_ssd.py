"""Tests for the SSD scan kernel, dense dual oracle, and backward pass."""

import numpy as np
import pytest

from matekit.errors import DomainError, NumericError
from matekit.gradcheck import central_difference, relative_deviation
from matekit.ssd import (
    SsdParams,
    SsdState,
    bidirectional_ssd,
    ssd_backward,
    ssd_dense_matrix,
    ssd_dense_oracle,
    ssd_scan,
)


def _const_params(n, a=1.0, d_s=1):
    return SsdParams(decay=np.full(n, a),
                     b=np.ones((n, d_s)) / d_s,
                     c=np.ones((n, d_s)))


def _random_params(rng, n, d_s):
    return SsdParams(decay=rng.uniform(0.05, 1.0, size=n),
                     b=rng.standard_normal((n, d_s)),
                     c=rng.standard_normal((n, d_s)))


# ---------------------------------------------------------------------------
# forward scan
# ---------------------------------------------------------------------------


def test_prefix_sum_special_case():
    # a=1, B=C=1, d_s=1 turns the recurrence into prefix sums
    x = np.array([[1.0], [2.0], [3.0]])
    y, state = ssd_scan(x, _const_params(3))
    assert np.allclose(y, [[1.0], [3.0], [6.0]])
    assert np.allclose(state.hidden, [[6.0]])


def test_hand_computed_decay_half():
    # a=0.5: h1=1, y1=1; h2=0.5*1+1=1.5, y2=1.5
    x = np.array([[1.0], [1.0]])
    y, _ = ssd_scan(x, _const_params(2, a=0.5))
    assert np.allclose(y, [[1.0], [1.5]])


def test_zero_output_projection_gives_zero():
    rng = np.random.default_rng(0)
    params = SsdParams(decay=rng.uniform(0.1, 1.0, 8),
                       b=rng.standard_normal((8, 4)),
                       c=np.zeros((8, 4)))
    y, _ = ssd_scan(rng.standard_normal((8, 3)), params)
    assert np.array_equal(y, np.zeros((8, 3)))


def test_single_step_matches_direct_product():
    rng = np.random.default_rng(1)
    params = _random_params(rng, 1, 5)
    x = rng.standard_normal((1, 3))
    y, _ = ssd_scan(x, params)
    expect = float(params.c[0] @ params.b[0]) * x
    assert np.allclose(y, expect, atol=1e-14)


def test_initial_state_carries_into_outputs():
    rng = np.random.default_rng(2)
    params = _random_params(rng, 4, 3)
    x = rng.standard_normal((4, 2))
    h0 = rng.standard_normal((3, 2))
    y0, _ = ssd_scan(x, params)
    y1, _ = ssd_scan(x, params, init=SsdState(h0.copy()))
    # dual-form init term: C_t (prod_{k<=t} a_k) h0
    coef = np.cumprod(params.decay)
    expect = y0 + coef[:, None] * (params.c @ h0)
    assert np.allclose(y1, expect, rtol=1e-12, atol=1e-12)
    assert np.allclose(y1, ssd_dense_oracle(x, params, init=SsdState(h0)),
                       rtol=1e-12, atol=1e-12)


def test_causality_is_exact():
    # outputs before position t do not depend on x[t] at all
    rng = np.random.default_rng(3)
    params = _random_params(rng, 16, 4)
    x = rng.standard_normal((16, 3))
    y, _ = ssd_scan(x, params)
    x2 = x.copy()
    x2[10:] += rng.standard_normal((6, 3)) * 100.0
    y2, _ = ssd_scan(x2, params)
    assert np.array_equal(y[:10], y2[:10])
    assert not np.allclose(y[10:], y2[10:])


def test_scan_is_linear_in_x():
    rng = np.random.default_rng(4)
    params = _random_params(rng, 12, 4)
    x1 = rng.standard_normal((12, 2))
    x2 = rng.standard_normal((12, 2))
    y1, _ = ssd_scan(x1, params)
    y2, _ = ssd_scan(x2, params)
    y3, _ = ssd_scan(2.0 * x1 - 0.5 * x2, params)
    assert np.allclose(y3, 2.0 * y1 - 0.5 * y2, rtol=1e-12, atol=1e-12)


def test_scan_validates_inputs():
    params = _const_params(3)
    with pytest.raises(DomainError):
        ssd_scan(np.ones((4, 1)), params)
    with pytest.raises(DomainError):
        ssd_scan(np.ones(3), params)
    with pytest.raises(NumericError):
        ssd_scan(np.array([[1.0], [np.nan], [0.0]]), params)
    with pytest.raises(DomainError):
        SsdParams(decay=np.array([0.0, 0.5]), b=np.ones((2, 1)), c=np.ones((2, 1)))
    with pytest.raises(DomainError):
        SsdParams(decay=np.array([0.5, 1.5]), b=np.ones((2, 1)), c=np.ones((2, 1)))
    with pytest.raises(NumericError):
        SsdParams(decay=np.array([0.5, np.inf]), b=np.ones((2, 1)), c=np.ones((2, 1)))


# ---------------------------------------------------------------------------
# dense dual oracle
# ---------------------------------------------------------------------------


def test_dense_matrix_is_lower_triangular():
    rng = np.random.default_rng(5)
    m = ssd_dense_matrix(_random_params(rng, 10, 3))
    assert np.array_equal(np.triu(m, 1), np.zeros_like(m))


def test_dense_matrix_diagonal_is_cb_product():
    rng = np.random.default_rng(6)
    params = _random_params(rng, 10, 3)
    m = ssd_dense_matrix(params)
    assert np.allclose(np.diag(m), np.einsum("ns,ns->n", params.c, params.b))


def test_constant_decay_matrix_entries_decay_geometrically():
    params = SsdParams(decay=np.full(8, 0.5),
                       b=np.ones((8, 1)), c=np.ones((8, 1)))
    m = ssd_dense_matrix(params)
    for i in range(8):
        for j in range(i + 1):
            assert m[i, j] == pytest.approx(0.5 ** (i - j), rel=1e-12)


def test_scan_matches_oracle_small():
    rng = np.random.default_rng(7)
    params = _random_params(rng, 64, 8)
    x = rng.standard_normal((64, 4))
    y, _ = ssd_scan(x, params)
    y_ref = ssd_dense_oracle(x, params)
    assert relative_deviation(y, y_ref) <= 1e-10


def test_scan_matches_oracle_with_tiny_decays():
    # log-space products must not lose the exponent when decays underflow
    rng = np.random.default_rng(8)
    params = SsdParams(decay=rng.uniform(1e-8, 1e-3, 96),
                       b=rng.standard_normal((96, 4)),
                       c=rng.standard_normal((96, 4)))
    x = rng.standard_normal((96, 2))
    y, _ = ssd_scan(x, params)
    assert relative_deviation(y, ssd_dense_oracle(x, params)) <= 1e-10


def test_dense_oracle_refuses_large_n():
    params = _const_params(513)
    with pytest.raises(DomainError):
        ssd_dense_oracle(np.zeros((513, 1)), params)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def test_backward_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(9)
    params = _random_params(rng, 8, 3)
    x = rng.standard_normal((8, 2))
    grads = ssd_backward(x, params, np.zeros_like(x))
    for arr in (grads.dx, grads.ddecay, grads.db, grads.dc, grads.dinit):
        assert np.array_equal(arr, np.zeros_like(arr))


def test_backward_prefix_sum_case():
    # y = cumsum(x): d(sum y)/dx_t counts the positions at or after t
    x = np.array([[1.0], [2.0], [3.0]])
    params = _const_params(3)
    grads = ssd_backward(x, params, np.ones_like(x))
    assert np.allclose(grads.dx, [[3.0], [2.0], [1.0]])
    # upstream selecting only the last output: dx = 1 everywhere
    up = np.array([[0.0], [0.0], [1.0]])
    grads = ssd_backward(x, params, up)
    assert np.allclose(grads.dx, [[1.0], [1.0], [1.0]])


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_central_differences(seed):
    rng = np.random.default_rng(100 + seed)
    n, d_s, d_h = 12, 4, 3
    params = _random_params(rng, n, d_s)
    x = rng.standard_normal((n, d_h))
    h0 = rng.standard_normal((d_s, d_h))
    u = rng.standard_normal((n, d_h))  # fixed projection makes the loss scalar

    grads = ssd_backward(x, params, u, init=SsdState(h0))

    def loss_x(v):
        y, _ = ssd_scan(v, params, init=SsdState(h0))
        return float((u * y).sum())

    def loss_decay(a):
        p = SsdParams(decay=a, b=params.b, c=params.c)
        y, _ = ssd_scan(x, p, init=SsdState(h0))
        return float((u * y).sum())

    def loss_b(b):
        p = SsdParams(decay=params.decay, b=b, c=params.c)
        y, _ = ssd_scan(x, p, init=SsdState(h0))
        return float((u * y).sum())

    def loss_c(c):
        p = SsdParams(decay=params.decay, b=params.b, c=c)
        y, _ = ssd_scan(x, p, init=SsdState(h0))
        return float((u * y).sum())

    def loss_h0(h):
        y, _ = ssd_scan(x, params, init=SsdState(h))
        return float((u * y).sum())

    checks = [
        (grads.dx, central_difference(loss_x, x)),
        (grads.ddecay, central_difference(loss_decay, params.decay, eps=1e-6)),
        (grads.db, central_difference(loss_b, params.b)),
        (grads.dc, central_difference(loss_c, params.c)),
        (grads.dinit, central_difference(loss_h0, h0)),
    ]
    for analytic, numeric in checks:
        assert relative_deviation(analytic, numeric) <= 1e-6


def test_backward_validates_upstream():
    params = _const_params(3)
    x = np.ones((3, 1))
    with pytest.raises(DomainError):
        ssd_backward(x, params, np.ones((4, 1)))
    with pytest.raises(NumericError):
        ssd_backward(x, params, np.array([[1.0], [np.inf], [0.0]]))


# ---------------------------------------------------------------------------
# bidirectional wrapper
# ---------------------------------------------------------------------------


def test_bidirectional_prefix_sum_example():
    # both directions prefix sums: y[t] = cumsum + reversed-cumsum
    x = np.array([[1.0], [2.0], [3.0]])
    p = _const_params(3)
    y = bidirectional_ssd(x, p, p)
    assert np.allclose(y, [[7.0], [8.0], [9.0]])


def test_bidirectional_single_token():
    rng = np.random.default_rng(10)
    p = _random_params(rng, 1, 4)
    x = rng.standard_normal((1, 2))
    y = bidirectional_ssd(x, p, p)
    assert np.allclose(y, 2.0 * float(p.c[0] @ p.b[0]) * x, atol=1e-14)


def test_bidirectional_palindrome_symmetry():
    # shared constant params + palindromic input -> palindromic output
    n = 7
    p = _const_params(n, a=0.7, d_s=2)
    base = np.array([1.0, -2.0, 0.5, 3.0])
    x = np.concatenate([base, base[:-1][::-1]])[:, None]
    y = bidirectional_ssd(x, p, p)
    assert np.allclose(y, y[::-1], rtol=1e-12, atol=1e-12)


def test_bidirectional_concat_project():
    rng = np.random.default_rng(11)
    p1 = _random_params(rng, 5, 3)
    p2 = _random_params(rng, 5, 3)
    x = rng.standard_normal((5, 2))
    proj = rng.standard_normal((4, 2))
    y = bidirectional_ssd(x, p1, p2, combine="concat_project", proj=proj)
    y_f, _ = ssd_scan(x, p1)
    y_b = ssd_scan(x[::-1], p2)[0][::-1]
    assert np.allclose(y, np.concatenate([y_f, y_b], axis=1) @ proj)
    with pytest.raises(DomainError):
        bidirectional_ssd(x, p1, p2, combine="concat_project")
    with pytest.raises(DomainError):
        bidirectional_ssd(x, p1, p2, combine="mean")

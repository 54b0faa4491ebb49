"""Selective state-space scan (SSD) with a dense dual-form oracle.

The recurrence, per sequence position t with state h of shape (d_s, d_h):

    h_t = a_t * h_{t-1} + B_t x_t^T        a_t in (0, 1], B_t in R^{d_s}
    y_t = C_t^T h_t                        C_t in R^{d_s}

Its dense dual is an N x N lower-triangular mixing matrix

    M_ij = (C_i . B_j) * prod_{k=j+1..i} a_k      (j <= i)

with y = M x. Both forms are implemented independently; agreement between
them is the correctness oracle for the scan kernel. The backward pass is
hand-written reverse mode over the recurrence and is validated against
central finite differences.

Everything here is single-threaded float64 numpy; the batched multi-head
kernels at the bottom are what the full block uses internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError

# dense oracle is O(N^2) desk verification; refuse silly sizes by default
DENSE_ORACLE_MAX_N = 512


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {name}")


@dataclass(frozen=True)
class SsdParams:
    """Per-position scan parameters for one head.

    decay: (N,) values in (0, 1]
    b:     (N, d_s) input projection rows
    c:     (N, d_s) output projection rows
    """

    decay: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self) -> None:
        decay = np.asarray(self.decay, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        object.__setattr__(self, "decay", decay)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        if decay.ndim != 1 or b.ndim != 2 or c.ndim != 2:
            raise DomainError("decay must be (N,), b and c must be (N, d_s)")
        n = decay.shape[0]
        if b.shape[0] != n or c.shape[0] != n or b.shape[1] != c.shape[1]:
            raise DomainError(
                f"inconsistent param shapes: decay {decay.shape}, b {b.shape}, c {c.shape}")
        _require_finite("decay", decay)
        _require_finite("b", b)
        _require_finite("c", c)
        if n and (decay.min() <= 0.0 or decay.max() > 1.0):
            raise DomainError("decay values must lie in (0, 1]")

    @property
    def n(self) -> int:
        return self.decay.shape[0]

    @property
    def state_dim(self) -> int:
        return self.b.shape[1]


@dataclass
class SsdState:
    """Hidden scan state: (d_s, d_h) matrix."""

    hidden: np.ndarray


@dataclass
class SsdGrads:
    """Gradients from ssd_backward, mirroring the forward inputs."""

    dx: np.ndarray
    ddecay: np.ndarray
    db: np.ndarray
    dc: np.ndarray
    dinit: np.ndarray


def _check_scan_args(x: np.ndarray, params: SsdParams,
                     init: SsdState | None) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DomainError(f"x must be (N, d_h), got shape {x.shape}")
    if x.shape[0] != params.n:
        raise DomainError(f"x has {x.shape[0]} rows but params cover {params.n}")
    _require_finite("x", x)
    d_h = x.shape[1]
    if init is None:
        h0 = np.zeros((params.state_dim, d_h))
    else:
        h0 = np.asarray(init.hidden, dtype=np.float64)
        if h0.shape != (params.state_dim, d_h):
            raise DomainError(
                f"init state shape {h0.shape} != ({params.state_dim}, {d_h})")
        _require_finite("init", h0)
    return x, h0


def ssd_scan(x: np.ndarray, params: SsdParams,
             init: SsdState | None = None) -> tuple[np.ndarray, SsdState]:
    """Run the recurrence left to right.

    Args:
        x: (N, d_h) inputs.
        params: per-position decay and projections.
        init: optional starting state (zeros when omitted).

    Returns:
        (y, final_state) with y of shape (N, d_h).
    """
    x, h0 = _check_scan_args(x, params, init)
    y, hs = _scan_forward(x[:, None, None, :],
                          params.decay[:, None, None],
                          params.b[:, None, :],
                          params.c[:, None, :],
                          h0[None, None])
    y = y[:, 0, 0, :]
    _require_finite("y", y)
    return y, SsdState(hidden=hs[-1, 0, 0])


def ssd_dense_matrix(params: SsdParams) -> np.ndarray:
    """Materialize the lower-triangular dual mixing matrix M.

    Decay products are accumulated in log space so long chains of small
    decays underflow cleanly to zero instead of losing the exponent.
    """
    if params.n > DENSE_ORACLE_MAX_N:
        raise DomainError(
            f"dense oracle capped at N={DENSE_ORACLE_MAX_N}, got {params.n}")
    log_a = np.log(params.decay)
    prefix = np.cumsum(log_a)
    delta = prefix[:, None] - prefix[None, :]
    tril = np.tril(np.ones((params.n, params.n), dtype=bool))
    weights = np.exp(np.where(tril, delta, -np.inf))
    return (params.c @ params.b.T) * weights


def ssd_dense_oracle(x: np.ndarray, params: SsdParams,
                     init: SsdState | None = None) -> np.ndarray:
    """Evaluate y = M x through the dual form (independent of the scan)."""
    x, h0 = _check_scan_args(x, params, init)
    y = ssd_dense_matrix(params) @ x
    if init is not None:
        # h0 reaches step t scaled by prod_{k<=t} a_k
        coef = np.exp(np.cumsum(np.log(params.decay)))
        y = y + coef[:, None] * (params.c @ h0)
    return y


def ssd_backward(x: np.ndarray, params: SsdParams, upstream: np.ndarray,
                 init: SsdState | None = None) -> SsdGrads:
    """Reverse-mode gradients of ssd_scan for upstream d(loss)/dy.

    Returns gradients for x, decay, b, c, and the initial state.
    """
    x, h0 = _check_scan_args(x, params, init)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != x.shape:
        raise DomainError(f"upstream shape {g.shape} != x shape {x.shape}")
    _require_finite("upstream", g)
    _, hs = _scan_forward(x[:, None, None, :],
                          params.decay[:, None, None],
                          params.b[:, None, :],
                          params.c[:, None, :],
                          h0[None, None])
    dx, da, db, dc, dh0 = _scan_backward(
        x[:, None, None, :], params.decay[:, None, None],
        params.b[:, None, :], params.c[:, None, :],
        hs, g[:, None, None, :])
    return SsdGrads(dx=dx[:, 0, 0, :], ddecay=da[:, 0, 0], db=db[:, 0, :],
                    dc=dc[:, 0, :], dinit=dh0[0, 0])


def bidirectional_ssd(x: np.ndarray, fwd: SsdParams, bwd: SsdParams,
                      combine: str = "sum",
                      proj: np.ndarray | None = None) -> np.ndarray:
    """Forward scan plus a reversed scan over the reversed sequence.

    combine="sum" adds the two outputs; combine="concat_project" stacks
    them on the feature axis and applies the caller-supplied (2*d_h, d_out)
    projection.
    """
    x = np.asarray(x, dtype=np.float64)
    if fwd.n != bwd.n:
        raise DomainError("forward/backward params cover different lengths")
    y_f, _ = ssd_scan(x, fwd)
    y_r, _ = ssd_scan(x[::-1], bwd)
    y_b = y_r[::-1]
    if combine == "sum":
        return y_f + y_b
    if combine == "concat_project":
        if proj is None:
            raise DomainError("combine='concat_project' requires proj")
        proj = np.asarray(proj, dtype=np.float64)
        if proj.shape[0] != 2 * x.shape[1]:
            raise DomainError(
                f"proj must have {2 * x.shape[1]} rows, got {proj.shape[0]}")
        return np.concatenate([y_f, y_b], axis=1) @ proj
    raise DomainError(f"unknown combine mode {combine!r}")


# ---------------------------------------------------------------------------
# batched multi-head kernels (time-major)
# ---------------------------------------------------------------------------
#
# Shapes: x (N, B, H, P), a (N, B, H), b/c (N, B, S), state (B, H, S, P).
# b and c are shared across heads, matching the block design where the
# B/C generators emit one d_s vector per token.


def _scan_forward(x: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray,
                  h0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (y, hs) where hs[t+1] is the state after consuming step t."""
    n = x.shape[0]
    hs = np.empty((n + 1,) + h0.shape, dtype=np.float64)
    hs[0] = h0
    for t in range(n):
        hs[t + 1] = (a[t][..., None, None] * hs[t]
                     + b[t][:, None, :, None] * x[t][..., None, :])
    y = np.einsum("nbhsp,nbs->nbhp", hs[1:], c, optimize=True)
    return y, hs


def _scan_backward(x: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray,
                   hs: np.ndarray, g: np.ndarray):
    """Reverse mode through _scan_forward.

    hs is the forward state history; g is d(loss)/dy. Returns
    (dx, da, db, dc, dh0).
    """
    n = x.shape[0]
    dx = np.empty_like(x)
    da = np.empty_like(a)
    db = np.empty_like(b)
    dc = np.empty_like(c)
    G = np.zeros_like(hs[0])  # running d(loss)/dh_t, shape (B, H, S, P)
    for t in range(n - 1, -1, -1):
        # entering the loop body G holds a_{t+1} * dL/dh_{t+1}
        G = G + c[t][:, None, :, None] * g[t][..., None, :]
        da[t] = np.einsum("bhsp,bhsp->bh", G, hs[t])
        db[t] = np.einsum("bhsp,bhp->bs", G, x[t])
        dx[t] = np.einsum("bhsp,bs->bhp", G, b[t])
        dc[t] = np.einsum("bhsp,bhp->bs", hs[t + 1], g[t])
        G = a[t][..., None, None] * G
    return dx, da, db, dc, G

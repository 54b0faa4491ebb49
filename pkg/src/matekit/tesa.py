"""Temporal-equivariant windowed self-attention over (T, H, W) grids.

Tokens attend only within local 3D windows of extent (t_window, s_window,
s_window). Alternating layers shift the window lattice by half a window
along every axis (clipped at the grid boundary, no wraparound), so
information crosses window seams every other layer. All windows together
cover every token exactly once in both parities.

The forward/backward passes are batched over windows with padding masks;
the dense oracle at the bottom is an independent full-attention reference
used when a single window spans the whole grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError
from .scanlib import Shape3


@dataclass(frozen=True)
class TesaConfig:
    """Window extents, head count, and which parity this layer uses."""

    t_window: int = 8
    s_window: int = 4
    heads: int = 1
    shift_parity: int = 0

    def __post_init__(self) -> None:
        if self.t_window < 1 or self.s_window < 1:
            raise DomainError("window extents must be >= 1")
        if self.heads < 1:
            raise DomainError("heads must be >= 1")
        if self.shift_parity not in (0, 1):
            raise DomainError("shift_parity must be 0 or 1")


@dataclass(frozen=True)
class TesaWeights:
    """Per-layer projection matrices, all (d, d)."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self) -> None:
        mats = {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}
        d = self.w_q.shape[0]
        for name, m in mats.items():
            m = np.asarray(m, dtype=np.float64)
            object.__setattr__(self, name, m)
            if m.shape != (d, d):
                raise DomainError(f"{name} must be ({d}, {d}), got {m.shape}")
            if not np.isfinite(m).all():
                raise NumericError(f"non-finite values in {name}")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]


@dataclass
class TesaGrads:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


@dataclass(frozen=True)
class WindowPartition:
    """Disjoint contiguous boxes covering the grid exactly once.

    windows holds flat t-major token indices per window (t-major order
    inside each box). idx/mask are the padded batched forms: idx is
    (n_windows, max_len) with arbitrary valid indices in padded slots and
    mask marking the real ones.
    """

    shape: Shape3
    windows: tuple[np.ndarray, ...]
    idx: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_windows(cls, shape: Shape3,
                     windows: list[np.ndarray]) -> "WindowPartition":
        if not windows:
            raise DomainError("partition must contain at least one window")
        n = shape.n_tokens
        counts = np.bincount(np.concatenate(windows), minlength=n)
        if len(counts) != n or not (counts == 1).all():
            raise DomainError("windows must cover every token exactly once")
        max_len = max(w.size for w in windows)
        idx = np.zeros((len(windows), max_len), dtype=np.int64)
        mask = np.zeros((len(windows), max_len), dtype=bool)
        for i, w in enumerate(windows):
            idx[i, :w.size] = w
            mask[i, :w.size] = True
        return cls(shape=shape, windows=tuple(np.asarray(w, dtype=np.int64) for w in windows),
                   idx=idx, mask=mask)

    @property
    def n_windows(self) -> int:
        return len(self.windows)

    @property
    def max_len(self) -> int:
        return self.idx.shape[1]


def _axis_segments(length: int, window: int, shifted: bool) -> list[tuple[int, int]]:
    """Contiguous [start, stop) runs along one axis.

    Shifted lattices start half a window early: boundaries sit at
    floor(window/2) + k*window, clipped to the axis. A shift of zero
    (window 1) degenerates to the unshifted lattice.
    """
    shift = window // 2
    if shifted and shift > 0 and shift < length:
        bounds = [0] + list(range(shift, length, window)) + [length]
    else:
        bounds = list(range(0, length, window)) + [length]
    return list(zip(bounds[:-1], bounds[1:]))


def partition_windows(shape: Shape3, cfg: TesaConfig) -> WindowPartition:
    """Tile the grid into attention windows for the config's parity."""
    shifted = cfg.shift_parity == 1
    seg_t = _axis_segments(shape.t, cfg.t_window, shifted)
    seg_y = _axis_segments(shape.h, cfg.s_window, shifted)
    seg_x = _axis_segments(shape.w, cfg.s_window, shifted)
    windows = []
    for t0, t1 in seg_t:
        for y0, y1 in seg_y:
            for x0, x1 in seg_x:
                ts = np.arange(t0, t1, dtype=np.int64)
                ys = np.arange(y0, y1, dtype=np.int64)
                xs = np.arange(x0, x1, dtype=np.int64)
                box = (ts[:, None, None] * (shape.h * shape.w)
                       + ys[None, :, None] * shape.w
                       + xs[None, None, :])
                windows.append(box.ravel())
    return WindowPartition.from_windows(shape, windows)


def _check_tensor(tensor: np.ndarray) -> tuple[np.ndarray, Shape3, np.ndarray]:
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 4:
        raise DomainError(f"tensor must be (T, H, W, d), got shape {tensor.shape}")
    if not np.isfinite(tensor).all():
        raise NumericError("non-finite values in tensor")
    shape = Shape3(*tensor.shape[:3])
    x = tensor.reshape(shape.n_tokens, tensor.shape[3])
    return tensor, shape, x


def _split_heads(a: np.ndarray, heads: int) -> np.ndarray:
    # (nw, L, d) -> (nw, heads, L, d_head)
    nw, L, d = a.shape
    return a.reshape(nw, L, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    nw, h, L, dh = a.shape
    return a.transpose(0, 2, 1, 3).reshape(nw, L, h * dh)


def _attention_core(x: np.ndarray, part: WindowPartition, weights: TesaWeights,
                    heads: int) -> dict:
    """Batched masked window attention; returns output plus backward cache."""
    d = x.shape[1]
    if d % heads != 0:
        raise DomainError(f"model dim {d} not divisible by heads {heads}")
    scale = 1.0 / np.sqrt(d // heads)

    q = x @ weights.w_q
    k = x @ weights.w_k
    v = x @ weights.w_v
    qw = _split_heads(q[part.idx], heads)
    kw = _split_heads(k[part.idx], heads)
    vw = _split_heads(v[part.idx], heads)

    scores = np.einsum("whld,whmd->whlm", qw, kw, optimize=True) * scale
    key_mask = part.mask[:, None, None, :]
    scores = np.where(key_mask, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)

    ow = np.einsum("whlm,whmd->whld", probs, vw, optimize=True)
    att = np.zeros_like(x)
    att[part.idx[part.mask]] = _merge_heads(ow)[part.mask]
    out = att @ weights.w_o
    return {"x": x, "q": q, "k": k, "v": v, "qw": qw, "kw": kw, "vw": vw,
            "probs": probs, "att": att, "out": out, "scale": scale}


def tesa_forward(tensor: np.ndarray, cfg: TesaConfig, weights: TesaWeights,
                 partition: WindowPartition | None = None,
                 return_probs: bool = False):
    """Windowed multi-head attention over a (T, H, W, d) tensor.

    Returns the output tensor; with return_probs=True also returns the
    (n_windows, heads, max_len, max_len) attention probabilities and the
    window mask (padded rows/columns are still present there).
    """
    tensor, shape, x = _check_tensor(tensor)
    if weights.d != x.shape[1]:
        raise DomainError(f"weights are for d={weights.d}, tensor has d={x.shape[1]}")
    part = partition_windows(shape, cfg) if partition is None else partition
    cache = _attention_core(x, part, weights, cfg.heads)
    out = cache["out"].reshape(tensor.shape)
    if not np.isfinite(out).all():
        raise NumericError("non-finite values in attention output")
    if return_probs:
        return out, cache["probs"], part.mask
    return out


def tesa_backward(tensor: np.ndarray, cfg: TesaConfig, weights: TesaWeights,
                  upstream: np.ndarray,
                  partition: WindowPartition | None = None
                  ) -> tuple[np.ndarray, TesaGrads]:
    """Reverse mode through tesa_forward for upstream d(loss)/d(output)."""
    tensor, shape, x = _check_tensor(tensor)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != tensor.shape:
        raise DomainError(f"upstream shape {g.shape} != tensor shape {tensor.shape}")
    if not np.isfinite(g).all():
        raise NumericError("non-finite values in upstream")
    part = partition_windows(shape, cfg) if partition is None else partition
    cache = _attention_core(x, part, weights, cfg.heads)

    dy = g.reshape(x.shape)
    dw_o = cache["att"].T @ dy
    datt = dy @ weights.w_o.T

    # gather upstream into windows; padded slots carry zero
    dow = _split_heads(datt[part.idx] * part.mask[:, :, None], cfg.heads)
    probs, vw = cache["probs"], cache["vw"]
    dprobs = np.einsum("whld,whmd->whlm", dow, vw, optimize=True)
    dvw = np.einsum("whlm,whld->whmd", probs, dow, optimize=True)
    # softmax backward: rows are independent distributions
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    dscores = probs * (dprobs - inner)
    dqw = np.einsum("whlm,whmd->whld", dscores, cache["kw"], optimize=True) * cache["scale"]
    dkw = np.einsum("whlm,whld->whmd", dscores, cache["qw"], optimize=True) * cache["scale"]

    dq = np.zeros_like(x)
    dk = np.zeros_like(x)
    dv = np.zeros_like(x)
    dq[part.idx[part.mask]] = _merge_heads(dqw)[part.mask]
    dk[part.idx[part.mask]] = _merge_heads(dkw)[part.mask]
    dv[part.idx[part.mask]] = _merge_heads(dvw)[part.mask]

    grads = TesaGrads(w_q=x.T @ dq, w_k=x.T @ dk, w_v=x.T @ dv, w_o=dw_o)
    dx = dq @ weights.w_q.T + dk @ weights.w_k.T + dv @ weights.w_v.T
    return dx.reshape(tensor.shape), grads


def dense_attention_oracle(x: np.ndarray, weights: TesaWeights,
                           heads: int) -> np.ndarray:
    """Full (unwindowed) multi-head attention over an (N, d) sequence.

    Written as an explicit per-head loop so it shares no batching or
    masking machinery with the windowed kernel.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if d % heads != 0:
        raise DomainError(f"model dim {d} not divisible by heads {heads}")
    dh = d // heads
    q = x @ weights.w_q
    k = x @ weights.w_k
    v = x @ weights.w_v
    att = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        att[:, sl] = p @ v[:, sl]
    return att @ weights.w_o

"""The full block (scan branch + attention branch) and the toy denoiser.

Block layout, all operating on (B, N, d) token features over a (T, H, W)
grid:

    out = x + scale_ma * MA(x, layer) + scale_te * TE(x, layer)

MA branch: RMSNorm, per-token generators for the scan (decay a, B, C) plus
an input projection per direction, review-token augmentation, the layer's
rotating scan order forward and flipped, bidirectional state-space scan,
SwiGLU gating, output projection. TE branch: RMSNorm then windowed
attention whose window lattice parity alternates with depth. Both branch
scales start at zero, so a freshly initialized stack is exactly the
identity map.

The denoiser wraps a stack of blocks with a zero-initialized sinusoidal
time conditioning and a linear head, trained with flow matching on a toy
moving-square dataset. Every backward pass here is hand-written reverse
mode; the test suite checks all of them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import DataConfig, MateConfig, RunConfig
from .errors import DomainError, NumericError
from .scanlib import Direction, Permutation, Shape3, build_permutation, rms_schedule
from .ssd import _scan_backward, _scan_forward
from .tesa import TesaConfig, TesaWeights, partition_windows, tesa_backward, tesa_forward

# ---------------------------------------------------------------------------
# small nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(z: np.ndarray) -> np.ndarray:
    return z * _sigmoid(z)


def _silu_grad(z: np.ndarray) -> np.ndarray:
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _decay_from_raw(raw: np.ndarray) -> np.ndarray:
    # exp(-softplus(raw)) simplifies to sigmoid(-raw); stays inside (0, 1)
    return _sigmoid(-raw)


_RMS_EPS = 1e-6


def rmsnorm(x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _RMS_EPS)
    return x * r * gamma


def _rmsnorm_backward(x: np.ndarray, gamma: np.ndarray, g: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _RMS_EPS)
    xhat = x * r
    dgamma = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
    dxhat = g * gamma
    dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dgamma


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


@dataclass
class MaWeights:
    norm: np.ndarray        # (d,)
    w_in_f: np.ndarray      # (d, E*d) input projection, forward direction
    w_in_b: np.ndarray
    w_a_f: np.ndarray       # (d, G) decay generator
    b_a_f: np.ndarray       # (G,)
    w_a_b: np.ndarray
    b_a_b: np.ndarray
    w_b_f: np.ndarray       # (d, d_s)
    w_b_b: np.ndarray
    w_c_f: np.ndarray       # (d, d_s)
    w_c_b: np.ndarray
    w_gate: np.ndarray      # (d, E*d)
    w_out: np.ndarray       # (E*d, d)
    scale: np.ndarray       # () branch gate, zero at init
    w_comb: np.ndarray | None = None  # (2*E*d, E*d), concat_project only


@dataclass
class TeWeights:
    norm: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    scale: np.ndarray


@dataclass
class MateBlockWeights:
    ma: MaWeights
    te: TeWeights


@dataclass
class DenoiserWeights:
    time_w: np.ndarray      # (d, d), zero at init
    time_b: np.ndarray      # (d,), zero at init
    blocks: list[MateBlockWeights]
    head_w: np.ndarray      # (d, d)
    head_b: np.ndarray      # (d,)


def init_block_weights(cfg: MateConfig, rng: np.random.Generator) -> MateBlockWeights:
    d, inner, g, ds = cfg.d, cfg.inner_dim, cfg.scan_heads, cfg.d_state

    def dense(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

    w_comb = None
    if cfg.combine == "concat_project":
        # starts as the plain sum of the two directions
        w_comb = np.vstack([np.eye(inner), np.eye(inner)])
    ma = MaWeights(
        norm=np.ones(d),
        w_in_f=dense(d, inner), w_in_b=dense(d, inner),
        w_a_f=dense(d, g), b_a_f=np.zeros(g),
        w_a_b=dense(d, g), b_a_b=np.zeros(g),
        w_b_f=dense(d, ds), w_b_b=dense(d, ds),
        w_c_f=dense(d, ds), w_c_b=dense(d, ds),
        w_gate=dense(d, inner), w_out=dense(inner, d),
        scale=np.zeros(()), w_comb=w_comb)
    te = TeWeights(norm=np.ones(d), w_q=dense(d, d), w_k=dense(d, d),
                   w_v=dense(d, d), w_o=dense(d, d), scale=np.zeros(()))
    return MateBlockWeights(ma=ma, te=te)


def init_denoiser_weights(cfg: MateConfig, rng: np.random.Generator) -> DenoiserWeights:
    d = cfg.d
    return DenoiserWeights(
        time_w=np.zeros((d, d)), time_b=np.zeros(d),
        blocks=[init_block_weights(cfg, rng) for _ in range(cfg.layers)],
        head_w=rng.standard_normal((d, d)) / np.sqrt(d),
        head_b=np.zeros(d))


_MA_FIELDS = ("norm", "w_in_f", "w_in_b", "w_a_f", "b_a_f", "w_a_b", "b_a_b",
              "w_b_f", "w_b_b", "w_c_f", "w_c_b", "w_gate", "w_out", "scale",
              "w_comb")
_TE_FIELDS = ("norm", "w_q", "w_k", "w_v", "w_o", "scale")


def flatten_weights(w: DenoiserWeights) -> dict[str, np.ndarray]:
    """Deterministically ordered name -> array view of all parameters."""
    out = {"time.w": w.time_w, "time.b": w.time_b}
    for i, blk in enumerate(w.blocks):
        for name in _MA_FIELDS:
            arr = getattr(blk.ma, name)
            if arr is not None:
                out[f"block{i}.ma.{name}"] = arr
        for name in _TE_FIELDS:
            out[f"block{i}.te.{name}"] = getattr(blk.te, name)
    out["head.w"] = w.head_w
    out["head.b"] = w.head_b
    return out


def unflatten_weights(cfg: MateConfig, flat: dict[str, np.ndarray]) -> DenoiserWeights:
    blocks = []
    for i in range(cfg.layers):
        ma_kwargs = {}
        for name in _MA_FIELDS:
            key = f"block{i}.ma.{name}"
            ma_kwargs[name] = flat[key] if key in flat else None
        te_kwargs = {name: flat[f"block{i}.te.{name}"] for name in _TE_FIELDS}
        blocks.append(MateBlockWeights(ma=MaWeights(**ma_kwargs),
                                       te=TeWeights(**te_kwargs)))
    return DenoiserWeights(time_w=flat["time.w"], time_b=flat["time.b"],
                           blocks=blocks, head_w=flat["head.w"],
                           head_b=flat["head.b"])


# ---------------------------------------------------------------------------
# pooling helpers (batched, with the exact adjoint)
# ---------------------------------------------------------------------------


def _axis_window_counts(length: int, p: int) -> np.ndarray:
    starts = np.arange(0, length, p)
    return np.minimum(starts + p, length) - starts


def _pool_batched(grid: np.ndarray, pool: tuple[int, int, int]) -> np.ndarray:
    """Ragged mean-pool axes 1..3 of a (B, T, H, W, d) array."""
    out = grid
    for axis, p in enumerate(pool, start=1):
        if p == 1:
            continue
        starts = np.arange(0, out.shape[axis], p)
        sums = np.add.reduceat(out, starts, axis=axis)
        counts = _axis_window_counts(out.shape[axis], p)
        shape = [1] * out.ndim
        shape[axis] = len(starts)
        out = sums / counts.reshape(shape)
    return out


def _unpool_grad(dpooled: np.ndarray, dims: tuple[int, int, int],
                 pool: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of _pool_batched: spread each window grad over its cells."""
    t_len, h_len, w_len = dims
    idx_t = np.arange(t_len) // pool[0]
    idx_y = np.arange(h_len) // pool[1]
    idx_x = np.arange(w_len) // pool[2]
    div = (_axis_window_counts(t_len, pool[0])[idx_t][:, None, None]
           * _axis_window_counts(h_len, pool[1])[idx_y][None, :, None]
           * _axis_window_counts(w_len, pool[2])[idx_x][None, None, :])
    spread = dpooled[:, idx_t][:, :, idx_y][:, :, :, idx_x]
    return spread / div[None, :, :, :, None]


# ---------------------------------------------------------------------------
# MA branch
# ---------------------------------------------------------------------------


def _direction_perms(shape: Shape3, layer: int) -> dict[str, Permutation]:
    return {"f": build_permutation(shape, rms_schedule(layer, Direction.FORWARD)),
            "b": build_permutation(shape, rms_schedule(layer, Direction.FLIPPED))}


def _ma_forward(x: np.ndarray, shape: Shape3, w: MaWeights, cfg: MateConfig,
                layer: int) -> tuple[np.ndarray, dict]:
    """x is (B, N, d); returns (branch output before scaling, cache)."""
    bsz, n, d = x.shape
    inner, g_heads, p_dim, s_dim = cfg.inner_dim, cfg.scan_heads, cfg.d_head, cfg.d_state

    normed = rmsnorm(x, w.norm)
    z = normed @ w.w_gate

    review_on = cfg.review.active(shape)
    perms = _direction_perms(shape, layer)
    cache: dict = {"normed": normed, "z": z, "perms": perms, "review_on": review_on,
                   "dirs": {}}

    if review_on:
        pooled = _pool_batched(normed.reshape(bsz, *shape.dims(), d), cfg.review.pool)
        pooled_shape = Shape3(*pooled.shape[1:4])
        pooled_flat = pooled.reshape(bsz, pooled_shape.n_tokens, d)
        pooled_perms = _direction_perms(pooled_shape, layer)
        r_len = pooled_shape.n_tokens
        cache.update(pooled_shape=pooled_shape, pooled_perms=pooled_perms)
    else:
        pooled_flat, pooled_perms, r_len = None, None, 0
    cache["r_len"] = r_len

    dir_weights = {
        "f": (w.w_in_f, w.w_a_f, w.b_a_f, w.w_b_f, w.w_c_f),
        "b": (w.w_in_b, w.w_a_b, w.b_a_b, w.w_b_b, w.w_c_b),
    }
    y_native = {}
    for direction, (w_in, w_a, b_a, w_b, w_c) in dir_weights.items():
        body = normed[:, perms[direction].inverse]
        if review_on:
            overview = pooled_flat[:, pooled_perms[direction].inverse]
            aug = np.concatenate([overview, body], axis=1)
        else:
            aug = body
        m = aug.shape[1]

        xin = (aug @ w_in).reshape(bsz, m, g_heads, p_dim)
        araw = aug @ w_a + b_a
        a = _decay_from_raw(araw)
        bmat = aug @ w_b
        cmat = aug @ w_c

        y_seq, hs = _scan_forward(
            xin.transpose(1, 0, 2, 3), a.transpose(1, 0, 2),
            bmat.transpose(1, 0, 2), cmat.transpose(1, 0, 2),
            np.zeros((bsz, g_heads, s_dim, p_dim)))
        body_y = y_seq[r_len:].transpose(1, 0, 2, 3)          # (B, N, G, P)
        y_native[direction] = body_y[:, perms[direction].forward]
        cache["dirs"][direction] = {"aug": aug, "xin": xin, "araw": araw, "a": a,
                                    "b": bmat, "c": cmat, "hs": hs}

    y_f = y_native["f"].reshape(bsz, n, inner)
    y_b = y_native["b"].reshape(bsz, n, inner)
    if cfg.combine == "concat_project":
        y_cat = np.concatenate([y_f, y_b], axis=2)
        y_comb = y_cat @ w.w_comb
        cache["y_cat"] = y_cat
    else:
        y_comb = y_f + y_b
    gated = y_comb * _silu(z)
    out = gated @ w.w_out
    cache.update(y_comb=y_comb, out=out)
    return out, cache


def _ma_backward(x: np.ndarray, shape: Shape3, w: MaWeights, cfg: MateConfig,
                 g_out: np.ndarray, cache: dict,
                 grads: dict[str, np.ndarray], prefix: str) -> np.ndarray:
    """Backward of _ma_forward; fills grads[prefix + name], returns dx."""
    bsz, n, d = x.shape
    inner, g_heads, p_dim = cfg.inner_dim, cfg.scan_heads, cfg.d_head
    normed, z = cache["normed"], cache["z"]
    perms, r_len = cache["perms"], cache["r_len"]

    dgated = g_out @ w.w_out.T
    gated = cache["y_comb"] * _silu(z)
    grads[prefix + "w_out"] = gated.reshape(-1, inner).T @ g_out.reshape(-1, d)
    dy_comb = dgated * _silu(z)
    dz = dgated * cache["y_comb"] * _silu_grad(z)

    if cfg.combine == "concat_project":
        grads[prefix + "w_comb"] = cache["y_cat"].reshape(-1, 2 * inner).T \
            @ dy_comb.reshape(-1, inner)
        dy_cat = dy_comb @ w.w_comb.T
        dy_dirs = {"f": dy_cat[..., :inner], "b": dy_cat[..., inner:]}
    else:
        dy_dirs = {"f": dy_comb, "b": dy_comb}

    dnormed = dz @ w.w_gate.T
    grads[prefix + "w_gate"] = normed.reshape(-1, d).T @ dz.reshape(-1, inner)

    dpooled_flat = None
    dir_weights = {
        "f": ("w_in_f", "w_a_f", "b_a_f", "w_b_f", "w_c_f"),
        "b": ("w_in_b", "w_a_b", "b_a_b", "w_b_b", "w_c_b"),
    }
    for direction, (k_in, k_a, k_ba, k_b, k_c) in dir_weights.items():
        dcache = cache["dirs"][direction]
        aug, a, araw = dcache["aug"], dcache["a"], dcache["araw"]
        m = aug.shape[1]
        dy_body = dy_dirs[direction].reshape(bsz, n, g_heads, p_dim)
        # invert the un-permute gather, then pad review rows with zeros
        dy_seq = np.zeros((m, bsz, g_heads, p_dim))
        dy_seq[r_len:] = dy_body[:, perms[direction].inverse].transpose(1, 0, 2, 3)

        dxin_t, da_t, db_t, dc_t, _ = _scan_backward(
            dcache["xin"].transpose(1, 0, 2, 3), a.transpose(1, 0, 2),
            dcache["b"].transpose(1, 0, 2), dcache["c"].transpose(1, 0, 2),
            dcache["hs"], dy_seq)
        dxin = dxin_t.transpose(1, 0, 2, 3).reshape(bsz, m, inner)
        da = da_t.transpose(1, 0, 2)
        db = db_t.transpose(1, 0, 2)
        dc = dc_t.transpose(1, 0, 2)
        daraw = da * (-a * (1.0 - a))

        aug2 = aug.reshape(-1, d)
        grads[prefix + k_in] = aug2.T @ dxin.reshape(-1, inner)
        grads[prefix + k_a] = aug2.T @ daraw.reshape(-1, g_heads)
        grads[prefix + k_ba] = daraw.reshape(-1, g_heads).sum(axis=0)
        grads[prefix + k_b] = aug2.T @ db.reshape(-1, cfg.d_state)
        grads[prefix + k_c] = aug2.T @ dc.reshape(-1, cfg.d_state)

        daug = (dxin @ getattr(w, k_in).T + daraw @ getattr(w, k_a).T
                + db @ getattr(w, k_b).T + dc @ getattr(w, k_c).T)
        dbody_seq = daug[:, r_len:]
        dnormed += dbody_seq[:, perms[direction].forward]
        if r_len:
            doverview = daug[:, :r_len]
            pooled_perm = cache["pooled_perms"][direction]
            if dpooled_flat is None:
                dpooled_flat = np.zeros((bsz, r_len, d))
            dpooled_flat += doverview[:, pooled_perm.forward]

    if dpooled_flat is not None:
        pooled_shape = cache["pooled_shape"]
        dpooled = dpooled_flat.reshape(bsz, *pooled_shape.dims(), d)
        dnormed += _unpool_grad(dpooled, shape.dims(), cfg.review.pool
                                ).reshape(bsz, n, d)

    dx, dnorm = _rmsnorm_backward(x, w.norm, dnormed)
    grads[prefix + "norm"] = dnorm
    return dx


# ---------------------------------------------------------------------------
# TE branch
# ---------------------------------------------------------------------------


def _layer_tesa_cfg(cfg: MateConfig, layer: int) -> TesaConfig:
    return replace(cfg.tesa, shift_parity=layer % 2)


def _te_forward(x: np.ndarray, shape: Shape3, w: TeWeights, cfg: MateConfig,
                layer: int) -> tuple[np.ndarray, dict]:
    bsz, n, d = x.shape
    normed = rmsnorm(x, w.norm)
    tcfg = _layer_tesa_cfg(cfg, layer)
    part = partition_windows(shape, tcfg)
    weights = TesaWeights(w_q=w.w_q, w_k=w.w_k, w_v=w.w_v, w_o=w.w_o)
    out = np.empty_like(normed)
    for i in range(bsz):
        out[i] = tesa_forward(normed[i].reshape(*shape.dims(), d), tcfg, weights,
                              partition=part).reshape(n, d)
    return out, {"normed": normed, "tcfg": tcfg, "part": part, "weights": weights,
                 "out": out}


def _te_backward(x: np.ndarray, shape: Shape3, w: TeWeights, cfg: MateConfig,
                 g_out: np.ndarray, cache: dict,
                 grads: dict[str, np.ndarray], prefix: str) -> np.ndarray:
    bsz, n, d = x.shape
    normed = cache["normed"]
    dnormed = np.empty_like(normed)
    acc = {"w_q": np.zeros((d, d)), "w_k": np.zeros((d, d)),
           "w_v": np.zeros((d, d)), "w_o": np.zeros((d, d))}
    for i in range(bsz):
        dgrid, gw = tesa_backward(normed[i].reshape(*shape.dims(), d),
                                  cache["tcfg"], cache["weights"],
                                  g_out[i].reshape(*shape.dims(), d),
                                  partition=cache["part"])
        dnormed[i] = dgrid.reshape(n, d)
        for name in acc:
            acc[name] += getattr(gw, name)
    for name, arr in acc.items():
        grads[prefix + name] = arr
    dx, dnorm = _rmsnorm_backward(x, w.norm, dnormed)
    grads[prefix + "norm"] = dnorm
    return dx


# ---------------------------------------------------------------------------
# block and denoiser
# ---------------------------------------------------------------------------


def mate_block_forward(x: np.ndarray, shape: Shape3, w: MateBlockWeights,
                       cfg: MateConfig, layer: int,
                       want_cache: bool = False):
    """One residual block over (B, N, d) features."""
    if x.ndim != 3 or x.shape[1] != shape.n_tokens or x.shape[2] != cfg.d:
        raise DomainError(f"x must be (B, {shape.n_tokens}, {cfg.d}), got {x.shape}")
    ma_out, ma_cache = _ma_forward(x, shape, w.ma, cfg, layer)
    te_out, te_cache = _te_forward(x, shape, w.te, cfg, layer)
    out = x + w.ma.scale * ma_out + w.te.scale * te_out
    if want_cache:
        return out, {"x": x, "ma_out": ma_out, "te_out": te_out,
                     "ma": ma_cache, "te": te_cache}
    return out


def mate_block_backward(cfg: MateConfig, w: MateBlockWeights, shape: Shape3,
                        layer: int, g: np.ndarray, cache: dict,
                        grads: dict[str, np.ndarray], prefix: str) -> np.ndarray:
    x = cache["x"]
    grads[prefix + "ma.scale"] = np.array((g * cache["ma_out"]).sum())
    grads[prefix + "te.scale"] = np.array((g * cache["te_out"]).sum())
    dx = g.copy()
    dx += _ma_backward(x, shape, w.ma, cfg, w.ma.scale * g, cache["ma"],
                       grads, prefix + "ma.")
    dx += _te_backward(x, shape, w.te, cfg, w.te.scale * g, cache["te"],
                       grads, prefix + "te.")
    return dx


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of flow time t in [0, 1], shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.ndim != 1:
        raise DomainError(f"t must be scalar or 1-D, got shape {t.shape}")
    if not np.isfinite(t).all():
        raise NumericError("non-finite flow time")
    if (t < 0).any() or (t > 1).any():
        raise DomainError("flow time must lie in [0, 1]")
    half = dim // 2
    freqs = np.pi * (2.0 ** np.arange(half))
    ang = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if feats.shape[1] < dim:  # odd dim: pad a constant channel
        feats = np.concatenate([feats, np.ones((t.shape[0], 1))], axis=1)
    return feats


def denoiser_forward(x: np.ndarray, t, w: DenoiserWeights, cfg: MateConfig,
                     want_cache: bool = False, return_features: bool = False):
    """Predict flow velocity for (B, T, H, W, d) tokens at times t (B,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5 or x.shape[4] != cfg.d:
        raise DomainError(f"x must be (B, T, H, W, {cfg.d}), got {x.shape}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite values in x")
    bsz = x.shape[0]
    shape = Shape3(*x.shape[1:4])
    feats = time_features(t, cfg.d)
    if feats.shape[0] == 1 and bsz > 1:
        feats = np.repeat(feats, bsz, axis=0)
    if feats.shape[0] != bsz:
        raise DomainError(f"got {feats.shape[0]} times for batch of {bsz}")
    cond = feats @ w.time_w + w.time_b

    h = x.reshape(bsz, shape.n_tokens, cfg.d) + cond[:, None, :]
    caches = []
    for layer, blk in enumerate(w.blocks):
        if want_cache:
            h, c = mate_block_forward(h, shape, blk, cfg, layer, want_cache=True)
            caches.append(c)
        else:
            h = mate_block_forward(h, shape, blk, cfg, layer)
    out = (h @ w.head_w + w.head_b).reshape(x.shape)
    if not np.isfinite(out).all():
        raise NumericError("non-finite denoiser output")
    if want_cache:
        return out, {"x": x, "feats": feats, "h_final": h, "blocks": caches,
                     "shape": shape}
    if return_features:
        return out, h.reshape(x.shape)
    return out


def denoiser_backward(g: np.ndarray, w: DenoiserWeights, cfg: MateConfig,
                      cache: dict) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of all weights (flat dict) plus d(loss)/dx."""
    shape: Shape3 = cache["shape"]
    bsz = g.shape[0]
    g2 = g.reshape(bsz, shape.n_tokens, cfg.d)
    grads: dict[str, np.ndarray] = {}
    grads["head.w"] = cache["h_final"].reshape(-1, cfg.d).T @ g2.reshape(-1, cfg.d)
    grads["head.b"] = g2.reshape(-1, cfg.d).sum(axis=0)
    dh = g2 @ w.head_w.T
    for layer in range(len(w.blocks) - 1, -1, -1):
        dh = mate_block_backward(cfg, w.blocks[layer], shape, layer, dh,
                                 cache["blocks"][layer], grads, f"block{layer}.")
    dcond = dh.sum(axis=1)
    grads["time.w"] = cache["feats"].T @ dcond
    grads["time.b"] = dcond.sum(axis=0)
    dx = dh.reshape(g.shape)
    return dx, grads


# ---------------------------------------------------------------------------
# flow matching
# ---------------------------------------------------------------------------


@dataclass
class FlowMatchSample:
    """A batch of interpolation endpoints and times: x0 noise, x1 data."""

    x0: np.ndarray   # (B, T, H, W, d)
    x1: np.ndarray
    t: np.ndarray    # (B,) in [0, 1]

    def __post_init__(self) -> None:
        if self.x0.shape != self.x1.shape:
            raise DomainError("x0 and x1 must have identical shapes")
        if self.t.shape != (self.x0.shape[0],):
            raise DomainError("t must be (batch,)")
        if (self.t < 0).any() or (self.t > 1).any():
            raise DomainError("flow time must lie in [0, 1]")


def velocity_mse(pred: np.ndarray, target: np.ndarray
                 ) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to pred."""
    if pred.shape != target.shape:
        raise DomainError("prediction/target shape mismatch")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def flow_match_loss(sample: FlowMatchSample, w: DenoiserWeights, cfg: MateConfig,
                    with_grads: bool = False):
    """Flow-matching objective on the straight-line path.

    x_t = (1 - t) x0 + t x1, regression target v = x1 - x0.
    """
    t = sample.t[:, None, None, None, None]
    x_t = (1.0 - t) * sample.x0 + t * sample.x1
    target = sample.x1 - sample.x0
    if not with_grads:
        pred = denoiser_forward(x_t, sample.t, w, cfg)
        return velocity_mse(pred, target)[0]
    pred, cache = denoiser_forward(x_t, sample.t, w, cfg, want_cache=True)
    loss, dpred = velocity_mse(pred, target)
    _, grads = denoiser_backward(dpred, w, cfg, cache)
    return loss, grads


# ---------------------------------------------------------------------------
# toy data
# ---------------------------------------------------------------------------


def moving_square_batch(rng: np.random.Generator, data: DataConfig, d: int,
                        batch: int) -> np.ndarray:
    """Videos of a lit square translating with constant velocity.

    The square wraps around the frame (torus), so every frame lights exactly
    square^2 pixels and the per-video energy is a known constant. All d
    channels carry the same pattern.
    """
    out = np.zeros((batch, data.t, data.h, data.w, d))
    side = data.square
    for i in range(batch):
        y0 = int(rng.integers(0, data.h))
        x0 = int(rng.integers(0, data.w))
        vy = int(rng.integers(-data.vmax, data.vmax + 1))
        vx = int(rng.integers(-data.vmax, data.vmax + 1))
        for frame in range(data.t):
            ys = (y0 + vy * frame + np.arange(side)) % data.h
            xs = (x0 + vx * frame + np.arange(side)) % data.w
            out[i, frame, ys[:, None], xs[None, :], :] = data.amplitude
    return out


def toy_data_energy(data: DataConfig) -> float:
    """Exact mean squared value of a moving-square video."""
    return data.amplitude ** 2 * data.square ** 2 / (data.h * data.w)


# ---------------------------------------------------------------------------
# optimizers (state over the flat weight dict)
# ---------------------------------------------------------------------------


class SgdMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, weights: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        for name, w in weights.items():
            g = grads[name]
            v = self.velocity.get(name)
            v = self.momentum * v + g if v is not None else g.copy()
            self.velocity[name] = v
            w -= self.lr * v


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, weights: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, w in weights.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(w))
            v = self.v.get(name, np.zeros_like(w))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            w -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(run_cfg: RunConfig):
    tr = run_cfg.train
    if tr.optimizer == "adam":
        return Adam(lr=tr.lr, beta1=tr.beta1, beta2=tr.beta2, eps=tr.eps)
    return SgdMomentum(lr=tr.lr, momentum=tr.momentum)


# ---------------------------------------------------------------------------
# training and sampling
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    weights: DenoiserWeights
    losses: list[float]
    steps: int
    seed: int


def train_toy(run_cfg: RunConfig, steps: int, seed: int) -> TrainResult:
    """Train the denoiser on moving squares with flow matching.

    Fully deterministic for a given (config, steps, seed): one rng stream
    drives init, data, noise, and times, and every numeric op is a plain
    single-threaded numpy call.
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    cfg = run_cfg.model
    data = run_cfg.data
    rng = np.random.default_rng(seed)
    weights = init_denoiser_weights(cfg, rng)
    flat = flatten_weights(weights)
    opt = make_optimizer(run_cfg)
    losses: list[float] = []
    for step in range(steps):
        x1 = moving_square_batch(rng, data, cfg.d, run_cfg.train.batch)
        x0 = rng.standard_normal(x1.shape)
        t = rng.uniform(0.0, 1.0, size=x1.shape[0])
        sample = FlowMatchSample(x0=x0, x1=x1, t=t)
        loss, grads = flow_match_loss(sample, weights, cfg, with_grads=True)
        if not np.isfinite(loss):
            raise NumericError(f"training diverged at step {step}: loss={loss}")
        losses.append(loss)
        opt.step(flat, grads)
    return TrainResult(weights=weights, losses=losses, steps=steps, seed=seed)


def smoothed_endpoints(losses: list[float], window: int = 20
                       ) -> tuple[float, float]:
    """Mean loss over the first and last `window` steps."""
    if not losses:
        raise DomainError("empty loss history")
    k = min(window, len(losses))
    return float(np.mean(losses[:k])), float(np.mean(losses[-k:]))


def euler_sample(w: DenoiserWeights, cfg: MateConfig, shape: Shape3,
                 steps: int, seed: int) -> np.ndarray:
    """Integrate the learned velocity field from noise with fixed steps.

    Returns one (T, H, W, d) sample: x_{k+1} = x_k + v(x_k, k/steps)/steps.
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, *shape.dims(), cfg.d))
    for k in range(steps):
        t = k / steps
        v = denoiser_forward(x, np.array([t]), w, cfg)
        x = x + v / steps
        if not np.isfinite(x).all():
            raise NumericError(f"sampling diverged at step {k}")
    return x[0]

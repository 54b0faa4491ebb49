"""Review tokens: a pooled overview prepended to the scan sequence.

A causal scan only sees what came before, so early body tokens act with no
global context. The review mechanism pools the token grid into a coarse
overview (non-overlapping window means), scans the overview with the same
layer schedule, and prepends it to the body sequence. The scan state is
warmed by the overview before any body token arrives; review outputs are
stripped afterwards and never leave the block.

Pooling windows follow the grid shape: ragged boundary windows average only
the cells that exist (no padding values are invented).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .scanlib import ScanSchedule, Shape3, apply_permutation, build_permutation


@dataclass(frozen=True)
class ReviewConfig:
    """Pooling factors per axis plus the enable switch.

    min_tokens gates the mechanism by body size: review is applied when
    enabled and the body has at least min_tokens tokens. The default of 0
    means always-on.
    """

    p_t: int = 8
    p_y: int = 4
    p_x: int = 4
    enabled: bool = True
    min_tokens: int = 0

    def __post_init__(self) -> None:
        for name, v in (("p_t", self.p_t), ("p_y", self.p_y), ("p_x", self.p_x)):
            if not isinstance(v, int) or v < 1:
                raise DomainError(f"ReviewConfig.{name} must be a positive int, got {v!r}")
        if self.min_tokens < 0:
            raise DomainError("ReviewConfig.min_tokens must be >= 0")

    @property
    def pool(self) -> tuple[int, int, int]:
        return (self.p_t, self.p_y, self.p_x)

    def pooled_shape(self, shape: Shape3) -> Shape3:
        return Shape3(-(-shape.t // self.p_t),
                      -(-shape.h // self.p_y),
                      -(-shape.w // self.p_x))

    def review_len(self, shape: Shape3) -> int:
        return self.pooled_shape(shape).n_tokens

    def active(self, shape: Shape3) -> bool:
        return self.enabled and shape.n_tokens >= self.min_tokens


@dataclass(frozen=True)
class AugmentedSequence:
    """A scan sequence with review_len overview tokens in front."""

    tokens: np.ndarray
    review_len: int
    body_len: int

    def __post_init__(self) -> None:
        if self.review_len < 0 or self.body_len < 0:
            raise DomainError("lengths must be non-negative")
        if self.tokens.shape[0] != self.review_len + self.body_len:
            raise DomainError(
                f"token count {self.tokens.shape[0]} != "
                f"review_len {self.review_len} + body_len {self.body_len}")


def _pool_axis(arr: np.ndarray, axis: int, p: int) -> np.ndarray:
    if p == 1:
        return arr
    length = arr.shape[axis]
    starts = np.arange(0, length, p)
    sums = np.add.reduceat(arr, starts, axis=axis)
    counts = np.minimum(starts + p, length) - starts
    shape = [1] * arr.ndim
    shape[axis] = len(starts)
    return sums / counts.reshape(shape)


def pool_overview(tensor: np.ndarray, cfg: ReviewConfig) -> np.ndarray:
    """Mean-pool a (T, H, W, ...) tensor by (p_t, p_y, p_x).

    Boundary windows that hang over the edge average only the existing
    cells, so a constant tensor pools to the same constant everywhere.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim < 3:
        raise DomainError(f"tensor must be (T, H, W, ...), got shape {tensor.shape}")
    out = tensor
    for axis, p in enumerate(cfg.pool):
        out = _pool_axis(out, axis, p)
    return out


def augment_sequence(body: np.ndarray, pooled: np.ndarray,
                     schedule: ScanSchedule) -> AugmentedSequence:
    """Prepend the scanned overview to an already-scanned body sequence.

    The overview is laid out with the same schedule (variant and direction)
    applied to the pooled grid, so in the flipped direction the flipped
    overview still sits in front of the flipped body.
    """
    body = np.asarray(body)
    pooled = np.asarray(pooled)
    if pooled.ndim < 3:
        raise DomainError(f"pooled must be (T', H', W', ...), got {pooled.shape}")
    if body.ndim < 1:
        raise DomainError("body must be a sequence of tokens")
    if pooled.shape[3:] != body.shape[1:]:
        raise DomainError(
            f"feature shape mismatch: pooled {pooled.shape[3:]} vs body {body.shape[1:]}")
    pooled_shape = Shape3(*pooled.shape[:3])
    perm = build_permutation(pooled_shape, schedule)
    pooled_seq = apply_permutation(pooled, perm)
    tokens = np.concatenate([pooled_seq, body], axis=0)
    return AugmentedSequence(tokens=tokens, review_len=pooled_seq.shape[0],
                             body_len=body.shape[0])


def strip_review(aug: AugmentedSequence) -> np.ndarray:
    """Drop the overview outputs, keeping the trailing body positions."""
    return aug.tokens[aug.review_len:]

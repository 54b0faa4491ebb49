"""Scan orders for (T, H, W) token grids.

A video latent is a dense grid of T*H*W tokens. A scan order lays that grid
out as a 1-D sequence; state-space layers consume the sequence, so the order
decides which tokens end up far apart. This module provides:

  * the rotational multi-scan (RMS) family: four raster orders that rotate
    with layer depth (layer mod 4 picks the axis nesting),
  * a serpentine (zigzag) family in the same four axis nestings,
  * flipped (reversed) directions for any order,
  * materialized permutations plus the adjacency statistic d_k that measures
    how far axis-adjacent tokens sit in sequence space under the best of the
    first k layers.

Coordinates are (t, y, x) and flat tensor indexing is t-major row-major,
i.e. flat = t*H*W + y*W + x.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from .errors import DomainError

# ---------------------------------------------------------------------------
# shapes, variants, schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Shape3:
    """Extent of a token grid along (t, y, x)."""

    t: int
    h: int
    w: int

    def __post_init__(self) -> None:
        for name, v in (("t", self.t), ("h", self.h), ("w", self.w)):
            if not isinstance(v, int) or v < 1:
                raise DomainError(f"Shape3.{name} must be a positive int, got {v!r}")

    @property
    def n_tokens(self) -> int:
        return self.t * self.h * self.w

    def dims(self) -> tuple[int, int, int]:
        return (self.t, self.h, self.w)


class ScanOrder(IntEnum):
    """Axis nesting of a raster scan, indexed by layer mod 4.

    The value string below lists axes outer-to-inner.
    """

    SPATIAL_ROW = 0     # t, y, x : frame by frame, rows within a frame
    SPATIAL_COLUMN = 1  # t, x, y : frame by frame, columns within a frame
    TEMPORAL_ROW = 2    # y, x, t : time innermost, rows of columns outermost
    TEMPORAL_COLUMN = 3  # x, y, t : time innermost, columns of rows outermost


# Axis nesting per order: positions of (outer, mid, inner) in (t, y, x).
_ORDER_AXES: dict[ScanOrder, tuple[int, int, int]] = {
    ScanOrder.SPATIAL_ROW: (0, 1, 2),
    ScanOrder.SPATIAL_COLUMN: (0, 2, 1),
    ScanOrder.TEMPORAL_ROW: (1, 2, 0),
    ScanOrder.TEMPORAL_COLUMN: (2, 1, 0),
}


@dataclass(frozen=True)
class ScanVariant:
    """A scan order plus whether the traversal is serpentine.

    serpentine=False is a plain raster (the RMS family); serpentine=True
    reverses the inner axis on every line and the middle axis on every
    frame, so consecutive sequence positions are always axis-adjacent.
    """

    order: ScanOrder
    serpentine: bool = False


class Direction(Enum):
    FORWARD = "forward"
    FLIPPED = "flipped"


def rms_variant(layer: int) -> ScanVariant:
    """RMS variant for a layer: the order rotates with period 4."""
    if layer < 0:
        raise DomainError(f"layer must be >= 0, got {layer}")
    return ScanVariant(ScanOrder(layer % 4), serpentine=False)


def zigzag_variant(layer: int) -> ScanVariant:
    """Serpentine variant in the same axis nesting rotation as RMS."""
    if layer < 0:
        raise DomainError(f"layer must be >= 0, got {layer}")
    return ScanVariant(ScanOrder(layer % 4), serpentine=True)


@dataclass(frozen=True)
class ScanSchedule:
    """Which order a given layer uses, and in which direction."""

    layer_index: int
    variant: ScanVariant
    direction: Direction = Direction.FORWARD

    def __post_init__(self) -> None:
        if self.layer_index < 0:
            raise DomainError(f"layer_index must be >= 0, got {self.layer_index}")


def rms_schedule(layer: int, direction: Direction = Direction.FORWARD) -> ScanSchedule:
    return ScanSchedule(layer, rms_variant(layer), direction)


def zigzag_schedule(layer: int, direction: Direction = Direction.FORWARD) -> ScanSchedule:
    return ScanSchedule(layer, zigzag_variant(layer), direction)


def rowmajor_schedule(layer: int, direction: Direction = Direction.FORWARD) -> ScanSchedule:
    """Fixed spatial-row-major at every layer (the no-rotation baseline)."""
    return ScanSchedule(layer, ScanVariant(ScanOrder.SPATIAL_ROW), direction)


SCHEDULE_FAMILIES = ("rms", "rowmajor", "zigzag")


def family_schedule(family: str, layer: int,
                    direction: Direction = Direction.FORWARD) -> ScanSchedule:
    if family == "rms":
        return rms_schedule(layer, direction)
    if family == "rowmajor":
        return rowmajor_schedule(layer, direction)
    if family == "zigzag":
        return zigzag_schedule(layer, direction)
    raise DomainError(f"unknown scan family {family!r}; expected one of {SCHEDULE_FAMILIES}")


# ---------------------------------------------------------------------------
# scalar index formulas
# ---------------------------------------------------------------------------


def _check_coord(shape: Shape3, coord: tuple[int, int, int]) -> None:
    t, y, x = coord
    if not (0 <= t < shape.t and 0 <= y < shape.h and 0 <= x < shape.w):
        raise DomainError(f"coord {coord} out of range for shape {shape.dims()}")


def rms_index(shape: Shape3, layer: int, coord: tuple[int, int, int]) -> int:
    """Sequence position of a token under the RMS order for `layer`.

    The four orders, selected by layer mod 4:

        0: n = t*(H*W) + y*W + x
        1: n = t*(H*W) + x*H + y
        2: n = y*(T*W) + x*T + t
        3: n = x*(T*H) + y*T + t
    """
    if layer < 0:
        raise DomainError(f"layer must be >= 0, got {layer}")
    _check_coord(shape, coord)
    t, y, x = coord
    T, H, W = shape.dims()
    v = layer % 4
    if v == 0:
        return t * (H * W) + y * W + x
    if v == 1:
        return t * (H * W) + x * H + y
    if v == 2:
        return y * (T * W) + x * T + t
    return x * (T * H) + y * T + t


def zigzag_index(shape: Shape3, layer: int, coord: tuple[int, int, int]) -> int:
    """Sequence position under the serpentine order for `layer`.

    Same axis nesting as rms_index, but the inner axis reverses on every
    line and the middle axis reverses on every outer step, so position n and
    n+1 always differ by one step along a single axis.
    """
    if layer < 0:
        raise DomainError(f"layer must be >= 0, got {layer}")
    _check_coord(shape, coord)
    dims = shape.dims()
    ax_out, ax_mid, ax_in = _ORDER_AXES[ScanOrder(layer % 4)]
    d_mid, d_in = dims[ax_mid], dims[ax_in]
    c_out, c_mid, c_in = coord[ax_out], coord[ax_mid], coord[ax_in]

    j_out = c_out
    j_mid = c_mid if j_out % 2 == 0 else d_mid - 1 - c_mid
    line = j_out * d_mid + j_mid
    j_in = c_in if line % 2 == 0 else d_in - 1 - c_in
    return j_out * (d_mid * d_in) + j_mid * d_in + j_in


# ---------------------------------------------------------------------------
# materialized permutations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Permutation:
    """A bijection between flat tensor indices and sequence positions.

    forward[i] is the sequence position of the token with t-major flat
    index i; inverse[p] is the flat index of the token at position p.
    """

    shape: Shape3
    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, shape: Shape3, forward: np.ndarray) -> "Permutation":
        forward = np.asarray(forward, dtype=np.int64)
        n = shape.n_tokens
        if forward.shape != (n,):
            raise DomainError(f"forward must have shape ({n},), got {forward.shape}")
        counts = np.bincount(forward, minlength=n)
        if forward.min(initial=0) < 0 or forward.max(initial=0) >= n or not (counts == 1).all():
            raise DomainError("forward is not a bijection onto range(n)")
        inverse = np.empty(n, dtype=np.int64)
        inverse[forward] = np.arange(n, dtype=np.int64)
        return cls(shape, forward, inverse)

    @property
    def n(self) -> int:
        return self.shape.n_tokens


def _position_grid(shape: Shape3, variant: ScanVariant) -> np.ndarray:
    """(T, H, W) int64 array of sequence positions for a forward variant."""
    dims = shape.dims()
    ax_out, ax_mid, ax_in = _ORDER_AXES[variant.order]
    d_mid, d_in = dims[ax_mid], dims[ax_in]
    grids = np.indices(dims, dtype=np.int64)
    c_out, c_mid, c_in = grids[ax_out], grids[ax_mid], grids[ax_in]
    if variant.serpentine:
        j_out = c_out
        j_mid = np.where(j_out % 2 == 0, c_mid, d_mid - 1 - c_mid)
        line = j_out * d_mid + j_mid
        j_in = np.where(line % 2 == 0, c_in, d_in - 1 - c_in)
        return j_out * (d_mid * d_in) + j_mid * d_in + j_in
    return c_out * (d_mid * d_in) + c_mid * d_in + c_in


def build_permutation(shape: Shape3, schedule: ScanSchedule) -> Permutation:
    """Materialize the index permutation for one layer's schedule.

    Flipped direction reverses the sequence: position n becomes N-1-n.
    """
    pos = _position_grid(shape, schedule.variant)
    if schedule.direction is Direction.FLIPPED:
        pos = shape.n_tokens - 1 - pos
    forward = pos.ravel()
    inverse = np.empty(shape.n_tokens, dtype=np.int64)
    inverse[forward] = np.arange(shape.n_tokens, dtype=np.int64)
    return Permutation(shape, forward, inverse)


def _flatten_tokens(tensor: np.ndarray, perm: Permutation) -> np.ndarray:
    arr = np.asarray(tensor)
    dims = perm.shape.dims()
    if arr.ndim >= 3 and arr.shape[:3] == dims:
        return arr.reshape(perm.n, *arr.shape[3:])
    if arr.ndim >= 1 and arr.shape[0] == perm.n:
        return arr
    raise DomainError(
        f"tensor shape {arr.shape} does not match permutation over {dims}")


def apply_permutation(tensor: np.ndarray, perm: Permutation) -> np.ndarray:
    """Lay out a (T, H, W, ...) tensor as an (N, ...) scan-order sequence."""
    flat = _flatten_tokens(tensor, perm)
    return flat[perm.inverse]


def apply_inverse_permutation(seq: np.ndarray, perm: Permutation,
                              as_grid: bool = False) -> np.ndarray:
    """Restore tensor layout from an (N, ...) scan-order sequence."""
    seq = np.asarray(seq)
    if seq.shape[0] != perm.n:
        raise DomainError(f"sequence length {seq.shape[0]} != {perm.n}")
    flat = seq[perm.forward]
    if as_grid:
        return flat.reshape(*perm.shape.dims(), *seq.shape[1:])
    return flat


# ---------------------------------------------------------------------------
# adjacency statistic d_k
# ---------------------------------------------------------------------------

_AXIS_NAMES = ("t", "y", "x")


@dataclass(frozen=True)
class AdjacencyReport:
    """Mean sequence distance between cube-adjacent tokens.

    Pairs are the adjacent coordinate pairs inside non-overlapping 2x2x2
    cubes anchored at even offsets (12 pairs per full cube). For each pair
    the distance is minimized over the first k layers of the family; d_k is
    the mean of those minima over all pairs, and axis_means breaks the mean
    down by pair axis. Axes with no pairs (extent 1, or clipped boundary
    cubes only) report None.
    """

    shape: Shape3
    family: str
    k: int
    d_k: float
    axis_means: dict[str, float | None]
    pair_counts: dict[str, int]


def _axis_pair_distance_sum(pos: np.ndarray, axis: int) -> tuple[float, int, np.ndarray]:
    """Min-over-layer |position delta| stats for pairs along one axis.

    pos has shape (k, T, H, W). Pairs along `axis` take the element at even
    coordinate c and its neighbor at c+1 (both inside the same aligned
    cube). Returns (sum of min distances, pair count, per-pair minima).
    """
    length = pos.shape[1 + axis]
    lo = [slice(None)] * 4
    hi = [slice(None)] * 4
    lo[1 + axis] = slice(0, length - 1, 2)
    hi[1 + axis] = slice(1, length, 2)
    delta = np.abs(pos[tuple(hi)] - pos[tuple(lo)])
    if delta.size == 0:
        return 0.0, 0, delta
    mins = delta.min(axis=0)
    return float(mins.sum()), int(mins.size), mins


def adjacency_d_k(shape: Shape3, family: str, k: int) -> AdjacencyReport:
    """Compute d_k for the first k layers of a scan family.

    Flipped directions are never included: reversing a sequence leaves every
    |position delta| unchanged, so they cannot improve any minimum.
    """
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if all(d == 1 for d in shape.dims()):
        raise DomainError(f"shape {shape.dims()} has no adjacent pairs")

    pos = np.stack([
        _position_grid(shape, family_schedule(family, layer).variant)
        for layer in range(k)
    ])

    axis_means: dict[str, float | None] = {}
    pair_counts: dict[str, int] = {}
    total_sum = 0.0
    total_count = 0
    for axis, name in enumerate(_AXIS_NAMES):
        s, c, _ = _axis_pair_distance_sum(pos, axis)
        pair_counts[name] = c
        axis_means[name] = (s / c) if c else None
        total_sum += s
        total_count += c
    if total_count == 0:
        raise DomainError(f"shape {shape.dims()} has no adjacent pairs")
    return AdjacencyReport(shape=shape, family=family, k=k,
                           d_k=total_sum / total_count,
                           axis_means=axis_means, pair_counts=pair_counts)

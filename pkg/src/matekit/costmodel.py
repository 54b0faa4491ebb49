"""Analytic FLOP model for scan blocks, review tokens, and windowed attention.

All quantities are exact `fractions.Fraction` values; nothing here is
measured. Per sequence length N and model width d:

  bidirectional scan block (per direction, doubled when bidirectional):
      main  = (6 + 2/d_h) * E * N * d^2        projections in/out
      state = 4 * N * d_s * d                  B/C generation
      conv  = 2 * E * K * (N + K - 1) * d      depthwise causal conv
      ssm   = 4 * E * N * d_s * d + 2 * E * N * d   state update + readout

  review pass: the same block evaluated at N / (p_t * p_y * p_x).

  windowed attention, per window of N_w tokens:
      8 * N_w * d^2 + 4 * N_w^2 * d
  multiplied by the ceiling window count over the grid. A single window
  spanning everything reduces to the dense-attention baseline
      8 * N * d^2 + 4 * N^2 * d,
  which is also the comparison transformer block.

Scan/review costs are affine in N; windowed attention is linear in N under
the divisible-window idealization, so the full block total is affine in N.
scaling_audit verifies that exactly (zero second differences) before
reporting anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .config import MateConfig
from .errors import DomainError, NumericError
from .review import ReviewConfig
from .scanlib import Shape3
from .tesa import TesaConfig

# Wall-clock generation speedups reported for the full 4B system at 512p
# (17 s / 34 s / 68 s clips). These come from end-to-end measurements, not
# from this FLOP model; they are echoed in reports and never asserted.
REPORTED_WALL_CLOCK_SPEEDUPS = {17: 5.0, 34: 8.0, 68: 15.0}


def large_model_config() -> MateConfig:
    """The width-2560 configuration the wall-clock speedups refer to.

    4B-class: d=2560, expansion 2, d_state 128, d_head 64, 32 layers,
    review pooling (8,4,4), attention windows (8,4) with 20 heads. Used by
    the duration-speedup table and the scaling acceptance checks.
    """
    return MateConfig(d=2560, expansion=2, d_state=128, d_head=64,
                      conv_kernel=4, layers=32,
                      review=ReviewConfig(8, 4, 4),
                      tesa=TesaConfig(8, 4, heads=20))


def _check_n(n: int) -> None:
    if not isinstance(n, int) or n < 0:
        raise DomainError(f"token count must be a non-negative int, got {n!r}")


def bimamba_affine(cfg: MateConfig, bidirectional: bool = True
                   ) -> tuple[Fraction, Fraction]:
    """(slope, intercept) of the scan-block cost as a function of N."""
    d, e = cfg.d, cfg.expansion
    ds, dh, k = cfg.d_state, cfg.d_head, cfg.conv_kernel
    slope = (Fraction(6 * dh + 2, dh) * e * d * d   # main projections
             + 4 * ds * d                           # B/C generation
             + 2 * e * k * d                        # conv, N-proportional part
             + 4 * e * ds * d + 2 * e * d)          # ssm
    intercept = Fraction(2 * e * k * (k - 1) * d)   # conv tail
    if bidirectional:
        slope, intercept = 2 * slope, 2 * intercept
    return slope, intercept


def bimamba_components(n: int, cfg: MateConfig, bidirectional: bool = True
                       ) -> dict[str, Fraction]:
    """Cost breakdown {main, state, conv, ssm} at length N."""
    _check_n(n)
    d, e = cfg.d, cfg.expansion
    ds, dh, k = cfg.d_state, cfg.d_head, cfg.conv_kernel
    parts = {
        "main": Fraction(6 * dh + 2, dh) * e * n * d * d,
        "state": Fraction(4 * n * ds * d),
        "conv": Fraction(2 * e * k * (n + k - 1) * d),
        "ssm": Fraction(4 * e * n * ds * d + 2 * e * n * d),
    }
    if bidirectional:
        parts = {name: 2 * v for name, v in parts.items()}
    return parts


def cost_bimamba(n: int, cfg: MateConfig, bidirectional: bool = True) -> Fraction:
    """Total scan-block FLOPs at sequence length N."""
    _check_n(n)
    slope, intercept = bimamba_affine(cfg, bidirectional)
    return slope * n + intercept


def cost_conv(n: int, cfg: MateConfig, bidirectional: bool = True) -> Fraction:
    return bimamba_components(n, cfg, bidirectional)["conv"]


def cost_ssm(n: int, cfg: MateConfig, bidirectional: bool = True) -> Fraction:
    return bimamba_components(n, cfg, bidirectional)["ssm"]


def review_pool_volume(cfg: MateConfig) -> int:
    r = cfg.review
    return r.p_t * r.p_y * r.p_x


def cost_review(n: int, cfg: MateConfig, bidirectional: bool = True) -> Fraction:
    """Scan-block cost evaluated at the pooled length N / (p_t*p_y*p_x).

    Zero when review is disabled. The pooled length is kept rational; no
    ceiling is applied, matching the asymptotic claim that review adds a
    fixed 1/P fraction of the scan cost.
    """
    _check_n(n)
    if not cfg.review.enabled:
        return Fraction(0)
    slope, intercept = bimamba_affine(cfg, bidirectional)
    return slope * Fraction(n, review_pool_volume(cfg)) + intercept


def review_cost_ratio(cfg: MateConfig) -> Fraction:
    """Exact ratio of the N-linear review and scan coefficients."""
    return Fraction(1, review_pool_volume(cfg))


def tesa_window_cost(n_w: int, d: int) -> Fraction:
    """FLOPs of one attention window holding n_w tokens at width d."""
    _check_n(n_w)
    return Fraction(8 * n_w * d * d + 4 * n_w * n_w * d)


def cost_tesa(shape: Shape3, cfg: MateConfig) -> Fraction:
    """Windowed-attention FLOPs over a grid: full windows times the
    ceiling window count (boundary windows are priced as full ones)."""
    tw, sw = cfg.tesa.t_window, cfg.tesa.s_window
    n_w = tw * sw * sw
    count = (-(-shape.t // tw)) * (-(-shape.h // sw)) * (-(-shape.w // sw))
    return tesa_window_cost(n_w, cfg.d) * count


def cost_tesa_linear(n: int, cfg: MateConfig) -> Fraction:
    """Windowed-attention cost per N under the divisible-window
    idealization: N/N_w full windows."""
    _check_n(n)
    tw, sw = cfg.tesa.t_window, cfg.tesa.s_window
    n_w = tw * sw * sw
    return tesa_window_cost(n_w, cfg.d) * Fraction(n, n_w)


def cost_dit_baseline(n: int, d: int) -> Fraction:
    """Dense self-attention transformer block: 8*N*d^2 + 4*N^2*d."""
    _check_n(n)
    if d < 1:
        raise DomainError(f"baseline width must be >= 1, got {d}")
    return Fraction(8 * n * d * d + 4 * n * n * d)


def mate_total(n: int, cfg: MateConfig, bidirectional: bool = True) -> Fraction:
    """Full block: bidirectional scan + review pass + windowed attention."""
    return (cost_bimamba(n, cfg, bidirectional)
            + cost_review(n, cfg, bidirectional)
            + cost_tesa_linear(n, cfg))


@dataclass(frozen=True)
class CostReport:
    """One row of the cost table; all entries exact Fractions."""

    n: int
    c_bimamba: Fraction
    c_conv: Fraction
    c_ssm: Fraction
    c_review: Fraction
    c_tesa: Fraction
    mate_total: Fraction
    dit_baseline: Fraction
    speedup: Fraction


def cost_report(n: int, cfg: MateConfig, bidirectional: bool = True,
                baseline_d: int | None = None) -> CostReport:
    _check_n(n)
    if n == 0:
        raise DomainError("cost report needs n >= 1")
    d_base = cfg.d if not baseline_d else baseline_d
    total = mate_total(n, cfg, bidirectional)
    baseline = cost_dit_baseline(n, d_base)
    if total <= 0:
        raise NumericError("non-positive block cost")
    return CostReport(
        n=n,
        c_bimamba=cost_bimamba(n, cfg, bidirectional),
        c_conv=cost_conv(n, cfg, bidirectional),
        c_ssm=cost_ssm(n, cfg, bidirectional),
        c_review=cost_review(n, cfg, bidirectional),
        c_tesa=cost_tesa_linear(n, cfg),
        mate_total=total,
        dit_baseline=baseline,
        speedup=baseline / total,
    )


def scaling_audit(cfg: MateConfig, n_values: list[int],
                  bidirectional: bool = True,
                  baseline_d: int | None = None) -> list[CostReport]:
    """Cost rows for n_values, after verifying the model is exactly affine.

    The affinity probe evaluates mate_total on an equally spaced grid
    spanning [2, 10^6] and requires every second difference to be exactly
    zero in rational arithmetic; any violation means the closed forms were
    broken and reporting would be meaningless.
    """
    if not n_values:
        raise DomainError("n_values must be non-empty")
    for n in n_values:
        _check_n(n)
    probes = [2 + i * 124999 for i in range(9)]   # 2 .. 1_000_000 < step apart
    totals = [mate_total(p, cfg, bidirectional) for p in probes]
    second = [totals[i + 2] - 2 * totals[i + 1] + totals[i]
              for i in range(len(totals) - 2)]
    if any(s != 0 for s in second):
        raise NumericError("mate_total is not affine in N; audit failed")
    return [cost_report(n, cfg, bidirectional, baseline_d) for n in n_values]


def crossover_n(cfg: MateConfig, bidirectional: bool = True,
                baseline_d: int | None = None) -> int:
    """Smallest N >= 1 where the dense baseline outcosts the full block.

    The baseline is quadratic and the block affine, so the crossover always
    exists; the quadratic root gives the neighborhood and exact arithmetic
    settles the boundary.
    """
    d_base = cfg.d if not baseline_d else baseline_d
    slope, intercept = bimamba_affine(cfg, bidirectional)
    if cfg.review.enabled:
        slope = slope + slope * review_cost_ratio(cfg)
        intercept = intercept * 2
    tw, sw = cfg.tesa.t_window, cfg.tesa.s_window
    slope = slope + tesa_window_cost(tw * sw * sw, cfg.d) / (tw * sw * sw)
    # solve 4*d_base*N^2 + (8*d_base^2 - slope)*N - intercept > 0
    a = 4 * d_base
    b = float(8 * d_base * d_base - slope)
    c = -float(intercept)
    disc = b * b - 4 * a * c
    guess = 1 if disc < 0 else int((-b + disc ** 0.5) / (2 * a))
    n = max(1, guess - 4)
    while cost_dit_baseline(n, d_base) <= mate_total(n, cfg, bidirectional):
        n += 1
        if n > 10 ** 9:
            raise NumericError("no crossover found below 1e9 tokens")
    while n > 1 and cost_dit_baseline(n - 1, d_base) > mate_total(n - 1, cfg, bidirectional):
        n -= 1
    return n

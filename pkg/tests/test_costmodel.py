"""Tests for the exact analytic cost model."""

from fractions import Fraction

import pytest

from matekit.config import MateConfig
from matekit.costmodel import (
    REPORTED_WALL_CLOCK_SPEEDUPS,
    bimamba_affine,
    bimamba_components,
    cost_bimamba,
    cost_conv,
    cost_dit_baseline,
    cost_report,
    cost_review,
    cost_ssm,
    cost_tesa,
    cost_tesa_linear,
    crossover_n,
    large_model_config,
    mate_total,
    review_cost_ratio,
    scaling_audit,
    tesa_window_cost,
)
from matekit.errors import DomainError
from matekit.review import ReviewConfig
from matekit.scanlib import Shape3
from matekit.tesa import TesaConfig


def _cfg(**kw):
    base = dict(d=64, expansion=2, d_state=128, d_head=64, conv_kernel=4,
                review=ReviewConfig(8, 4, 4), tesa=TesaConfig(8, 4, heads=2))
    base.update(kw)
    return MateConfig(**base)


def test_leading_terms_worked_example():
    # E=2, d=64, N=1024, d_s=128, d_h=64, one direction:
    # (6 + 2/64)*2*1024*64^2 = 50_593_792 and 4*1024*128*64 = 33_554_432
    parts = bimamba_components(1024, _cfg(), bidirectional=False)
    assert parts["main"] == 50_593_792
    assert parts["state"] == 33_554_432
    assert parts["main"] + parts["state"] == 84_148_224


def test_bidirectional_doubles_every_component():
    cfg = _cfg()
    uni = bimamba_components(777, cfg, bidirectional=False)
    bi = bimamba_components(777, cfg, bidirectional=True)
    for name in uni:
        assert bi[name] == 2 * uni[name]
    assert cost_bimamba(777, cfg, True) == 2 * cost_bimamba(777, cfg, False)


def test_zero_length_leaves_only_conv_tail():
    cfg = _cfg()
    assert cost_bimamba(0, cfg, bidirectional=False) == \
        2 * cfg.expansion * cfg.conv_kernel * (cfg.conv_kernel - 1) * cfg.d
    assert cost_ssm(0, cfg) == 0
    parts = bimamba_components(0, cfg, bidirectional=False)
    assert parts["main"] == parts["state"] == parts["ssm"] == 0
    assert parts["conv"] > 0


def test_affine_matches_components():
    cfg = _cfg()
    slope, intercept = bimamba_affine(cfg, bidirectional=True)
    for n in (1, 5, 1024, 999_999):
        assert slope * n + intercept == cost_bimamba(n, cfg, True)
        assert cost_bimamba(n, cfg, True) == sum(
            bimamba_components(n, cfg, True).values())


def test_review_linear_ratio_is_exactly_1_over_128():
    assert review_cost_ratio(_cfg()) == Fraction(1, 128)
    cfg = _cfg()
    s_full, _ = bimamba_affine(cfg, True)
    # slope of review cost: difference quotient of two evaluations
    p = 128
    r1 = cost_review(p, cfg)
    r2 = cost_review(2 * p, cfg)
    assert (r2 - r1) / p == s_full / 128


def test_review_identity_pooling_equals_full_cost():
    cfg = _cfg(review=ReviewConfig(1, 1, 1))
    for n in (1, 64, 12345):
        assert cost_review(n, cfg) == cost_bimamba(n, cfg)


def test_review_disabled_costs_nothing():
    cfg = _cfg(review=ReviewConfig(8, 4, 4, enabled=False))
    assert cost_review(4096, cfg) == 0
    assert mate_total(4096, cfg) == cost_bimamba(4096, cfg) + cost_tesa_linear(4096, cfg)


def test_tesa_worked_example():
    # (4,8,8) grid, (4,4,4) windows, d=64: 4 windows, N_w = 64
    cfg = _cfg(tesa=TesaConfig(4, 4, heads=2))
    assert cost_tesa(Shape3(4, 8, 8), cfg) == 12_582_912
    assert cost_tesa(Shape3(4, 8, 8), cfg) == 4 * tesa_window_cost(64, 64)


def test_tesa_single_window_equals_dense_baseline():
    # one window spanning the grid degenerates to the transformer block cost
    for dims in [(2, 2, 2), (4, 8, 8), (8, 4, 4)]:
        shape = Shape3(*dims)
        cfg = _cfg(tesa=TesaConfig(t_window=shape.t,
                                   s_window=max(shape.h, shape.w), heads=2))
        assert cost_tesa(shape, cfg) == cost_dit_baseline(shape.n_tokens, cfg.d)


def test_tesa_linear_matches_shape_cost_on_divisible_grids():
    cfg = _cfg(tesa=TesaConfig(2, 4, heads=2))
    shape = Shape3(8, 8, 8)   # 4*2*2 = 16 full windows of 32
    assert cost_tesa(shape, cfg) == cost_tesa_linear(shape.n_tokens, cfg)


def test_tesa_ceiling_prices_ragged_windows_as_full():
    cfg = _cfg(tesa=TesaConfig(4, 4, heads=2))
    # (5,8,8): ceil(5/4)=2 temporal slabs -> same as (8,8,8)
    assert cost_tesa(Shape3(5, 8, 8), cfg) == cost_tesa(Shape3(8, 8, 8), cfg)


def test_dense_baseline_values():
    assert cost_dit_baseline(1, 64) == 8 * 64 * 64 + 4 * 64
    # quadratic term dominates: ratio over 4 N^2 d -> 1 as N grows
    n, d = 10 ** 5, 64
    assert cost_dit_baseline(n, d) / Fraction(4 * n * n * d) < Fraction(102, 100)


def test_doubling_width_scales_quadratic_terms():
    cfg1 = _cfg(d=64)
    cfg2 = _cfg(d=128)
    p1 = bimamba_components(4096, cfg1, False)
    p2 = bimamba_components(4096, cfg2, False)
    assert p2["main"] == 4 * p1["main"]     # d^2 term
    assert p2["state"] == 2 * p1["state"]   # d term
    assert p2["conv"] == 2 * p1["conv"]


def test_mate_total_is_affine_and_audit_passes():
    cfg = _cfg()
    rows = scaling_audit(cfg, [2, 500, 10 ** 6])
    assert [r.n for r in rows] == [2, 500, 10 ** 6]
    # zero second difference on an equally spaced triple
    t1 = mate_total(100, cfg)
    t2 = mate_total(200, cfg)
    t3 = mate_total(300, cfg)
    assert t3 - 2 * t2 + t1 == 0


def test_audit_rejects_empty_and_bad_n():
    with pytest.raises(DomainError):
        scaling_audit(_cfg(), [])
    with pytest.raises(DomainError):
        cost_bimamba(-1, _cfg())
    with pytest.raises(DomainError):
        cost_report(0, _cfg())


def _width2560_cfg():
    return MateConfig(d=2560, expansion=2, d_state=128, d_head=64,
                      conv_kernel=4, layers=32,
                      review=ReviewConfig(8, 4, 4), tesa=TesaConfig(8, 4, heads=20))


def test_large_model_config_matches_frozen_anchors():
    # the shared helper must stay on the config these anchor values fix
    assert large_model_config() == _width2560_cfg()


def test_speedup_grows_with_duration_at_4b_scale():
    cfg = _width2560_cfg()
    tokens = [34816, 69632, 139264]   # 17 s / 34 s / 68 s at 512p
    rows = [cost_report(n, cfg) for n in tokens]
    speedups = [r.speedup for r in rows]
    assert speedups[0] < speedups[1] < speedups[2]
    assert speedups[2] >= 2 * speedups[0]
    # frozen leading digits as regression anchors
    assert float(speedups[0]) == pytest.approx(1.8495, abs=1e-3)
    assert float(speedups[2]) == pytest.approx(6.6867, abs=1e-3)


def test_crossover_exists_and_is_tight():
    cfg = _width2560_cfg()
    n = crossover_n(cfg)
    assert n == 16473
    assert cost_dit_baseline(n, cfg.d) > mate_total(n, cfg)
    assert cost_dit_baseline(n - 1, cfg.d) <= mate_total(n - 1, cfg)


def test_crossover_small_config():
    cfg = _cfg()
    n = crossover_n(cfg)
    assert cost_dit_baseline(n, cfg.d) > mate_total(n, cfg)
    if n > 1:
        assert cost_dit_baseline(n - 1, cfg.d) <= mate_total(n - 1, cfg)


def test_baseline_d_override():
    cfg = _width2560_cfg()
    r = cost_report(34816, cfg, baseline_d=3072)
    assert r.dit_baseline == cost_dit_baseline(34816, 3072)
    assert r.speedup == r.dit_baseline / r.mate_total


def test_reported_speedups_are_echo_only():
    # the published wall-clock numbers exist as data, not as assertions
    assert set(REPORTED_WALL_CLOCK_SPEEDUPS) == {17, 34, 68}
    assert REPORTED_WALL_CLOCK_SPEEDUPS[68] == 15.0


def test_costs_are_exact_fractions():
    cfg = _cfg()
    r = cost_report(12345, cfg)
    for v in (r.c_bimamba, r.c_conv, r.c_ssm, r.c_review, r.c_tesa,
              r.mate_total, r.dit_baseline, r.speedup):
        assert isinstance(v, Fraction)
    assert cost_conv(12345, cfg) == r.c_conv

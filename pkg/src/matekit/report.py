"""Report bundle: cost scaling, duration speedups, and adjacency tables,
each written as a CSV with a rendered figure next to it.

Everything is analytic and deterministic, so the CSVs are byte-stable
across runs with the same config. Figures use the Agg backend (no display
needed) and carry no volatile metadata.
"""

from __future__ import annotations

from pathlib import Path

from .cli import COST_SCHEMA, _COST_COLUMNS, _cost_row
from .config import RunConfig
from .costmodel import (REPORTED_WALL_CLOCK_SPEEDUPS, cost_report,
                        crossover_n, large_model_config, scaling_audit)
from .scanlib import Shape3, adjacency_d_k

REPORT_SPEEDUP_SCHEMA = "matekit-report-speedup/1"
REPORT_ADJACENCY_SCHEMA = "matekit-report-adjacency/1"

_COST_N_VALUES = [2 ** p for p in range(10, 19)]
_ADJACENCY_SHAPE = Shape3(32, 32, 32)
_ADJACENCY_FAMILIES = ("rms", "zigzag", "rowmajor")
_ADJACENCY_KS = (1, 2, 3, 4)
_PNG_OPTS = {"dpi": 150, "metadata": {"Software": None}}


def _pyplot():
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt
    return plt


def _write_lines(path: Path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def duration_speedup_rows(run_cfg: RunConfig) -> list[dict]:
    """Analytic speedups at the width-2560 scale for the configured
    duration/token pairs, with the published wall-clock numbers echoed."""
    cfg = large_model_config()
    rows = []
    for secs, n in zip(run_cfg.cost.durations_s, run_cfg.cost.duration_tokens):
        rep = cost_report(n, cfg, bidirectional=run_cfg.cost.bidirectional)
        rows.append({"duration_s": secs, "n_tokens": n,
                     "model_speedup": float(rep.speedup),
                     "reported_speedup": REPORTED_WALL_CLOCK_SPEEDUPS.get(secs)})
    return rows


def adjacency_rows(shape: Shape3 = _ADJACENCY_SHAPE) -> list[dict]:
    rows = []
    for family in _ADJACENCY_FAMILIES:
        for k in _ADJACENCY_KS:
            rep = adjacency_d_k(shape, family, k)
            rows.append({"shape": "x".join(str(v) for v in shape.dims()),
                         "family": family, "k": k, "d_k": rep.d_k})
    return rows


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def _render_cost_figure(path: Path, reports, crossover: int) -> None:
    plt = _pyplot()
    ns = [r.n for r in reports]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.loglog(ns, [float(r.mate_total) for r in reports], marker="o",
              label="linear block total")
    ax.loglog(ns, [float(r.dit_baseline) for r in reports], marker="s",
              label="dense attention baseline")
    ax.axvline(crossover, color="gray", linestyle="--", linewidth=1,
               label=f"crossover N={crossover}")
    ax.set_xlabel("tokens N")
    ax.set_ylabel("FLOPs per block")
    ax.set_title("Block cost scaling")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_PNG_OPTS)
    plt.close(fig)


def _render_speedup_figure(path: Path, rows: list[dict]) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    secs = [r["duration_s"] for r in rows]
    ax.plot(secs, [r["model_speedup"] for r in rows], marker="o",
            label="analytic FLOP ratio (width 2560)")
    echoed = [(s, r["reported_speedup"]) for s, r in zip(secs, rows)
              if r["reported_speedup"] is not None]
    if echoed:
        ax.plot([e[0] for e in echoed], [e[1] for e in echoed], marker="s",
                linestyle="--", label="reported wall-clock (for comparison)")
    ax.set_xlabel("clip duration (s)")
    ax.set_ylabel("speedup over dense baseline")
    ax.set_title("Speedup vs generated duration")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_PNG_OPTS)
    plt.close(fig)


def _render_adjacency_figure(path: Path, rows: list[dict]) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for family in _ADJACENCY_FAMILIES:
        pts = [(r["k"], r["d_k"]) for r in rows if r["family"] == family]
        ax.semilogy([p[0] for p in pts], [p[1] for p in pts], marker="o",
                    label=family)
    ax.set_xlabel("scan layers minimized over (k)")
    ax.set_ylabel("mean adjacent-pair distance d_k")
    ax.set_title(f"Adjacency preservation on "
                 f"{'x'.join(str(v) for v in _ADJACENCY_SHAPE.dims())}")
    ax.set_xticks(list(_ADJACENCY_KS))
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_PNG_OPTS)
    plt.close(fig)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------


def write_report(run_cfg: RunConfig, out_dir: Path) -> list[Path]:
    """Write all report CSVs and figures into out_dir; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = run_cfg.model
    bidi = run_cfg.cost.bidirectional
    baseline_d = run_cfg.cost.baseline_d or None
    paths = []

    reports = scaling_audit(cfg, _COST_N_VALUES, bidirectional=bidi,
                            baseline_d=baseline_d)
    cost_csv = out_dir / "cost_scaling.csv"
    _write_lines(cost_csv, [f"# {COST_SCHEMA}", ",".join(_COST_COLUMNS)]
                 + [_cost_row(r) for r in reports])
    paths.append(cost_csv)
    cost_png = out_dir / "cost_scaling.png"
    _render_cost_figure(cost_png, reports,
                        crossover_n(cfg, bidirectional=bidi, baseline_d=baseline_d))
    paths.append(cost_png)

    srows = duration_speedup_rows(run_cfg)
    speedup_csv = out_dir / "speedup_durations.csv"
    _write_lines(speedup_csv, [
        f"# {REPORT_SPEEDUP_SCHEMA}",
        "duration_s,n_tokens,model_speedup,reported_speedup",
    ] + [",".join([str(r["duration_s"]), str(r["n_tokens"]),
                   repr(r["model_speedup"]),
                   "" if r["reported_speedup"] is None
                   else repr(r["reported_speedup"])]) for r in srows])
    paths.append(speedup_csv)
    speedup_png = out_dir / "speedup_durations.png"
    _render_speedup_figure(speedup_png, srows)
    paths.append(speedup_png)

    arows = adjacency_rows()
    adjacency_csv = out_dir / "adjacency.csv"
    _write_lines(adjacency_csv, [f"# {REPORT_ADJACENCY_SCHEMA}",
                                 "shape,family,k,d_k"]
                 + [",".join([r["shape"], r["family"], str(r["k"]),
                              repr(r["d_k"])]) for r in arows])
    paths.append(adjacency_csv)
    adjacency_png = out_dir / "adjacency.png"
    _render_adjacency_figure(adjacency_png, arows)
    paths.append(adjacency_png)
    return paths

"""Command-line front end.

Subcommands: scan-audit, ssd-check, tesa-check, cost, train-toy, sample,
and report (the last renders figures next to its CSV tables). Exit codes:
0 success, 2 usage or domain error, 3 numeric failure. Every CSV/JSON
output starts with a "# <schema>/<version>" comment line, and identical
argv + seed produce byte-identical output files.

Only the standard library is imported at module scope: the thread count
(--threads, overridden by MATE_THREADS) is exported to the BLAS
environment variables before numpy is first imported, so the default
really is single-threaded execution.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import DomainError, NumericError

SCAN_AUDIT_SCHEMA = "matekit-scan-audit/1"
SSD_CHECK_SCHEMA = "matekit-ssd-check/1"
TESA_CHECK_SCHEMA = "matekit-tesa-check/1"
COST_SCHEMA = "matekit-cost/1"
TRAIN_LOG_SCHEMA = "matekit-train-log/1"

SSD_ORACLE_TOL = 1e-8
SSD_GRAD_TOL = 1e-4
TESA_ORACLE_TOL = 1e-10
TESA_ROWSUM_TOL = 1e-12

_THREAD_ENV_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def _resolve_threads(flag_value: int, env) -> int:
    raw = env.get("MATE_THREADS")
    if raw is not None:
        try:
            value = int(raw)
        except ValueError:
            raise DomainError(f"MATE_THREADS must be an integer, got {raw!r}")
    else:
        value = flag_value
    if value < 1:
        raise DomainError(f"thread count must be >= 1, got {value}")
    return value


def _apply_thread_env(threads: int) -> None:
    # only effective before numpy initializes its BLAS; harmless afterwards
    if "numpy" not in sys.modules:
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(threads)


def _parse_shape(text: str):
    from .scanlib import Shape3
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise DomainError(f"shape must be TxHxW, got {text!r}")
    try:
        t, h, w = (int(p) for p in parts)
    except ValueError:
        raise DomainError(f"shape must be TxHxW integers, got {text!r}")
    return Shape3(t, h, w)


def _parse_n_list(text: str) -> list[int]:
    try:
        values = [int(p) for p in text.split(",") if p.strip() != ""]
    except ValueError:
        raise DomainError(f"--n-list must be comma-separated integers, got {text!r}")
    if not values:
        raise DomainError("--n-list is empty")
    return values


def _load_run_config(path: str | None):
    from .config import RunConfig, load_config
    return load_config(path) if path else RunConfig()


def _emit(lines: list[str], path: str | None) -> None:
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _fmt(value) -> str:
    """Exact-integer or shortest round-trip float rendering."""
    from fractions import Fraction
    if isinstance(value, Fraction):
        return str(value.numerator) if value.denominator == 1 else repr(float(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_scan_audit(args) -> int:
    from .scanlib import adjacency_d_k
    shape = _parse_shape(args.shape)
    report = adjacency_d_k(shape, args.family, args.k)
    lines = [f"# {SCAN_AUDIT_SCHEMA}",
             "shape,family,k,axis,mean_min_distance,d_k"]
    for axis in ("t", "y", "x"):
        mean = report.axis_means[axis]
        lines.append(",".join([args.shape, args.family, str(args.k), axis,
                               "" if mean is None else repr(mean),
                               repr(report.d_k)]))
    _emit(lines, args.out)
    return 0


def _cmd_ssd_check(args) -> int:
    import numpy as np

    from .gradcheck import (central_difference, relative_deviation,
                            subset_relative_deviation)
    from .ssd import SsdParams, SsdState, ssd_backward, ssd_dense_oracle, ssd_scan

    if args.n < 1 or args.dstate < 1 or args.seeds < 1:
        raise DomainError("--n, --dstate and --seeds must all be >= 1")
    d_head = 4
    lines = [f"# {SSD_CHECK_SCHEMA}"]
    failures = []
    for i in range(args.seeds):
        seed = args.seed + i
        rng = np.random.default_rng(seed)
        decay = rng.uniform(0.05, 0.99, args.n)
        b = rng.standard_normal((args.n, args.dstate))
        c = rng.standard_normal((args.n, args.dstate))
        x = rng.standard_normal((args.n, d_head))
        h0 = rng.standard_normal((args.dstate, d_head))
        params = SsdParams(decay=decay, b=b, c=c)
        init = SsdState(hidden=h0)

        y, _ = ssd_scan(x, params, init)
        max_dev = relative_deviation(y, ssd_dense_oracle(x, params, init))

        g = rng.standard_normal(x.shape)
        grads = ssd_backward(x, params, g, init)
        probes = {"x": x, "decay": decay, "b": b, "c": c, "init": h0}
        analytic = {"x": grads.dx, "decay": grads.ddecay, "b": grads.db,
                    "c": grads.dc, "init": grads.dinit}
        grad_dev = 0.0
        for name, arr in probes.items():
            coords = rng.choice(arr.size, min(10, arr.size), replace=False)

            def f(v, _name=name):
                t = dict(probes)
                t[_name] = v
                p = SsdParams(decay=t["decay"], b=t["b"], c=t["c"])
                out, _ = ssd_scan(t["x"], p, SsdState(hidden=t["init"]))
                return float((out * g).sum())

            num = central_difference(f, arr, coords=coords)
            grad_dev = max(grad_dev,
                           subset_relative_deviation(analytic[name], num, coords))

        ok = max_dev <= SSD_ORACLE_TOL and grad_dev <= SSD_GRAD_TOL
        if not ok:
            failures.append(seed)
        lines.append(json.dumps({"seed": seed, "n": args.n, "d_state": args.dstate,
                                 "max_dev": max_dev, "grad_max_dev": grad_dev,
                                 "pass": ok}, sort_keys=True))
    _emit(lines, None)
    if failures:
        raise NumericError(f"ssd-check failed for seeds {failures}")
    return 0


def _cmd_tesa_check(args) -> int:
    import numpy as np

    from .gradcheck import relative_deviation
    from .tesa import (TesaConfig, TesaWeights, dense_attention_oracle,
                       partition_windows, tesa_forward)

    shape = _parse_shape(args.shape)
    rng = np.random.default_rng(args.seed)
    d = 8 * args.heads
    weights = TesaWeights(w_q=rng.standard_normal((d, d)) / np.sqrt(d),
                          w_k=rng.standard_normal((d, d)) / np.sqrt(d),
                          w_v=rng.standard_normal((d, d)) / np.sqrt(d),
                          w_o=rng.standard_normal((d, d)) / np.sqrt(d))
    tensor = rng.standard_normal((*shape.dims(), d))
    x_flat = tensor.reshape(shape.n_tokens, d)

    lines = [f"# {TESA_CHECK_SCHEMA}"]
    failures = []
    for parity in (0, 1):
        cfg = TesaConfig(t_window=args.tw, s_window=args.sw, heads=args.heads,
                         shift_parity=parity)
        part = partition_windows(shape, cfg)   # raises unless coverage is exact
        out, probs, mask = tesa_forward(tensor, cfg, weights, partition=part,
                                        return_probs=True)
        out_flat = out.reshape(shape.n_tokens, d)

        oracle_dev = 0.0
        for win in part.windows:
            ref = dense_attention_oracle(x_flat[win], weights, args.heads)
            oracle_dev = max(oracle_dev, relative_deviation(out_flat[win], ref))

        rowsum_dev = 0.0
        for w in range(len(part.windows)):
            valid = mask[w]
            sums = probs[w][:, valid, :].sum(axis=2)
            rowsum_dev = max(rowsum_dev, float(np.abs(sums - 1.0).max()))

        ok = oracle_dev <= TESA_ORACLE_TOL and rowsum_dev <= TESA_ROWSUM_TOL
        if not ok:
            failures.append(parity)
        lines.append(json.dumps({"shape": args.shape, "parity": parity,
                                 "n_windows": len(part.windows),
                                 "coverage_ok": True,
                                 "max_oracle_dev": oracle_dev,
                                 "max_rowsum_dev": rowsum_dev,
                                 "pass": ok}, sort_keys=True))
    _emit(lines, None)
    if failures:
        raise NumericError(f"tesa-check failed for parities {failures}")
    return 0


_COST_COLUMNS = ("N", "c_bimamba", "c_conv", "c_ssm", "c_review", "c_tesa",
                 "mate_total", "dit_baseline", "speedup")


def _cost_row(report) -> str:
    return ",".join([
        str(report.n), _fmt(report.c_bimamba), _fmt(report.c_conv),
        _fmt(report.c_ssm), _fmt(report.c_review), _fmt(report.c_tesa),
        _fmt(report.mate_total), _fmt(report.dit_baseline),
        repr(float(report.speedup)),
    ])


def _cmd_cost(args) -> int:
    from .costmodel import cost_report
    run_cfg = _load_run_config(args.config)
    n_values = _parse_n_list(args.n_list)
    baseline_d = run_cfg.cost.baseline_d or None
    lines = [f"# {COST_SCHEMA}", ",".join(_COST_COLUMNS)]
    for n in n_values:
        rep = cost_report(n, run_cfg.model,
                          bidirectional=run_cfg.cost.bidirectional,
                          baseline_d=baseline_d)
        lines.append(_cost_row(rep))
    _emit(lines, args.out)
    return 0


def _cmd_train_toy(args) -> int:
    from .mate import smoothed_endpoints, train_toy
    run_cfg = _load_run_config(args.config)
    seed = run_cfg.seed if args.seed is None else args.seed
    result = train_toy(run_cfg, steps=args.steps, seed=seed)
    if args.log:
        lines = [f"# {TRAIN_LOG_SCHEMA}", "step,loss"]
        lines += [f"{i},{repr(loss)}" for i, loss in enumerate(result.losses)]
        _emit(lines, args.log)
    if args.checkpoint:
        from .tensorio import save_checkpoint
        save_checkpoint(args.checkpoint, result.weights, run_cfg, result.steps)
    first, last = smoothed_endpoints(result.losses)
    print(f"trained {result.steps} steps (seed {seed}): "
          f"smoothed loss {repr(first)} -> {repr(last)}")
    return 0


def _cmd_sample(args) -> int:
    from .mate import euler_sample
    from .scanlib import Shape3
    from .tensorio import load_checkpoint, write_tensor
    weights, run_cfg, _step = load_checkpoint(args.checkpoint)
    seed = run_cfg.seed if args.seed is None else args.seed
    shape = Shape3(run_cfg.data.t, run_cfg.data.h, run_cfg.data.w)
    tensor = euler_sample(weights, run_cfg.model, shape, steps=args.steps,
                          seed=seed)
    write_tensor(args.out, tensor)
    print(f"wrote {args.out}: shape {tensor.shape}, {args.steps} Euler steps")
    return 0


def _cmd_report(args) -> int:
    from .report import write_report
    run_cfg = _load_run_config(args.config)
    paths = write_report(run_cfg, Path(args.out_dir))
    for p in paths:
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matekit",
        description="Scan permutations, linear-time scan blocks, windowed "
                    "attention, analytic cost tables, and a toy flow-matching "
                    "denoiser.")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker/BLAS thread budget (MATE_THREADS overrides)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("scan-audit", help="adjacency statistics of scan orders")
    p.add_argument("--shape", required=True, help="grid as TxHxW, e.g. 32x32x32")
    p.add_argument("--family", default="rms",
                   choices=["rms", "rowmajor", "zigzag"])
    p.add_argument("--k", type=int, default=4,
                   help="number of scan layers minimized over")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(handler=_cmd_scan_audit)

    p = sub.add_parser("ssd-check",
                       help="scan vs dense-oracle and gradient checks")
    p.add_argument("--n", type=int, default=64, help="sequence length")
    p.add_argument("--dstate", type=int, default=16, help="state dimension")
    p.add_argument("--seeds", type=int, default=5, help="number of random seeds")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.set_defaults(handler=_cmd_ssd_check)

    p = sub.add_parser("tesa-check",
                       help="window coverage, row sums, and per-window oracle")
    p.add_argument("--shape", required=True, help="grid as TxHxW")
    p.add_argument("--tw", type=int, default=8, help="temporal window")
    p.add_argument("--sw", type=int, default=4, help="spatial window")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_tesa_check)

    p = sub.add_parser("cost", help="analytic FLOPs table")
    p.add_argument("--config", default=None, help="run config TOML")
    p.add_argument("--n-list", required=True, dest="n_list",
                   help="comma-separated token counts")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(handler=_cmd_cost)

    p = sub.add_parser("train-toy", help="flow-matching training on toy videos")
    p.add_argument("--config", default=None, help="run config TOML")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=None,
                   help="default: seed from the config")
    p.add_argument("--log", default=None, help="loss CSV path")
    p.add_argument("--checkpoint", default=None,
                   help="write final weights to this .npz")
    p.set_defaults(handler=_cmd_train_toy)

    p = sub.add_parser("sample", help="Euler-integrate a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--seed", type=int, default=None,
                   help="default: seed from the checkpoint config")
    p.add_argument("--out", required=True, help="raw tensor output path")
    p.set_defaults(handler=_cmd_sample)

    p = sub.add_parser("report",
                       help="cost and adjacency tables with rendered figures")
    p.add_argument("--config", default=None, help="run config TOML")
    p.add_argument("--out-dir", default="report", dest="out_dir")
    p.set_defaults(handler=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        threads = _resolve_threads(args.threads, os.environ)
        _apply_thread_env(threads)
        return args.handler(args)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""CLI behavior: exit codes, schema headers, byte-identical reruns."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from matekit.cli import _resolve_threads, main
from matekit.config import (DataConfig, MateConfig, RunConfig, TrainConfig,
                            save_config)
from matekit.costmodel import cost_report
from matekit.review import ReviewConfig
from matekit.scanlib import Shape3, adjacency_d_k
from matekit.tensorio import load_checkpoint, read_tensor
from matekit.tesa import TesaConfig


@pytest.fixture()
def mini_toml(tmp_path):
    model = MateConfig(d=8, expansion=2, d_state=4, d_head=4, layers=2,
                       review=ReviewConfig(p_t=2, p_y=2, p_x=2),
                       tesa=TesaConfig(t_window=2, s_window=2, heads=2))
    cfg = RunConfig(model=model, train=TrainConfig(batch=4),
                    data=DataConfig(t=2, h=4, w=4, square=2), seed=3)
    path = tmp_path / "mini.toml"
    save_config(cfg, path)
    return path


# ---------------------------------------------------------------------------
# exit codes and argument handling
# ---------------------------------------------------------------------------


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand_and_flag_exit_2():
    assert main(["frobnicate"]) == 2
    assert main(["cost", "--n-list", "8", "--bogus"]) == 2


def test_help_exits_zero():
    assert main(["--help"]) == 0


def test_domain_errors_exit_2(capsys):
    assert main(["scan-audit", "--shape", "1x1x1"]) == 2
    assert main(["scan-audit", "--shape", "4by4by4"]) == 2
    assert main(["cost", "--n-list", "a,b"]) == 2
    assert main(["cost", "--n-list", ""]) == 2
    err = capsys.readouterr().err
    assert "error" in err


def test_missing_config_file_exits_2(capsys):
    assert main(["cost", "--n-list", "8", "--config", "/nonexistent.toml"]) == 2


def test_resolve_threads_precedence():
    assert _resolve_threads(4, {}) == 4
    assert _resolve_threads(4, {"MATE_THREADS": "2"}) == 2
    with pytest.raises(Exception):
        _resolve_threads(4, {"MATE_THREADS": "zero"})
    with pytest.raises(Exception):
        _resolve_threads(0, {})


def test_bad_mate_threads_env_exits_2(monkeypatch):
    monkeypatch.setenv("MATE_THREADS", "many")
    assert main(["cost", "--n-list", "8"]) == 2


# ---------------------------------------------------------------------------
# scan-audit
# ---------------------------------------------------------------------------


def test_scan_audit_csv_matches_library(tmp_path, capsys):
    out = tmp_path / "audit.csv"
    assert main(["scan-audit", "--shape", "4x6x6", "--family", "rms",
                 "--k", "4", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# matekit-scan-audit/1"
    assert lines[1] == "shape,family,k,axis,mean_min_distance,d_k"
    rows = [line.split(",") for line in lines[2:]]
    assert [r[3] for r in rows] == ["t", "y", "x"]
    rep = adjacency_d_k(Shape3(4, 6, 6), "rms", 4)
    for r in rows:
        assert float(r[5]) == rep.d_k
        assert float(r[4]) == rep.axis_means[r[3]]

    # identical argv, identical bytes
    out2 = tmp_path / "audit2.csv"
    assert main(["scan-audit", "--shape", "4x6x6", "--family", "rms",
                 "--k", "4", "--out", str(out2)]) == 0
    assert out.read_bytes() == out2.read_bytes()


def test_scan_audit_stdout_and_singleton_axis(capsys):
    assert main(["scan-audit", "--shape", "1x4x4", "--family", "zigzag",
                 "--k", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("# matekit-scan-audit/1")
    t_row = lines[2].split(",")
    assert t_row[3] == "t" and t_row[4] == ""  # no temporal pairs


# ---------------------------------------------------------------------------
# ssd-check / tesa-check
# ---------------------------------------------------------------------------


def test_ssd_check_emits_passing_json_lines(capsys):
    assert main(["ssd-check", "--n", "64", "--dstate", "16", "--seeds", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "# matekit-ssd-check/1"
    payload = [json.loads(line) for line in lines[1:]]
    assert len(payload) == 5
    assert [p["seed"] for p in payload] == list(range(5))
    for p in payload:
        assert p["pass"] is True
        assert p["max_dev"] <= 1e-8
        assert p["grad_max_dev"] <= 1e-4


def test_tesa_check_covers_both_parities(capsys):
    assert main(["tesa-check", "--shape", "3x5x5", "--tw", "2", "--sw", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "# matekit-tesa-check/1"
    payload = [json.loads(line) for line in lines[1:]]
    assert [p["parity"] for p in payload] == [0, 1]
    for p in payload:
        assert p["coverage_ok"] and p["pass"]
        assert p["max_oracle_dev"] <= 1e-10
        assert p["max_rowsum_dev"] <= 1e-12


def test_check_commands_validate_arguments():
    assert main(["ssd-check", "--n", "0"]) == 2
    assert main(["tesa-check", "--shape", "2x2x2", "--tw", "0"]) == 2


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------


def test_cost_table_matches_model_and_is_monotone(capsys):
    assert main(["cost", "--n-list", "1024,2048"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "# matekit-cost/1"
    assert lines[1].startswith("N,c_bimamba,")
    rows = [line.split(",") for line in lines[2:]]
    assert len(rows) == 2
    speedups = [float(r[-1]) for r in rows]
    assert speedups[0] < speedups[1]
    expect = cost_report(1024, RunConfig().model)
    assert rows[0][0] == "1024"
    assert rows[0][1] == str(expect.c_bimamba)
    assert rows[0][6] == str(expect.mate_total)


def test_cost_reruns_are_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    argv = ["cost", "--n-list", "64,256,1024", "--out"]
    assert main(argv + [str(a)]) == 0
    assert main(argv + [str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# train-toy / sample
# ---------------------------------------------------------------------------


def test_train_sample_pipeline(tmp_path, mini_toml, capsys):
    log = tmp_path / "loss.csv"
    ckpt = tmp_path / "ckpt.npz"
    assert main(["train-toy", "--config", str(mini_toml), "--steps", "6",
                 "--seed", "3", "--log", str(log),
                 "--checkpoint", str(ckpt)]) == 0
    lines = log.read_text().splitlines()
    assert lines[0] == "# matekit-train-log/1"
    assert lines[1] == "step,loss"
    assert len(lines) == 2 + 6
    assert lines[2].startswith("0,")

    weights, run_cfg, step = load_checkpoint(ckpt)
    assert step == 6
    assert run_cfg.data.t == 2

    out = tmp_path / "sample.bin"
    assert main(["sample", "--checkpoint", str(ckpt), "--steps", "3",
                 "--out", str(out)]) == 0
    tensor = read_tensor(out)
    assert tensor.shape == (2, 4, 4, 8)
    assert np.isfinite(tensor).all()

    # reruns: byte-identical log and sample
    log2 = tmp_path / "loss2.csv"
    assert main(["train-toy", "--config", str(mini_toml), "--steps", "6",
                 "--seed", "3", "--log", str(log2)]) == 0
    assert log.read_bytes() == log2.read_bytes()
    out2 = tmp_path / "sample2.bin"
    assert main(["sample", "--checkpoint", str(ckpt), "--steps", "3",
                 "--out", str(out2)]) == 0
    assert out.read_bytes() == out2.read_bytes()


def test_sample_without_checkpoint_exits_2(tmp_path):
    assert main(["sample", "--checkpoint", str(tmp_path / "none.npz"),
                 "--out", str(tmp_path / "x.bin")]) == 2


def test_train_toy_seed_defaults_to_config(tmp_path, mini_toml, capsys):
    assert main(["train-toy", "--config", str(mini_toml), "--steps", "2"]) == 0
    assert "(seed 3)" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def test_report_writes_tables_and_figures(tmp_path):
    out_dir = tmp_path / "rep"
    assert main(["report", "--out-dir", str(out_dir)]) == 0
    names = {p.name for p in out_dir.iterdir()}
    assert names == {"cost_scaling.csv", "cost_scaling.png",
                     "speedup_durations.csv", "speedup_durations.png",
                     "adjacency.csv", "adjacency.png"}
    for png in ("cost_scaling.png", "adjacency.png", "speedup_durations.png"):
        blob = (out_dir / png).read_bytes()
        assert blob[:8] == b"\x89PNG\r\n\x1a\n"

    speedup = (out_dir / "speedup_durations.csv").read_text().splitlines()
    assert speedup[0] == "# matekit-report-speedup/1"
    rows = [line.split(",") for line in speedup[2:]]
    assert [r[0] for r in rows] == ["17", "34", "68"]
    assert [float(r[3]) for r in rows] == [5.0, 8.0, 15.0]  # echoed, not derived
    model_speedups = [float(r[2]) for r in rows]
    assert model_speedups[0] < model_speedups[1] < model_speedups[2]

    adjacency = (out_dir / "adjacency.csv").read_text().splitlines()
    assert adjacency[0] == "# matekit-report-adjacency/1"
    by_key = {(r[1], int(r[2])): float(r[3])
              for r in (line.split(",") for line in adjacency[2:])}
    assert by_key[("rms", 4)] == 1.0
    assert by_key[("rowmajor", 1)] == by_key[("rowmajor", 4)]

    # CSVs are byte-stable across runs
    out_dir2 = tmp_path / "rep2"
    assert main(["report", "--out-dir", str(out_dir2)]) == 0
    for name in ("cost_scaling.csv", "speedup_durations.csv", "adjacency.csv"):
        assert (out_dir / name).read_bytes() == (out_dir2 / name).read_bytes()


# ---------------------------------------------------------------------------
# subprocess integration
# ---------------------------------------------------------------------------


def _run_module(args, env=None):
    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    return subprocess.run([sys.executable, "-m", "matekit.cli", *args],
                          capture_output=True, text=True, env=full_env)


def test_subprocess_cost_and_exit_codes():
    proc = _run_module(["cost", "--n-list", "64,128"])
    assert proc.returncode == 0
    assert proc.stdout.startswith("# matekit-cost/1")
    assert _run_module([]).returncode == 2


def test_log_bytes_independent_of_thread_env(tmp_path, mini_toml):
    logs = []
    for threads in ("1", "4"):
        log = tmp_path / f"loss_{threads}.csv"
        proc = _run_module(["train-toy", "--config", str(mini_toml),
                            "--steps", "4", "--seed", "3", "--log", str(log)],
                           env={"MATE_THREADS": threads})
        assert proc.returncode == 0, proc.stderr
        logs.append(log.read_bytes())
    assert logs[0] == logs[1]

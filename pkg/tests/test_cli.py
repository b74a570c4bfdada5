import csv
import os

import numpy as np
import pytest

from wpolab import cli, verify
from wpolab.config import parse_config_text

TINY = ["--preset", "lqr", "--set", "total_steps=300", "--set", "warmup_steps=100", "--set", "eval_interval=2",
        "--set", "eval_episodes=1", "--set", "actor_hidden=8", "--set", "critic_hidden=8"]


def run(argv, capsys=None):
    code = cli.main(argv)
    out = capsys.readouterr() if capsys else None
    return code, out


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_train_two_seeds_writes_outputs(tmp_path, capsys):
    out = tmp_path / "train"
    code, _ = run(["train", *TINY, "--seeds", "1,2", "--out", str(out)], capsys)
    assert code == cli.EXIT_OK
    names = set(os.listdir(out))
    assert {"manifest.cfg", "metrics_seed1.csv", "metrics_seed2.csv", "checkpoint_seed1.txt",
            "checkpoint_seed2.txt", "aggregate.csv", "returns.svg"} <= names
    header, agg = read_csv(out / "aggregate.csv")
    assert header == ["step", "episode", "return_mean", "return_min", "return_max"]
    assert np.all(agg[:, 3] <= agg[:, 2]) and np.all(agg[:, 2] <= agg[:, 4])
    manifest = (out / "manifest.cfg").read_text()
    assert "# seeds=1,2" in manifest
    cfg = parse_config_text(manifest)
    assert cfg.env == "lqr" and cfg.total_steps == 300


def test_rerun_is_identical(tmp_path, capsys):
    outs = []
    for i in range(2):
        out = tmp_path / f"r{i}"
        assert run(["train", *TINY, "--seeds", "3", "--out", str(out)], capsys)[0] == cli.EXIT_OK
        outs.append(out)
    for name in ("metrics_seed3.csv", "aggregate.csv", "checkpoint_seed3.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_eval_reads_checkpoint(tmp_path, capsys):
    out = tmp_path / "t"
    run(["train", *TINY, "--seeds", "0", "--out", str(out)], capsys)
    code, cap = run(["eval", "--checkpoint", str(out / "checkpoint_seed0.txt"), "--episodes", "2"], capsys)
    assert code == cli.EXIT_OK and "episodes=2" in cap.out


def test_unwritable_output_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, cap = run(["train", *TINY, "--out", str(blocker / "sub")], capsys)
    assert code != 0 and "not writable" in cap.err


def test_bad_config_value_exits_with_usage(capsys):
    code, cap = run(["train", "--set", "algorithm=frobnicate"], capsys)
    assert code == cli.EXIT_USAGE and "wpo" in cap.err


def test_default_out_uses_env_var(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("WPOLAB_OUT", str(tmp_path))
    code, _ = run(["flow", "--set", "flow_t_final=0.05", "--set", "flow_cells=256"], capsys)
    assert code == 0 and (tmp_path / "flow" / "flow.csv").exists()


def test_flow_quadratic_rates(tmp_path, capsys):
    code, cap = run(["flow", "--out", str(tmp_path), "--set", "flow_t_final=0.01", "--set", "flow_dt=0.0001"], capsys)
    assert code == 0
    header, rows = read_csv(tmp_path / "flow.csv")
    assert header == ["t", "mean", "stddev", "expected_q"]
    dt = rows[1, 0] - rows[0, 0]
    rates = (rows[1, 1:3] - rows[0, 1:3]) / dt
    np.testing.assert_allclose(rates, [-1.0, -1.0], rtol=0.02)
    assert (tmp_path / "flow.svg").read_text().startswith("<svg")


def test_flow_constant_q_rows_identical(tmp_path, capsys):
    run(["flow", "--out", str(tmp_path), "--set", "flow_q=constant", "--set", "flow_t_final=0.1",
         "--set", "flow_dt=0.01", "--set", "flow_cells=512"], capsys)
    _, rows = read_csv(tmp_path / "flow.csv")
    assert np.all(rows[:, 1:] == rows[0, 1:])


def test_flow_quartic_expected_q_nondecreasing(tmp_path, capsys):
    run(["flow", "--out", str(tmp_path), "--set", "flow_q=quartic", "--set", "flow_t_final=1.0",
         "--set", "flow_lo=-9", "--set", "flow_hi=9", "--set", "flow_cells=1024"], capsys)
    _, rows = read_csv(tmp_path / "flow.csv")
    assert np.min(np.diff(rows[:, 3])) >= -1e-9


def test_flow_cfl_violation_reported(tmp_path, capsys):
    code, cap = run(["flow", "--out", str(tmp_path), "--set", "flow_dt=1.0"], capsys)
    assert code == cli.EXIT_USAGE and "CFL" in cap.err


def test_mog_command(tmp_path, capsys):
    code, _ = run(["mog", "--out", str(tmp_path), "--set", "mog_steps=50", "--set", "mog_batch=64"], capsys)
    assert code == 0
    header, rows = read_csv(tmp_path / "mog_seed0.csv")
    assert header[:3] == ["step", "mean_0", "mean_1"] and len(rows) == 6


@pytest.mark.slow
def test_verify_passes_and_reports_errors(capsys):
    code, cap = run(["verify"], capsys)
    assert code == cli.EXIT_OK
    lines = [ln for ln in cap.out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert lines and all(ln.startswith("PASS") for ln in lines)
    assert all("error=" in ln for ln in lines)


@pytest.mark.slow
def test_verify_detects_corrupted_rescaling(capsys):
    code, cap = run(["verify", "--std-rescale", "1.0"], capsys)
    assert code == cli.EXIT_FAIL
    failed = [ln for ln in cap.out.splitlines() if ln.startswith("FAIL")]
    assert any("SVG(0)" in ln for ln in failed)
    assert verify.STD_RESCALE == 0.5


def test_plot_handles_nan_and_constant_series():
    from wpolab.plot import line_chart_svg

    svg = line_chart_svg({"a": ([0, 1, 2], [1.0, np.nan, 1.0]), "b & c": ([0], [2.0])}, title="<t>")
    assert "&lt;t&gt;" in svg and "b &amp; c" in svg and svg.count("<polyline") == 2

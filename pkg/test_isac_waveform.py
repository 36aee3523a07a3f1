"""
Command-line smoke checks.

Covers:
- design -> simulate -> estimate through dump files.
- Exit code 2 on a bad config, exit code 0 on a small sweep with manifest.
- The validate checks for optimized-mask recovery and completion against
  zero-fill pass on the desk profile.

Run from project root:

    python -m pytest test_isac_waveform.py
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import pandas as pd
import pytest

import isac_waveform
from channel_sim import read_cmat
from experiment_config import DESK_PROFILE
from grid_core import build_grid, read_mask

LOGGER = logging.getLogger("test_isac_waveform")

SMALL = {
    "M": 40,
    "N": 40,
    "cp_duration": 0.9e-6,
    "max_coarse_cells": 64,
    "on_grid": True,
    "delay_spacing": 4.0,
    "doppler_spacing": 4.0,
}


@pytest.fixture()
def workdir(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    monkeypatch.chdir(tmp_path)
    (tmp_path / "small.json").write_text(json.dumps(SMALL), encoding="utf-8")
    return tmp_path


def test_design_simulate_estimate(workdir: Path) -> None:
    cfg_path = str(workdir / "small.json")
    assert isac_waveform.main(["design", "--config", cfg_path, "--out", str(workdir / "mask.txt")]) == 0
    grid = build_grid(40, 40, 1.0e6, 0.9e-6)
    mask = read_mask(workdir / "mask.txt", grid)
    assert mask.K == 2 and mask.allocated > 0

    sim_dir = workdir / "sim"
    rc = isac_waveform.main(
        ["simulate", "--config", cfg_path, "--mask", str(workdir / "mask.txt"), "--out", str(sim_dir)]
    )
    assert rc == 0
    for name in ("tx.cmat", "channel.cmat", "rx.cmat", "mask.txt", "targets.csv"):
        assert (sim_dir / name).exists()
    assert read_cmat(sim_dir / "rx.cmat").shape == (40, 40)

    det_path = workdir / "detections.csv"
    rc = isac_waveform.main([
        "estimate", "--config", cfg_path, "--estimator", "zerofill",
        "--rx", str(sim_dir / "rx.cmat"), "--tx", str(sim_dir / "tx.cmat"),
        "--mask", str(sim_dir / "mask.txt"), "--out", str(det_path),
    ])
    assert rc == 0
    det = pd.read_csv(det_path)
    assert 1 <= len(det) <= 2
    assert (workdir / "logs").is_dir()


def test_bad_config_exits_with_domain_error(workdir: Path) -> None:
    bad = workdir / "bad.json"
    bad.write_text(json.dumps({**SMALL, "mu": 2.0}), encoding="utf-8")
    assert isac_waveform.main(["design", "--config", str(bad)]) == 2


def test_missing_mask_file_is_io_error(workdir: Path) -> None:
    rc = isac_waveform.main(
        ["simulate", "--config", str(workdir / "small.json"), "--mask", str(workdir / "nope.txt")]
    )
    assert rc == 1


def test_small_gain_sweep_writes_csv_and_manifest(workdir: Path) -> None:
    out = workdir / "gain.csv"
    rc = isac_waveform.main([
        "sweep-gain", "--config", str(workdir / "small.json"), "--trials", "1",
        "--values", "1,2", "--methods", "optimized,random", "--out", str(out),
    ])
    assert rc == 0
    frame = pd.read_csv(out)
    assert len(frame) == 2 * 2 * 2
    manifest = json.loads(out.with_name(out.name + ".manifest.json").read_text(encoding="utf-8"))
    assert manifest["csv"]["rows"] == len(frame)

    replay = workdir / "replay.csv"
    rc = isac_waveform.main(["sweep-gain", "--replay", str(out.with_name(out.name + ".manifest.json")),
                             "--out", str(replay)])
    assert rc == 0
    assert replay.read_bytes() == out.read_bytes()


def test_validate_recovery_checks_assert() -> None:
    ok, detail = isac_waveform.check_optimized_recovery(DESK_PROFILE, LOGGER)
    assert ok, detail
    ok, detail = isac_waveform.check_completion_vs_zero_fill(DESK_PROFILE, LOGGER)
    assert ok, detail


def main() -> None:
    raise SystemExit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()

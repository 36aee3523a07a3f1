"""
Monte Carlo harness and result file checks.

Covers:
- Method tags, sweep validation and scenario construction.
- Target/detection association.
- CRB gain sweep: row layout, gain above one, determinism across workers.
- RMSE sweep on a small on-grid scene; determinism across workers.
- Desk-scale acceptance: CRB gain of two at close spacing, fillable-cell
  recovery on optimized masks, sidelobe and RMSE ordering against zero-fill,
  and the bias floor left by empty subcarriers and symbols.
- CSV/manifest emission and replay.

Run from project root:

    python -m pytest test_harness.py
"""

from __future__ import annotations

import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from channel_sim import noise_for_snr, sensing_channel
from crb_engine import crb, fim
from estimator import CompletionConfig, Detection, PartialChannel, identifiable_cells, schatten_complete
from experiment_config import DESK_PROFILE, ConfigError
from grid_core import TargetParams, build_grid
from harness import (
    SweepRunner,
    SweepSpec,
    associate,
    build_scenario,
    completion_config,
    crb_bound_violations,
    parse_method,
    point_config,
    rmse_ordering_violations,
    rmse_scenario_config,
    support_leakage,
)
from oracles import soft_impute
from results import RESULT_COLUMNS, ResultWriter, load_manifest, manifest_path, read_results

LOGGER = logging.getLogger("test_harness")


def _cfg(**kw):
    base = replace(
        DESK_PROFILE,
        M=20,
        N=20,
        cp_duration=0.9e-6,
        max_coarse_cells=16,
        trials=2,
        rng_seed=99,
    )
    return replace(base, **kw)


# ---------- Records and scenario ---------- #


def test_parse_method() -> None:
    assert parse_method("optimized+completion") == ("optimized", "completion")
    assert parse_method("random+zero_fill") == ("random", "zerofill")
    assert parse_method("random_contiguous") == ("random_contiguous", None)
    with pytest.raises(ConfigError):
        parse_method("clever")
    with pytest.raises(ConfigError):
        parse_method("random+magic")


def test_sweep_spec_validation_and_dict() -> None:
    spec = SweepSpec("mu", (0.1, 0.2), 3, ("optimized",), 5)
    assert SweepSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        SweepSpec("mu", (0.2, 0.1), 3, ("optimized",), 5)
    with pytest.raises(ConfigError):
        SweepSpec("bandwidth", (1.0,), 3, ("optimized",), 5)
    with pytest.raises(ConfigError):
        SweepSpec("mu", (0.1,), 0, ("optimized",), 5)


def test_point_config() -> None:
    cfg = _cfg()
    assert point_config(cfg, "inter_delay_spacing", 2.5).delay_spacing == 2.5
    assert point_config(cfg, "mu", 0.4).mu == 0.4
    w = point_config(cfg, "weights", 0.8)
    assert (w.eps_tau, w.eps_nu) == pytest.approx((0.2, 0.8))


def test_build_scenario_spacing_and_determinism() -> None:
    cfg = _cfg(delay_spacing=2.0, doppler_spacing=1.0)
    grid = cfg.grid
    targets = build_scenario(cfg)
    assert len(targets) == cfg.n_targets
    assert targets[1].tau - targets[0].tau == pytest.approx(2.0 / grid.B)
    assert targets[1].nu - targets[0].nu == pytest.approx(1.0 / grid.burst_duration)
    assert targets[0].beta.imag == 0.0 and targets[0].beta.real > 0
    assert len(targets[0].comm_paths) == cfg.n_paths

    rng_a = np.random.default_rng(4)
    rng_b = np.random.default_rng(4)
    a = build_scenario(cfg, rng_a)
    b = build_scenario(cfg, rng_b)
    assert [t.beta for t in a] == [t.beta for t in b]


def test_rmse_scenario_is_on_grid_and_resolvable() -> None:
    cfg = rmse_scenario_config(_cfg())
    grid = cfg.grid
    for tgt in build_scenario(cfg):
        assert tgt.tau * grid.B == pytest.approx(round(tgt.tau * grid.B))
        assert tgt.nu * grid.burst_duration == pytest.approx(round(tgt.nu * grid.burst_duration))
    assert cfg.delay_spacing >= 4.0 and cfg.doppler_spacing >= 4.0


def test_associate_by_minimum_distance() -> None:
    cfg = _cfg(delay_spacing=3.0)
    targets = build_scenario(cfg)
    d_tau, d_nu = 1.0 / cfg.grid.B, 1.0 / cfg.grid.burst_duration
    det = Detection(
        tau_hat=np.array([targets[1].tau + 0.1 * d_tau, targets[0].tau]),
        nu_hat=np.array([targets[1].nu, targets[0].nu - 0.2 * d_nu]),
        magnitudes=np.ones(2),
    )
    assert associate(targets, det, d_tau, d_nu) == [1, 0]

    single = Detection(tau_hat=np.array([targets[0].tau]), nu_hat=np.array([targets[0].nu]), magnitudes=np.ones(1))
    assert associate(targets, single, d_tau, d_nu) == [0, None]


# ---------- Sweeps ---------- #


def _gain_spec(cfg, values=(0.5, 1.0, 2.0)):
    return SweepSpec(
        variable="inter_delay_spacing",
        values=values,
        trials=cfg.trials,
        methods=("optimized", "random", "random_contiguous"),
        master_seed=cfg.rng_seed,
    )


def test_gain_sweep_rows_and_gain() -> None:
    cfg = _cfg(trials=4)
    rows = SweepRunner(LOGGER, cfg).run_gain_sweep(_gain_spec(cfg))
    assert len(rows) == 3 * 3 * cfg.n_targets
    assert [r.method for r in rows[:6]] == [
        "optimized", "optimized", "random", "random", "random_contiguous", "random_contiguous",
    ]
    for r in rows:
        assert r.study == "gain" and r.trials == 4
        assert r.crb_delay_s > 0
        assert r.g_s <= math.floor(cfg.mu * cfg.grid.L)
        if r.method != "optimized":
            assert r.g_s == math.floor(cfg.mu * cfg.grid.L)
        if r.method == "optimized":
            assert r.crb_gain == pytest.approx(1.0)
        else:
            assert r.crb_gain > 1.0


def test_gain_sweep_rejects_rmse_variable() -> None:
    cfg = _cfg()
    spec = SweepSpec("sensing_snr", (10.0,), 1, ("optimized",), 1)
    with pytest.raises(ConfigError):
        SweepRunner(LOGGER, cfg).run_gain_sweep(spec)


def test_gain_csv_is_identical_across_worker_counts(tmp_path: Path) -> None:
    cfg = _cfg(trials=3)
    spec = _gain_spec(cfg, values=(1.0, 2.0))
    writer = ResultWriter(LOGGER)
    one = writer.write_csv(SweepRunner(LOGGER, cfg, workers=1).run_gain_sweep(spec), tmp_path / "w1.csv")
    many = writer.write_csv(SweepRunner(LOGGER, cfg, workers=3).run_gain_sweep(spec), tmp_path / "w3.csv")
    assert one.read_bytes() == many.read_bytes()


def test_rmse_sweep_small_scene() -> None:
    cfg = _cfg(trials=2)
    spec = SweepSpec(
        variable="sensing_snr",
        values=(20.0, 30.0),
        trials=2,
        methods=("optimized+zerofill", "optimized+completion", "random+linear"),
        master_seed=cfg.rng_seed,
    )
    runner = SweepRunner(LOGGER, cfg)
    rows = runner.run_rmse_sweep(spec)
    assert runner.cfg is cfg
    assert len(rows) == 2 * 3 * cfg.n_targets
    for r in rows:
        assert r.study == "rmse"
        assert 0.0 <= r.detection_failure_rate <= 1.0
        assert r.gamma_s_db == pytest.approx(r.sweep_value)
        assert r.crb_delay_s > 0 and r.crb_doppler_hz > 0
        assert math.isnan(r.crb_gain)
    with pytest.raises(ConfigError):
        runner.run_rmse_sweep(SweepSpec("sensing_snr", (1.0,), 1, ("optimized",), 1))


def test_rmse_csv_is_identical_across_worker_counts(tmp_path: Path) -> None:
    cfg = _cfg(trials=3)
    spec = SweepSpec(
        variable="sensing_snr",
        values=(20.0, 30.0),
        trials=3,
        methods=("optimized+completion", "optimized+zerofill", "random+linear"),
        master_seed=cfg.rng_seed,
    )
    writer = ResultWriter(LOGGER)
    one = writer.write_csv(SweepRunner(LOGGER, cfg, workers=1).run_rmse_sweep(spec), tmp_path / "w1.csv")
    many = writer.write_csv(SweepRunner(LOGGER, cfg, workers=3).run_rmse_sweep(spec), tmp_path / "w3.csv")
    assert one.read_bytes() == many.read_bytes()


# ---------- Desk-scale studies ---------- #


def _desk_gain(rows, method: str, spacing: float) -> float:
    return float(np.mean([r.crb_gain for r in rows if r.method == method and r.sweep_value == spacing]))


def test_desk_gain_reaches_two_at_close_spacing() -> None:
    cfg = replace(DESK_PROFILE, workers=4)
    spec = _gain_spec(cfg, values=(0.5, 1.0))
    assert spec.trials == 20
    rows = SweepRunner(LOGGER, cfg).run_gain_sweep(spec)
    for spacing in spec.values:
        for method in ("random", "random_contiguous"):
            gain = _desk_gain(rows, method, spacing)
            LOGGER.info("spacing %.1f %s gain %.3f", spacing, method, gain)
            assert gain >= 2.0, f"{method} at {spacing}: {gain:.3f}"


def _recovery_cfg(**kw):
    return replace(DESK_PROFILE, M=64, N=64, cp_duration=0.9e-6, rng_seed=17, **kw)


def test_optimized_mask_completion_recovers_fillable_cells() -> None:
    runner = SweepRunner(LOGGER, _recovery_cfg())
    knobs = replace(completion_config(runner.cfg), decay=0.95, max_iters=3000, tol=1e-9)
    errors = [runner.recovery_trial(seed, knobs) for seed in range(10)]
    assert np.mean([e.fillable for e in errors]) < 1e-2
    for e in errors:
        assert e.fillable_cells > 0
        # cells on empty subcarriers or symbols bound the full error from below
        assert e.full >= e.floor * (1 - 1e-9)


def test_nuclear_norm_completion_matches_soft_impute_on_an_optimized_mask() -> None:
    cfg = _recovery_cfg()
    runner = SweepRunner(LOGGER, cfg)
    _, targets, mask = runner._designed_trial(0)
    H = sensing_channel(cfg.grid, targets).values
    partial = PartialChannel(np.where(mask.union, H, 0), np.array(mask.union))
    ours = schatten_complete(partial, CompletionConfig(p=1.0, decay=0.95, max_iters=3000, tol=1e-10)).values
    ref = soft_impute(partial.values, partial.observed, inner_iters=200)
    ident = identifiable_cells(mask.union)
    scale = np.linalg.norm(ref[ident])
    assert np.linalg.norm((ours - ref)[ident]) / scale < 1e-3


def test_completion_beats_zero_fill_on_sidelobes() -> None:
    runner = SweepRunner(LOGGER, replace(DESK_PROFILE, M=40, N=40, cp_duration=0.9e-6, max_coarse_cells=64))
    ratios = np.array([runner.sidelobe_trial(seed, 20.0) for seed in range(20)])
    completion, zerofill = ratios[:, 0], ratios[:, 1]
    assert completion.mean() > zerofill.mean()
    assert np.median(completion / zerofill) > 1.0


def test_desk_rmse_sanity_ordering_and_zero_fill_bound() -> None:
    cfg = _recovery_cfg(workers=4)
    spec = SweepSpec(
        variable="sensing_snr",
        values=(25.0, 30.0, 35.0),
        trials=50,
        methods=("optimized+completion", "optimized+zerofill"),
        master_seed=cfg.rng_seed,
    )
    rows = SweepRunner(LOGGER, cfg).run_rmse_sweep(spec)
    assert rmse_ordering_violations(rows) == []
    for value in spec.values:
        point = [r for r in rows if r.sweep_value == value]
        assert crb_bound_violations(point, "optimized+zerofill"), f"zero-fill meets the bound at {value} dB"
        for r in point:
            if r.method == "optimized+completion":
                assert r.detection_failure_rate <= 0.1


def test_empty_rows_and_columns_leave_a_bias_above_the_bound() -> None:
    grid = build_grid(64, 64, 1.0e6, 0.9e-6)
    support = np.ones(grid.shape, dtype=bool)
    support[26:38] = False
    support[:, 26:38] = False
    assert identifiable_cells(support).sum() == 52 * 52
    d_tau, d_nu = 1.0 / grid.B, 1.0 / grid.burst_duration

    errors = []
    bounds = []
    for phase in (0.3, 1.1, 2.0, 2.9):
        targets = [
            TargetParams(beta=1.0 + 0j, tau=21 * d_tau, nu=3 * d_nu),
            TargetParams(beta=0.8 * np.exp(1j * phase), tau=25 * d_tau, nu=7 * d_nu),
        ]
        err_tau, _ = support_leakage(grid, support, targets)
        errors.extend(err_tau)
        noise = noise_for_snr(10.0 ** 3.0, 1.0, [t.beta for t in targets], int(support.sum()))
        C = crb(fim(grid, support, targets, 1.0, noise))
        bounds.append(float(np.mean(np.diag(C.C_tau))))
    rms = math.sqrt(float(np.mean(np.square(errors))))
    # a perfect fill of every identifiable cell still misses 3 x sqrt-CRB at 30 dB
    assert rms > 3.0 * math.sqrt(max(bounds))

    full = np.ones(grid.shape, dtype=bool)
    err_tau, err_nu = support_leakage(grid, full, targets)
    assert np.max(np.abs(err_tau)) < 1e-6 * d_tau and np.max(np.abs(err_nu)) < 1e-6 * d_nu


# ---------- Results ---------- #


def test_empty_rows_write_header_only(tmp_path: Path) -> None:
    path = ResultWriter(LOGGER).write_csv([], tmp_path / "empty.csv")
    assert path.read_text(encoding="utf-8") == ",".join(RESULT_COLUMNS) + "\n"


def test_emit_and_replay_manifest(tmp_path: Path) -> None:
    cfg = _cfg(trials=1)
    spec = _gain_spec(cfg, values=(1.0,))
    rows = SweepRunner(LOGGER, cfg).run_gain_sweep(spec)
    csv_path, man_path = ResultWriter(LOGGER).emit(rows, tmp_path / "gain.csv", cfg, spec)
    assert man_path == manifest_path(csv_path)

    cfg2, spec2, payload = load_manifest(man_path)
    assert cfg2 == cfg and spec2 == spec
    assert payload["csv"]["rows"] == len(rows)
    assert len(payload["runtime_s"]) == len(rows)

    records = read_results(csv_path)
    assert len(records) == len(rows)
    assert list(records[0]) == list(RESULT_COLUMNS)

    replayed = SweepRunner(LOGGER, cfg2).run_gain_sweep(spec2)
    again, _ = ResultWriter(LOGGER).emit(replayed, tmp_path / "replay.csv", cfg2, spec2)
    assert again.read_bytes() == csv_path.read_bytes()


def main() -> None:
    raise SystemExit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()

"""
Estimator chain checks.

Covers:
- LS estimate and its division guard.
- Schatten-p completion: monotone steps at fixed lambda, rank-1 recovery,
  agreement with a nuclear-norm continuation solver at p = 1, error split
  into fillable and unidentifiable cells.
- Linear interpolation baseline edge cases.
- DD transform scaling/placement, peak detection and refinement.
- Exhaustive ML reference on a tiny grid.
- End-to-end pipeline on a noiseless on-grid scene.

Run from project root:

    python -m pytest test_estimator.py
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from channel_sim import assemble_waveform, gen_symbols, rx_signal, sensing_channel, trial_rng
from estimator import (
    CompletionConfig,
    DdMap,
    EstimationError,
    PartialChannel,
    ambiguity_function,
    completion_objective,
    completion_step,
    dd_transform,
    detect_peaks,
    identifiable_cells,
    inverse_dd_transform,
    kill_level,
    linear_interp_baseline,
    ls_channel_estimate,
    ml_estimate,
    ml_residuals,
    peak_to_sidelobe_ratio,
    pipeline_estimate,
    recovery_errors,
    schatten_complete,
    schatten_norm,
    shrink_singular_values,
    shrinkage_penalty,
    zero_fill,
)
from grid_core import TargetParams, build_grid, mask_from_labels
from oracles import soft_impute


def _rank1(seed: int, M: int = 32, N: int = 32, fraction: float = 0.5):
    rng = trial_rng(31, seed)
    u = np.exp(2j * np.pi * rng.random(M))
    v = np.exp(2j * np.pi * rng.random(N))
    H = np.outer(u, v)
    observed = rng.random((M, N)) < fraction
    return H, PartialChannel(np.where(observed, H, 0), observed)


def _full_mask(grid):
    return mask_from_labels(grid, np.zeros(grid.shape, dtype=int), 1)


# ---------- LS ---------- #


def test_ls_estimate_recovers_channel_on_mask() -> None:
    grid = build_grid(8, 8, 1.0e6, 0.9e-6)
    rng = trial_rng(32, 0)
    labels = np.where(rng.random(grid.shape) < 0.5, 0, -1)
    mask = mask_from_labels(grid, labels, 1)
    H = sensing_channel(grid, [TargetParams(0.5 + 0.5j, 0.2e-6, 1e3)])
    X = assemble_waveform(1.5, gen_symbols(grid, "QPSK", rng), mask)
    partial = ls_channel_estimate(rx_signal(X, H, 0.0), X, mask)
    np.testing.assert_allclose(partial.values[mask.union], H.values[mask.union], rtol=1e-12)
    assert np.all(partial.values[~mask.union] == 0)
    assert partial.fraction == pytest.approx(mask.allocated / grid.L)


def test_ls_estimate_division_guard() -> None:
    grid = build_grid(4, 4, 1.0e6)
    mask = _full_mask(grid)
    X = np.ones(grid.shape, dtype=complex)
    X[2, 1] = 0.0
    with pytest.raises(EstimationError, match=r"\(2,1\)"):
        ls_channel_estimate(np.ones(grid.shape, dtype=complex), X, mask)


def test_partial_channel_rejects_values_off_mask() -> None:
    observed = np.zeros((2, 2), dtype=bool)
    with pytest.raises(EstimationError):
        PartialChannel(np.ones((2, 2), dtype=complex), observed)


# ---------- Completion ---------- #


def test_shrinkage_rules() -> None:
    s = np.array([4.0, 1.0, 0.25, 0.0])
    np.testing.assert_allclose(shrink_singular_values(s, 0.5, 1.0), [3.5, 0.5, 0.0, 0.0])
    # weights come from the singular values being shrunk
    np.testing.assert_allclose(shrink_singular_values(s, 0.5, 0.5), [3.75, 0.5, 0.0, 0.0])
    assert kill_level(0.5, 0.5) == pytest.approx(0.5 ** (1.0 / 1.5))
    assert kill_level(0.5, 1.0) == pytest.approx(0.5)
    assert schatten_norm(np.diag([3.0, 4.0]), 1.0) == pytest.approx(7.0)


@pytest.mark.parametrize("p", [1.0, 0.5, 0.3])
def test_shrinkage_is_the_proximal_map_of_its_penalty(p: float) -> None:
    lam = 0.7
    xs = np.linspace(0.0, 6.0, 60001)
    phi = shrinkage_penalty(xs, lam, p)
    assert phi[0] == 0.0
    assert np.all(np.diff(phi) >= -1e-12)
    for y in (0.3, kill_level(lam, p) * 1.01, 1.5, 4.0):
        x_star = float(shrink_singular_values(np.array([y]), lam, p)[0])
        brute = xs[np.argmin(0.5 * (xs - y) ** 2 + phi)]
        assert x_star == pytest.approx(brute, abs=2e-4)
    if p == 1.0:
        np.testing.assert_allclose(phi, lam * xs, atol=1e-12)


@pytest.mark.parametrize("p", [1.0, 0.5])
def test_completion_steps_are_monotone_at_fixed_lambda(p: float) -> None:
    _, partial = _rank1(1, 20, 20, 0.4)
    rng = trial_rng(33, 0)
    partial = PartialChannel(
        np.where(partial.observed, partial.values + 0.05 * rng.standard_normal((20, 20)), 0),
        partial.observed,
    )
    lam = 0.5
    Z = zero_fill(partial)
    prev = completion_objective(Z, partial, lam, p)
    for _ in range(30):
        Z, _ = completion_step(Z, partial, lam, p)
        cur = completion_objective(Z, partial, lam, p)
        assert cur <= prev + 1e-9 * max(1.0, abs(prev))
        prev = cur


def test_completion_recovers_rank_one() -> None:
    H, partial = _rank1(2)
    res = schatten_complete(partial, CompletionConfig(p=0.5, tol=1e-6, max_iters=500))
    assert np.linalg.norm(res.values - H) / np.linalg.norm(H) < 1e-3
    assert res.rank == 1
    # observed entries are kept exactly
    np.testing.assert_array_equal(res.values[partial.observed], partial.values[partial.observed])


def test_completion_nuclear_norm_matches_soft_impute() -> None:
    H, partial = _rank1(3, 24, 24, 0.6)
    ours = schatten_complete(partial, CompletionConfig(p=1.0, tol=1e-9, max_iters=400)).values
    ref = soft_impute(partial.values, partial.observed)
    assert np.linalg.norm(ours - H) / np.linalg.norm(H) < 1e-2
    assert np.linalg.norm(ref - H) / np.linalg.norm(H) < 1e-2
    assert np.linalg.norm(ours - ref) / np.linalg.norm(ref) < 2e-2


def test_completion_records_history_and_schedule() -> None:
    _, partial = _rank1(4, 16, 16, 0.5)
    cfg = CompletionConfig(p=0.5, lambda_schedule=(2.0, 1.0, 0.5), max_iters=5, track_objective=True)
    np.testing.assert_allclose(cfg.lambdas(99.0), [2.0, 1.0, 0.5, 0.5, 0.5])
    res = schatten_complete(partial, cfg)
    assert len(res.history) == res.iterations
    with pytest.raises(EstimationError):
        CompletionConfig(lambda_schedule=(1.0, 2.0))
    with pytest.raises(EstimationError):
        CompletionConfig(decay=1.0)
    with pytest.raises(EstimationError):
        schatten_complete(PartialChannel(np.zeros((3, 3), complex), np.zeros((3, 3), bool)))


def test_completion_never_converges_on_a_zero_iterate() -> None:
    _, partial = _rank1(5, 12, 12, 0.5)
    # lambda far above every kill level keeps the iterate at zero
    cfg = CompletionConfig(p=0.5, lambda_schedule=(1.0e6,), max_iters=4, tol=1.0)
    res = schatten_complete(partial, cfg)
    assert res.rank == 0
    assert not res.converged
    assert res.iterations == 4
    np.testing.assert_array_equal(res.values, zero_fill(partial))


def test_recovery_errors_split_by_identifiable_cells() -> None:
    observed = np.zeros((4, 5), dtype=bool)
    observed[0, [0, 1]] = True
    observed[2, 3] = True
    ident = identifiable_cells(observed)
    assert ident.sum() == 2 * 3
    assert ident[2, 0] and not ident[1, 0] and not ident[0, 2]

    H = np.ones((4, 5), dtype=complex)
    H_hat = np.where(ident, H, 0)
    H_hat[2, 0] = 0.5
    errs = recovery_errors(H_hat, H, observed)
    assert errs.fillable_cells == 3
    assert errs.fillable == pytest.approx(0.5 / math.sqrt(3))
    assert errs.floor == pytest.approx(math.sqrt(14 / 20))
    assert errs.full == pytest.approx(math.sqrt(14 + 0.25) / math.sqrt(20))
    assert errs.full >= errs.floor
    with pytest.raises(EstimationError):
        recovery_errors(H, np.zeros_like(H), observed)


def test_completion_leaves_unobserved_rows_and_columns_empty() -> None:
    H, partial = _rank1(6, 24, 24, 0.6)
    observed = partial.observed.copy()
    observed[5:8] = False
    observed[:, 10] = False
    partial = PartialChannel(np.where(observed, H, 0), observed)
    res = schatten_complete(partial, CompletionConfig(p=0.5, tol=1e-9, max_iters=800))
    ident = identifiable_cells(observed)
    assert np.max(np.abs(res.values[~ident])) < 1e-8
    errs = recovery_errors(res.values, H, observed)
    assert errs.fillable < 1e-3
    assert errs.full >= errs.floor * (1 - 1e-9)


def test_lambda_schedule_is_floored() -> None:
    cfg = CompletionConfig(decay=0.5, lambda_floor=0.1, max_iters=6)
    np.testing.assert_allclose(cfg.lambdas(2.0), [2.0, 1.0, 0.5, 0.25, 0.2, 0.2])
    with pytest.raises(EstimationError):
        CompletionConfig(lambda_floor=1.0)


# ---------- Linear interpolation ---------- #


def test_linear_interp_examples() -> None:
    values = np.zeros((4, 5), dtype=complex)
    observed = np.zeros((4, 5), dtype=bool)
    values[0, [0, 4]] = [0.0, 4.0 + 4.0j]
    observed[0, [0, 4]] = True
    values[1, 2] = 7.0
    observed[1, 2] = True
    values[3, [1, 3]] = [1.0, 3.0]
    observed[3, [1, 3]] = True
    res = linear_interp_baseline(PartialChannel(values, observed))

    np.testing.assert_allclose(res.values[0], [0, 1 + 1j, 2 + 2j, 3 + 3j, 4 + 4j])
    # single sample: nearest interpolated row, observed sample kept
    np.testing.assert_allclose(res.values[1], [0, 1 + 1j, 7, 3 + 3j, 4 + 4j])
    # constant beyond the ends
    np.testing.assert_allclose(res.values[3], [1, 1, 2, 3, 3])
    assert res.empty_rows == (2,)
    np.testing.assert_array_equal(res.values[2], 0)


# ---------- DD domain ---------- #


def test_dd_peak_location_and_height() -> None:
    grid = build_grid(32, 16, 1.0e6, 0.9e-6)
    tgt = TargetParams(beta=1.0, tau=5 / grid.B, nu=-3 / grid.burst_duration)
    dd = dd_transform(sensing_channel(grid, [tgt]).values, grid)
    i, j = np.unravel_index(np.argmax(np.abs(dd.values)), dd.shape)
    assert (i, j) == dd.bin_of(tgt.tau, tgt.nu) == (5, 16 // 2 - 3)
    assert abs(dd.values[i, j]) == pytest.approx(math.sqrt(32 * 16))
    np.testing.assert_allclose(inverse_dd_transform(dd), sensing_channel(grid, [tgt]).values, atol=1e-12)


def test_detect_peaks_with_guard_and_refinement() -> None:
    grid = build_grid(32, 32, 1.0e6, 0.9e-6)
    targets = [
        TargetParams(beta=1.0, tau=4 / grid.B, nu=2 / grid.burst_duration),
        TargetParams(beta=0.6, tau=12.3 / grid.B, nu=-5.2 / grid.burst_duration),
    ]
    dd = dd_transform(sensing_channel(grid, targets).values, grid)
    det = detect_peaks(dd, 2, guard=2, refine=True)
    assert det.count == 2 and not det.shortfall
    assert det.tau_hat[0] == pytest.approx(targets[0].tau, abs=0.05 / grid.B)
    assert det.nu_hat[0] == pytest.approx(targets[0].nu, abs=0.05 / grid.burst_duration)
    # off-grid target: refinement lands within half a bin
    assert abs(det.tau_hat[1] - targets[1].tau) < 0.5 / grid.B
    assert abs(det.nu_hat[1] - targets[1].nu) < 0.5 / grid.burst_duration
    assert peak_to_sidelobe_ratio(dd, det.bins[:1], guard=2) > 1.0


def test_detect_peaks_shortfall_and_bad_k() -> None:
    dd = DdMap(values=np.zeros((8, 8), dtype=complex), delay_bin=1.0, doppler_bin=1.0)
    dd.values[3, 4] = 1.0
    det = detect_peaks(dd, 3)
    assert det.count == 1 and det.shortfall
    with pytest.raises(EstimationError):
        detect_peaks(dd, 0)


def test_ambiguity_function_full_mask_is_a_spike() -> None:
    grid = build_grid(8, 8, 1.0e6)
    amb = ambiguity_function(_full_mask(grid))
    assert amb[0, 4] == pytest.approx(1.0)
    assert amb.sum() == pytest.approx(1.0)


# ---------- ML reference ---------- #


def test_ml_estimate_finds_on_grid_pair() -> None:
    grid = build_grid(8, 8, 1.0e6, 0.9e-6)
    d_tau, d_nu = 1 / grid.B, 1 / grid.burst_duration
    targets = [
        TargetParams(beta=1.0, tau=1 * d_tau, nu=0.0),
        TargetParams(beta=0.7j, tau=3 * d_tau, nu=2 * d_nu),
    ]
    mask = _full_mask(grid)
    X = assemble_waveform(1.0, gen_symbols(grid, "QPSK", 7), mask)
    R = rx_signal(X, sensing_channel(grid, targets), 1e-4, trial_rng(34, 0))
    delays = np.arange(5) * d_tau
    dopplers = np.arange(-2, 3) * d_nu
    det = ml_estimate(R.values, X, grid, 2, delays, dopplers)
    found = sorted(zip(np.round(det.tau_hat / d_tau), np.round(det.nu_hat / d_nu)))
    assert found == [(1.0, 0.0), (3.0, 2.0)]

    truth = [(t.tau, t.nu) for t in targets]
    wrong = [(t.tau, t.nu + d_nu) for t in targets]
    res = ml_residuals(R.values, X, grid, [truth, wrong])
    assert res[0] < res[1]
    with pytest.raises(EstimationError):
        ml_estimate(R.values, X, grid, 2, delays, dopplers, max_hypotheses=10)


def test_ml_estimate_rejects_more_targets_than_candidates() -> None:
    grid = build_grid(8, 8, 1.0e6, 0.9e-6)
    mask = _full_mask(grid)
    X = assemble_waveform(1.0, gen_symbols(grid, "QPSK", 7), mask)
    R = rx_signal(X, sensing_channel(grid, [TargetParams(beta=1.0, tau=0.0, nu=0.0)]), 0.0)
    with pytest.raises(EstimationError, match="candidate"):
        ml_estimate(R.values, X, grid, 3, [0.0], [0.0, 1.0e3])
    with pytest.raises(EstimationError, match="candidate"):
        ml_estimate(R.values, X, grid, 1, [], [0.0])


# ---------- Pipeline ---------- #


@pytest.mark.parametrize("method", ["completion", "linear", "zerofill"])
def test_pipeline_full_mask_noiseless(method: str) -> None:
    grid = build_grid(32, 32, 1.0e6, 0.9e-6)
    d_tau, d_nu = 1 / grid.B, 1 / grid.burst_duration
    targets = [
        TargetParams(beta=1.0, tau=6 * d_tau, nu=3 * d_nu),
        TargetParams(beta=0.8, tau=14 * d_tau, nu=-6 * d_nu),
    ]
    mask = _full_mask(grid)
    X = assemble_waveform(1.0, gen_symbols(grid, "QPSK", 1), mask)
    R = rx_signal(X, sensing_channel(grid, targets), 0.0)
    res = pipeline_estimate(R, X, mask, 2, method)
    order = np.argsort(res.detection.tau_hat)
    np.testing.assert_allclose(res.detection.tau_hat[order], [6 * d_tau, 14 * d_tau], atol=1e-3 * d_tau)
    np.testing.assert_allclose(res.detection.nu_hat[order], [3 * d_nu, -6 * d_nu], atol=1e-3 * d_nu)


def test_pipeline_rejects_unknown_method() -> None:
    grid = build_grid(4, 4, 1.0e6)
    mask = _full_mask(grid)
    X = np.ones(grid.shape, dtype=complex)
    with pytest.raises(EstimationError):
        pipeline_estimate(X, X, mask, 1, "magic")


def main() -> None:
    raise SystemExit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()

"""
Channel synthesis checks.

Covers:
- Seeded streams are reproducible and independent per key.
- Vectorized sensing channel against the scalar triple loop.
- Waveform masking, received signal shape/noise level.
- SNR bookkeeping and its inverse.
- CMAT dump codec.

Run from project root:

    python -m pytest test_channel_sim.py
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from channel_sim import (
    CONSTELLATIONS,
    ChannelError,
    assemble_waveform,
    comm_channel,
    comm_rx_signal,
    comm_snr,
    derive_seed,
    draw_amplitudes,
    gen_symbols,
    noise_for_snr,
    processing_gain,
    read_cmat,
    rx_signal,
    sensing_channel,
    sensing_snr,
    spectral_efficiency,
    trial_rng,
    write_cmat,
)
from grid_core import CommPath, GridError, TargetParams, build_grid, mask_from_labels
from oracles import scalar_sensing_channel


def _grid():
    return build_grid(12, 10, 1.0e6, 0.9e-6)


def _targets():
    return [
        TargetParams(beta=0.7 - 0.2j, tau=0.31e-6, nu=2.5e3),
        TargetParams(beta=-0.1 + 0.4j, tau=0.42e-6, nu=-7.0e3),
    ]


def test_trial_rng_reproducible_and_keyed() -> None:
    a = trial_rng(7, 1, 2, 3).standard_normal(5)
    b = trial_rng(7, 1, 2, 3).standard_normal(5)
    c = trial_rng(7, 1, 2, 4).standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    assert derive_seed(7, 1) == derive_seed(7, 1)
    assert 0 <= derive_seed(7, 1) < 2 ** 63


@pytest.mark.parametrize("name", sorted(CONSTELLATIONS))
def test_constellations_unit_power(name: str) -> None:
    assert np.mean(np.abs(CONSTELLATIONS[name]) ** 2) == pytest.approx(1.0)


def test_gen_symbols_rejects_unknown_constellation() -> None:
    with pytest.raises(ChannelError):
        gen_symbols(_grid(), "64APSK", 0)


def test_sensing_channel_matches_scalar_loop() -> None:
    grid = _grid()
    H = sensing_channel(grid, _targets())
    np.testing.assert_allclose(H.values, scalar_sensing_channel(grid, _targets()), rtol=0, atol=1e-12)
    assert H.kind == "sensing"


def test_sensing_channel_rejects_invalid_target() -> None:
    grid = build_grid(12, 10, 1.0e6, 0.2e-6)
    with pytest.raises(ChannelError):
        sensing_channel(grid, _targets())


def test_waveform_is_zero_off_mask() -> None:
    grid = _grid()
    labels = np.full(grid.shape, -1)
    labels[::2, ::3] = 0
    mask = mask_from_labels(grid, labels, 1)
    X = assemble_waveform(2.0, gen_symbols(grid, "QPSK", 3), mask)
    assert np.all(X[~mask.union] == 0)
    np.testing.assert_allclose(np.abs(X[mask.union]), 2.0)


def test_rx_signal_noise_level() -> None:
    grid = build_grid(200, 200, 1.0e6, 0.9e-6)
    X = np.ones(grid.shape, dtype=complex)
    H = sensing_channel(grid, [TargetParams(beta=0.0, tau=0.0, nu=0.0)])
    R = rx_signal(X, H, 0.5, trial_rng(1, 0))
    assert np.mean(np.abs(R.values) ** 2) == pytest.approx(0.5, rel=0.03)

    clean = rx_signal(X, H, 0.0)
    assert np.all(clean.values == 0)
    with pytest.raises(ChannelError):
        rx_signal(X, H, -1.0)


def test_comm_receive_path() -> None:
    grid = _grid()
    ue = TargetParams(beta=1.0, tau=0.3e-6, nu=0.0, comm_paths=(CommPath(0.5, 0.1e-6, 10.0),))
    Hk = comm_channel(grid, ue, 0)
    np.testing.assert_allclose(np.abs(Hk.values), 0.5)
    Y = comm_rx_signal(np.ones(grid.shape, dtype=complex), Hk, 0.0)
    np.testing.assert_allclose(Y.values, Hk.values)
    with pytest.raises(ChannelError):
        comm_rx_signal(np.ones(grid.shape), sensing_channel(grid, _targets()), 0.0)
    with pytest.raises(ChannelError):
        comm_channel(grid, TargetParams(beta=1.0, tau=0.0, nu=0.0))


def test_snr_bookkeeping_inverts() -> None:
    betas = [0.3 + 0.1j, -0.2j]
    noise = noise_for_snr(100.0, 2.0, betas, 50)
    assert sensing_snr(2.0, betas, 50, noise) == pytest.approx(100.0)
    assert noise_for_snr(math.inf, 2.0, betas, 50) == 0.0
    assert sensing_snr(2.0, betas, 50, 0.0) == math.inf
    with pytest.raises(ChannelError):
        sensing_snr(2.0, betas, 0, 1.0)


def test_processing_gain_and_spectral_efficiency() -> None:
    grid = build_grid(4, 4, 1.0)
    labels = np.full(grid.shape, -1)
    labels[:2, :2] = 0
    mask = mask_from_labels(grid, labels, 1)
    assert processing_gain(mask) == 4
    assert spectral_efficiency(mask, 0, 15.0) == pytest.approx(4 * 4.0 / 16)
    ue = TargetParams(beta=1.0, tau=0.0, nu=0.0, comm_paths=(CommPath(2.0),))
    assert comm_snr(0.5, ue, 0.1) == pytest.approx(20.0)


def test_draw_amplitudes_power() -> None:
    rng = trial_rng(3, 0)
    draws = np.concatenate([draw_amplitudes(rng, [4.0]) for _ in range(20000)])
    assert np.mean(np.abs(draws) ** 2) == pytest.approx(4.0, rel=0.05)


def test_cmat_roundtrip_and_errors(tmp_path: Path) -> None:
    rng = trial_rng(5, 0)
    A = rng.standard_normal((3, 7)) + 1j * rng.standard_normal((3, 7))
    path = write_cmat(A, tmp_path / "a.cmat")
    np.testing.assert_array_equal(read_cmat(path), A)

    raw = path.read_bytes()
    (tmp_path / "short.cmat").write_bytes(raw[:-16])
    with pytest.raises(GridError):
        read_cmat(tmp_path / "short.cmat")
    (tmp_path / "bad.cmat").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(GridError):
        read_cmat(tmp_path / "bad.cmat")


def main() -> None:
    raise SystemExit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()

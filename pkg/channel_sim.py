"""
channel_sim.py

Synthesis of communication symbols, sensing and communication channels
and the noisy received signals on the frequency-time grid.

- Sensing echo:    R   = X (.) H_s + W
- UE downlink:     Y_k = X (.) H_k + Z
- Waveform:        X   = sigma * S (.) A

Channels use the centered index vectors of grid_core, so the simulator
and the FIM in crb_engine share one phase reference.

Randomness is only drawn from numpy Generators. Per-trial streams are
derived from a master seed with trial_rng(master, *keys), which builds
SeedSequence(entropy=master, spawn_key=keys). The same keys always give
the same stream regardless of how many worker threads run.

CMAT dump layout (little-endian):
  b"CMAT v1 " + uint64 M + uint64 N
  M*N complex values, row-major, interleaved float64 re/im
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from grid_core import (
    AllocationMask,
    GridError,
    ResourceGrid,
    TargetParams,
    check_target,
)

CMAT_MAGIC = b"CMAT v1 "

SeedLike = Union[int, Sequence[int], np.random.SeedSequence]


class ChannelError(ValueError):
    """Invalid simulation input."""


# ---------------------------------------------------------------------- #
# RNG streams
# ---------------------------------------------------------------------- #


def trial_rng(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (master_seed, keys...)."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


def derive_seed(master_seed: int, *keys: int) -> int:
    """A 63-bit integer seed for (master_seed, keys...), for records that need a plain int."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def as_generator(seed: Union[SeedLike, np.random.Generator]) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------- #
# Records
# ---------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class SymbolMatrix:
    values: np.ndarray
    constellation: str


@dataclass(frozen=True, eq=False)
class ChannelMatrix:
    values: np.ndarray
    kind: str                   # "sensing" | "communication"
    ue_index: Optional[int] = None


@dataclass(frozen=True, eq=False)
class RxMatrix:
    values: np.ndarray
    noise_power: float
    seed: Optional[int] = None


# ---------------------------------------------------------------------- #
# Symbols
# ---------------------------------------------------------------------- #


def _psk(order: int) -> np.ndarray:
    if order == 4:
        # QPSK points (+-1 +-j)/sqrt(2)
        return np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))
    return np.exp(2j * np.pi * np.arange(order) / order)


def _qam16() -> np.ndarray:
    levels = np.array([-3.0, -1.0, 1.0, 3.0])
    pts = (levels[:, None] + 1j * levels[None, :]).ravel()
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


CONSTELLATIONS = {
    "BPSK": _psk(2),
    "QPSK": _psk(4),
    "8PSK": _psk(8),
    "16QAM": _qam16(),
}
CONSTANT_MODULUS = {"BPSK", "QPSK", "8PSK"}


def gen_symbols(
    grid: ResourceGrid,
    constellation: str = "QPSK",
    seed: Union[SeedLike, np.random.Generator] = 0,
) -> SymbolMatrix:
    """i.i.d. unit-power symbols on every cell (masking happens in assemble_waveform)."""
    tag = constellation.upper()
    if tag not in CONSTELLATIONS:
        raise ChannelError(f"unsupported constellation {constellation!r}")
    points = CONSTELLATIONS[tag]
    idx = as_generator(seed).integers(0, len(points), size=grid.shape)
    return SymbolMatrix(values=points[idx], constellation=tag)


# ---------------------------------------------------------------------- #
# Channels
# ---------------------------------------------------------------------- #


def phase_matrix(grid: ResourceGrid, tau: float, nu: float) -> np.ndarray:
    m = grid.m_index[:, None]
    n = grid.n_index[None, :]
    return np.exp(2j * np.pi * (nu * n * grid.T - tau * m * grid.delta_f))


def sensing_channel(grid: ResourceGrid, targets: Sequence[TargetParams]) -> ChannelMatrix:
    """H_s[m, n] = sum_k beta_k exp(j 2 pi (nu_k n T - tau_k m delta_f)) on centered indices."""
    values = np.zeros(grid.shape, dtype=complex)
    for k, tgt in enumerate(targets):
        ok, reason = check_target(grid, tgt)
        if not ok:
            raise ChannelError(f"target {k}: {reason}")
        values += tgt.beta * phase_matrix(grid, tgt.tau, tgt.nu)
    return ChannelMatrix(values=values, kind="sensing")


def comm_channel(grid: ResourceGrid, ue: TargetParams, ue_index: int = 0) -> ChannelMatrix:
    """Multipath UE channel from the Q paths carried on the target record."""
    if len(ue.comm_paths) == 0:
        raise ChannelError("communication channel needs Q >= 1 paths")
    values = np.zeros(grid.shape, dtype=complex)
    for path in ue.comm_paths:
        values += path.alpha * phase_matrix(grid, path.tau, path.nu)
    return ChannelMatrix(values=values, kind="communication", ue_index=ue_index)


def assemble_waveform(sigma: float, symbols: SymbolMatrix, mask: AllocationMask) -> np.ndarray:
    """X = sigma * S on allocated cells, 0 elsewhere."""
    if symbols.values.shape != mask.grid.shape:
        raise ChannelError(
            f"symbol shape {symbols.values.shape} does not match grid {mask.grid.shape}"
        )
    return np.where(mask.union, sigma * symbols.values, 0.0 + 0.0j)


def _noise(shape: Tuple[int, int], power: float, rng: np.random.Generator) -> np.ndarray:
    scale = math.sqrt(power / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _seed_record(seed) -> Optional[int]:
    return int(seed) if isinstance(seed, (int, np.integer)) else None


def rx_signal(
    X: np.ndarray,
    H: ChannelMatrix,
    noise_power: float,
    seed: Union[SeedLike, np.random.Generator] = 0,
) -> RxMatrix:
    """R = X (.) H + W, W circular complex Gaussian with variance noise_power per cell."""
    if noise_power < 0:
        raise ChannelError(f"noise power must be >= 0, got {noise_power}")
    if X.shape != H.values.shape:
        raise ChannelError(f"waveform {X.shape} and channel {H.values.shape} differ in shape")
    values = X * H.values
    if noise_power > 0:
        values = values + _noise(X.shape, noise_power, as_generator(seed))
    return RxMatrix(values=values, noise_power=float(noise_power), seed=_seed_record(seed))


def comm_rx_signal(
    X: np.ndarray,
    H_k: ChannelMatrix,
    noise_z: float,
    seed: Union[SeedLike, np.random.Generator] = 0,
) -> RxMatrix:
    """Y_k = X (.) H_k + Z with per-UE i.i.d. noise."""
    if H_k.kind != "communication":
        raise ChannelError("comm_rx_signal expects a communication channel")
    return rx_signal(X, H_k, noise_z, seed)


# ---------------------------------------------------------------------- #
# SNR bookkeeping
# ---------------------------------------------------------------------- #


def processing_gain(mask: AllocationMask) -> int:
    """g_s: number of allocated resources (coherent integration bins)."""
    return mask.allocated


def sensing_snr(sigma2: float, betas: Sequence[complex], g_s: float, noise_w: float) -> float:
    """gamma_s = sigma^2 ||beta||^2 / (g_s sigma_w^2)."""
    if g_s <= 0:
        raise ChannelError(f"processing gain must be > 0, got {g_s}")
    beta_sq = float(np.sum(np.abs(np.asarray(betas, dtype=complex)) ** 2))
    if noise_w == 0:
        return math.inf
    return sigma2 * beta_sq / (g_s * noise_w)


def noise_for_snr(gamma_s: float, sigma2: float, betas: Sequence[complex], g_s: float) -> float:
    """sigma_w^2 that yields gamma_s; infinite gamma_s gives 0."""
    if math.isinf(gamma_s):
        return 0.0
    if gamma_s <= 0:
        raise ChannelError(f"sensing SNR must be > 0, got {gamma_s}")
    beta_sq = float(np.sum(np.abs(np.asarray(betas, dtype=complex)) ** 2))
    return sigma2 * beta_sq / (g_s * gamma_s)


def comm_snr(sigma2: float, ue: TargetParams, noise_z: float) -> float:
    """Per-resource UE SNR sigma^2 ||alpha_k||^2 / sigma_z^2."""
    if noise_z <= 0:
        return math.inf
    return sigma2 * ue.comm_gain_sq / noise_z


def spectral_efficiency(mask: AllocationMask, k: int, gamma_k: float) -> float:
    """(1/L) sum_l log2(1 + gamma_k a_k,l) for UE k."""
    return mask.counts()[k] * math.log2(1.0 + gamma_k) / mask.grid.L


def draw_amplitudes(rng: np.random.Generator, powers: Sequence[float]) -> np.ndarray:
    """beta_k ~ CN(0, Omega_k)."""
    powers = np.asarray(powers, dtype=float)
    scale = np.sqrt(powers / 2.0)
    return scale * (rng.standard_normal(powers.shape) + 1j * rng.standard_normal(powers.shape))


# ---------------------------------------------------------------------- #
# CMAT dumps
# ---------------------------------------------------------------------- #


def write_cmat(values: np.ndarray, path: Path) -> Path:
    values = np.asarray(values, dtype=complex)
    if values.ndim != 2:
        raise GridError(f"CMAT dumps hold 2-D matrices, got ndim={values.ndim}")
    M, N = values.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(values).astype("<c16").tobytes(order="C")
    with path.open("wb") as f:
        f.write(CMAT_MAGIC)
        f.write(struct.pack("<QQ", M, N))
        f.write(payload)
    return path


def read_cmat(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    head = len(CMAT_MAGIC)
    if data[:head] != CMAT_MAGIC:
        raise GridError(f"{path}: not a CMAT v1 file")
    M, N = struct.unpack("<QQ", data[head:head + 16])
    body = data[head + 16:]
    if len(body) != M * N * 16:
        raise GridError(f"{path}: payload is {len(body)} bytes, expected {M * N * 16}")
    return np.frombuffer(body, dtype="<c16").reshape(M, N).astype(complex)

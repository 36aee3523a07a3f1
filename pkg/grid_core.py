"""
grid_core.py

Frequency-time resource grid, allocation masks, target/UE records and the
mask file codec shared by every other module.

Conventions (all modules state results in these):
- Frequency index m is the row (0..M-1), time index n is the column (0..N-1).
- vec() is column-major: resource l = m + M*n (frequency varies fastest).
- Steering vectors, channel synthesis and the FIM use the centered index
  vectors m in [-M/2, M/2-1], n in [-N/2, N/2-1].

Mask file layout:
  MASK v1 M N K
  K blocks of M lines, each line N characters in {0,1}
The union block is never stored; it is recomputed on load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s

MASK_MAGIC = "MASK"
MASK_VERSION = "v1"


class GridError(ValueError):
    """Invalid grid, mask or target argument."""


# ---------------------------------------------------------------------- #
# Resource grid
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class ResourceGrid:
    M: int                   # subcarriers
    N: int                   # OFDM symbols
    delta_f: float           # Hz
    cp_duration: float = 0.0  # s, validity bound for target delays only

    def __post_init__(self) -> None:
        if int(self.M) != self.M or int(self.N) != self.N:
            raise GridError(f"grid dimensions must be integers, got M={self.M} N={self.N}")
        if self.M < 1 or self.N < 1:
            raise GridError(f"grid dimensions must be >= 1, got M={self.M} N={self.N}")
        if not self.delta_f > 0:
            raise GridError(f"subcarrier spacing must be > 0, got {self.delta_f}")
        if self.cp_duration < 0:
            raise GridError(f"cyclic prefix must be >= 0, got {self.cp_duration}")

    @property
    def T(self) -> float:
        """Symbol duration, always 1/delta_f."""
        return 1.0 / self.delta_f

    @property
    def B(self) -> float:
        return self.M * self.delta_f

    @property
    def L(self) -> int:
        return self.M * self.N

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.M, self.N)

    @property
    def burst_duration(self) -> float:
        return self.N * self.T

    @property
    def m_index(self) -> np.ndarray:
        """Centered frequency indices [-M/2, ..., M/2-1]."""
        return np.arange(self.M, dtype=float) - (self.M // 2)

    @property
    def n_index(self) -> np.ndarray:
        """Centered time indices [-N/2, ..., N/2-1]."""
        return np.arange(self.N, dtype=float) - (self.N // 2)

    def vec_index(self, m: int, n: int) -> int:
        return m + self.M * n


def build_grid(M: int, N: int, delta_f: float, cp_duration: float = 0.0) -> ResourceGrid:
    """
    Build a resource grid; B = M*delta_f and T = 1/delta_f are derived.

    Raises GridError for non-positive dimensions or spacing.
    """
    return ResourceGrid(M=M, N=N, delta_f=float(delta_f), cp_duration=float(cp_duration))


# ---------------------------------------------------------------------- #
# Allocation masks
# ---------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class AllocationMask:
    """
    Per-UE boolean occupancy (K x M x N) and its union.

    The arrays are copied and frozen on construction.
    """
    grid: ResourceGrid
    per_ue: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.per_ue, dtype=bool, copy=True)
        if arr.ndim == 2:
            arr = arr[np.newaxis, :, :]
        if arr.ndim != 3 or arr.shape[1:] != self.grid.shape:
            raise GridError(
                f"mask shape {arr.shape} does not match grid {self.grid.shape}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "per_ue", arr)
        union = arr.any(axis=0)
        union.setflags(write=False)
        object.__setattr__(self, "_union", union)

    @property
    def K(self) -> int:
        return self.per_ue.shape[0]

    @property
    def union(self) -> np.ndarray:
        return self._union

    @property
    def allocated(self) -> int:
        return int(self._union.sum())

    def counts(self) -> List[int]:
        return [int(c) for c in self.per_ue.sum(axis=(1, 2))]

    def labels(self) -> np.ndarray:
        """M x N int array: UE index per cell, -1 when empty (first UE wins on overlap)."""
        out = np.full(self.grid.shape, -1, dtype=int)
        for k in range(self.K - 1, -1, -1):
            out[self.per_ue[k]] = k
        return out

    def same_as(self, other: "AllocationMask") -> bool:
        return (
            self.grid.shape == other.grid.shape
            and self.per_ue.shape == other.per_ue.shape
            and bool(np.array_equal(self.per_ue, other.per_ue))
        )


def mask_from_labels(grid: ResourceGrid, labels: np.ndarray, K: int) -> AllocationMask:
    """Build a mask from an M x N label array (-1 = empty, k = UE index)."""
    labels = np.asarray(labels)
    if labels.shape != grid.shape:
        raise GridError(f"label shape {labels.shape} does not match grid {grid.shape}")
    per_ue = np.stack([labels == k for k in range(K)], axis=0)
    return AllocationMask(grid, per_ue)


def expand_coarse(coarse: np.ndarray, group_f: int, group_t: int) -> np.ndarray:
    """Replicate each coarse cell into a group_f x group_t block (works on the last two axes)."""
    return np.repeat(np.repeat(coarse, group_f, axis=-2), group_t, axis=-1)


def occupancy(mask: AllocationMask) -> float:
    """Fraction of grid resources used by the union mask."""
    return mask.allocated / mask.grid.L


@dataclass(frozen=True)
class MaskViolation:
    constraint: str                 # "exclusivity" | "occupancy" | "se_threshold"
    detail: str
    indices: Tuple[int, ...] = field(default_factory=tuple)

    def __str__(self) -> str:
        if self.constraint == "exclusivity":
            return f"exclusivity@({self.indices[0]},{self.indices[1]})"
        return f"{self.constraint}: {self.detail}"


def validate_mask(
    mask: AllocationMask,
    mu: float,
    n_min: Optional[Sequence[int]] = None,
) -> List[MaskViolation]:
    """
    Check per-resource exclusivity and occupancy <= mu.

    When n_min is given, also checks each UE holds at least n_min[k] cells.
    Returns an empty list when every check holds.
    """
    violations: List[MaskViolation] = []

    shared = mask.per_ue.sum(axis=0) > 1
    for m, n in zip(*np.nonzero(shared)):
        violations.append(
            MaskViolation("exclusivity", "resource assigned to more than one UE", (int(m), int(n)))
        )

    occ = occupancy(mask)
    if occ > mu + 1e-12:
        violations.append(MaskViolation("occupancy", f"{occ:.2f} > {mu:.2f}"))

    if n_min is not None:
        for k, (have, need) in enumerate(zip(mask.counts(), n_min)):
            if have < need:
                violations.append(
                    MaskViolation("se_threshold", f"ue {k} holds {have} < {need} resources", (k,))
                )
    return violations


# ---------------------------------------------------------------------- #
# Mask file codec
# ---------------------------------------------------------------------- #


def format_mask(mask: AllocationMask) -> str:
    M, N = mask.grid.shape
    lines = [f"{MASK_MAGIC} {MASK_VERSION} {M} {N} {mask.K}"]
    for k in range(mask.K):
        block = mask.per_ue[k].astype(np.uint8)
        for m in range(M):
            lines.append("".join("1" if v else "0" for v in block[m]))
    return "\n".join(lines) + "\n"


def parse_mask(text: str, grid: ResourceGrid) -> AllocationMask:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise GridError("empty mask document")
    header = lines[0].split()
    if len(header) != 5 or header[0] != MASK_MAGIC or header[1] != MASK_VERSION:
        raise GridError(f"bad mask header: {lines[0]!r}")
    M, N, K = (int(v) for v in header[2:])
    if (M, N) != grid.shape:
        raise GridError(f"mask file is {M}x{N}, grid is {grid.M}x{grid.N}")
    body = lines[1:]
    if len(body) != K * M:
        raise GridError(f"mask file has {len(body)} rows, expected {K * M}")

    per_ue = np.zeros((K, M, N), dtype=bool)
    for i, row in enumerate(body):
        if len(row) != N or set(row) - {"0", "1"}:
            raise GridError(f"mask row {i + 2} is malformed")
        per_ue[i // M, i % M] = np.frombuffer(row.encode("ascii"), dtype=np.uint8) == ord("1")
    return AllocationMask(grid, per_ue)


def write_mask(mask: AllocationMask, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_mask(mask), encoding="utf-8")
    return path


def read_mask(path: Path, grid: ResourceGrid) -> AllocationMask:
    return parse_mask(Path(path).read_text(encoding="utf-8"), grid)


# ---------------------------------------------------------------------- #
# Targets / UEs
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class CommPath:
    alpha: complex
    tau: float = 0.0
    nu: float = 0.0


@dataclass(frozen=True)
class TargetParams:
    beta: complex
    tau: float                         # s
    nu: float                          # Hz
    range_m: Optional[float] = None
    comm_paths: Tuple[CommPath, ...] = ()

    @property
    def comm_path_gains(self) -> Tuple[complex, ...]:
        return tuple(p.alpha for p in self.comm_paths)

    @property
    def comm_gain_sq(self) -> float:
        """||alpha_k||^2 over the Q communication paths."""
        return float(sum(abs(p.alpha) ** 2 for p in self.comm_paths))


def check_target(grid: ResourceGrid, target: TargetParams) -> Tuple[bool, Optional[str]]:
    """
    Return (True, None) when the target is unambiguous on the grid,
    else (False, reason).
    """
    if target.tau < 0:
        return False, f"delay {target.tau:.4g}s is negative"
    if target.tau > grid.cp_duration:
        return False, f"delay {target.tau:.4g}s exceeds cyclic prefix {grid.cp_duration:.4g}s"
    if abs(target.nu) >= 1.0 / (2.0 * grid.T):
        return False, f"Doppler {target.nu:.4g}Hz outside +-1/(2T)"
    return True, None


def target_from_geometry(
    range_m: float,
    velocity: float,
    f0: float,
    beta: complex = 1.0,
    comm_paths: Sequence[CommPath] = (),
) -> TargetParams:
    """tau = 2R/c and nu = 2*f0*V/c for a monostatic echo."""
    return TargetParams(
        beta=complex(beta),
        tau=2.0 * range_m / SPEED_OF_LIGHT,
        nu=2.0 * f0 * velocity / SPEED_OF_LIGHT,
        range_m=float(range_m),
        comm_paths=tuple(comm_paths),
    )


def amplitude_power(f0: float, range_m: float, reflectivity: float = 1.0) -> float:
    """Echo amplitude power Omega_beta = rcs * lambda^2 / ((4 pi)^3 R^4)."""
    wavelength = SPEED_OF_LIGHT / f0
    return reflectivity * wavelength ** 2 / ((4.0 * math.pi) ** 3 * range_m ** 4)


def comm_path_power(f0: float, range_m: float) -> float:
    """One-way free-space gain (lambda / (4 pi R))^2."""
    wavelength = SPEED_OF_LIGHT / f0
    return (wavelength / (4.0 * math.pi * range_m)) ** 2


def dbm_to_watt(p_dbm: float) -> float:
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def per_resource_power(p_tot_dbm: float, mu: float, M: int, N: int) -> float:
    """Total power spread uniformly over the mu*M*N allocatable resources."""
    return dbm_to_watt(p_tot_dbm) / (mu * M * N)

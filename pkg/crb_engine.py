"""
crb_engine.py

Fisher information and Cramer-Rao bounds for K point targets observed
through R = X (.) H_s + W on an allocated subset of the FT grid.

Per allocated resource (m, n) with centered indices and
P_kl[m, n] = Re{beta_k beta_l^* d_tau,kl[m] d_nu,kl[n]}:

  [F_tau]_kl     = c * 4 pi^2 delta_f^2   * sum a m^2 P_kl
  [F_nu]_kl      = c * 4 pi^2 T^2         * sum a n^2 P_kl
  [F_nu_tau]_kl  = -c * 4 pi^2 delta_f T  * sum a m n P_kl

with c = 2 sigma^2 / sigma_w^2. The per-cell sums are ordering-free, so no
vec/Kronecker convention is involved. The cross block is symmetric
(P_kl = P_lk), rows index nu_k and columns tau_l.

Amplitudes beta_k are treated as known; the FIM is 2K x 2K over (tau, nu).
Constant-modulus symbols make the expectation over symbols exact; other
constellations use E|s|^2 = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

from grid_core import GridError, ResourceGrid, TargetParams

DEFAULT_COND_CAP = 1.0e14


class SingularFimError(np.linalg.LinAlgError):
    """A FIM block or Schur complement is singular or too ill-conditioned to invert."""

    def __init__(self, block: str, cond: float) -> None:
        super().__init__(f"{block} is singular or ill-conditioned (cond={cond:.3g})")
        self.block = block
        self.cond = cond


# ---------------------------------------------------------------------- #
# Records
# ---------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class SteeringPair:
    d_tau: np.ndarray   # length M
    d_nu: np.ndarray    # length N


@dataclass(frozen=True, eq=False)
class FimBlocks:
    F_tau: np.ndarray
    F_nu: np.ndarray
    F_nu_tau: np.ndarray
    sigma2: float
    noise_w: float
    singular: bool = False
    warning: Optional[str] = None

    @property
    def K(self) -> int:
        return self.F_tau.shape[0]

    def assembled(self) -> np.ndarray:
        """F = [[F_tau, F_tau_nu], [F_tau_nu^T, F_nu]] with F_tau_nu = F_nu_tau^T."""
        return np.block([[self.F_tau, self.F_nu_tau.T], [self.F_nu_tau, self.F_nu]])

    def scaled(self, factor: float) -> "FimBlocks":
        return FimBlocks(
            F_tau=self.F_tau * factor,
            F_nu=self.F_nu * factor,
            F_nu_tau=self.F_nu_tau * factor,
            sigma2=self.sigma2,
            noise_w=self.noise_w,
            singular=self.singular,
            warning=self.warning,
        )


@dataclass(frozen=True, eq=False)
class CrbMatrices:
    C_tau: np.ndarray   # s^2
    C_nu: np.ndarray    # Hz^-2

    def delay_rmse_bound(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.C_tau), 0.0, None))

    def doppler_rmse_bound(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.C_nu), 0.0, None))


# ---------------------------------------------------------------------- #
# Steering vectors
# ---------------------------------------------------------------------- #


def steering_vectors(grid: ResourceGrid, tau: float, nu: float) -> SteeringPair:
    d_tau = np.exp(-2j * np.pi * grid.m_index * grid.delta_f * tau)
    d_nu = np.exp(2j * np.pi * grid.n_index * grid.T * nu)
    return SteeringPair(d_tau=d_tau, d_nu=d_nu)


def coupled_responses(pair_k: SteeringPair, pair_l: SteeringPair) -> Tuple[np.ndarray, np.ndarray]:
    """diag(d_k d_l^H) for delay and Doppler, i.e. d_k (.) conj(d_l)."""
    if pair_k.d_tau.shape != pair_l.d_tau.shape or pair_k.d_nu.shape != pair_l.d_nu.shape:
        raise GridError("steering pairs come from different grids")
    return pair_k.d_tau * np.conj(pair_l.d_tau), pair_k.d_nu * np.conj(pair_l.d_nu)


def normalization(grid: ResourceGrid, doppler_norm: str = "burst") -> Tuple[float, float]:
    """
    (delta_tau, delta_nu) used to make CRBs dimensionless.

    delta_tau = 1/B. delta_nu = 1/(N T) for "burst", 1/T for "symbol".
    """
    if doppler_norm == "burst":
        return 1.0 / grid.B, 1.0 / grid.burst_duration
    if doppler_norm == "symbol":
        return 1.0 / grid.B, 1.0 / grid.T
    raise GridError(f"unknown doppler_norm {doppler_norm!r}")


# ---------------------------------------------------------------------- #
# Fisher information
# ---------------------------------------------------------------------- #


def _as_union(grid: ResourceGrid, mask_union: np.ndarray) -> np.ndarray:
    a = np.asarray(mask_union)
    if a.ndim == 1:
        if a.size != grid.L:
            raise GridError(f"mask vector has {a.size} entries, grid has {grid.L}")
        a = a.reshape(grid.shape, order="F")
    if a.shape != grid.shape:
        raise GridError(f"mask shape {a.shape} does not match grid {grid.shape}")
    return a.astype(float)


def _pair_plane(grid: ResourceGrid, pairs: Sequence[SteeringPair], targets, k: int, l: int) -> np.ndarray:
    d_tau_kl, d_nu_kl = coupled_responses(pairs[k], pairs[l])
    amp = targets[k].beta * np.conj(targets[l].beta)
    return np.real(amp * np.outer(d_tau_kl, d_nu_kl))


def fim(
    grid: ResourceGrid,
    mask_union: np.ndarray,
    targets: Sequence[TargetParams],
    sigma2: float,
    noise_w: float,
    K: Optional[int] = None,
) -> FimBlocks:
    """
    FIM blocks for the targets, summed over allocated resources only.

    mask_union is an M x N boolean array or its column-major vec.
    An empty mask gives all-zero blocks flagged singular.
    """
    if K is not None and K != len(targets):
        raise GridError(f"K={K} does not match {len(targets)} targets")
    if len(targets) < 1:
        raise GridError("at least one target is required")
    if noise_w <= 0:
        raise GridError(f"sensing noise power must be > 0, got {noise_w}")

    a = _as_union(grid, mask_union)
    Kt = len(targets)
    c = 2.0 * sigma2 / noise_w
    m = grid.m_index
    n = grid.n_index
    pairs = [steering_vectors(grid, t.tau, t.nu) for t in targets]

    F_tau = np.zeros((Kt, Kt))
    F_nu = np.zeros((Kt, Kt))
    F_nu_tau = np.zeros((Kt, Kt))
    w_tau = c * 4.0 * math.pi ** 2 * grid.delta_f ** 2
    w_nu = c * 4.0 * math.pi ** 2 * grid.T ** 2
    w_x = -c * 4.0 * math.pi ** 2 * grid.delta_f * grid.T

    for k in range(Kt):
        for l in range(k, Kt):
            aP = a * _pair_plane(grid, pairs, targets, k, l)
            rows = aP.sum(axis=1)
            cols = aP.sum(axis=0)
            F_tau[k, l] = F_tau[l, k] = w_tau * np.dot(m * m, rows)
            F_nu[k, l] = F_nu[l, k] = w_nu * np.dot(cols, n * n)
            F_nu_tau[k, l] = F_nu_tau[l, k] = w_x * (m @ aP @ n)

    singular = not a.any()
    return FimBlocks(
        F_tau=F_tau,
        F_nu=F_nu,
        F_nu_tau=F_nu_tau,
        sigma2=float(sigma2),
        noise_w=float(noise_w),
        singular=singular,
        warning="empty allocation: FIM is singular" if singular else None,
    )


def cell_information(
    grid: ResourceGrid,
    targets: Sequence[TargetParams],
    sigma2: float,
    noise_w: float,
    group_f: int = 1,
    group_t: int = 1,
    scales: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    """
    Per-cell FIM contributions, shape (Mc * Nc, 2K, 2K) with cells in
    column-major order over the (M/group_f) x (N/group_t) coarse grid.

    The FIM of any union mask is the sum of its cells' contributions.
    With scales = (delta_tau, delta_nu) the contributions are for the
    normalized parameters tau/delta_tau and nu/delta_nu.
    """
    if grid.M % group_f or grid.N % group_t:
        raise GridError(f"groups {group_f}x{group_t} do not divide grid {grid.M}x{grid.N}")
    Kt = len(targets)
    Mc, Nc = grid.M // group_f, grid.N // group_t
    c = 2.0 * sigma2 / noise_w
    s_tau, s_nu = scales if scales is not None else (1.0, 1.0)
    m = grid.m_index[:, None]
    n = grid.n_index[None, :]
    pairs = [steering_vectors(grid, t.tau, t.nu) for t in targets]

    w_tau = c * 4.0 * math.pi ** 2 * (grid.delta_f * s_tau) ** 2
    w_nu = c * 4.0 * math.pi ** 2 * (grid.T * s_nu) ** 2
    w_x = -c * 4.0 * math.pi ** 2 * (grid.delta_f * s_tau) * (grid.T * s_nu)

    def coarse_sum(plane: np.ndarray) -> np.ndarray:
        summed = plane.reshape(Mc, group_f, Nc, group_t).sum(axis=(1, 3))
        return summed.reshape(-1, order="F")

    out = np.zeros((Mc * Nc, 2 * Kt, 2 * Kt))
    for k in range(Kt):
        for l in range(k, Kt):
            P = _pair_plane(grid, pairs, targets, k, l)
            tt = w_tau * coarse_sum(m * m * P)
            nn = w_nu * coarse_sum(n * n * P)
            xx = w_x * coarse_sum(m * n * P)
            out[:, k, l] = out[:, l, k] = tt
            out[:, Kt + k, Kt + l] = out[:, Kt + l, Kt + k] = nn
            out[:, Kt + k, l] = out[:, Kt + l, k] = xx
            out[:, l, Kt + k] = out[:, k, Kt + l] = xx
    return out


# ---------------------------------------------------------------------- #
# CRB
# ---------------------------------------------------------------------- #


def _checked_cond(block: str, A: np.ndarray, cond_cap: float) -> None:
    if not np.all(np.isfinite(A)):
        raise SingularFimError(block, math.inf)
    try:
        cond = float(np.linalg.cond(A))
    except np.linalg.LinAlgError:
        cond = math.inf
    if not np.isfinite(cond) or cond > cond_cap:
        raise SingularFimError(block, cond)


def crb(blocks: FimBlocks, cond_cap: float = DEFAULT_COND_CAP) -> CrbMatrices:
    """
    C_tau = (F_tau - F_nu_tau^T F_nu^-1 F_nu_tau)^-1
    C_nu  = (F_nu - F_nu_tau F_tau^-1 F_nu_tau^T)^-1

    Raises SingularFimError naming the offending block.
    """
    F_tau, F_nu, X = blocks.F_tau, blocks.F_nu, blocks.F_nu_tau
    _checked_cond("F_tau", F_tau, cond_cap)
    _checked_cond("F_nu", F_nu, cond_cap)

    S_tau = F_tau - X.T @ sla.solve(F_nu, X, assume_a="sym")
    _checked_cond("delay Schur complement", S_tau, cond_cap)
    S_nu = F_nu - X @ sla.solve(F_tau, X.T, assume_a="sym")
    _checked_cond("Doppler Schur complement", S_nu, cond_cap)

    return CrbMatrices(C_tau=sla.inv(S_tau), C_nu=sla.inv(S_nu))


def design_objective(
    C: CrbMatrices,
    eps_tau: float,
    eps_nu: float,
    delta_tau: float,
    delta_nu: float,
) -> float:
    """eps_tau tr(C_tau)/delta_tau^2 + eps_nu tr(C_nu)/delta_nu^2."""
    if delta_tau <= 0 or delta_nu <= 0:
        raise GridError("normalization constants must be > 0")
    return float(
        eps_tau * np.trace(C.C_tau) / delta_tau ** 2
        + eps_nu * np.trace(C.C_nu) / delta_nu ** 2
    )


def crb_gain(C_rand: CrbMatrices, C_opt: CrbMatrices) -> float:
    """G = tr(C_tau,rand) / tr(C_tau,opt)."""
    denom = float(np.trace(C_opt.C_tau))
    if denom == 0.0:
        raise ValueError("optimized delay CRB trace is zero; gain undefined")
    return float(np.trace(C_rand.C_tau)) / denom


def mask_objective(
    grid: ResourceGrid,
    mask_union: np.ndarray,
    targets: Sequence[TargetParams],
    sigma2: float,
    noise_w: float,
    eps_tau: float,
    eps_nu: float,
    doppler_norm: str = "burst",
    cond_cap: float = DEFAULT_COND_CAP,
) -> float:
    """Design objective of a union mask; +inf when the FIM cannot be inverted."""
    blocks = fim(grid, mask_union, targets, sigma2, noise_w)
    try:
        C = crb(blocks, cond_cap)
    except SingularFimError:
        return math.inf
    d_tau, d_nu = normalization(grid, doppler_norm)
    return design_objective(C, eps_tau, eps_nu, d_tau, d_nu)


def weighted_trace(F: np.ndarray, weights: np.ndarray, rcond: float = 1.0e-12) -> np.ndarray:
    """
    tr(diag(weights) F^-1) for a stack of symmetric matrices (..., d, d).

    Entries whose smallest eigenvalue is below rcond * largest are +inf.
    """
    F = np.asarray(F, dtype=float)
    lam, V = np.linalg.eigh(F)
    top = lam[..., -1:]
    ok = (lam[..., 0] > rcond * np.abs(top[..., 0])) & (top[..., 0] > 0)
    safe = np.where(ok[..., None], lam, 1.0)
    # tr(W F^-1) = sum_i (1/lam_i) v_i^T W v_i
    proj = np.einsum("...ji,j->...i", V * V, np.asarray(weights, dtype=float))
    vals = np.sum(proj / safe, axis=-1)
    return np.where(ok, vals, np.inf)

"""
oracles.py

Brute-force reference computations. Slow on purpose; they share no code
path with the production routines they check.

- scalar_sensing_channel: triple loop over targets, subcarriers, symbols.
- fd_fisher: Fisher information from a central-difference Jacobian of the
  noiseless echo mean, F = (2 / sigma_w^2) Re(J^H J).
- direct_crb: C_tau, C_nu as diagonal blocks of the inverted 2K x 2K FIM.
- exhaustive_allocation: every union mask of every admissible size.
- soft_impute: nuclear-norm completion with a continuation path and warm
  starts, built on numpy.linalg.svd.
"""

from __future__ import annotations

import cmath
import itertools
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from crb_engine import FimBlocks
from grid_core import ResourceGrid, TargetParams

EXHAUSTIVE_MAX_CELLS = 20


def scalar_sensing_channel(grid: ResourceGrid, targets: Sequence[TargetParams]) -> np.ndarray:
    out = np.zeros(grid.shape, dtype=complex)
    for t in targets:
        for row in range(grid.M):
            m = row - grid.M // 2
            for col in range(grid.N):
                n = col - grid.N // 2
                out[row, col] += t.beta * cmath.exp(
                    2j * math.pi * (t.nu * n * grid.T - t.tau * m * grid.delta_f)
                )
    return out


def _echo_mean(
    grid: ResourceGrid,
    union: np.ndarray,
    betas: Sequence[complex],
    theta: np.ndarray,
    sigma: float,
    symbols: np.ndarray,
) -> np.ndarray:
    K = len(betas)
    m = grid.m_index[:, None]
    n = grid.n_index[None, :]
    h = np.zeros(grid.shape, dtype=complex)
    for k in range(K):
        tau, nu = theta[k], theta[K + k]
        h += betas[k] * np.exp(2j * np.pi * (nu * n * grid.T - tau * m * grid.delta_f))
    return (sigma * symbols * h)[union]


def fd_fisher(
    grid: ResourceGrid,
    union: np.ndarray,
    targets: Sequence[TargetParams],
    sigma2: float,
    noise_w: float,
    rel_step: float = 1.0e-5,
    symbols: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    2K x 2K Fisher information of (tau_1..tau_K, nu_1..nu_K) for the
    complex Gaussian model R = X (.) H_s + W with known amplitudes.
    Steps are rel_step times the delay and Doppler resolutions.
    """
    union = np.asarray(union, dtype=bool)
    if symbols is None:
        symbols = np.ones(grid.shape, dtype=complex)
    K = len(targets)
    betas = [t.beta for t in targets]
    theta = np.array([t.tau for t in targets] + [t.nu for t in targets], dtype=float)
    steps = np.array([rel_step / grid.B] * K + [rel_step / grid.burst_duration] * K)
    sigma = math.sqrt(sigma2)

    J = np.zeros((int(union.sum()), 2 * K), dtype=complex)
    for i in range(2 * K):
        up = theta.copy()
        dn = theta.copy()
        up[i] += steps[i]
        dn[i] -= steps[i]
        J[:, i] = (
            _echo_mean(grid, union, betas, up, sigma, symbols)
            - _echo_mean(grid, union, betas, dn, sigma, symbols)
        ) / (2.0 * steps[i])
    return (2.0 / noise_w) * np.real(J.conj().T @ J)


def direct_crb(blocks: FimBlocks) -> Tuple[np.ndarray, np.ndarray]:
    K = blocks.K
    inv = np.linalg.inv(blocks.assembled())
    return inv[:K, :K], inv[K:, K:]


def exhaustive_allocation(problem) -> Tuple[float, np.ndarray]:
    """
    Minimum objective over all coarse unions whose size lies between the
    UE quota total and the occupancy budget. Returns (value, union vector).
    """
    Lc = problem.coarse.L
    if Lc > EXHAUSTIVE_MAX_CELLS:
        raise ValueError(f"exhaustive search refuses {Lc} > {EXHAUSTIVE_MAX_CELLS} cells")
    best_val = math.inf
    best = np.zeros(Lc, dtype=bool)
    for size in range(problem.required_cells, problem.budget_cells + 1):
        combos = list(itertools.combinations(range(Lc), size))
        X = np.zeros((len(combos), Lc))
        for row, combo in enumerate(combos):
            X[row, list(combo)] = 1.0
        vals = problem.objective_batch(X)
        idx = int(np.argmin(vals))
        if vals[idx] < best_val:
            best_val = float(vals[idx])
            best = X[idx] > 0.5
    return best_val, best


def soft_impute(
    values: np.ndarray,
    observed: np.ndarray,
    lambda_min_ratio: float = 1.0e-9,
    n_lambdas: int = 60,
    inner_iters: int = 100,
    tol: float = 1.0e-10,
) -> np.ndarray:
    """Nuclear-norm completion along a decreasing lambda path, observed entries kept."""
    data = np.where(observed, values, 0.0)
    top = np.linalg.svd(data, compute_uv=False)[0]
    path = np.geomspace(top, top * lambda_min_ratio, n_lambdas)
    Z = np.zeros_like(data)
    for lam in path:
        for _ in range(inner_iters):
            filled = np.where(observed, data, Z)
            U, s, Vh = np.linalg.svd(filled, full_matrices=False)
            s = np.maximum(s - lam, 0.0)
            Z_new = (U * s) @ Vh
            moved = np.linalg.norm(Z_new - Z)
            Z = Z_new
            if moved <= tol * max(np.linalg.norm(Z), 1.0):
                break
    return np.where(observed, data, Z)

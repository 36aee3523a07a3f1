"""
estimator.py

Sensing receiver chain on the frequency-time grid:

  R --LS--> partial H --(completion | linear | zero-fill)--> H_hat
    --DD transform--> |H~| --peak search--> (tau_hat, nu_hat)

plus an exhaustive ML reference for tiny instances.

DD transform convention (unitary on both axes):
  dd = fftshift(fft(ifft(H, axis=0), axis=1), axes=1), norm="ortho"
A target at (tau, nu) lands on delay bin i = tau * B and centered Doppler
bin j = nu * N * T (array column j + N//2). An on-bin unit-amplitude
target peaks at sqrt(M * N).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
from scipy import ndimage

from channel_sim import RxMatrix, phase_matrix
from grid_core import AllocationMask, ResourceGrid

DEFAULT_GUARD = 2
DIVISION_GUARD = 1.0e-300
ML_MAX_CELLS = 4096
ML_MAX_HYPOTHESES = 100_000
PREIMAGE_NEWTON_STEPS = 40


class EstimationError(ValueError):
    """Division guard, size budget or malformed estimator input."""


# ---------------------------------------------------------------------- #
# Records
# ---------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class PartialChannel:
    values: np.ndarray      # complex M x N, 0 where not observed
    observed: np.ndarray    # bool M x N

    def __post_init__(self) -> None:
        if self.values.shape != self.observed.shape:
            raise EstimationError(
                f"values {self.values.shape} and observed {self.observed.shape} differ in shape"
            )
        if np.any(self.values[~self.observed] != 0):
            raise EstimationError("unobserved cells must hold zero")

    @property
    def fraction(self) -> float:
        return float(self.observed.mean())


@dataclass(frozen=True)
class CompletionConfig:
    p: float = 0.5
    lambda_ratio: float = 0.5           # lambda_0 = ratio * sigma_max(zero-fill)^(2-p)
    decay: float = 0.9
    lambda_floor: float = 1.0e-4        # lambda_t >= floor * lambda_0
    max_iters: int = 300
    tol: float = 1.0e-4
    lambda_schedule: Optional[Tuple[float, ...]] = None
    track_objective: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.p <= 1.0:
            raise EstimationError(f"Schatten p={self.p} outside (0, 1]")
        if not 0.0 < self.decay < 1.0:
            raise EstimationError(f"lambda decay {self.decay} must lie in (0, 1)")
        if not 0.0 <= self.lambda_floor < 1.0:
            raise EstimationError(f"lambda floor {self.lambda_floor} must lie in [0, 1)")
        if self.lambda_ratio <= 0:
            raise EstimationError("lambda_ratio must be > 0")
        if self.tol <= 0:
            raise EstimationError("tol must be > 0")
        if self.max_iters < 1:
            raise EstimationError("max_iters must be >= 1")
        if self.lambda_schedule is not None:
            sched = np.asarray(self.lambda_schedule, dtype=float)
            if sched.size == 0 or np.any(sched <= 0) or np.any(np.diff(sched) >= 0):
                raise EstimationError("lambda schedule must be positive and strictly decreasing")

    def lambdas(self, lambda0: float) -> np.ndarray:
        if self.lambda_schedule is not None:
            sched = np.asarray(self.lambda_schedule, dtype=float)
            if sched.size >= self.max_iters:
                return sched[: self.max_iters]
            return np.concatenate([sched, np.full(self.max_iters - sched.size, sched[-1])])
        return lambda0 * np.maximum(self.decay ** np.arange(self.max_iters), self.lambda_floor)


@dataclass(frozen=True, eq=False)
class CompletionResult:
    values: np.ndarray
    converged: bool
    iterations: int
    rank: int
    history: Tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class InterpolatedChannel:
    values: np.ndarray
    empty_rows: Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class DdMap:
    values: np.ndarray
    delay_bin: float        # s per bin, 1/B
    doppler_bin: float      # Hz per bin, 1/(N T)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def delay_of(self, i: float) -> float:
        return i * self.delay_bin

    def doppler_of(self, j: float) -> float:
        """Doppler for array column j (may be fractional)."""
        return (j - self.values.shape[1] // 2) * self.doppler_bin

    def bin_of(self, tau: float, nu: float) -> Tuple[int, int]:
        M, N = self.values.shape
        i = int(round(tau / self.delay_bin)) % M
        j = (int(round(nu / self.doppler_bin)) + N // 2) % N
        return i, j


@dataclass(frozen=True, eq=False)
class Detection:
    tau_hat: np.ndarray
    nu_hat: np.ndarray
    magnitudes: np.ndarray
    bins: Tuple[Tuple[int, int], ...] = ()
    refined: bool = False
    shortfall: bool = False
    residual: float = math.nan

    @property
    def count(self) -> int:
        return len(self.tau_hat)


# ---------------------------------------------------------------------- #
# LS estimate
# ---------------------------------------------------------------------- #


def ls_channel_estimate(R: RxMatrix, X: np.ndarray, mask: AllocationMask) -> PartialChannel:
    """H_hat = R / X on allocated cells, 0 elsewhere."""
    rx = R.values if isinstance(R, RxMatrix) else np.asarray(R)
    if rx.shape != X.shape or X.shape != mask.grid.shape:
        raise EstimationError(f"shape mismatch: R {rx.shape}, X {X.shape}, grid {mask.grid.shape}")
    observed = np.array(mask.union, copy=True)
    if np.any(np.abs(X[observed]) <= DIVISION_GUARD):
        m, n = np.argwhere(observed & (np.abs(X) <= DIVISION_GUARD))[0]
        raise EstimationError(f"zero waveform sample on allocated cell ({m},{n})")
    values = np.zeros(rx.shape, dtype=complex)
    values[observed] = rx[observed] / X[observed]
    return PartialChannel(values=values, observed=observed)


def zero_fill(partial: PartialChannel) -> np.ndarray:
    return np.array(partial.values, copy=True)


# ---------------------------------------------------------------------- #
# Schatten-p completion
# ---------------------------------------------------------------------- #


def schatten_norm(H: np.ndarray, p: float) -> float:
    s = sla.svd(H, compute_uv=False)
    return float(np.sum(s ** p) ** (1.0 / p))


def kill_level(lam: float, p: float) -> float:
    """Largest singular value the shrinkage rule maps to zero: lam^(1/(2-p))."""
    return lam ** (1.0 / (2.0 - p)) if lam > 0 else 0.0


def shrink_singular_values(s: np.ndarray, lam: float, p: float) -> np.ndarray:
    """max(s_i - lam * s_i^(p-1), 0); zero singular values stay zero."""
    s = np.asarray(s, dtype=float)
    if p == 1.0:
        return np.maximum(s - lam, 0.0)
    out = np.zeros_like(s)
    live = s > 0
    out[live] = np.maximum(s[live] - lam * s[live] ** (p - 1.0), 0.0)
    return out


def _shrink_preimage(x: np.ndarray, lam: float, p: float) -> np.ndarray:
    """s >= kill_level with s - lam * s^(p-1) = x, for x > 0."""
    if p == 1.0:
        return x + lam
    # h(s) = s - lam s^(p-1) - x is concave and increasing, so Newton from
    # the left stays left of the root and climbs monotonically
    s = np.maximum(x, kill_level(lam, p))
    for _ in range(PREIMAGE_NEWTON_STEPS):
        h = s - lam * s ** (p - 1.0) - x
        s = s - h / (1.0 + lam * (1.0 - p) * s ** (p - 2.0))
    return s


def shrinkage_penalty(x: np.ndarray, lam: float, p: float) -> np.ndarray:
    """
    Per-singular-value penalty whose proximal map is shrink_singular_values.

    With s the preimage of x > 0 and s0 = kill_level(lam, p):

      phi(x) = (lam/p)(s^p - s0^p) - (lam^2/2)(s^(2p-2) - s0^(2p-2))

    phi(0) = 0, phi(x) = lam * x at p = 1, and phi(x) ~ (lam/p) x^p for
    x much larger than s0.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    live = x > 0
    if lam <= 0 or not live.any():
        return out
    s = _shrink_preimage(x[live], lam, p)
    s0 = kill_level(lam, p)
    out[live] = lam / p * (s ** p - s0 ** p) - 0.5 * lam ** 2 * (s ** (2 * p - 2) - s0 ** (2 * p - 2))
    return out


def completion_objective(Z: np.ndarray, partial: PartialChannel, lam: float, p: float) -> float:
    """
    0.5 ||P_obs(Z - H)||_F^2 + sum_i phi(sigma_i(Z)).

    phi is shrinkage_penalty, the Schatten-p surrogate the thresholding
    step is the exact proximal map of; completion_step never increases
    this value at a fixed lam.
    """
    resid = np.where(partial.observed, Z - partial.values, 0.0)
    s = sla.svd(Z, compute_uv=False)
    return 0.5 * float(np.vdot(resid, resid).real) + float(np.sum(shrinkage_penalty(s, lam, p)))


def completion_step(
    Z: np.ndarray,
    partial: PartialChannel,
    lam: float,
    p: float,
) -> Tuple[np.ndarray, int]:
    """
    One thresholding step: Y = P_obs(H) + P_unobs(Z), then shrink the
    singular values of Y by lam * sigma_i(Y)^(p-1).

    Returns (Z_next, rank of Z_next).
    """
    Y = np.where(partial.observed, partial.values, Z)
    U, s, Vh = sla.svd(Y, full_matrices=False)
    kept = shrink_singular_values(s, lam, p)
    r = int(np.count_nonzero(kept))
    return (U[:, :r] * kept[:r]) @ Vh[:r], r


def schatten_complete(partial: PartialChannel, cfg: CompletionConfig = CompletionConfig()) -> CompletionResult:
    """
    Iterated singular-value thresholding with the Schatten-p shrinkage
    rule and a geometrically decaying, floored lambda. Observed entries of
    the result are exactly those of the input.

    lambda_0 = lambda_ratio * sigma_max^(2-p) puts the first kill level at
    lambda_ratio^(1/(2-p)) * sigma_max of the zero-fill. An all-zero
    iterate is never reported as converged.
    """
    if not partial.observed.any():
        raise EstimationError("completion needs at least one observed cell")

    Y = zero_fill(partial)
    s_max = float(sla.svd(Y, compute_uv=False)[0])
    lambdas = cfg.lambdas(cfg.lambda_ratio * s_max ** (2.0 - cfg.p) if s_max > 0 else 1.0)

    Z = Y
    history: List[float] = []
    converged = False
    it = 0
    rank = 0
    for it in range(1, cfg.max_iters + 1):
        lam = float(lambdas[it - 1])
        Z, rank = completion_step(Z, partial, lam, cfg.p)
        Y_next = np.where(partial.observed, partial.values, Z)

        if cfg.track_objective:
            history.append(completion_objective(Z, partial, lam, cfg.p))

        denom = float(np.linalg.norm(Y))
        change = float(np.linalg.norm(Y_next - Y)) / (denom if denom > 0 else 1.0)
        Y = Y_next
        if rank > 0 and change < cfg.tol:
            converged = True
            break

    return CompletionResult(values=Y, converged=converged, iterations=it, rank=rank, history=tuple(history))


def identifiable_cells(observed: np.ndarray) -> np.ndarray:
    """Cells whose subcarrier and symbol both carry at least one observation."""
    observed = np.asarray(observed, dtype=bool)
    return np.outer(observed.any(axis=1), observed.any(axis=0))


@dataclass(frozen=True)
class RecoveryErrors:
    full: float             # ||H_hat - H|| / ||H||
    fillable: float         # same, restricted to identifiable unobserved cells
    floor: float            # ||H off the identifiable cells|| / ||H||
    fillable_cells: int


def recovery_errors(H_hat: np.ndarray, H: np.ndarray, observed: np.ndarray) -> RecoveryErrors:
    """
    Split the completion error by where it can come from. Completion never
    writes a subcarrier or symbol without observations, so full >= floor.
    """
    observed = np.asarray(observed, dtype=bool)
    ident = identifiable_cells(observed)
    fill = ident & ~observed
    total = float(np.linalg.norm(H))
    if total == 0:
        raise EstimationError("reference channel is all zero")
    fill_ref = float(np.linalg.norm(H[fill]))
    return RecoveryErrors(
        full=float(np.linalg.norm(H_hat - H)) / total,
        fillable=float(np.linalg.norm((H_hat - H)[fill])) / fill_ref if fill_ref > 0 else 0.0,
        floor=float(np.linalg.norm(H[~ident])) / total,
        fillable_cells=int(fill.sum()),
    )


# ---------------------------------------------------------------------- #
# Linear interpolation baseline
# ---------------------------------------------------------------------- #


def linear_interp_baseline(partial: PartialChannel) -> InterpolatedChannel:
    """
    Per subcarrier, linear interpolation of re/im along time between
    observed samples (constant beyond the ends). Rows with one sample copy
    the nearest fully interpolated row in frequency; empty rows stay zero
    and are reported.
    """
    M, N = partial.values.shape
    out = np.zeros((M, N), dtype=complex)
    n_all = np.arange(N)
    counts = partial.observed.sum(axis=1)
    good = np.flatnonzero(counts >= 2)

    for m in good:
        obs = np.flatnonzero(partial.observed[m])
        vals = partial.values[m, obs]
        out[m] = np.interp(n_all, obs, vals.real) + 1j * np.interp(n_all, obs, vals.imag)

    for m in np.flatnonzero(counts == 1):
        if good.size:
            src = good[np.argmin(np.abs(good - m))]
            out[m] = out[src]
        else:
            out[m] = partial.values[m, partial.observed[m]][0]
        out[m, partial.observed[m]] = partial.values[m, partial.observed[m]]

    empty = tuple(int(m) for m in np.flatnonzero(counts == 0))
    return InterpolatedChannel(values=out, empty_rows=empty)


# ---------------------------------------------------------------------- #
# DD domain
# ---------------------------------------------------------------------- #


def dd_transform(H: np.ndarray, grid: Optional[ResourceGrid] = None) -> DdMap:
    H = np.asarray(H, dtype=complex)
    M, N = H.shape
    dd = np.fft.ifft(H, axis=0, norm="ortho")
    dd = np.fft.fftshift(np.fft.fft(dd, axis=1, norm="ortho"), axes=1)
    if grid is not None:
        delay_bin, doppler_bin = 1.0 / grid.B, 1.0 / grid.burst_duration
    else:
        delay_bin, doppler_bin = 1.0 / M, 1.0 / N
    return DdMap(values=dd, delay_bin=delay_bin, doppler_bin=doppler_bin)


def inverse_dd_transform(dd: DdMap) -> np.ndarray:
    H = np.fft.ifft(np.fft.ifftshift(dd.values, axes=1), axis=1, norm="ortho")
    return np.fft.fft(H, axis=0, norm="ortho")


def ambiguity_function(mask: AllocationMask) -> np.ndarray:
    """|DD transform of the union|^2, normalized to 1 at zero delay/Doppler."""
    dd = dd_transform(mask.union.astype(complex), mask.grid).values
    power = np.abs(dd) ** 2
    peak = power[0, mask.grid.N // 2]
    return power / peak if peak > 0 else power


def _parabolic(y_left: float, y_mid: float, y_right: float) -> float:
    denom = y_left - 2.0 * y_mid + y_right
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (y_left - y_right) / denom, -0.5, 0.5))


def _guard_hit(i: int, j: int, taken: Sequence[Tuple[int, int]], guard: int, shape: Tuple[int, int]) -> bool:
    M, N = shape
    for a, b in taken:
        di = min((i - a) % M, (a - i) % M)
        dj = min((j - b) % N, (b - j) % N)
        if di <= guard and dj <= guard:
            return True
    return False


def detect_peaks(dd: DdMap, K: int, guard: int = DEFAULT_GUARD, refine: bool = True) -> Detection:
    """
    K largest local maxima of |dd| with a (2*guard+1)^2 exclusion around
    each accepted peak, optionally refined by three-point parabolas.
    """
    if K < 1:
        raise EstimationError(f"K must be >= 1, got {K}")
    mag = np.abs(dd.values)
    M, N = mag.shape
    local = (ndimage.maximum_filter(mag, size=3, mode="wrap") == mag) & (mag > 0)
    cand = np.flatnonzero(local.ravel())
    cand = cand[np.argsort(-mag.ravel()[cand], kind="stable")]

    taken: List[Tuple[int, int]] = []
    for flat in cand:
        i, j = divmod(int(flat), N)
        if _guard_hit(i, j, taken, guard, (M, N)):
            continue
        taken.append((i, j))
        if len(taken) == K:
            break

    taus, nus, mags = [], [], []
    nu_limit = (N // 2 - 1e-9) * dd.doppler_bin
    for i, j in taken:
        di = dj = 0.0
        if refine:
            if M >= 3:
                di = _parabolic(mag[(i - 1) % M, j], mag[i, j], mag[(i + 1) % M, j])
            if N >= 3:
                dj = _parabolic(mag[i, (j - 1) % N], mag[i, j], mag[i, (j + 1) % N])
        taus.append(dd.delay_of(max(i + di, 0.0)))
        nus.append(float(np.clip(dd.doppler_of(j + dj), -nu_limit, nu_limit)))
        mags.append(float(mag[i, j]))

    return Detection(
        tau_hat=np.array(taus),
        nu_hat=np.array(nus),
        magnitudes=np.array(mags),
        bins=tuple(taken),
        refined=refine,
        shortfall=len(taken) < K,
    )


def peak_to_sidelobe_ratio(dd: DdMap, bins: Sequence[Tuple[int, int]], guard: int = DEFAULT_GUARD) -> float:
    """Smallest peak over the largest magnitude outside every peak's guard box."""
    if not bins:
        return 0.0
    mag = np.abs(dd.values)
    M, N = mag.shape
    outside = np.ones((M, N), dtype=bool)
    for i, j in bins:
        rows = np.arange(i - guard, i + guard + 1) % M
        cols = np.arange(j - guard, j + guard + 1) % N
        outside[np.ix_(rows, cols)] = False
    peak = min(mag[i, j] for i, j in bins)
    side = float(mag[outside].max()) if outside.any() else 0.0
    if side == 0.0:
        return math.inf
    return float(peak) / side


# ---------------------------------------------------------------------- #
# Maximum likelihood reference
# ---------------------------------------------------------------------- #


def _candidate_vectors(
    X: np.ndarray,
    grid: ResourceGrid,
    delays: Sequence[float],
    dopplers: Sequence[float],
    observed: np.ndarray,
) -> Tuple[np.ndarray, List[Tuple[float, float]]]:
    points = [(float(t), float(v)) for t in delays for v in dopplers]
    cols = [(X * phase_matrix(grid, t, v))[observed] for t, v in points]
    return np.stack(cols, axis=1), points


def ml_residuals(
    R: np.ndarray,
    X: np.ndarray,
    grid: ResourceGrid,
    hypotheses: Sequence[Sequence[Tuple[float, float]]],
) -> np.ndarray:
    """min_beta ||r - sum_k beta_k x (.) h(tau_k, nu_k)||^2 for each hypothesis."""
    rx = R.values if isinstance(R, RxMatrix) else np.asarray(R)
    observed = np.abs(X) > 0
    r = rx[observed]
    out = np.empty(len(hypotheses))
    for h, hyp in enumerate(hypotheses):
        A = np.stack([(X * phase_matrix(grid, t, v))[observed] for t, v in hyp], axis=1)
        coef, *_ = np.linalg.lstsq(A, r, rcond=None)
        res = r - A @ coef
        out[h] = float(np.vdot(res, res).real)
    return out


def ml_estimate(
    R: np.ndarray,
    X: np.ndarray,
    grid: ResourceGrid,
    K: int,
    delays: Sequence[float],
    dopplers: Sequence[float],
    max_cells: int = ML_MAX_CELLS,
    max_hypotheses: int = ML_MAX_HYPOTHESES,
) -> Detection:
    """
    Exhaustive search over K-subsets of the (delay x Doppler) candidate
    grid with amplitudes fitted by least squares.
    """
    rx = R.values if isinstance(R, RxMatrix) else np.asarray(R)
    if grid.L > max_cells:
        raise EstimationError(f"ML search refuses grids above {max_cells} cells (got {grid.L})")
    P = len(delays) * len(dopplers)
    if K < 1:
        raise EstimationError(f"K must be >= 1, got {K}")
    if K > P:
        raise EstimationError(f"K={K} targets exceed the {P} candidate (delay, Doppler) points")
    n_hyp = math.comb(P, K)
    if n_hyp > max_hypotheses:
        raise EstimationError(f"ML search over {n_hyp} hypotheses exceeds {max_hypotheses}")

    observed = np.abs(X) > 0
    r = rx[observed]
    A, points = _candidate_vectors(X, grid, delays, dopplers, observed)
    c = A.conj().T @ r
    G = A.conj().T @ A
    energy = float(np.vdot(r, r).real)

    best_res, best_combo = math.inf, None
    combos = np.array(list(itertools.combinations(range(P), K)), dtype=int)
    for start in range(0, len(combos), 4096):
        chunk = combos[start:start + 4096]
        Gs = G[chunk[:, :, None], chunk[:, None, :]]
        cs = c[chunk]
        try:
            coef = np.linalg.solve(Gs, cs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            coef = np.stack([np.linalg.lstsq(g, v, rcond=None)[0] for g, v in zip(Gs, cs)])
        res = energy - np.real(np.sum(np.conj(cs) * coef, axis=1))
        idx = int(np.argmin(res))
        if res[idx] < best_res:
            best_res, best_combo = float(res[idx]), chunk[idx]

    if best_combo is None:
        raise EstimationError("ML search found no hypothesis with a finite residual")
    sel = [points[i] for i in best_combo]
    amps = np.linalg.lstsq(A[:, best_combo], r, rcond=None)[0]
    return Detection(
        tau_hat=np.array([t for t, _ in sel]),
        nu_hat=np.array([v for _, v in sel]),
        magnitudes=np.abs(amps),
        refined=False,
        shortfall=False,
        residual=max(best_res, 0.0),
    )


# ---------------------------------------------------------------------- #
# Pipeline
# ---------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class PipelineResult:
    detection: Detection
    channel: np.ndarray
    dd: DdMap
    converged: bool = True
    empty_rows: Tuple[int, ...] = field(default_factory=tuple)


def recover_channel(partial: PartialChannel, method: str, cfg: CompletionConfig = CompletionConfig()):
    """(H_hat, converged, empty_rows) for method completion | linear | zerofill."""
    if method == "completion":
        res = schatten_complete(partial, cfg)
        return res.values, res.converged, ()
    if method == "linear":
        res = linear_interp_baseline(partial)
        return res.values, True, res.empty_rows
    if method == "zerofill":
        return zero_fill(partial), True, ()
    raise EstimationError(f"unknown estimator {method!r}")


def pipeline_estimate(
    R: RxMatrix,
    X: np.ndarray,
    mask: AllocationMask,
    K: int,
    method: str = "completion",
    cfg: CompletionConfig = CompletionConfig(),
    guard: int = DEFAULT_GUARD,
    refine: bool = True,
) -> PipelineResult:
    """LS -> channel recovery -> DD transform -> peak detection."""
    partial = ls_channel_estimate(R, X, mask)
    H_hat, converged, empty = recover_channel(partial, method, cfg)
    dd = dd_transform(H_hat, mask.grid)
    det = detect_peaks(dd, K, guard=guard, refine=refine)
    return PipelineResult(detection=det, channel=H_hat, dd=dd, converged=converged, empty_rows=empty)

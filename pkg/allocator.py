"""
allocator.py

Resource allocation for the sensing-optimal waveform.

Problem (per coarse cell c, union indicator x_c in {0, 1}):
  minimize   tr(W F'(x)^-1),  F'(x) = sum_c x_c F'_c   (normalized FIM)
  subject to sum_c x_c = floor(mu * L')                 (occupancy)
             UE k holds at least n_min_cells[k] cells   (spectral efficiency)
             every cell serves at most one UE           (exclusivity)

The objective is non-increasing when cells are added, so restricting the
search to masks that use the full occupancy budget loses nothing.

Solvers:
- greedy_allocation: feasibility-minimal start, best-add then best-swap.
- optimize_allocation: branch-and-bound. Node bounds come from the convex
  relaxation x in [0, 1] solved by projected gradient; the bound used for
  pruning is the linearization (Frank-Wolfe) bound, which is a certified
  lower bound at any iterate. No cutting planes.
- random_scheduler / random_contiguous_scheduler: the two baselines.

Per-UE labeling is a post-pass over the union: cells are walked in
column-major order, each UE receives its quota, the surplus goes to the
UE with the highest path loss.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

from channel_sim import as_generator, comm_snr
from crb_engine import cell_information, mask_objective, normalization, weighted_trace
from grid_core import (
    AllocationMask,
    GridError,
    ResourceGrid,
    TargetParams,
    expand_coarse,
)

DEFAULT_MAX_COARSE_CELLS = 400
DEFAULT_LEAF_SIZE = 256
RELAX_TOL = 1.0e-6
RELAX_MAX_ITERS = 500
PRUNE_REL_TOL = 1.0e-9
SCORE_FLOOR = 1.0e-3


class InfeasibleAllocationError(ValueError):
    """Constraints cannot be met; `constraint` names the binding one."""

    def __init__(self, constraint: str, detail: str) -> None:
        super().__init__(f"{constraint}: {detail}")
        self.constraint = constraint
        self.detail = detail


class PlacementError(RuntimeError):
    """Contiguous blocks cannot be placed without overlap."""


# ---------------------------------------------------------------------- #
# Coarse grid
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class CoarseGrid:
    grid: ResourceGrid
    group_f: int
    group_t: int

    def __post_init__(self) -> None:
        if self.group_f < 1 or self.group_t < 1:
            raise GridError(f"coarse groups must be >= 1, got {self.group_f}x{self.group_t}")
        if self.grid.M % self.group_f or self.grid.N % self.group_t:
            raise GridError(
                f"groups {self.group_f}x{self.group_t} do not divide grid {self.grid.M}x{self.grid.N}"
            )

    @property
    def M(self) -> int:
        return self.grid.M // self.group_f

    @property
    def N(self) -> int:
        return self.grid.N // self.group_t

    @property
    def L(self) -> int:
        return self.M * self.N

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.M, self.N)

    @property
    def group_size(self) -> int:
        return self.group_f * self.group_t

    def expand(self, coarse: np.ndarray) -> np.ndarray:
        return expand_coarse(np.asarray(coarse, dtype=bool), self.group_f, self.group_t)

    def from_vec(self, x: np.ndarray) -> np.ndarray:
        """Column-major coarse vector -> Mc x Nc array."""
        return np.asarray(x).reshape(self.shape, order="F")


def _divisors(n: int) -> List[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def choose_coarse_grid(
    grid: ResourceGrid,
    max_cells: int = DEFAULT_MAX_COARSE_CELLS,
    group_f: int = 0,
    group_t: int = 0,
) -> CoarseGrid:
    """
    Explicit groups when both are given, else the smallest square group
    dividing M and N with at most max_cells coarse cells. Falls back to
    independent per-axis groups when no square group fits.
    """
    if group_f > 0 and group_t > 0:
        return CoarseGrid(grid, group_f, group_t)
    M, N = grid.M, grid.N
    for g in range(1, min(M, N) + 1):
        if M % g == 0 and N % g == 0 and (M // g) * (N // g) <= max_cells:
            return CoarseGrid(grid, g, g)
    best: Optional[Tuple[int, int, int]] = None
    for gf in _divisors(M):
        for gt in _divisors(N):
            if (M // gf) * (N // gt) <= max_cells:
                key = (gf * gt, max(gf, gt), gf)
                if best is None or key < best:
                    best = key
    if best is None:
        raise GridError(f"no grouping of {M}x{N} fits {max_cells} coarse cells")
    gf = best[2]
    gt = best[0] // gf
    return CoarseGrid(grid, gf, gt)


# ---------------------------------------------------------------------- #
# Problem
# ---------------------------------------------------------------------- #


def min_resources_per_ue(se_threshold: float, gamma_k: float, L: int) -> int:
    """
    Smallest n with n * log2(1 + gamma_k) >= L * se_threshold.

    Each allocated resource carries log2(1 + gamma_k) bits/s/Hz and empty
    ones carry none, so the SE constraint is a resource count.
    """
    if se_threshold == 0:
        return 0
    rate = math.log2(1.0 + gamma_k) if gamma_k > 0 else 0.0
    if rate <= 0:
        raise InfeasibleAllocationError("capacity", f"log2(1 + gamma)={rate:.3g} carries no rate")
    n_min = math.ceil(L * se_threshold / rate)
    if n_min > L:
        raise InfeasibleAllocationError(
            "capacity",
            f"SE threshold {se_threshold:.3g} exceeds per-resource rate {rate:.3g}",
        )
    return n_min


@dataclass(frozen=True, eq=False)
class AllocationProblem:
    coarse: CoarseGrid
    targets: Tuple[TargetParams, ...]
    eps_tau: float
    eps_nu: float
    mu: float
    se_threshold: float
    sigma2: float
    noise_w: float
    noise_z: float
    doppler_norm: str
    n_min: Tuple[int, ...]          # full-grid resources per UE
    n_min_cells: Tuple[int, ...]    # coarse cells per UE
    budget_cells: int
    cell_fim: np.ndarray            # (L', 2K, 2K), normalized
    weights: np.ndarray             # (2K,)

    @property
    def grid(self) -> ResourceGrid:
        return self.coarse.grid

    @property
    def K(self) -> int:
        return len(self.targets)

    @property
    def required_cells(self) -> int:
        return int(sum(self.n_min_cells))

    @property
    def path_gains(self) -> Tuple[float, ...]:
        return tuple(t.comm_gain_sq for t in self.targets)

    def check_feasible(self) -> Tuple[bool, Optional[str], Optional[str]]:
        """(ok, binding constraint, reason)."""
        full_budget = math.floor(self.mu * self.grid.L)
        if sum(self.n_min) > full_budget:
            return False, "occupancy", (
                f"sum n_min={sum(self.n_min)} exceeds mu*L={full_budget}"
            )
        if self.required_cells > self.budget_cells:
            return False, "occupancy", (
                f"UE quotas need {self.required_cells} coarse cells, budget is {self.budget_cells}"
            )
        return True, None, None

    def require_feasible(self) -> None:
        ok, constraint, reason = self.check_feasible()
        if not ok:
            raise InfeasibleAllocationError(constraint, reason)

    def fim_of(self, x: np.ndarray) -> np.ndarray:
        return np.tensordot(np.asarray(x, dtype=float), self.cell_fim, axes=1)

    def objective_of(self, x: np.ndarray) -> float:
        return float(weighted_trace(self.fim_of(x), self.weights))

    def objective_batch(self, X: np.ndarray) -> np.ndarray:
        """Objective for each row of a (B, L') 0/1 matrix."""
        d = self.cell_fim.shape[1]
        F = (np.asarray(X, dtype=float) @ self.cell_fim.reshape(self.coarse.L, -1)).reshape(-1, d, d)
        return weighted_trace(F, self.weights)

    def cell_scores(self) -> np.ndarray:
        """Per-cell trace score used to seed greedy starts."""
        K = self.K
        tr_tau = np.trace(self.cell_fim[:, :K, :K], axis1=1, axis2=2)
        tr_nu = np.trace(self.cell_fim[:, K:, K:], axis1=1, axis2=2)
        return (self.eps_tau + SCORE_FLOOR) * tr_tau + (self.eps_nu + SCORE_FLOOR) * tr_nu


def build_problem(
    grid: ResourceGrid,
    targets: Sequence[TargetParams],
    *,
    eps_tau: float,
    eps_nu: float,
    mu: float,
    se_threshold: float,
    sigma2: float,
    noise_w: float,
    noise_z: float,
    doppler_norm: str = "burst",
    coarse: Optional[CoarseGrid] = None,
    max_coarse_cells: int = DEFAULT_MAX_COARSE_CELLS,
    n_min: Optional[Sequence[int]] = None,
) -> AllocationProblem:
    """
    Assemble the allocation problem. n_min overrides the SE-derived
    per-UE resource counts.
    """
    if not targets:
        raise GridError("at least one target/UE is required")
    if not 0.0 < mu <= 1.0:
        raise GridError(f"mu={mu} outside (0, 1]")
    if eps_tau < 0 or eps_nu < 0 or eps_tau + eps_nu <= 0:
        raise GridError(f"invalid weights ({eps_tau}, {eps_nu})")
    coarse = coarse or choose_coarse_grid(grid, max_coarse_cells)
    if coarse.grid != grid:
        raise GridError("coarse grid was built for a different grid")

    if n_min is None:
        n_min = tuple(
            min_resources_per_ue(se_threshold, comm_snr(sigma2, t, noise_z), grid.L)
            for t in targets
        )
    else:
        n_min = tuple(int(v) for v in n_min)
        if len(n_min) != len(targets):
            raise GridError(f"{len(n_min)} quotas for {len(targets)} UEs")
    n_min_cells = tuple(math.ceil(v / coarse.group_size) for v in n_min)
    budget_cells = math.floor(mu * coarse.L + 1e-9)

    K = len(targets)
    info = cell_information(
        grid,
        targets,
        sigma2,
        noise_w,
        coarse.group_f,
        coarse.group_t,
        scales=normalization(grid, doppler_norm),
    )
    weights = np.concatenate([np.full(K, float(eps_tau)), np.full(K, float(eps_nu))])
    return AllocationProblem(
        coarse=coarse,
        targets=tuple(targets),
        eps_tau=float(eps_tau),
        eps_nu=float(eps_nu),
        mu=float(mu),
        se_threshold=float(se_threshold),
        sigma2=float(sigma2),
        noise_w=float(noise_w),
        noise_z=float(noise_z),
        doppler_norm=doppler_norm,
        n_min=n_min,
        n_min_cells=n_min_cells,
        budget_cells=budget_cells,
        cell_fim=info,
        weights=weights,
    )


def problem_from_config(cfg, targets: Sequence[TargetParams], **overrides) -> AllocationProblem:
    """build_problem with every knob taken from an ExperimentConfig."""
    kwargs = dict(
        eps_tau=cfg.eps_tau,
        eps_nu=cfg.eps_nu,
        mu=cfg.mu,
        se_threshold=cfg.se_threshold,
        sigma2=cfg.per_resource_power,
        # argmin does not depend on the noise scale
        noise_w=cfg.noise_w if cfg.noise_w > 0 else 1.0,
        noise_z=cfg.noise_z,
        doppler_norm=cfg.doppler_norm,
        coarse=choose_coarse_grid(
            cfg.grid, cfg.max_coarse_cells, cfg.coarse_group_f, cfg.coarse_group_t
        ),
    )
    kwargs.update(overrides)
    return build_problem(cfg.grid, targets, **kwargs)


# ---------------------------------------------------------------------- #
# Labeling
# ---------------------------------------------------------------------- #


def surplus_order(path_gains: Sequence[float]) -> List[int]:
    """UE indices, highest path loss (smallest ||alpha||^2) first."""
    return sorted(range(len(path_gains)), key=lambda k: (path_gains[k], k))


def _assign_cells(
    cells: np.ndarray,
    quotas: Sequence[int],
    order: Sequence[int],
    size: int,
) -> np.ndarray:
    """Label flat cell indices in the given order; returns a flat label array (-1 = empty)."""
    total = len(cells)
    need = int(sum(quotas))
    if total < need:
        raise InfeasibleAllocationError(
            "se_threshold", f"{total} cells cannot cover UE quotas totalling {need}"
        )
    take = [int(q) for q in quotas]
    take[order[0]] += total - need
    labels = np.full(size, -1, dtype=int)
    pos = 0
    for k in order:
        labels[cells[pos:pos + take[k]]] = k
        pos += take[k]
    return labels


def label_union(
    union: np.ndarray,
    quotas: Sequence[int],
    path_gains: Sequence[float],
) -> np.ndarray:
    """
    Split a union mask (any 2-D shape) into per-UE masks (K, *shape).

    Cells are walked in column-major order; each UE receives its quota and
    the surplus goes to the highest path-loss UE.
    """
    union = np.asarray(union, dtype=bool)
    cells = np.flatnonzero(union.reshape(-1, order="F"))
    labels = _assign_cells(cells, quotas, surplus_order(path_gains), union.size)
    labels = labels.reshape(union.shape, order="F")
    return np.stack([labels == k for k in range(len(quotas))], axis=0)


# ---------------------------------------------------------------------- #
# Reports
# ---------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class SolveReport:
    solver: str                     # bnb | greedy | random | random_contiguous
    mask: AllocationMask
    objective: float
    bound: float = math.nan
    gap: float = math.nan
    nodes: int = 0
    wall_time: float = 0.0
    optimal: bool = False
    n_min: Tuple[int, ...] = ()
    coarse_union: Optional[np.ndarray] = None
    notes: str = ""

    @property
    def per_ue(self) -> np.ndarray:
        return self.mask.per_ue


def _report(
    problem: AllocationProblem,
    coarse_union: np.ndarray,
    solver: str,
    started: float,
    bound: float = math.nan,
    nodes: int = 0,
    optimal: bool = False,
    notes: str = "",
) -> SolveReport:
    coarse_union = problem.coarse.from_vec(coarse_union).astype(bool)
    per_ue_coarse = label_union(coarse_union, problem.n_min_cells, problem.path_gains)
    mask = AllocationMask(problem.grid, problem.coarse.expand(per_ue_coarse))
    objective = mask_objective(
        problem.grid,
        mask.union,
        problem.targets,
        problem.sigma2,
        problem.noise_w,
        problem.eps_tau,
        problem.eps_nu,
        problem.doppler_norm,
    )
    gap = math.nan
    if math.isfinite(bound) and math.isfinite(objective) and objective > 0:
        gap = max(0.0, (objective - bound) / objective)
    return SolveReport(
        solver=solver,
        mask=mask,
        objective=objective,
        bound=bound,
        gap=gap,
        nodes=nodes,
        wall_time=time.perf_counter() - started,
        optimal=optimal,
        n_min=problem.n_min,
        coarse_union=coarse_union,
        notes=notes,
    )


# ---------------------------------------------------------------------- #
# Convex relaxation
# ---------------------------------------------------------------------- #


def project_capped_simplex(v: np.ndarray, total: float) -> np.ndarray:
    """
    Euclidean projection of v onto {0 <= y <= 1, sum y = total}.

    y = clip(v - lam, 0, 1) with lam located exactly on the piecewise
    linear sum between sorted breakpoints.
    """
    v = np.asarray(v, dtype=float)
    n = v.size
    if total < -1e-12 or total > n + 1e-12:
        raise ValueError(f"sum {total} outside [0, {n}]")
    if n == 0:
        return v.copy()
    bps = np.unique(np.concatenate([v, v - 1.0]))
    sums = np.clip(v[None, :] - bps[:, None], 0.0, 1.0).sum(axis=1)  # non-increasing
    idx = int(np.searchsorted(-sums, -total, side="left"))
    if idx == 0:
        lam = bps[0]
    elif idx >= len(bps):
        lam = bps[-1]
    else:
        hi_s, lo_s = sums[idx - 1], sums[idx]
        frac = 0.0 if hi_s == lo_s else (hi_s - total) / (hi_s - lo_s)
        lam = bps[idx - 1] + frac * (bps[idx] - bps[idx - 1])
    return np.clip(v - lam, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class RelaxResult:
    value: float            # relaxed objective at x
    bound: float            # certified lower bound over the node
    x: np.ndarray           # relaxed values of the free cells
    iterations: int
    converged: bool


def _linear_min(g: np.ndarray, r: int) -> np.ndarray:
    """argmin_y g.y over {y in {0,1}^n, sum y = r}: the r smallest entries."""
    y = np.zeros_like(g)
    if r > 0:
        y[np.argsort(g, kind="stable")[:r]] = 1.0
    return y


def relax_node(
    problem: AllocationProblem,
    fix1: np.ndarray,
    fix0: np.ndarray,
    cutoff: float = math.inf,
    tol: float = RELAX_TOL,
    max_iters: int = RELAX_MAX_ITERS,
) -> RelaxResult:
    """
    Solve the node relaxation over the free cells by projected gradient
    with backtracking.

    bound is the best linearization bound seen; iterations stop early once
    it reaches cutoff.
    """
    fix1 = np.asarray(fix1, dtype=bool)
    fix0 = np.asarray(fix0, dtype=bool)
    free = ~(fix1 | fix0)
    r = problem.budget_cells - int(fix1.sum())
    nf = int(free.sum())
    if r < 0 or r > nf:
        return RelaxResult(math.inf, math.inf, np.zeros(nf), 0, True)

    base = problem.fim_of(fix1.astype(float))
    cells = problem.cell_fim[free]
    w = problem.weights

    def value(x: np.ndarray) -> float:
        return float(weighted_trace(base + np.tensordot(x, cells, axes=1), w))

    def grad(x: np.ndarray) -> np.ndarray:
        F = base + np.tensordot(x, cells, axes=1)
        Finv = sla.inv(F, check_finite=False)
        G = (Finv * w[None, :]) @ Finv
        return -np.einsum("ij,cij->c", G, cells)

    x = np.full(nf, r / nf) if nf else np.zeros(0)
    f = value(x)
    if not math.isfinite(f):
        # every completion is a subset of this support
        return RelaxResult(math.inf, math.inf, x, 0, True)

    g = grad(x)
    best_bound = f + float(g @ (_linear_min(g, r) - x))
    gmax = float(np.max(np.abs(g))) if nf else 0.0
    step = 1.0 / gmax if gmax > 0 else 1.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        if best_bound >= cutoff or f - best_bound <= tol * abs(f):
            converged = True
            break
        accepted = False
        for _ in range(60):
            x_new = project_capped_simplex(x - step * g, r)
            d = x_new - x
            dd = float(d @ d)
            if dd <= 1e-30:
                break
            f_new = value(x_new)
            if f_new <= f + float(g @ d) + 0.5 * dd / step:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        change = abs(f - f_new)
        x, f = x_new, f_new
        g = grad(x)
        best_bound = max(best_bound, f + float(g @ (_linear_min(g, r) - x)))
        step *= 2.0
        if change <= tol * abs(f):
            converged = True
            break
    return RelaxResult(f, min(best_bound, f), x, it, converged)


# ---------------------------------------------------------------------- #
# Solvers
# ---------------------------------------------------------------------- #


@dataclass
class _Node:
    fix1: np.ndarray
    fix0: np.ndarray
    bound: float
    depth: int = 0
    x: Optional[np.ndarray] = field(default=None, repr=False)


class AllocationSolver:
    """
    Runs the greedy heuristic and branch-and-bound on an AllocationProblem.

    Node and time budgets bound the search; an interrupted search returns
    its incumbent together with the remaining optimality gap.
    """

    def __init__(
        self,
        logger: logging.Logger,
        max_nodes: int = 2000,
        time_limit: float = 120.0,
        max_swaps: int = 200,
        leaf_size: int = DEFAULT_LEAF_SIZE,
    ) -> None:
        self.logger = logger
        self.max_nodes = max_nodes
        self.time_limit = time_limit
        self.max_swaps = max_swaps
        self.leaf_size = leaf_size

    # ---------- greedy ---------- #

    def _refine(self, problem: AllocationProblem, chosen: np.ndarray) -> Tuple[np.ndarray, float, int]:
        """Best-improvement single swaps until no swap lowers the objective."""
        chosen = chosen.copy()
        F = problem.fim_of(chosen)
        cur = float(weighted_trace(F, problem.weights))
        swaps = 0
        while swaps < self.max_swaps and math.isfinite(cur):
            inside = np.flatnonzero(chosen)
            outside = np.flatnonzero(~chosen)
            if inside.size == 0 or outside.size == 0:
                break
            trial = (
                F[None, None]
                - problem.cell_fim[inside][:, None]
                + problem.cell_fim[outside][None, :]
            )
            vals = weighted_trace(trial, problem.weights)
            flat = int(np.argmin(vals))
            i, j = divmod(flat, outside.size)
            if not vals[i, j] < cur * (1.0 - 1e-12):
                break
            chosen[inside[i]] = False
            chosen[outside[j]] = True
            F = F - problem.cell_fim[inside[i]] + problem.cell_fim[outside[j]]
            cur = float(weighted_trace(F, problem.weights))
            swaps += 1
        return chosen, cur, swaps

    def _additive_start(self, problem: AllocationProblem) -> np.ndarray:
        budget = problem.budget_cells
        scores = problem.cell_scores()
        chosen = np.zeros(problem.coarse.L, dtype=bool)

        start = np.argsort(-scores, kind="stable")[: problem.required_cells]
        chosen[start] = True
        F = problem.fim_of(chosen)
        cur = float(weighted_trace(F, problem.weights))

        while chosen.sum() < budget:
            cand = np.flatnonzero(~chosen)
            vals = weighted_trace(F[None] + problem.cell_fim[cand], problem.weights)
            best = int(np.argmin(vals))
            if not math.isfinite(vals[best]):
                pick = int(cand[np.argmax(scores[cand])])
            elif math.isfinite(cur) and vals[best] >= cur:
                break
            else:
                pick = int(cand[best])
            chosen[pick] = True
            F = F + problem.cell_fim[pick]
            cur = float(weighted_trace(F, problem.weights))
        return chosen

    def _relaxed_start(self, problem: AllocationProblem) -> np.ndarray:
        """Round the root relaxation: keep the budget cells with the largest weight."""
        Lc = problem.coarse.L
        res = relax_node(problem, np.zeros(Lc, dtype=bool), np.zeros(Lc, dtype=bool))
        chosen = np.zeros(Lc, dtype=bool)
        order = np.lexsort((-problem.cell_scores(), -res.x))
        chosen[order[: problem.budget_cells]] = True
        return chosen

    def greedy_union(self, problem: AllocationProblem) -> np.ndarray:
        """
        Greedy union as a column-major 0/1 coarse vector.

        Two starts are refined by swaps: additive selection from the
        highest-scoring cells and the rounded root relaxation. The lower
        objective wins; ties keep the additive start.
        """
        problem.require_feasible()
        best, best_val, best_swaps, best_start = None, math.inf, 0, ""
        for name, start in (("additive", self._additive_start), ("relaxed", self._relaxed_start)):
            chosen, val, swaps = self._refine(problem, start(problem))
            if best is None or val < best_val * (1.0 - 1e-12):
                best, best_val, best_swaps, best_start = chosen, val, swaps, name

        self.logger.info(
            "[GREEDY] cells=%d/%d start=%s swaps=%d objective=%.6g",
            int(best.sum()), problem.budget_cells, best_start, best_swaps, best_val,
        )
        return best

    def greedy(self, problem: AllocationProblem) -> SolveReport:
        started = time.perf_counter()
        chosen = self.greedy_union(problem)
        return _report(problem, chosen, "greedy", started)

    # ---------- branch and bound ---------- #

    def _enumerate(self, problem: AllocationProblem, node: _Node) -> Tuple[float, Optional[np.ndarray]]:
        free = np.flatnonzero(~(node.fix1 | node.fix0))
        r = problem.budget_cells - int(node.fix1.sum())
        if r < 0 or r > free.size:
            return math.inf, None
        combos = np.array(list(itertools.combinations(range(free.size), r)), dtype=int)
        X = np.tile(node.fix1.astype(float), (max(len(combos), 1), 1))
        if r > 0:
            rows = np.repeat(np.arange(len(combos)), r)
            X[rows, free[combos.ravel()]] = 1.0
        vals = problem.objective_batch(X)
        best = int(np.argmin(vals))
        return float(vals[best]), X[best] > 0.5

    def _leaf_count(self, problem: AllocationProblem, node: _Node) -> int:
        nf = int((~(node.fix1 | node.fix0)).sum())
        r = problem.budget_cells - int(node.fix1.sum())
        if r < 0 or r > nf:
            return 0
        return math.comb(nf, r)

    def _evaluate(self, problem: AllocationProblem, node: _Node, cutoff: float) -> _Node:
        res = relax_node(problem, node.fix1, node.fix0, cutoff=cutoff)
        node.bound = res.bound
        node.x = res.x
        return node

    def branch_and_bound(
        self,
        problem: AllocationProblem,
        incumbent: Optional[np.ndarray] = None,
    ) -> SolveReport:
        started = time.perf_counter()
        problem.require_feasible()
        Lc = problem.coarse.L

        if incumbent is None:
            incumbent = self.greedy_union(problem)
        incumbent = np.asarray(incumbent, dtype=bool)
        best_val = problem.objective_of(incumbent)
        self.logger.info("[BNB] start cells=%d budget=%d incumbent=%.6g", Lc, problem.budget_cells, best_val)

        def cutoff() -> float:
            return best_val * (1.0 - PRUNE_REL_TOL) if math.isfinite(best_val) else math.inf

        root = _Node(np.zeros(Lc, dtype=bool), np.zeros(Lc, dtype=bool), -math.inf)
        stack: List[_Node] = [root]
        nodes = 0
        interrupted = False

        while stack:
            if nodes >= self.max_nodes or time.perf_counter() - started > self.time_limit:
                interrupted = True
                break
            node = stack.pop()
            if node.bound >= cutoff():
                continue
            nodes += 1

            if self._leaf_count(problem, node) <= self.leaf_size:
                val, x = self._enumerate(problem, node)
                if x is not None and val < best_val:
                    best_val, incumbent = val, x
                    self.logger.info("[BNB] node=%d leaf incumbent=%.6g", nodes, best_val)
                continue

            if node.x is None:
                self._evaluate(problem, node, cutoff())
                if node.bound >= cutoff():
                    continue

            free = np.flatnonzero(~(node.fix1 | node.fix0))
            j = int(free[np.argmin(np.abs(node.x - 0.5))])

            children = []
            for value in (True, False):
                fix1 = node.fix1.copy()
                fix0 = node.fix0.copy()
                (fix1 if value else fix0)[j] = True
                child = _Node(fix1, fix0, node.bound, node.depth + 1)
                if self._leaf_count(problem, child) == 0:
                    continue
                if self._leaf_count(problem, child) > self.leaf_size:
                    self._evaluate(problem, child, cutoff())
                    if child.bound >= cutoff():
                        continue
                children.append(child)
            # better bound is explored first
            children.sort(key=lambda c: c.bound, reverse=True)
            stack.extend(children)

        open_bounds = [n.bound for n in stack]
        lower = min([best_val] + open_bounds) if interrupted else best_val
        optimal = not interrupted
        if interrupted:
            self.logger.warning(
                "[WARN] [BNB] budget exhausted after %d nodes; %d open", nodes, len(stack)
            )
        report = _report(
            problem,
            incumbent,
            "bnb",
            started,
            bound=lower,
            nodes=nodes,
            optimal=optimal,
            notes="branch-and-bound without cutting planes",
        )
        self.logger.info(
            "[BNB] done nodes=%d objective=%.6g gap=%.3g time=%.2fs",
            nodes, report.objective, 0.0 if optimal else report.gap, report.wall_time,
        )
        return report

    def solve(self, problem: AllocationProblem, solver: str = "bnb") -> SolveReport:
        self.logger.info(
            "[ALLOC] solver=%s coarse=%dx%d group=%dx%d budget=%d n_min=%s",
            solver, problem.coarse.M, problem.coarse.N, problem.coarse.group_f,
            problem.coarse.group_t, problem.budget_cells, list(problem.n_min),
        )
        if solver == "bnb":
            return self.branch_and_bound(problem)
        if solver == "greedy":
            return self.greedy(problem)
        raise ValueError(f"unknown solver {solver!r}")


def _default_logger() -> logging.Logger:
    return logging.getLogger("isac_waveform")


def greedy_allocation(
    problem: AllocationProblem,
    max_swaps: int = 200,
    logger: Optional[logging.Logger] = None,
) -> SolveReport:
    return AllocationSolver(logger or _default_logger(), max_swaps=max_swaps).greedy(problem)


def optimize_allocation(
    problem: AllocationProblem,
    max_nodes: int = 2000,
    time_limit: float = 120.0,
    logger: Optional[logging.Logger] = None,
) -> SolveReport:
    solver = AllocationSolver(logger or _default_logger(), max_nodes=max_nodes, time_limit=time_limit)
    return solver.branch_and_bound(problem)


# ---------------------------------------------------------------------- #
# Baseline schedulers
# ---------------------------------------------------------------------- #


def _baseline_quotas(K: int, n_min: Optional[Sequence[int]]) -> List[int]:
    if n_min is None:
        return [0] * K
    if len(n_min) != K:
        raise GridError(f"{len(n_min)} quotas for {K} UEs")
    return [int(v) for v in n_min]


def _baseline_order(quotas: Sequence[int], priority: Optional[Sequence[int]]) -> List[int]:
    if priority is not None:
        return list(priority)
    # the largest quota belongs to the highest path-loss UE
    return sorted(range(len(quotas)), key=lambda k: (-quotas[k], k))


def random_scheduler(
    grid: ResourceGrid,
    K: int,
    mu: float,
    n_min: Optional[Sequence[int]] = None,
    seed=0,
    priority: Optional[Sequence[int]] = None,
) -> AllocationMask:
    """floor(mu * L) uniformly drawn cells split into disjoint per-UE sets."""
    quotas = _baseline_quotas(K, n_min)
    total = math.floor(mu * grid.L + 1e-9)
    if sum(quotas) > total:
        raise InfeasibleAllocationError("occupancy", f"sum n_min={sum(quotas)} exceeds mu*L={total}")
    cells = as_generator(seed).permutation(grid.L)[:total]
    labels = _assign_cells(cells, quotas, _baseline_order(quotas, priority), grid.L)
    labels = labels.reshape(grid.shape, order="F")
    return AllocationMask(grid, np.stack([labels == k for k in range(K)], axis=0))


def _place_in_column(rng: np.random.Generator, M: int, count: int, length: int) -> np.ndarray:
    """Start rows of `count` non-overlapping runs of `length`, uniform over placements."""
    slots = M - count * (length - 1)
    pos = np.sort(rng.choice(slots, size=count, replace=False))
    return pos + np.arange(count) * (length - 1)


def random_contiguous_scheduler(
    grid: ResourceGrid,
    K: int,
    mu: float,
    block_size: int = 10,
    seed=0,
    n_min: Optional[Sequence[int]] = None,
    priority: Optional[Sequence[int]] = None,
) -> AllocationMask:
    """
    floor(mu*L / N_b) non-overlapping blocks of N_b contiguous subcarriers
    in random symbols and positions; one shorter block tops up the count
    only when the UE quotas need it.
    """
    if block_size < 1:
        raise GridError(f"block size must be >= 1, got {block_size}")
    rng = as_generator(seed)
    quotas = _baseline_quotas(K, n_min)
    M, N = grid.shape
    total = math.floor(mu * grid.L + 1e-9)
    if sum(quotas) > total:
        raise InfeasibleAllocationError("occupancy", f"sum n_min={sum(quotas)} exceeds mu*L={total}")

    n_blocks = total // block_size
    per_col = M // block_size
    if n_blocks > N * per_col:
        raise PlacementError(
            f"{n_blocks} blocks of {block_size} do not fit {N} symbols x {per_col} blocks"
        )

    slots = np.repeat(np.arange(N), per_col)
    counts = np.bincount(rng.permutation(slots)[:n_blocks], minlength=N)

    union = np.zeros(grid.shape, dtype=bool)
    blocks: List[np.ndarray] = []
    for n in range(N):
        if counts[n] == 0:
            continue
        for start in _place_in_column(rng, M, int(counts[n]), block_size):
            union[start:start + block_size, n] = True
            blocks.append(np.arange(start, start + block_size) + M * n)

    shortfall = sum(quotas) - n_blocks * block_size
    if shortfall > 0:
        # occupied rows inside every window of `shortfall`, per symbol
        occupied = np.vstack([np.zeros((1, N), dtype=int), np.cumsum(union, axis=0)])
        if shortfall <= M:
            window = occupied[shortfall:] - occupied[: M - shortfall + 1]
            candidates = np.argwhere(window.T == 0)
        else:
            candidates = np.zeros((0, 2), dtype=int)
        if len(candidates) == 0:
            raise PlacementError(f"no free run of {shortfall} subcarriers for the top-up block")
        n, start = (int(v) for v in candidates[int(rng.integers(len(candidates)))])
        union[start:start + shortfall, n] = True
        blocks.append(np.arange(start, start + shortfall) + M * n)

    order = rng.permutation(len(blocks))
    cells = np.concatenate([blocks[i] for i in order]) if blocks else np.zeros(0, dtype=int)
    labels = _assign_cells(cells, quotas, _baseline_order(quotas, priority), grid.L)
    labels = labels.reshape(grid.shape, order="F")
    return AllocationMask(grid, np.stack([labels == k for k in range(K)], axis=0))


def baseline_report(
    problem: AllocationProblem,
    mask: AllocationMask,
    solver: str,
    started: Optional[float] = None,
) -> SolveReport:
    """Wrap a baseline mask with its design objective."""
    objective = mask_objective(
        problem.grid, mask.union, problem.targets, problem.sigma2, problem.noise_w,
        problem.eps_tau, problem.eps_nu, problem.doppler_norm,
    )
    return SolveReport(
        solver=solver,
        mask=mask,
        objective=objective,
        wall_time=0.0 if started is None else time.perf_counter() - started,
        n_min=problem.n_min,
    )


# ---------------------------------------------------------------------- #
# Mask geometry
# ---------------------------------------------------------------------- #


def edge_band(grid: ResourceGrid, band: float = 0.25) -> np.ndarray:
    """Cells in the outer `band` fraction of either axis (half on each side)."""
    ef = int(round(band * grid.M / 2.0))
    et = int(round(band * grid.N / 2.0))
    rows = np.zeros(grid.M, dtype=bool)
    cols = np.zeros(grid.N, dtype=bool)
    if ef:
        rows[:ef] = rows[-ef:] = True
    if et:
        cols[:et] = cols[-et:] = True
    return rows[:, None] | cols[None, :]


def edge_fraction(mask: AllocationMask, band: float = 0.25) -> float:
    """Share of allocated resources inside edge_band."""
    if mask.allocated == 0:
        return 0.0
    return float((mask.union & edge_band(mask.grid, band)).sum()) / mask.allocated


def uniform_edge_fraction(grid: ResourceGrid, band: float = 0.25) -> float:
    """edge_fraction expected from uniformly random allocation."""
    return float(edge_band(grid, band).mean())

"""
harness.py

Monte Carlo studies:

- run_gain_sweep: CRB gain of the optimized allocation over the random and
  random-contiguous baselines versus one swept parameter (inter-target
  delay spacing by default, also mu or the CRB weights).
- run_rmse_sweep: delay/Doppler RMSE of the full estimation chain versus
  sensing SNR (or mu), with sqrt-CRB references.
- recovery_trial / sidelobe_trial: completion on an optimized mask, split
  into fillable and unidentifiable error, and its peak-to-sidelobe ratio
  against zero-fill.

Every trial draws from trial_rng(master_seed, point, trial, stream), so a
trial's numbers do not depend on which worker ran it. Trials are reduced
with pandas in (point, method, target) order.

gamma_s targeting: sigma_w^2 = sigma^2 ||beta||^2 / (g_s gamma_s) with
g_s = number of allocated resources.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from allocator import (
    AllocationSolver,
    problem_from_config,
    random_contiguous_scheduler,
    random_scheduler,
    surplus_order,
)
from channel_sim import (
    assemble_waveform,
    comm_snr,
    draw_amplitudes,
    gen_symbols,
    noise_for_snr,
    processing_gain,
    rx_signal,
    sensing_channel,
    sensing_snr,
    spectral_efficiency,
    trial_rng,
)
from crb_engine import CrbMatrices, SingularFimError, crb, crb_gain, fim
from estimator import (
    CompletionConfig,
    Detection,
    PartialChannel,
    RecoveryErrors,
    dd_transform,
    detect_peaks,
    identifiable_cells,
    ls_channel_estimate,
    peak_to_sidelobe_ratio,
    pipeline_estimate,
    recover_channel,
    recovery_errors,
    schatten_complete,
)
from experiment_config import ConfigError, ExperimentConfig
from grid_core import (
    SPEED_OF_LIGHT,
    AllocationMask,
    CommPath,
    ResourceGrid,
    TargetParams,
    amplitude_power,
    comm_path_power,
)

ALLOCATIONS = ("optimized", "random", "random_contiguous")
ESTIMATOR_ALIASES = {
    "completion": "completion",
    "linear": "linear",
    "linear_interp": "linear",
    "zerofill": "zerofill",
    "zero_fill": "zerofill",
}
SWEEP_VARIABLES = ("inter_delay_spacing", "sensing_snr", "mu", "weights")
GAIN_VARIABLES = ("inter_delay_spacing", "mu", "weights")
RMSE_VARIABLES = ("sensing_snr", "mu")

STREAM_SCENARIO = 0
STREAM_SYMBOLS = 1
STREAM_NOISE = 2
STREAM_RANDOM = 3
STREAM_CONTIGUOUS = 4

RMSE_MIN_SPACING = 4.0


# ---------------------------------------------------------------------- #
# Records
# ---------------------------------------------------------------------- #


def parse_method(tag: str) -> Tuple[str, Optional[str]]:
    """'optimized+completion' -> ('optimized', 'completion'); 'random' -> ('random', None)."""
    alloc, _, est = tag.partition("+")
    if alloc not in ALLOCATIONS:
        raise ConfigError(f"unknown allocation {alloc!r} in method {tag!r}")
    if not est:
        return alloc, None
    if est not in ESTIMATOR_ALIASES:
        raise ConfigError(f"unknown estimator {est!r} in method {tag!r}")
    return alloc, ESTIMATOR_ALIASES[est]


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: Tuple[float, ...]
    trials: int
    methods: Tuple[str, ...]
    master_seed: int
    fixed_snr_db: float = 30.0

    def __post_init__(self) -> None:
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(f"sweep variable must be one of {SWEEP_VARIABLES}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError("sweep values must be sorted ascending without repeats")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.methods:
            raise ConfigError("sweep needs at least one method")
        for tag in self.methods:
            parse_method(tag)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["values"] = list(self.values)
        data["methods"] = list(self.methods)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepSpec":
        return cls(
            variable=data["variable"],
            values=tuple(float(v) for v in data["values"]),
            trials=int(data["trials"]),
            methods=tuple(data["methods"]),
            master_seed=int(data["master_seed"]),
            fixed_snr_db=float(data.get("fixed_snr_db", 30.0)),
        )


@dataclass(frozen=True)
class ResultRow:
    study: str                      # gain | rmse
    method: str
    allocation: str
    estimator: str
    sweep_variable: str
    sweep_value: float
    target: int
    rmse_delay_s: float
    rmse_doppler_hz: float
    crb_delay_s: float
    crb_doppler_hz: float
    crb_gain: float
    detection_failure_rate: float
    gamma_s_db: float
    g_s: int
    se_min: float
    objective: float
    trials: int
    master_seed: int
    runtime_s: float = 0.0


# ---------------------------------------------------------------------- #
# Scenario
# ---------------------------------------------------------------------- #


def point_config(cfg: ExperimentConfig, variable: str, value: float) -> ExperimentConfig:
    """Config for one sweep point."""
    if variable == "inter_delay_spacing":
        return replace(cfg, delay_spacing=float(value))
    if variable == "mu":
        return replace(cfg, mu=float(value))
    if variable == "weights":
        # value is eps_nu; the weights stay on the simplex
        return replace(cfg, eps_tau=1.0 - float(value), eps_nu=float(value))
    return cfg


def rmse_scenario_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """On-grid targets at least RMSE_MIN_SPACING bins apart on both axes."""
    return replace(
        cfg,
        on_grid=True,
        delay_spacing=max(cfg.delay_spacing, RMSE_MIN_SPACING),
        doppler_spacing=max(cfg.doppler_spacing, RMSE_MIN_SPACING),
    )


def build_scenario(cfg: ExperimentConfig, rng: Optional[np.random.Generator] = None) -> List[TargetParams]:
    """
    Targets at range R with delays spaced by delay_spacing / B and Dopplers
    by doppler_spacing / (N T). Each target is also a UE whose Q paths
    share its one-way free-space gain.

    With rng=None amplitudes are the real sqrt(Omega_beta) and path phases
    are zero; otherwise beta ~ CN(0, Omega_beta) and phases are uniform.
    """
    grid = cfg.grid
    d_tau, d_nu = 1.0 / grid.B, 1.0 / grid.burst_duration
    tau0 = 2.0 * cfg.target_range / SPEED_OF_LIGHT
    nu0 = 2.0 * cfg.f0 * cfg.target_velocity / SPEED_OF_LIGHT

    targets = []
    for k in range(cfg.n_targets):
        tau = tau0 + k * cfg.delay_spacing * d_tau
        nu = nu0 + k * cfg.doppler_spacing * d_nu
        if cfg.on_grid:
            tau = round(tau / d_tau) * d_tau
            nu = round(nu / d_nu) * d_nu
        range_k = SPEED_OF_LIGHT * tau / 2.0
        omega = amplitude_power(cfg.f0, range_k, cfg.reflectivity)
        if rng is None:
            beta = complex(math.sqrt(omega))
            phases = np.zeros(cfg.n_paths)
        else:
            beta = complex(draw_amplitudes(rng, [omega])[0])
            phases = rng.uniform(0.0, 2.0 * math.pi, cfg.n_paths)
        amp = math.sqrt(comm_path_power(cfg.f0, range_k) / cfg.n_paths)
        paths = tuple(
            CommPath(
                alpha=amp * complex(math.cos(ph), math.sin(ph)),
                tau=range_k / SPEED_OF_LIGHT,
                nu=cfg.f0 * cfg.target_velocity / SPEED_OF_LIGHT,
            )
            for ph in phases
        )
        targets.append(TargetParams(beta=beta, tau=tau, nu=nu, range_m=range_k, comm_paths=paths))
    return targets


def associate(
    targets: Sequence[TargetParams],
    detection: Detection,
    d_tau: float,
    d_nu: float,
) -> List[Optional[int]]:
    """Detection index per target by minimum total normalized distance; None when unmatched."""
    out: List[Optional[int]] = [None] * len(targets)
    if detection.count == 0:
        return out
    tau = np.array([t.tau for t in targets])
    nu = np.array([t.nu for t in targets])
    cost = ((tau[:, None] - detection.tau_hat[None, :]) / d_tau) ** 2
    cost += ((nu[:, None] - detection.nu_hat[None, :]) / d_nu) ** 2
    rows, cols = linear_sum_assignment(cost)
    for r, c in zip(rows, cols):
        out[int(r)] = int(c)
    return out


def completion_config(cfg: ExperimentConfig) -> CompletionConfig:
    return CompletionConfig(
        p=cfg.schatten_p,
        lambda_ratio=cfg.completion_lambda_ratio,
        decay=cfg.completion_decay,
        lambda_floor=cfg.completion_lambda_floor,
        max_iters=cfg.completion_max_iters,
        tol=cfg.completion_tol,
    )


def _safe_crb(mask: AllocationMask, targets, sigma2: float, noise_w: float, cap: float) -> Optional[CrbMatrices]:
    try:
        return crb(fim(mask.grid, mask.union, targets, sigma2, noise_w), cap)
    except SingularFimError:
        return None


def _to_db(x: float) -> float:
    if x <= 0:
        return -math.inf
    return 10.0 * math.log10(x)


# ---------------------------------------------------------------------- #
# Runner
# ---------------------------------------------------------------------- #


class SweepRunner:
    """
    Runs sweep points x trials, optionally on a thread pool, and reduces
    the per-trial records in index order.
    """

    def __init__(self, logger: logging.Logger, cfg: ExperimentConfig, workers: Optional[int] = None) -> None:
        self.logger = logger
        self.cfg = cfg
        self.workers = workers or cfg.workers

    def _solver(self, cfg: ExperimentConfig) -> AllocationSolver:
        return AllocationSolver(
            self.logger,
            max_nodes=cfg.bnb_max_nodes,
            time_limit=cfg.bnb_time_limit,
            max_swaps=cfg.greedy_max_swaps,
        )

    def _map(self, fn: Callable, jobs: Sequence[Tuple]) -> List[Any]:
        if self.workers <= 1 or len(jobs) <= 1:
            return [fn(*job) for job in jobs]
        results: List[Any] = [None] * len(jobs)
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            futures = {pool.submit(fn, *job): idx for idx, job in enumerate(jobs)}
            for fut, idx in futures.items():
                results[idx] = fut.result()
        return results

    def _baseline_masks(self, cfg, problem, spec: SweepSpec, p: int, t: int, wanted) -> Dict[str, AllocationMask]:
        masks: Dict[str, AllocationMask] = {}
        priority = surplus_order(problem.path_gains)
        if "random" in wanted:
            masks["random"] = random_scheduler(
                cfg.grid, cfg.n_targets, cfg.mu, problem.n_min,
                seed=trial_rng(spec.master_seed, p, t, STREAM_RANDOM), priority=priority,
            )
        if "random_contiguous" in wanted:
            masks["random_contiguous"] = random_contiguous_scheduler(
                cfg.grid, cfg.n_targets, cfg.mu, cfg.block_size,
                seed=trial_rng(spec.master_seed, p, t, STREAM_CONTIGUOUS),
                n_min=problem.n_min, priority=priority,
            )
        return masks

    # ---------- CRB gain ---------- #

    def _gain_trial(self, spec: SweepSpec, p: int, value: float, t: int) -> List[Dict[str, Any]]:
        started = time.perf_counter()
        cfg = point_config(self.cfg, spec.variable, value)
        targets = build_scenario(cfg, trial_rng(spec.master_seed, p, t, STREAM_SCENARIO))
        problem = problem_from_config(cfg, targets)
        opt = self._solver(cfg).solve(problem, cfg.solver)

        wanted = {parse_method(m)[0] for m in spec.methods}
        masks = {"optimized": opt.mask}
        masks.update(self._baseline_masks(cfg, problem, spec, p, t, wanted))

        sigma2 = cfg.per_resource_power
        c_opt = _safe_crb(opt.mask, targets, sigma2, cfg.noise_w, cfg.fim_cond_cap)
        betas = [tg.beta for tg in targets]
        records = []
        for tag in spec.methods:
            alloc, _ = parse_method(tag)
            mask = masks[alloc]
            C = c_opt if alloc == "optimized" else _safe_crb(mask, targets, sigma2, cfg.noise_w, cfg.fim_cond_cap)
            gain = math.nan
            if C is not None and c_opt is not None:
                gain = crb_gain(C, c_opt)
            g_s = processing_gain(mask)
            gamma = sensing_snr(sigma2, betas, g_s, cfg.noise_w) if g_s > 0 else math.nan
            se_min = min(
                spectral_efficiency(mask, k, comm_snr(sigma2, tg, cfg.noise_z))
                for k, tg in enumerate(targets)
            )
            objective = opt.objective if alloc == "optimized" else math.nan
            for k in range(len(targets)):
                records.append(dict(
                    point=p, trial=t, method=tag, allocation=alloc, estimator="",
                    target=k,
                    crb_tau=C.C_tau[k, k] if C is not None else math.nan,
                    crb_nu=C.C_nu[k, k] if C is not None else math.nan,
                    gain=gain, gamma=gamma, g_s=g_s, se_min=se_min, objective=objective,
                    err_tau=math.nan, err_nu=math.nan, missed=0,
                    runtime=time.perf_counter() - started,
                ))
        return records

    def run_gain_sweep(self, spec: SweepSpec) -> List[ResultRow]:
        if spec.variable not in GAIN_VARIABLES:
            raise ConfigError(f"gain sweep variable must be one of {GAIN_VARIABLES}")
        self.logger.info(
            "[SWEEP] gain sweep over %s: %d points x %d trials, methods=%s",
            spec.variable, len(spec.values), spec.trials, list(spec.methods),
        )
        jobs = [(spec, p, v, t) for p, v in enumerate(spec.values) for t in range(spec.trials)]
        trials = self._map(self._gain_trial, jobs)
        return self._reduce("gain", spec, [rec for batch in trials for rec in batch])

    # ---------- RMSE ---------- #

    def _design_mask(self, cfg: ExperimentConfig) -> Tuple[AllocationMask, float, Tuple[int, ...]]:
        problem = problem_from_config(cfg, build_scenario(cfg))
        report = self._solver(cfg).solve(problem, cfg.solver)
        return report.mask, report.objective, problem.n_min

    def _rmse_trial(
        self,
        spec: SweepSpec,
        p: int,
        value: float,
        t: int,
        design: Tuple[AllocationMask, float, Tuple[int, ...]],
    ) -> List[Dict[str, Any]]:
        started = time.perf_counter()
        cfg = point_config(self.cfg, spec.variable, value)
        grid = cfg.grid
        targets = build_scenario(cfg, trial_rng(spec.master_seed, p, t, STREAM_SCENARIO))
        symbols = gen_symbols(grid, cfg.constellation, trial_rng(spec.master_seed, p, t, STREAM_SYMBOLS))
        sigma2 = cfg.per_resource_power
        betas = [tg.beta for tg in targets]
        H = sensing_channel(grid, targets)
        d_tau, d_nu = 1.0 / grid.B, 1.0 / grid.burst_duration
        snr_db = value if spec.variable == "sensing_snr" else spec.fixed_snr_db
        ccfg = completion_config(cfg)

        design_mask, design_obj, n_min = design
        priority = sorted(range(len(n_min)), key=lambda k: (-n_min[k], k))
        masks = {"optimized": design_mask}
        if any(parse_method(m)[0] == "random" for m in spec.methods):
            masks["random"] = random_scheduler(
                grid, cfg.n_targets, cfg.mu, n_min,
                seed=trial_rng(spec.master_seed, p, t, STREAM_RANDOM), priority=priority,
            )
        if any(parse_method(m)[0] == "random_contiguous" for m in spec.methods):
            masks["random_contiguous"] = random_contiguous_scheduler(
                grid, cfg.n_targets, cfg.mu, cfg.block_size,
                seed=trial_rng(spec.master_seed, p, t, STREAM_CONTIGUOUS),
                n_min=n_min, priority=priority,
            )

        records = []
        for a_idx, alloc in enumerate(ALLOCATIONS):
            tags = [m for m in spec.methods if parse_method(m)[0] == alloc]
            if not tags:
                continue
            mask = masks[alloc]
            X = assemble_waveform(math.sqrt(sigma2), symbols, mask)
            g_s = processing_gain(mask)
            noise = noise_for_snr(10.0 ** (snr_db / 10.0), sigma2, betas, g_s)
            R = rx_signal(X, H, noise, trial_rng(spec.master_seed, p, t, STREAM_NOISE, a_idx))
            C = _safe_crb(mask, targets, sigma2, noise, cfg.fim_cond_cap) if noise > 0 else None
            zero_crb = noise == 0

            for tag in tags:
                _, est = parse_method(tag)
                res = pipeline_estimate(
                    R, X, mask, cfg.n_targets, est or cfg.estimator, ccfg,
                    guard=cfg.guard_bins, refine=cfg.refine_peaks,
                )
                match = associate(targets, res.detection, d_tau, d_nu)
                for k, tg in enumerate(targets):
                    j = match[k]
                    records.append(dict(
                        point=p, trial=t, method=tag, allocation=alloc, estimator=est or cfg.estimator,
                        target=k,
                        crb_tau=0.0 if zero_crb else (C.C_tau[k, k] if C is not None else math.nan),
                        crb_nu=0.0 if zero_crb else (C.C_nu[k, k] if C is not None else math.nan),
                        gain=math.nan, gamma=10.0 ** (snr_db / 10.0), g_s=g_s, se_min=math.nan,
                        objective=design_obj if alloc == "optimized" else math.nan,
                        err_tau=math.nan if j is None else res.detection.tau_hat[j] - tg.tau,
                        err_nu=math.nan if j is None else res.detection.nu_hat[j] - tg.nu,
                        missed=int(j is None),
                        runtime=time.perf_counter() - started,
                    ))
        return records

    def run_rmse_sweep(self, spec: SweepSpec) -> List[ResultRow]:
        if spec.variable not in RMSE_VARIABLES:
            raise ConfigError(f"RMSE sweep variable must be one of {RMSE_VARIABLES}")
        if not any(parse_method(m)[1] for m in spec.methods):
            raise ConfigError("RMSE sweep needs at least one allocation+estimator method")
        base = self.cfg
        self.cfg = rmse_scenario_config(base)
        try:
            self.logger.info(
                "[SWEEP] rmse sweep over %s: %d points x %d trials, spacing=(%.1f, %.1f) bins on-grid",
                spec.variable, len(spec.values), spec.trials,
                self.cfg.delay_spacing, self.cfg.doppler_spacing,
            )
            designs = {}
            for p, v in enumerate(spec.values):
                pcfg = point_config(self.cfg, spec.variable, v)
                key = (pcfg.mu, pcfg.eps_tau, pcfg.eps_nu)
                if key not in designs:
                    designs[key] = self._design_mask(pcfg)
            jobs = []
            for p, v in enumerate(spec.values):
                pcfg = point_config(self.cfg, spec.variable, v)
                design = designs[(pcfg.mu, pcfg.eps_tau, pcfg.eps_nu)]
                for t in range(spec.trials):
                    jobs.append((spec, p, v, t, design))
            trials = self._map(self._rmse_trial, jobs)
            return self._reduce("rmse", spec, [rec for batch in trials for rec in batch])
        finally:
            self.cfg = base

    # ---------- completion checks ---------- #

    def _designed_trial(self, seed: int) -> Tuple[ExperimentConfig, List[TargetParams], AllocationMask]:
        cfg = rmse_scenario_config(self.cfg)
        targets = build_scenario(cfg, trial_rng(cfg.rng_seed, seed, STREAM_SCENARIO))
        report = self._solver(cfg).solve(problem_from_config(cfg, targets), cfg.solver)
        return cfg, targets, report.mask

    def recovery_trial(self, seed: int, ccfg: Optional[CompletionConfig] = None) -> RecoveryErrors:
        """Noiseless completion of an on-grid two-target channel on its own optimized mask."""
        cfg, targets, mask = self._designed_trial(seed)
        H = sensing_channel(cfg.grid, targets).values
        partial = PartialChannel(np.where(mask.union, H, 0), np.array(mask.union))
        res = schatten_complete(partial, ccfg or completion_config(cfg))
        errors = recovery_errors(res.values, H, mask.union)
        self.logger.info(
            "[EST] recovery seed=%d rank=%d iters=%d fillable=%.3g full=%.3g floor=%.3g (%d fillable cells)",
            seed, res.rank, res.iterations, errors.fillable, errors.full, errors.floor, errors.fillable_cells,
        )
        return errors

    def sidelobe_trial(self, seed: int, snr_db: float) -> Tuple[float, float]:
        """Peak-to-sidelobe ratio after completion and after zero-fill of the same LS estimate."""
        cfg, targets, mask = self._designed_trial(seed)
        grid = cfg.grid
        sigma2 = cfg.per_resource_power
        symbols = gen_symbols(grid, cfg.constellation, trial_rng(cfg.rng_seed, seed, STREAM_SYMBOLS))
        X = assemble_waveform(math.sqrt(sigma2), symbols, mask)
        noise = noise_for_snr(10.0 ** (snr_db / 10.0), sigma2, [t.beta for t in targets], processing_gain(mask))
        R = rx_signal(X, sensing_channel(grid, targets), noise, trial_rng(cfg.rng_seed, seed, STREAM_NOISE))
        partial = ls_channel_estimate(R, X, mask)
        ratios = []
        for method in ("completion", "zerofill"):
            H_hat, _, _ = recover_channel(partial, method, completion_config(cfg))
            dd = dd_transform(H_hat, grid)
            ratios.append(peak_to_sidelobe_ratio(dd, [dd.bin_of(t.tau, t.nu) for t in targets], cfg.guard_bins))
        self.logger.info("[EST] psr seed=%d completion=%.3g zerofill=%.3g", seed, ratios[0], ratios[1])
        return ratios[0], ratios[1]

    # ---------- reduction ---------- #

    def _reduce(self, study: str, spec: SweepSpec, records: List[Dict[str, Any]]) -> List[ResultRow]:
        if not records:
            return []
        df = pd.DataFrame.from_records(records)
        df = df.sort_values(["point", "trial", "target"], kind="stable")
        method_rank = {m: i for i, m in enumerate(spec.methods)}
        rows: List[ResultRow] = []
        for (p, method, target), grp in sorted(
            df.groupby(["point", "method", "target"], sort=False),
            key=lambda kv: (kv[0][0], method_rank[kv[0][1]], kv[0][2]),
        ):
            hit = grp[grp["missed"] == 0]
            rmse_tau = math.sqrt(float(np.mean(hit["err_tau"] ** 2))) if study == "rmse" and len(hit) else math.nan
            rmse_nu = math.sqrt(float(np.mean(hit["err_nu"] ** 2))) if study == "rmse" and len(hit) else math.nan
            gamma = float(grp["gamma"].mean())
            row = ResultRow(
                study=study,
                method=method,
                allocation=str(grp["allocation"].iloc[0]),
                estimator=str(grp["estimator"].iloc[0]),
                sweep_variable=spec.variable,
                sweep_value=float(spec.values[int(p)]),
                target=int(target),
                rmse_delay_s=rmse_tau,
                rmse_doppler_hz=rmse_nu,
                crb_delay_s=math.sqrt(float(grp["crb_tau"].mean())),
                crb_doppler_hz=math.sqrt(float(grp["crb_nu"].mean())),
                crb_gain=float(grp["gain"].mean()) if study == "gain" else math.nan,
                detection_failure_rate=float(grp["missed"].mean()) if study == "rmse" else math.nan,
                gamma_s_db=math.nan if math.isnan(gamma) else _to_db(gamma),
                g_s=int(round(float(grp["g_s"].mean()))),
                se_min=float(grp["se_min"].mean()),
                objective=float(grp["objective"].mean()),
                trials=int(grp["trial"].nunique()),
                master_seed=spec.master_seed,
                runtime_s=float(grp["runtime"].sum()),
            )
            rows.append(row)
            if target == 0:
                self.logger.info(
                    "[SWEEP] %s=%g method=%s gamma_s=%.2f dB g_s=%d gain=%.4g fail=%.2f",
                    spec.variable, row.sweep_value, method, row.gamma_s_db, row.g_s,
                    row.crb_gain, row.detection_failure_rate,
                )
        return rows


def _runner(cfg: ExperimentConfig, logger: Optional[logging.Logger]) -> SweepRunner:
    return SweepRunner(logger or logging.getLogger("isac_waveform"), cfg)


def run_gain_sweep(cfg: ExperimentConfig, spec: SweepSpec, logger: Optional[logging.Logger] = None) -> List[ResultRow]:
    return _runner(cfg, logger).run_gain_sweep(spec)


def run_rmse_sweep(cfg: ExperimentConfig, spec: SweepSpec, logger: Optional[logging.Logger] = None) -> List[ResultRow]:
    return _runner(cfg, logger).run_rmse_sweep(spec)


# ---------------------------------------------------------------------- #
# Checks on RMSE rows
# ---------------------------------------------------------------------- #


def _by_point(rows: Sequence[ResultRow], method: str) -> Dict[float, List[ResultRow]]:
    out: Dict[float, List[ResultRow]] = {}
    for row in rows:
        if row.study == "rmse" and row.method == method:
            out.setdefault(row.sweep_value, []).append(row)
    return out


def rmse_ordering_violations(
    rows: Sequence[ResultRow],
    worse: str = "optimized+zerofill",
    better: str = "optimized+completion",
    min_snr_db: float = 20.0,
) -> List[str]:
    """Sweep points at or above min_snr_db where `better` has the larger target-averaged delay RMSE."""
    lo, hi = _by_point(rows, worse), _by_point(rows, better)
    problems = []
    for value in sorted(set(lo) & set(hi)):
        if math.isnan(lo[value][0].gamma_s_db) or lo[value][0].gamma_s_db < min_snr_db - 1e-9:
            continue
        a = float(np.nanmean([r.rmse_delay_s for r in lo[value]]))
        b = float(np.nanmean([r.rmse_delay_s for r in hi[value]]))
        if b > a:
            problems.append(f"{value:g}: {better} {b:.3g}s > {worse} {a:.3g}s")
    return problems


def crb_bound_violations(rows: Sequence[ResultRow], method: str, factor: float = 3.0) -> List[str]:
    """Rows of `method` whose delay or Doppler RMSE exceeds factor * sqrt-CRB."""
    problems = []
    for value, group in sorted(_by_point(rows, method).items()):
        for r in group:
            if not r.rmse_delay_s <= factor * r.crb_delay_s:
                problems.append(f"{value:g}/t{r.target}: delay {r.rmse_delay_s:.3g}s > {factor:g}x{r.crb_delay_s:.3g}s")
            if not r.rmse_doppler_hz <= factor * r.crb_doppler_hz:
                problems.append(
                    f"{value:g}/t{r.target}: Doppler {r.rmse_doppler_hz:.3g}Hz > {factor:g}x{r.crb_doppler_hz:.3g}Hz"
                )
    return problems


def support_leakage(
    grid: ResourceGrid,
    observed: np.ndarray,
    targets: Sequence[TargetParams],
    guard: int = 2,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Delay and Doppler errors of noiseless detection on the channel kept
    only on identifiable cells: the error left after a perfect fill.
    """
    H = sensing_channel(grid, targets).values
    dd = dd_transform(np.where(identifiable_cells(observed), H, 0), grid)
    det = detect_peaks(dd, len(targets), guard=guard)
    match = associate(targets, det, 1.0 / grid.B, 1.0 / grid.burst_duration)
    err_tau = np.array([math.nan if j is None else det.tau_hat[j] - t.tau for t, j in zip(targets, match)])
    err_nu = np.array([math.nan if j is None else det.nu_hat[j] - t.nu for t, j in zip(targets, match)])
    return err_tau, err_nu

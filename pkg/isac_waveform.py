"""
isac_waveform.py

Command-line entry point.

  design      allocator -> mask file
  simulate    mask + scenario -> CMAT dumps of X, H_s and R
  estimate    R, X, mask -> detection CSV
  sweep-gain  CRB gain study
  sweep-rmse  RMSE vs sensing SNR study
  validate    invariant suite on a small instance of the config

Exit status: 0 ok, 1 I/O error, 2 invalid input or infeasible problem,
3 a validate check failed.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from allocator import (
    AllocationSolver,
    InfeasibleAllocationError,
    PlacementError,
    build_problem,
    choose_coarse_grid,
    edge_fraction,
    problem_from_config,
    random_contiguous_scheduler,
    random_scheduler,
    surplus_order,
    uniform_edge_fraction,
)
from channel_sim import (
    ChannelError,
    assemble_waveform,
    gen_symbols,
    read_cmat,
    rx_signal,
    sensing_channel,
    trial_rng,
    write_cmat,
)
from crb_engine import SingularFimError, crb, fim
from estimator import (
    CompletionConfig,
    EstimationError,
    PartialChannel,
    dd_transform,
    inverse_dd_transform,
    pipeline_estimate,
    schatten_complete,
)
from experiment_config import ConfigError, ConfigLoader, ExperimentConfig
from grid_core import (
    AllocationMask,
    GridError,
    TargetParams,
    build_grid,
    read_mask,
    validate_mask,
    write_mask,
)
from harness import (
    STREAM_NOISE,
    STREAM_SCENARIO,
    STREAM_SYMBOLS,
    SweepRunner,
    SweepSpec,
    build_scenario,
    completion_config,
    crb_bound_violations,
    rmse_ordering_violations,
)
from oracles import direct_crb, exhaustive_allocation, fd_fisher
from results import ResultWriter, load_manifest

DEFAULT_GAIN_VALUES = (0.1, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
DEFAULT_SNR_VALUES = (10.0, 15.0, 20.0, 25.0, 30.0, 35.0)
DEFAULT_GAIN_METHODS = ("optimized", "random", "random_contiguous")
DEFAULT_RMSE_METHODS = (
    "optimized+completion",
    "optimized+zerofill",
    "random+linear",
    "random+zerofill",
)

DOMAIN_ERRORS = (
    ConfigError,
    GridError,
    ChannelError,
    EstimationError,
    InfeasibleAllocationError,
    PlacementError,
    SingularFimError,
    ValueError,
)


def setup_logging() -> logging.Logger:
    log_dir = Path("logs")
    log_dir.mkdir(exist_ok=True)

    today_str = datetime.now().strftime("%Y%m%d")
    log_file = log_dir / f"isac_{today_str}.log"

    logger = logging.getLogger("isac_waveform")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()

    formatter = logging.Formatter(
        "%(asctime)s %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    ch = logging.StreamHandler()
    ch.setLevel(logging.INFO)
    ch.setFormatter(formatter)
    logger.addHandler(ch)

    fh = logging.FileHandler(log_file, encoding="utf-8")
    fh.setLevel(logging.INFO)
    fh.setFormatter(formatter)
    logger.addHandler(fh)

    logger.info("[STATUS] Logging initialized. Log file: %s", log_file)
    return logger


# ---------------------------------------------------------------------- #
# Argument parsing
# ---------------------------------------------------------------------- #


def _float_list(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _str_list(text: str) -> Tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isac_waveform",
        description="Sensing-optimal OFDM waveform design, simulation and estimation.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="flat JSON config overlay")
    common.add_argument("--profile", choices=("desk", "paper", "full"), default="desk")
    common.add_argument("--seed", type=int, default=None, help="master seed (u64)")
    common.add_argument("--out", type=Path, default=None)
    common.add_argument("--solver", choices=("bnb", "greedy"), default=None)
    common.add_argument("--estimator", choices=("completion", "linear", "zerofill"), default=None)
    common.add_argument("--trials", type=int, default=None)
    common.add_argument("--workers", type=int, default=None)

    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("design", parents=[common], help="solve the allocation and write a mask file")

    sim = sub.add_parser("simulate", parents=[common], help="simulate the sensing echo")
    sim.add_argument("--mask", type=Path, default=None, help="mask file (default: run design)")

    est = sub.add_parser("estimate", parents=[common], help="estimate delays/Dopplers from dumps")
    est.add_argument("--rx", type=Path, required=True)
    est.add_argument("--tx", type=Path, required=True)
    est.add_argument("--mask", type=Path, required=True)

    gain = sub.add_parser("sweep-gain", parents=[common], help="CRB gain study")
    gain.add_argument("--variable", default="inter_delay_spacing",
                      choices=("inter_delay_spacing", "mu", "weights"))
    gain.add_argument("--values", type=_float_list, default=DEFAULT_GAIN_VALUES)
    gain.add_argument("--methods", type=_str_list, default=DEFAULT_GAIN_METHODS)
    gain.add_argument("--replay", type=Path, default=None, help="manifest to replay")

    rmse = sub.add_parser("sweep-rmse", parents=[common], help="RMSE vs sensing SNR study")
    rmse.add_argument("--variable", default="sensing_snr", choices=("sensing_snr", "mu"))
    rmse.add_argument("--values", type=_float_list, default=DEFAULT_SNR_VALUES)
    rmse.add_argument("--methods", type=_str_list, default=DEFAULT_RMSE_METHODS)
    rmse.add_argument("--snr", type=float, default=30.0, help="fixed gamma_s (dB) for mu sweeps")
    rmse.add_argument("--replay", type=Path, default=None, help="manifest to replay")

    sub.add_parser("validate", parents=[common], help="run the invariant suite")
    return parser


def load_run_config(args: argparse.Namespace, logger: logging.Logger) -> ExperimentConfig:
    overrides: Dict[str, object] = {}
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.solver is not None:
        overrides["solver"] = args.solver
    if args.estimator is not None:
        overrides["estimator"] = args.estimator
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.workers is not None:
        overrides["workers"] = args.workers
    return ConfigLoader(logger).load(args.config, args.profile, overrides)


# ---------------------------------------------------------------------- #
# Commands
# ---------------------------------------------------------------------- #


def _solver(cfg: ExperimentConfig, logger: logging.Logger) -> AllocationSolver:
    return AllocationSolver(
        logger,
        max_nodes=cfg.bnb_max_nodes,
        time_limit=cfg.bnb_time_limit,
        max_swaps=cfg.greedy_max_swaps,
    )


def design_mask(cfg: ExperimentConfig, logger: logging.Logger) -> Tuple[AllocationMask, List[TargetParams]]:
    targets = build_scenario(cfg)
    problem = problem_from_config(cfg, targets)
    report = _solver(cfg, logger).solve(problem, cfg.solver)
    violations = validate_mask(report.mask, cfg.mu, problem.n_min)
    for v in violations:
        logger.warning("[WARN] mask violation %s", v)
    logger.info(
        "[ALLOC] %s objective=%.6g gap=%.3g nodes=%d occupancy=%.4f edge=%.3f (uniform %.3f)",
        report.solver, report.objective, report.gap, report.nodes,
        report.mask.allocated / cfg.grid.L, edge_fraction(report.mask),
        uniform_edge_fraction(cfg.grid),
    )
    return report.mask, targets


def cmd_design(cfg: ExperimentConfig, args, logger: logging.Logger) -> int:
    mask, _ = design_mask(cfg, logger)
    out = args.out or Path("results") / "mask.txt"
    write_mask(mask, out)
    logger.info("[STATUS] Mask written to %s (K=%d, %d resources)", out, mask.K, mask.allocated)
    return 0


def cmd_simulate(cfg: ExperimentConfig, args, logger: logging.Logger) -> int:
    grid = cfg.grid
    if args.mask is not None:
        mask = read_mask(args.mask, grid)
    else:
        mask, _ = design_mask(cfg, logger)
    targets = build_scenario(cfg, trial_rng(cfg.rng_seed, 0, 0, STREAM_SCENARIO))
    symbols = gen_symbols(grid, cfg.constellation, trial_rng(cfg.rng_seed, 0, 0, STREAM_SYMBOLS))
    X = assemble_waveform(math.sqrt(cfg.per_resource_power), symbols, mask)
    H = sensing_channel(grid, targets)
    R = rx_signal(X, H, cfg.noise_w, trial_rng(cfg.rng_seed, 0, 0, STREAM_NOISE))

    out_dir = args.out or Path("results") / "sim"
    write_cmat(X, out_dir / "tx.cmat")
    write_cmat(H.values, out_dir / "channel.cmat")
    write_cmat(R.values, out_dir / "rx.cmat")
    write_mask(mask, out_dir / "mask.txt")
    pd.DataFrame.from_records(
        [dict(target=k, tau_s=t.tau, nu_hz=t.nu, beta_re=t.beta.real, beta_im=t.beta.imag)
         for k, t in enumerate(targets)]
    ).to_csv(out_dir / "targets.csv", index=False, lineterminator="\n", float_format="%.10g")
    logger.info("[STATUS] Simulation dumps written to %s (%d targets)", out_dir, len(targets))
    return 0


def cmd_estimate(cfg: ExperimentConfig, args, logger: logging.Logger) -> int:
    R = read_cmat(args.rx)
    X = read_cmat(args.tx)
    grid = build_grid(R.shape[0], R.shape[1], cfg.delta_f, cfg.cp_duration)
    mask = read_mask(args.mask, grid)
    res = pipeline_estimate(
        R, X, mask, cfg.n_targets, cfg.estimator, completion_config(cfg),
        guard=cfg.guard_bins, refine=cfg.refine_peaks,
    )
    det = res.detection
    if det.shortfall:
        logger.warning("[WARN] [EST] only %d of %d peaks found", det.count, cfg.n_targets)
    if not res.converged:
        logger.warning("[WARN] [EST] completion did not converge")
    out = args.out or Path("results") / "detections.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame.from_records(
        [dict(peak=i, tau_hat_s=det.tau_hat[i], nu_hat_hz=det.nu_hat[i], magnitude=det.magnitudes[i],
              delay_bin=det.bins[i][0], doppler_bin=det.bins[i][1], shortfall=det.shortfall)
         for i in range(det.count)],
        columns=["peak", "tau_hat_s", "nu_hat_hz", "magnitude", "delay_bin", "doppler_bin", "shortfall"],
    ).to_csv(out, index=False, lineterminator="\n", float_format="%.10g")
    logger.info("[EST] %s: %d detections written to %s", cfg.estimator, det.count, out)
    return 0


def _sweep(cfg: ExperimentConfig, args, logger: logging.Logger, study: str) -> int:
    if args.replay is not None:
        cfg, spec, _ = load_manifest(args.replay)
        logger.info("[STATUS] Replaying %s", args.replay)
    else:
        spec = SweepSpec(
            variable=args.variable,
            values=tuple(args.values),
            trials=cfg.trials,
            methods=tuple(args.methods),
            master_seed=cfg.rng_seed,
            fixed_snr_db=getattr(args, "snr", 30.0),
        )
    runner = SweepRunner(logger, cfg)
    rows = runner.run_gain_sweep(spec) if study == "gain" else runner.run_rmse_sweep(spec)
    out = args.out or Path("results") / f"{study}.csv"
    ResultWriter(logger).emit(rows, out, cfg, spec)
    logger.info("[SUMMARY] %s sweep: %d rows", study, len(rows))
    return 0


def cmd_sweep_gain(cfg: ExperimentConfig, args, logger: logging.Logger) -> int:
    return _sweep(cfg, args, logger, "gain")


def cmd_sweep_rmse(cfg: ExperimentConfig, args, logger: logging.Logger) -> int:
    return _sweep(cfg, args, logger, "rmse")


# ---------------------------------------------------------------------- #
# validate
# ---------------------------------------------------------------------- #


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def _small_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(
        cfg, M=16, N=16, cp_duration=0.9e-6, max_coarse_cells=16, trials=3, solver="bnb", bnb_max_nodes=500,
    )


def check_fim_oracle(cfg: ExperimentConfig) -> Tuple[bool, str]:
    small = _small_config(cfg)
    targets = build_scenario(small, trial_rng(cfg.rng_seed, 90))
    union = trial_rng(cfg.rng_seed, 91).random(small.grid.shape) < 0.5
    sigma2 = small.per_resource_power
    blocks = fim(small.grid, union, targets, sigma2, small.noise_w)
    ref = fd_fisher(small.grid, union, targets, sigma2, small.noise_w)
    err = _rel_err(blocks.assembled(), ref)
    return err < 1e-4, f"max rel err {err:.2e}"


def check_crb_inversion(cfg: ExperimentConfig) -> Tuple[bool, str]:
    small = _small_config(cfg)
    targets = build_scenario(small, trial_rng(cfg.rng_seed, 92))
    blocks = fim(small.grid, np.ones(small.grid.shape, bool), targets, small.per_resource_power, small.noise_w)
    C = crb(blocks)
    c_tau, c_nu = direct_crb(blocks)
    err = max(_rel_err(C.C_tau, c_tau), _rel_err(C.C_nu, c_nu))
    return err < 1e-8, f"max rel err {err:.2e}"


def check_bnb_exhaustive(cfg: ExperimentConfig, logger: logging.Logger) -> Tuple[bool, str]:
    small = _small_config(cfg)
    worst = 0.0
    for i in range(3):
        targets = build_scenario(small, trial_rng(cfg.rng_seed, 93, i))
        problem = build_problem(
            small.grid, targets, eps_tau=small.eps_tau, eps_nu=small.eps_nu, mu=0.5,
            se_threshold=0.0, sigma2=small.per_resource_power, noise_w=small.noise_w,
            noise_z=small.noise_z, coarse=choose_coarse_grid(small.grid, 16), n_min=(16, 16),
        )
        report = AllocationSolver(logger, max_nodes=5000, time_limit=60.0).branch_and_bound(problem)
        best, _ = exhaustive_allocation(problem)
        value = problem.objective_of(report.coarse_union.reshape(-1, order="F"))
        worst = max(worst, abs(value - best) / best)
    return worst < 1e-8, f"worst rel diff {worst:.2e}"


def check_mask_compliance(cfg: ExperimentConfig, logger: logging.Logger) -> Tuple[bool, str]:
    small = replace(cfg, M=40, N=40, cp_duration=0.9e-6, max_coarse_cells=64)
    targets = build_scenario(small)
    problem = problem_from_config(small, targets)
    solver = _solver(small, logger)
    priority = surplus_order(problem.path_gains)
    masks = {
        "greedy": solver.greedy(problem).mask,
        "random": random_scheduler(small.grid, small.n_targets, small.mu, problem.n_min, 1, priority),
        "random_contiguous": random_contiguous_scheduler(
            small.grid, small.n_targets, small.mu, small.block_size, 2, problem.n_min, priority,
        ),
    }
    bad = {name: [str(v) for v in validate_mask(m, small.mu, problem.n_min)] for name, m in masks.items()}
    bad = {k: v for k, v in bad.items() if v}
    return not bad, "all masks valid" if not bad else f"violations {bad}"


def check_completion(cfg: ExperimentConfig) -> Tuple[bool, str]:
    rng = trial_rng(cfg.rng_seed, 95)
    u = np.exp(2j * np.pi * rng.random(32))
    v = np.exp(2j * np.pi * rng.random(32))
    H = np.outer(u, v)
    observed = rng.random(H.shape) < 0.5
    partial = PartialChannel(np.where(observed, H, 0), observed)
    res = schatten_complete(partial, CompletionConfig(p=0.5, tol=1e-8, max_iters=500))
    err = float(np.linalg.norm(res.values - H) / np.linalg.norm(H))
    return err < 1e-3, f"rank-1 recovery rel err {err:.2e}"


def check_dd_roundtrip(cfg: ExperimentConfig) -> Tuple[bool, str]:
    rng = trial_rng(cfg.rng_seed, 96)
    H = rng.standard_normal((24, 16)) + 1j * rng.standard_normal((24, 16))
    back = inverse_dd_transform(dd_transform(H))
    err = float(np.linalg.norm(back - H) / np.linalg.norm(H))
    return err < 1e-12, f"round-trip rel err {err:.2e}"


def _recovery_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(cfg, M=64, N=64, cp_duration=0.9e-6, max_coarse_cells=400)


def check_optimized_recovery(cfg: ExperimentConfig, logger: logging.Logger) -> Tuple[bool, str]:
    """Noiseless completion on an optimized 64x64 mask: fillable cells recovered, the rest stays empty."""
    small = _recovery_config(cfg)
    knobs = replace(completion_config(small), decay=0.95, max_iters=3000, tol=1e-9)
    errors = SweepRunner(logger, small).recovery_trial(0, knobs)
    ok = errors.fillable < 1e-2 and errors.full >= errors.floor * (1.0 - 1e-9)
    return ok, (
        f"fillable rel err {errors.fillable:.2e} over {errors.fillable_cells} cells; "
        f"full {errors.full:.3g} >= unidentifiable floor {errors.floor:.3g}"
    )


def check_completion_vs_zero_fill(cfg: ExperimentConfig, logger: logging.Logger) -> Tuple[bool, str]:
    """At 30 dB zero-fill misses 3x sqrt-CRB and completion is no worse than zero-fill."""
    small = _recovery_config(cfg)
    spec = SweepSpec("sensing_snr", (30.0,), 10, ("optimized+zerofill", "optimized+completion"), cfg.rng_seed)
    rows = SweepRunner(logger, small, workers=1).run_rmse_sweep(spec)
    order = rmse_ordering_violations(rows)
    zero_fill_misses = crb_bound_violations(rows, "optimized+zerofill")
    ratios = [SweepRunner(logger, small).sidelobe_trial(seed, 20.0) for seed in range(3)]
    psr_c, psr_z = (float(np.mean(v)) for v in zip(*ratios))
    ok = not order and bool(zero_fill_misses) and psr_c > psr_z
    return ok, (
        f"ordering violations {order or 'none'}; zero-fill bound misses {len(zero_fill_misses)}; "
        f"psr completion {psr_c:.3g} vs zero-fill {psr_z:.3g}"
    )


def cmd_validate(cfg: ExperimentConfig, args, logger: logging.Logger) -> int:
    checks: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
        ("fim_vs_finite_difference", lambda: check_fim_oracle(cfg)),
        ("crb_vs_direct_inverse", lambda: check_crb_inversion(cfg)),
        ("bnb_vs_exhaustive", lambda: check_bnb_exhaustive(cfg, logger)),
        ("mask_compliance", lambda: check_mask_compliance(cfg, logger)),
        ("completion_rank1", lambda: check_completion(cfg)),
        ("dd_roundtrip", lambda: check_dd_roundtrip(cfg)),
        ("optimized_mask_recovery", lambda: check_optimized_recovery(cfg, logger)),
        ("completion_vs_zero_fill", lambda: check_completion_vs_zero_fill(cfg, logger)),
    ]
    failed = 0
    for name, fn in checks:
        ok, detail = fn()
        failed += not ok
        logger.info("[VALIDATE] %-26s %s  %s", name, "PASS" if ok else "FAIL", detail)
    logger.info("[SUMMARY] %d/%d checks passed", len(checks) - failed, len(checks))
    return 0 if failed == 0 else 3


COMMANDS: Dict[str, Callable] = {
    "design": cmd_design,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "sweep-gain": cmd_sweep_gain,
    "sweep-rmse": cmd_sweep_rmse,
    "validate": cmd_validate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger = setup_logging()
    try:
        cfg = load_run_config(args, logger)
        return COMMANDS[args.command](cfg, args, logger)
    except DOMAIN_ERRORS as exc:
        logger.exception("[STATUS] %s failed: %s", args.command, exc)
        return 2
    except OSError as exc:
        logger.error("[STATUS] I/O error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

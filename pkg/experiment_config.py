"""
experiment_config.py

ExperimentConfig: the single source of truth for a run.

- Defaults are the full-scale scenario
  (f0 = 30 GHz, B = 1 GHz, P_tot = 43 dBm, M = N = 1000, delta_f = 1 MHz,
  T = 1 us, mu = 0.25, R = 50 m, N_b = 10, SE threshold 4 bits/s/Hz).
- Named profiles: "paper" (1000 x 1000, alias "full") and "desk" (100 x 100 grid).
- A config file is a flat JSON object whose keys are ExperimentConfig field
  names. Unknown keys, wrong types and violated invariants are hard errors.

Noise powers are explicit fields and the RMSE study sweeps sensing SNR instead of fixing them.
"""

from __future__ import annotations

import json
import logging
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from grid_core import ResourceGrid, build_grid, per_resource_power


class ConfigError(ValueError):
    """Unknown key, wrong type, or violated config invariant."""


DOPPLER_NORMS = ("burst", "symbol")
SOLVERS = ("bnb", "greedy")
ESTIMATORS = ("completion", "linear", "zerofill")


@dataclass(frozen=True)
class ExperimentConfig:
    # --- grid ---
    M: int = 1000
    N: int = 1000
    delta_f: float = 1.0e6          # Hz
    cp_duration: float = 0.4e-6     # s

    # --- radio ---
    f0: float = 30.0e9              # Hz
    p_tot_dbm: float = 43.0
    sigma2: Optional[float] = None  # W per resource; derived from p_tot when None
    noise_w: float = 4.0e-15        # W, sensing receiver noise per resource
    noise_z: float = 2.0e-24        # W, UE receiver noise per resource

    # --- design problem ---
    mu: float = 0.25
    se_threshold: float = 4.0       # bits/s/Hz
    eps_tau: float = 0.5
    eps_nu: float = 0.5
    doppler_norm: str = "burst"
    block_size: int = 10

    # --- scenario ---
    n_targets: int = 2
    target_range: float = 50.0      # m
    target_velocity: float = 10.0   # m/s
    delay_spacing: float = 1.0      # |tau2 - tau1| in delay resolutions
    doppler_spacing: float = 0.0    # |nu2 - nu1| in Doppler resolutions
    reflectivity: float = 1.0
    n_paths: int = 3
    on_grid: bool = False
    constellation: str = "QPSK"

    # --- allocator ---
    solver: str = "bnb"
    coarse_group_f: int = 0         # 0 = choose automatically
    coarse_group_t: int = 0
    max_coarse_cells: int = 400
    bnb_max_nodes: int = 2000
    bnb_time_limit: float = 120.0   # s
    greedy_max_swaps: int = 200

    # --- estimator ---
    estimator: str = "completion"
    schatten_p: float = 0.5
    completion_lambda_ratio: float = 0.5
    completion_decay: float = 0.9
    completion_lambda_floor: float = 1.0e-4
    completion_tol: float = 1.0e-4
    completion_max_iters: int = 300
    guard_bins: int = 2
    refine_peaks: bool = True

    # --- harness ---
    trials: int = 20
    workers: int = 1
    solver_seed: int = 0
    rng_seed: int = 2024
    fim_cond_cap: float = 1.0e14

    # ---------- derived ---------- #

    @property
    def grid(self) -> ResourceGrid:
        return build_grid(self.M, self.N, self.delta_f, self.cp_duration)

    @property
    def per_resource_power(self) -> float:
        if self.sigma2 is not None:
            return float(self.sigma2)
        return per_resource_power(self.p_tot_dbm, self.mu, self.M, self.N)

    @property
    def weights(self) -> Tuple[float, float]:
        return (self.eps_tau, self.eps_nu)

    def validate(self) -> None:
        """Raise ConfigError on the first violated invariant."""
        problems = config_problems(self)
        if problems:
            raise ConfigError("; ".join(problems))


def config_problems(cfg: ExperimentConfig) -> list:
    problems = []
    if cfg.M < 1 or cfg.N < 1:
        problems.append("M and N must be >= 1")
    if not cfg.delta_f > 0:
        problems.append("delta_f must be > 0")
    if not 0.0 < cfg.mu <= 1.0:
        problems.append(f"mu={cfg.mu} outside (0, 1]")
    if not 0.0 < cfg.schatten_p <= 1.0:
        problems.append(f"schatten_p={cfg.schatten_p} outside (0, 1]")
    if not (0.0 <= cfg.eps_tau <= 1.0 and 0.0 <= cfg.eps_nu <= 1.0):
        problems.append("eps_tau and eps_nu must lie in [0, 1]")
    if cfg.eps_tau + cfg.eps_nu <= 0:
        problems.append("eps_tau + eps_nu must be > 0")
    if cfg.se_threshold < 0:
        problems.append("se_threshold must be >= 0")
    if cfg.noise_w < 0 or cfg.noise_z < 0:
        problems.append("noise powers must be >= 0")
    if cfg.sigma2 is not None and cfg.sigma2 <= 0:
        problems.append("sigma2 override must be > 0")
    if cfg.block_size < 1:
        problems.append("block_size must be >= 1")
    if cfg.n_targets < 1:
        problems.append("n_targets must be >= 1")
    if cfg.n_paths < 1:
        problems.append("n_paths must be >= 1")
    if cfg.trials < 1:
        problems.append("trials must be >= 1")
    if cfg.workers < 1:
        problems.append("workers must be >= 1")
    if cfg.doppler_norm not in DOPPLER_NORMS:
        problems.append(f"doppler_norm must be one of {DOPPLER_NORMS}")
    if cfg.solver not in SOLVERS:
        problems.append(f"solver must be one of {SOLVERS}")
    if cfg.estimator not in ESTIMATORS:
        problems.append(f"estimator must be one of {ESTIMATORS}")
    if not 0.0 < cfg.completion_decay < 1.0:
        problems.append("completion_decay must lie in (0, 1)")
    if cfg.completion_tol <= 0:
        problems.append("completion_tol must be > 0")
    if not 0.0 <= cfg.completion_lambda_floor < 1.0:
        problems.append("completion_lambda_floor must lie in [0, 1)")
    return problems


# ---------------------------------------------------------------------- #
# Profiles
# ---------------------------------------------------------------------- #

PAPER_PROFILE = ExperimentConfig()

DESK_PROFILE = replace(
    PAPER_PROFILE,
    M=100,
    N=100,
    solver="greedy",
    bnb_max_nodes=200,
    trials=20,
)

PROFILES: Dict[str, ExperimentConfig] = {
    "paper": PAPER_PROFILE,
    "full": PAPER_PROFILE,
    "desk": DESK_PROFILE,
}


# ---------------------------------------------------------------------- #
# Flat key/value documents
# ---------------------------------------------------------------------- #


def _field_types() -> Dict[str, Any]:
    return typing.get_type_hints(ExperimentConfig)


def _coerce(key: str, value: Any, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(key, value, args[0])
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {hint!r}")


def config_from_dict(data: Dict[str, Any], base: ExperimentConfig = PAPER_PROFILE) -> ExperimentConfig:
    """Overlay a flat mapping onto base; unknown keys are an error."""
    hints = _field_types()
    unknown = sorted(set(data) - set(hints))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    overrides = {key: _coerce(key, value, hints[key]) for key, value in data.items()}
    cfg = replace(base, **overrides)
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return asdict(cfg)


def config_field_names() -> Tuple[str, ...]:
    return tuple(f.name for f in fields(ExperimentConfig))


class ConfigLoader:
    """
    Loads a profile and overlays an optional flat JSON config file.

    Logs with [CONFIG] tags; raises ConfigError on any bad input.
    """

    def __init__(self, logger: logging.Logger) -> None:
        self.logger = logger

    def load(
        self,
        path: Optional[Path] = None,
        profile: str = "paper",
        overrides: Optional[Dict[str, Any]] = None,
    ) -> ExperimentConfig:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        cfg = PROFILES[profile]
        self.logger.info("[CONFIG] Base profile: %s", profile)

        if path is not None:
            path = Path(path)
            with path.open("r", encoding="utf-8") as f:
                data = json.load(f)
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: config root must be a JSON object")
            cfg = config_from_dict(data, base=cfg)
            self.logger.info("[CONFIG] Applied %d keys from %s", len(data), path)

        if overrides:
            cfg = config_from_dict(overrides, base=cfg)
            self.logger.info("[CONFIG] Applied command-line overrides: %s", sorted(overrides))

        cfg.validate()
        self.logger.info(
            "[CONFIG] Grid %dx%d delta_f=%.4g Hz B=%.4g Hz mu=%.2f eps=(%.2f, %.2f) trials=%d",
            cfg.M, cfg.N, cfg.delta_f, cfg.grid.B, cfg.mu, cfg.eps_tau, cfg.eps_nu, cfg.trials,
        )
        return cfg


def load_config(path: Optional[Path] = None, profile: str = "paper") -> ExperimentConfig:
    return ConfigLoader(logging.getLogger("isac_waveform")).load(path, profile)


def save_config(cfg: ExperimentConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
    return path

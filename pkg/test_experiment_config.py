"""
Config defaults, profiles and the flat JSON loader.

Covers:
- ExperimentConfig() defaults equal the full-scale scenario table.
- "paper", "full" and "desk" profiles; the CLI accepts --profile paper.
- Unknown keys, wrong types and invariant violations raise ConfigError.

Run from project root:

    python -m pytest test_experiment_config.py
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import pytest

import isac_waveform
from experiment_config import (
    DESK_PROFILE,
    PAPER_PROFILE,
    PROFILES,
    ConfigError,
    ConfigLoader,
    ExperimentConfig,
    config_from_dict,
)
from harness import completion_config

LOGGER = logging.getLogger("test_experiment_config")


def test_defaults_match_full_scale_table() -> None:
    cfg = ExperimentConfig()
    assert cfg.f0 == 30.0e9
    assert (cfg.M, cfg.N) == (1000, 1000)
    assert cfg.delta_f == 1.0e6
    assert cfg.grid.B == pytest.approx(1.0e9)
    assert cfg.grid.T == pytest.approx(1.0e-6)
    assert cfg.p_tot_dbm == 43.0
    assert cfg.mu == 0.25
    assert cfg.target_range == 50.0
    assert cfg.block_size == 10
    assert cfg.se_threshold == 4.0
    assert cfg.n_targets == 2
    assert cfg.weights == (0.5, 0.5)


def test_profiles() -> None:
    assert PROFILES["paper"] is PAPER_PROFILE
    assert PROFILES["full"] is PAPER_PROFILE
    assert PAPER_PROFILE == ExperimentConfig()
    assert (DESK_PROFILE.M, DESK_PROFILE.N, DESK_PROFILE.trials) == (100, 100, 20)
    assert DESK_PROFILE.delta_f == 1.0e6 and DESK_PROFILE.mu == 0.25

    loader = ConfigLoader(LOGGER)
    assert loader.load(profile="paper") == PAPER_PROFILE
    assert loader.load(profile="full") == PAPER_PROFILE
    assert loader.load(profile="desk") == DESK_PROFILE
    with pytest.raises(ConfigError):
        loader.load(profile="huge")


def test_cli_accepts_paper_profile() -> None:
    args = isac_waveform.build_parser().parse_args(["validate", "--profile", "paper"])
    assert args.profile == "paper"
    assert isac_waveform.load_run_config(args, LOGGER) == PAPER_PROFILE
    with pytest.raises(SystemExit):
        isac_waveform.build_parser().parse_args(["validate", "--profile", "huge"])


def test_flat_overlay_and_errors(tmp_path: Path) -> None:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"M": 64, "mu": 0.3, "on_grid": True}), encoding="utf-8")
    cfg = ConfigLoader(LOGGER).load(path, profile="desk")
    assert (cfg.M, cfg.N, cfg.mu, cfg.on_grid) == (64, 100, 0.3, True)

    with pytest.raises(ConfigError, match="unknown config keys"):
        config_from_dict({"bandwidth": 1.0})
    with pytest.raises(ConfigError, match="integer"):
        config_from_dict({"M": 10.5})
    with pytest.raises(ConfigError, match="mu"):
        config_from_dict({"mu": 0.0})
    with pytest.raises(ConfigError):
        config_from_dict({"completion_lambda_floor": 1.0})

    path.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError):
        ConfigLoader(LOGGER).load(path)


def test_completion_knobs_reach_the_estimator() -> None:
    cfg = config_from_dict({"completion_lambda_floor": 0.01, "completion_max_iters": 40}, base=DESK_PROFILE)
    knobs = completion_config(cfg)
    assert knobs.lambda_floor == 0.01 and knobs.max_iters == 40
    assert knobs.lambda_ratio == cfg.completion_lambda_ratio and knobs.p == cfg.schatten_p


def main() -> None:
    raise SystemExit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()

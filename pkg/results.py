"""
results.py

CSV emission and the run manifest.

CSV: UTF-8, comma separated, "\n" line endings, floats as %.10g, columns in
RESULT_COLUMNS order. Wall-clock runtimes live in the manifest only, so
identical runs produce identical CSV bytes.

Manifest (<csv>.manifest.json), written atomically:
  {
    "version": "...",            # git describe, else package version
    "created": "YYYY-MM-DD HH:MM:SS",
    "study": "gain" | "rmse",
    "config": {...},             # every ExperimentConfig field
    "sweep": {...},              # SweepSpec
    "master_seed": int,
    "csv": {"path": ..., "rows": int, "sha256": ...},
    "runtime_s": [...]           # per row, CSV order
  }
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import subprocess
import tempfile
from dataclasses import asdict
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from experiment_config import ExperimentConfig, config_from_dict, config_to_dict
from harness import ResultRow, SweepSpec

PACKAGE_VERSION = "0.1.0"

RESULT_COLUMNS = (
    "study",
    "method",
    "allocation",
    "estimator",
    "sweep_variable",
    "sweep_value",
    "target",
    "rmse_delay_s",
    "rmse_doppler_hz",
    "crb_delay_s",
    "crb_doppler_hz",
    "crb_gain",
    "detection_failure_rate",
    "gamma_s_db",
    "g_s",
    "se_min",
    "objective",
    "trials",
    "master_seed",
)
FLOAT_FORMAT = "%.10g"


def version_string() -> str:
    """`git describe --always --dirty` when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return f"v{PACKAGE_VERSION}"
    tag = out.stdout.strip()
    return f"v{PACKAGE_VERSION}-{tag}" if out.returncode == 0 and tag else f"v{PACKAGE_VERSION}"


def rows_frame(rows: Sequence[ResultRow]) -> pd.DataFrame:
    records = [{k: v for k, v in asdict(r).items() if k in RESULT_COLUMNS} for r in rows]
    return pd.DataFrame.from_records(records, columns=list(RESULT_COLUMNS))


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(csv_path: Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.name + ".manifest.json")


def _atomic_json(path: Path, payload: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        os.replace(tmp_path, str(path))
    except Exception:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise


class ResultWriter:
    """Writes result CSVs and their manifests; I/O errors propagate unchanged."""

    def __init__(self, logger: logging.Logger) -> None:
        self.logger = logger

    def write_csv(self, rows: Sequence[ResultRow], path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows_frame(rows).to_csv(
            path,
            index=False,
            lineterminator="\n",
            float_format=FLOAT_FORMAT,
            encoding="utf-8",
        )
        self.logger.info("[CSV] Wrote %d rows to %s", len(rows), path)
        return path

    def write_manifest(
        self,
        csv_path: Path,
        rows: Sequence[ResultRow],
        cfg: Optional[ExperimentConfig] = None,
        spec: Optional[SweepSpec] = None,
    ) -> Path:
        csv_path = Path(csv_path)
        payload: Dict[str, Any] = {
            "version": version_string(),
            "created": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            "study": rows[0].study if rows else None,
            "config": config_to_dict(cfg) if cfg is not None else None,
            "sweep": spec.to_dict() if spec is not None else None,
            "master_seed": spec.master_seed if spec is not None else None,
            "csv": {
                "path": csv_path.name,
                "rows": len(rows),
                "sha256": file_sha256(csv_path),
            },
            "runtime_s": [round(r.runtime_s, 6) for r in rows],
        }
        path = manifest_path(csv_path)
        _atomic_json(path, payload)
        self.logger.info("[MANIFEST] %s sha256=%s", path, payload["csv"]["sha256"][:16])
        return path

    def emit(
        self,
        rows: Sequence[ResultRow],
        path: Path,
        cfg: Optional[ExperimentConfig] = None,
        spec: Optional[SweepSpec] = None,
    ) -> Tuple[Path, Path]:
        csv_path = self.write_csv(rows, path)
        return csv_path, self.write_manifest(csv_path, rows, cfg, spec)


def emit_results(
    rows: Sequence[ResultRow],
    path: Path,
    cfg: Optional[ExperimentConfig] = None,
    spec: Optional[SweepSpec] = None,
    logger: Optional[logging.Logger] = None,
) -> Tuple[Path, Path]:
    return ResultWriter(logger or logging.getLogger("isac_waveform")).emit(rows, path, cfg, spec)


def load_manifest(path: Path) -> Tuple[ExperimentConfig, SweepSpec, Dict[str, Any]]:
    """Config and sweep needed to replay a run."""
    with Path(path).open("r", encoding="utf-8") as f:
        payload = json.load(f)
    if not payload.get("config") or not payload.get("sweep"):
        raise ValueError(f"{path}: manifest has no config/sweep to replay")
    cfg = config_from_dict(payload["config"])
    spec = SweepSpec.from_dict(payload["sweep"])
    return cfg, spec, payload


def read_results(path: Path) -> List[Dict[str, Any]]:
    return pd.read_csv(path).to_dict(orient="records")

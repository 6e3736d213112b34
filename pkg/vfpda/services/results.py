"""Run records on disk: JSON record, per-cycle CSV, cached truth and comparison tables."""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ..exceptions import ConfigError
from ..models import RunRecord
from .harness import TruthRun

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def record_frame(record: RunRecord) -> pd.DataFrame:
    """Per-cycle table; one ``crmse_cum`` column per scaling (suffixed unless named 'default')."""
    columns: Dict[str, list] = {
        "cycle": [],
        "time": [],
        "rmse_cum": [],
    }
    names = list(record.config.metrics.crmse)
    crmse_columns = {
        name: "crmse_cum" if name == "default" else f"crmse_cum_{name}" for name in names
    }
    for column in crmse_columns.values():
        columns[column] = []
    columns.update({"max_abs_g": [], "flow_steps": [], "wall_ms": []})

    for row in record.rows:
        columns["cycle"].append(row.cycle)
        columns["time"].append(row.time)
        columns["rmse_cum"].append(row.rmse)
        for name, column in crmse_columns.items():
            columns[column].append(row.crmse.get(name))
        columns["max_abs_g"].append(row.max_abs_g)
        columns["flow_steps"].append(row.flow_steps)
        columns["wall_ms"].append(row.wall_ms)
    return pd.DataFrame(columns)


def write_record(record: RunRecord, directory: PathLike, write_csv: bool = True) -> Path:
    """Write ``<name>.json`` (and ``<name>.csv``) into ``directory``; returns the JSON path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{record.config.name}.json"
    json_path.write_text(record.model_dump_json(indent=2), encoding="utf-8")
    if write_csv:
        record_frame(record).to_csv(out / f"{record.config.name}.csv", index=False)
    logger.info(f"Wrote run record {record.run_id} to {json_path}")
    return json_path


def load_record(path: PathLike) -> RunRecord:
    try:
        return RunRecord.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        raise ConfigError(f"cannot read run record: {e}", str(path)) from e


def compare_records(records: Iterable[RunRecord]) -> pd.DataFrame:
    """One row per record with its final cumulative RMSE and CRMSE values."""
    rows: List[Dict[str, object]] = []
    for record in records:
        row: Dict[str, object] = {
            "name": record.config.name,
            "model": record.config.model.kind,
            "variant": record.config.filter.variant,
            "cycles": len(record.rows),
            "rmse": record.final_rmse,
        }
        for name, value in record.final_crmse.items():
            row["crmse" if name == "default" else f"crmse_{name}"] = value
        row["failed_at"] = record.failure.cycle if record.failure else None
        rows.append(row)
    return pd.DataFrame(rows)


def save_truth(truth: TruthRun, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        times=truth.times,
        truth=truth.truth,
        observations=truth.observations,
        initial_truth=truth.initial_truth,
        initial_ensemble=truth.initial_ensemble,
    )
    logger.info(f"Saved {truth.cycles} truth cycles to {path}")
    return path


def load_truth(path: PathLike) -> TruthRun:
    try:
        with np.load(path) as data:
            return TruthRun(
                times=data["times"],
                truth=data["truth"],
                observations=data["observations"],
                initial_truth=data["initial_truth"],
                initial_ensemble=data["initial_ensemble"],
            )
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"cannot read cached truth: {e}", str(path)) from e

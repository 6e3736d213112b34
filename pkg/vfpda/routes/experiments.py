"""Experiment API routes."""
import logging

from fastapi import APIRouter, HTTPException

from ..exceptions import AssimilationError, ConfigError
from ..models import ExperimentConfig, ExperimentSummary, RunRecord
from ..services.harness import run_twin_experiment
from ..state import app_state

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments")


@router.post("", response_model=ExperimentSummary)
def create_experiment(cfg: ExperimentConfig):
    """
    Run a twin experiment and keep its record in memory.

    A failing analysis does not fail the request: the summary reports the
    cycle at which the record was truncated.
    """
    try:
        record = run_twin_experiment(cfg)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=e.to_record())
    except AssimilationError as e:
        logger.error(f"Experiment {cfg.name} failed before its first cycle: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail=e.to_record())

    app_state.records[record.run_id] = record
    logger.info(f"Stored run record {record.run_id}")
    return ExperimentSummary.from_record(record)


@router.get("/{run_id}", response_model=RunRecord)
def get_experiment(run_id: str):
    """Fetch a stored run record."""
    record = app_state.records.get(run_id)
    if record is None:
        raise HTTPException(status_code=404, detail=f"No run record with id {run_id!r}")
    return record

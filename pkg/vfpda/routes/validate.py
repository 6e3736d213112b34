"""Model self-check route."""
import logging

from fastapi import APIRouter, HTTPException

from ..dynamics import MODEL_IDS
from ..models import ValidationReport
from ..services.validation import validate_model

logger = logging.getLogger(__name__)

router = APIRouter()


@router.get("/validate/{model}", response_model=ValidationReport)
def validate(model: str, grid_scale: int = 1, seed: int = 0):
    """Run the Jacobian and invariant self-checks of a model."""
    if model not in MODEL_IDS:
        raise HTTPException(
            status_code=404, detail=f"Unknown model {model!r}; expected one of {', '.join(MODEL_IDS)}"
        )
    if grid_scale < 1:
        raise HTTPException(status_code=422, detail="grid_scale must be at least 1")
    try:
        return validate_model(model, seed=seed, grid_scale=grid_scale)
    except Exception as e:
        logger.error(f"Self-checks for {model} failed to run: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail=str(e))

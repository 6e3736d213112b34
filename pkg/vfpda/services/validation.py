"""Model self-checks: constraint Jacobians, conserved quantities and integrator structure."""
import logging

import numpy as np

from ..dynamics import default_model
from ..models import CheckItem, ValidationReport

logger = logging.getLogger(__name__)


def validate_model(model_id: str, seed: int = 0, grid_scale: int = 1) -> ValidationReport:
    """Run the self-checks of a model with default parameters."""
    model = default_model(model_id, grid_scale)
    logger.info(f"Running self-checks for {model!r}")
    results = model.self_checks(np.random.default_rng(seed))
    report = ValidationReport(
        model=model_id,
        checks=[CheckItem(**result.to_dict()) for result in results],
    )
    for check in report.checks:
        level = logging.INFO if check.passed else logging.WARNING
        logger.log(level, f"{model_id}: {check.name} = {check.value:.3e} (threshold {check.threshold:.0e})")
    return report

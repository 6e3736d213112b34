"""Main FastAPI application entry point."""
import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI

from . import __version__
from .config import settings
from .routes.experiments import router as experiments_router
from .routes.health import router as health_router
from .routes.validate import router as validate_router
from .state import app_state

# --- Initial Setup ---
logging.basicConfig(
    level=settings.logging_level, format="%(asctime)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Lifespan context manager for startup and shutdown events."""
    logger.info(
        f"Starting assimilation API (results_dir={settings.results_dir}, n_jobs={settings.n_jobs})"
    )
    yield
    logger.info(f"Shutting down; dropping {len(app_state.records)} in-memory run record(s)")


# --- FastAPI App ---
app = FastAPI(
    title="Constrained Ensemble Data Assimilation API",
    description="Run twin experiments with ETKF variants and variational Fokker-Planck particle flows.",
    version=__version__,
    lifespan=lifespan,
)

# Register routes
app.include_router(health_router)
app.include_router(experiments_router)
app.include_router(validate_router)

"""Application state management."""
from typing import Dict

from .models import RunRecord


class AppState:
    """Application state holding the run records produced by this process."""

    def __init__(self):
        self.records: Dict[str, RunRecord] = {}


# Global application state instance
app_state = AppState()

"""Configuration management for the assimilation toolkit."""
import logging
import os
from typing import Dict, Union

from dotenv import load_dotenv

load_dotenv()

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def validate_env_vars() -> Dict[str, Union[str, int]]:
    """Validate and return the process-level environment variables."""
    env_vars: Dict[str, Union[str, int]] = {}
    invalid_vars = []

    log_level = os.getenv("VFPDA_LOG_LEVEL", "INFO").upper()
    if log_level not in _LOG_LEVELS:
        invalid_vars.append(f"VFPDA_LOG_LEVEL={log_level!r}")
    env_vars["VFPDA_LOG_LEVEL"] = log_level

    env_vars["VFPDA_RESULTS_DIR"] = os.getenv("VFPDA_RESULTS_DIR", "results")

    for var, default, minimum in (("VFPDA_N_JOBS", "1", -1), ("VFPDA_DENSE_LIMIT", "64", 1)):
        raw = os.getenv(var, default)
        try:
            value = int(raw)
        except ValueError:
            invalid_vars.append(f"{var}={raw!r}")
            continue
        if value < minimum or value == 0:
            invalid_vars.append(f"{var}={raw!r}")
            continue
        env_vars[var] = value

    if invalid_vars:
        raise ValueError(
            f"Invalid environment variables: {', '.join(invalid_vars)}"
        )

    return env_vars


class Settings:
    """Process settings loaded from environment variables."""

    def __init__(self):
        """Initialize settings by validating and loading environment variables."""
        env_vars = validate_env_vars()

        # Logging
        self.log_level = str(env_vars["VFPDA_LOG_LEVEL"])

        # Output
        self.results_dir = str(env_vars["VFPDA_RESULTS_DIR"])

        # Numerics
        self.n_jobs = int(env_vars["VFPDA_N_JOBS"])
        self.dense_limit = int(env_vars["VFPDA_DENSE_LIMIT"])

    @property
    def logging_level(self) -> int:
        return getattr(logging, self.log_level)


# Global settings instance
settings = Settings()

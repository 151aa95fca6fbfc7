"""
Configuration management with validation
"""

import math
import os
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Load environment variables
load_dotenv()

# Below this noise level exp(-gap/eta) leaves double range for O(10) cost gaps
ETA_FLOOR = 0.005


class Settings(BaseModel):
    """
    Process-wide settings read from the environment
    """

    model_config = ConfigDict(validate_assignment=True)

    JOBS: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    LOG_LEVEL: str = Field(default="INFO", pattern="^(DEBUG|INFO|WARNING|ERROR|CRITICAL)$")
    LOG_FILE: Optional[str] = Field(default=None, description="Optional log file path")
    METRICS_FILE: Optional[str] = Field(default=None, description="Prometheus textfile output")
    SENTRY_DSN: Optional[str] = Field(default=None, description="Sentry DSN for error tracking")
    ENVIRONMENT: str = Field(default="development", pattern="^(development|production)$")

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_log_level(cls, v):
        """Accept lower-case level names"""
        if isinstance(v, str):
            return v.strip().upper()
        return v

    @field_validator("JOBS", mode="before")
    @classmethod
    def parse_jobs(cls, v):
        """Parse HETROUTE_JOBS, empty means one job per core"""
        if v is None or (isinstance(v, str) and not v.strip()):
            return os.cpu_count() or 1
        return v

    @classmethod
    def from_env(cls) -> "Settings":
        """
        Create settings from environment variables

        Returns:
            Settings instance
        """
        values = {
            "JOBS": os.getenv("HETROUTE_JOBS"),
            "LOG_LEVEL": os.getenv("HETROUTE_LOG_LEVEL", "INFO"),
            "LOG_FILE": os.getenv("HETROUTE_LOG_FILE") or None,
            "METRICS_FILE": os.getenv("HETROUTE_METRICS_FILE") or None,
            "SENTRY_DSN": os.getenv("SENTRY_DSN") or None,
            "ENVIRONMENT": os.getenv("HETROUTE_ENVIRONMENT", "development"),
        }
        return cls(**values)

    @property
    def jobs_from_env(self) -> bool:
        """True when HETROUTE_JOBS is set and must override --jobs"""
        return bool(os.getenv("HETROUTE_JOBS", "").strip())

    @property
    def is_production(self) -> bool:
        """Check if running in production"""
        return self.ENVIRONMENT == "production"


class IntegratorOptions(BaseModel):
    """Options for integrating logit(eta)"""

    model_config = ConfigDict(frozen=True)

    step: float = Field(default=0.01, gt=0.0)
    method: Literal["rk4", "rk4-adaptive"] = "rk4"
    tol: float = Field(default=1e-8, gt=0.0, description="Local error tolerance, adaptive mode")
    stationarity_tol: float = Field(default=1e-10, gt=0.0)
    stop_on_stationary: bool = True
    record_every: int = Field(default=1, ge=1)
    min_step: float = Field(default=1e-12, gt=0.0)
    drift_tol: float = Field(default=1e-9, gt=0.0)


class SolverOptions(BaseModel):
    """Options for the damped Picard + Newton fixed-point solver"""

    model_config = ConfigDict(frozen=True)

    damping: float = Field(default=0.5, gt=0.0, le=1.0)
    tol: float = Field(default=1e-12, gt=0.0)
    accept_tol: float = Field(default=1e-10, gt=0.0)
    max_iter: int = Field(default=100_000, ge=1)
    patience: int = Field(default=200, ge=1)
    newton_switch: float = Field(default=1e-6, gt=0.0)
    newton_max_iter: int = Field(default=60, ge=1)
    strategy: Literal["picard-newton", "newton-first", "newton"] = "picard-newton"

    @model_validator(mode="after")
    def check_tolerances(self):
        if self.accept_tol < self.tol:
            raise ValueError("accept_tol must be >= tol")
        return self


class ContinuationOptions(BaseModel):
    """Options for sweeping fixed-point branches over a decreasing eta grid"""

    model_config = ConfigDict(frozen=True)

    jump_cap_fraction: float = Field(default=0.2, gt=0.0)
    n_starts: int = Field(default=16, ge=0)
    seed: int = 0
    pitchfork_delta: float = Field(default=1e-3, gt=0.0)
    refine_width: float = Field(default=1e-3, gt=0.0)
    match_radius: float = Field(default=1e-6, gt=0.0)
    eta_floor: float = Field(default=ETA_FLOOR, gt=0.0)
    detect_newborn: bool = True


class RunConfig(BaseModel):
    """
    Validated command-line run configuration
    """

    command: str
    game_path: Optional[Path] = None
    eta: Optional[float] = None
    eta_max: float = Field(default=1.0)
    eta_min: float = Field(default=0.01)
    points: int = Field(default=60, ge=2)
    horizon: float = Field(default=50.0, gt=0.0)
    seed: int = 0
    starts: int = Field(default=64, ge=1)
    n_agents: int = Field(default=1000)
    z0: str = "uniform"
    flow_path: Optional[Path] = None
    coordinate: Optional[str] = None
    threshold: bool = False
    compare: bool = False
    samples: int = Field(default=512, ge=1)
    output_dir: Path = Path("out")
    jobs: int = Field(default=1, ge=1)
    integrator: IntegratorOptions = Field(default_factory=IntegratorOptions)
    solver: SolverOptions = Field(default_factory=SolverOptions)
    continuation: ContinuationOptions = Field(default_factory=ContinuationOptions)

    @field_validator("eta", "eta_max", "eta_min")
    @classmethod
    def validate_eta(cls, v):
        """Noise levels must be positive and finite"""
        if v is None:
            return v
        if not math.isfinite(v) or v <= 0:
            raise ValueError("eta must be positive and finite")
        return v

    @field_validator("n_agents")
    @classmethod
    def validate_agents(cls, v):
        """At least one agent per population"""
        if v < 1:
            raise ValueError("number of agents per population must be >= 1")
        return v

    @field_validator("game_path", "flow_path")
    @classmethod
    def validate_game_path(cls, v):
        """Input files must exist"""
        if v is not None and not v.is_file():
            raise ValueError(f"game file not found: {v}")
        return v

    @model_validator(mode="after")
    def check_grid(self):
        if self.eta_max <= self.eta_min:
            raise ValueError("eta-max must be greater than eta-min")
        return self

    def eta_grid(self) -> List[float]:
        """Log-spaced strictly decreasing grid from eta_max to eta_min"""
        return [float(x) for x in np.geomspace(self.eta_max, self.eta_min, self.points)]

    def prepare_output_dir(self) -> Path:
        """Create the output directory and check that it is writable"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(self.output_dir, os.W_OK):
            raise PermissionError(f"output directory not writable: {self.output_dir}")
        return self.output_dir

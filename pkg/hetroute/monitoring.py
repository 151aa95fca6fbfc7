"""
Monitoring and observability with Sentry and Prometheus

hetroute runs as a batch job, so metrics live on a dedicated registry and are
written to a node-exporter textfile at exit instead of being scraped.
"""

import logging
import time
from contextlib import contextmanager
from typing import Optional

import sentry_sdk
from prometheus_client import CollectorRegistry, Counter, Histogram, generate_latest, write_to_textfile

logger = logging.getLogger(__name__)

registry = CollectorRegistry()

# Prometheus metrics
fixed_point_solves = Counter(
    "hetroute_fixed_point_solves_total",
    "Fixed-point solves by outcome",
    ["outcome"],
    registry=registry,
)

integration_steps = Counter(
    "hetroute_integration_steps_total",
    "Accepted Runge-Kutta steps",
    registry=registry,
)

agent_events = Counter(
    "hetroute_agent_revision_events_total",
    "Route revisions in agent simulations",
    registry=registry,
)

errors_total = Counter(
    "hetroute_errors_total",
    "Errors by type",
    ["error_type"],
    registry=registry,
)

command_duration = Histogram(
    "hetroute_command_seconds",
    "Wall time per CLI command",
    ["command"],
    registry=registry,
)


def record_solve(outcome: str) -> None:
    """Count a fixed-point solve: converged, accepted, failed"""
    fixed_point_solves.labels(outcome=outcome).inc()


def record_integration_steps(count: int) -> None:
    if count > 0:
        integration_steps.inc(count)


def record_agent_events(count: int) -> None:
    if count > 0:
        agent_events.inc(count)


class Monitoring:
    """
    Centralized monitoring and observability
    """

    def __init__(
        self,
        sentry_dsn: Optional[str] = None,
        environment: str = "development",
        metrics_file: Optional[str] = None,
    ):
        """
        Initialize monitoring

        Args:
            sentry_dsn: Sentry DSN for error tracking
            environment: Environment name (development/production)
            metrics_file: Prometheus textfile written by write_metrics()
        """
        self.environment = environment
        self.metrics_file = metrics_file
        self.sentry_enabled = False

        if sentry_dsn:
            try:
                sentry_sdk.init(
                    dsn=sentry_dsn,
                    environment=environment,
                    traces_sample_rate=0.1 if environment == "production" else 1.0,
                )
                self.sentry_enabled = True
                logger.info(f"Sentry initialized for environment: {environment}")
            except Exception as e:
                logger.warning(f"Failed to initialize Sentry: {e}")
        else:
            logger.debug("Sentry not configured (no DSN provided)")

    def record_error(self, error_type: str, error: Optional[Exception] = None) -> None:
        """
        Record error

        Args:
            error_type: Type of error
            error: Optional exception object, sent to Sentry when enabled
        """
        errors_total.labels(error_type=error_type).inc()

        if self.sentry_enabled and error is not None:
            sentry_sdk.capture_exception(error)

    @contextmanager
    def measure_command(self, command: str):
        """Context manager timing one CLI command"""
        start_time = time.perf_counter()
        try:
            yield
        finally:
            command_duration.labels(command=command).observe(time.perf_counter() - start_time)

    def add_breadcrumb(self, message: str, category: str = "hetroute", level: str = "info") -> None:
        if self.sentry_enabled:
            sentry_sdk.add_breadcrumb(message=message, category=category, level=level)

    def get_metrics(self) -> bytes:
        """Metrics in Prometheus text format"""
        return generate_latest(registry)

    def write_metrics(self) -> bool:
        """
        Write the registry to the configured textfile

        Returns:
            True if a file was written
        """
        if not self.metrics_file:
            return False
        try:
            write_to_textfile(self.metrics_file, registry)
            logger.debug(f"Metrics written to {self.metrics_file}")
            return True
        except OSError as e:
            logger.warning(f"Failed to write metrics to {self.metrics_file}: {e}")
            return False

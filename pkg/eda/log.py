import logging
import sys

import sentry_sdk
from pydis_core.utils.logging import TRACE_LEVEL, get_logger, log_format
from sentry_sdk.integrations.logging import LoggingIntegration

from eda.constants import GIT_SHA, Runtime


def setup_logging() -> None:
    """Configure logging for the laboratory."""
    root_log = get_logger()
    root_log.setLevel(TRACE_LEVEL if Runtime.trace_logging else logging.DEBUG if Runtime.debug else logging.INFO)

    ch = logging.StreamHandler(stream=sys.stdout)
    ch.setFormatter(log_format)
    root_log.addHandler(ch)

    root_log.debug("Logging initialization complete.")


def setup_sentry() -> None:
    """Set up the Sentry logging integrations."""
    sentry_logging = LoggingIntegration(
        level=logging.DEBUG,
        event_level=logging.WARNING
    )

    sentry_sdk.init(
        dsn=Runtime.sentry_dsn,
        integrations=[sentry_logging],
        release=f"eda-lab@{GIT_SHA}",
        traces_sample_rate=0.0,
    )

from datetime import timedelta

import arrow


class Stopwatch:
    """Wall-clock time since creation, for progress lines in the logs."""

    def __init__(self):
        self.started = arrow.utcnow()

    def elapsed(self) -> timedelta:
        """Time since the stopwatch started."""
        return arrow.utcnow() - self.started

    def humanize(self) -> str:
        """Elapsed time as `H:MM:SS.s`."""
        seconds = self.elapsed().total_seconds()
        hours, rest = divmod(seconds, 3600)
        minutes, seconds = divmod(rest, 60)
        return f"{int(hours)}:{int(minutes):02d}:{seconds:04.1f}"

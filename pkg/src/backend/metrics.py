import logging
import threading
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd

from exceptions import DataError

logger = logging.getLogger(__name__)


class MetricsLog:
    """
    Append-only CSV log. Every row is stamped with the configuration hash so
    a report can refuse directories that mix runs. A row that brings new
    columns rewrites the file under the union header.
    """

    _lock = threading.Lock()

    def __init__(self, path: str | Path, config_hash: Optional[str] = None):
        self.path = Path(path)
        self.config_hash = config_hash

    def append(self, **row: Any) -> None:
        row = dict(row)
        row.setdefault("config_hash", self.config_hash)
        frame = pd.DataFrame([row])
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not (self.path.is_file() and self.path.stat().st_size > 0):
                frame.to_csv(self.path, index=False)
                return
            header = pd.read_csv(self.path, nrows=0).columns.tolist()
            if set(frame.columns) <= set(header):
                frame.reindex(columns=header).to_csv(self.path, mode="a", header=False, index=False)
                return
            # new columns: rewrite with the union header
            merged = pd.concat([pd.read_csv(self.path), frame], ignore_index=True)
            merged.to_csv(self.path, index=False)

    def read(self) -> pd.DataFrame:
        if not self.path.is_file():
            return pd.DataFrame()
        try:
            return pd.read_csv(self.path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise DataError(f"Metrics file {self.path} is corrupt: {e}") from e


class NullMetricsLog(MetricsLog):
    """Drops rows; used when a training call is made outside a run directory."""

    def __init__(self):
        super().__init__(Path("/dev/null"))

    def append(self, **row: Any) -> None:
        return None

    def read(self) -> pd.DataFrame:
        return pd.DataFrame()


def as_log(log: Optional[MetricsLog]) -> MetricsLog:
    return log if log is not None else NullMetricsLog()


def summarize_row(row: Dict[str, Any]) -> str:
    return " ".join(
        f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
        for k, v in row.items()
        if k != "config_hash"
    )

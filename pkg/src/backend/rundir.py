"""
Run directory layout:

    runs/<name>/
        codec/codec.ckpt
        baseline/baseline.ckpt
        experts/<user>/{real,fake_benign,fake_noise}.ckpt
        protected/<user>.ckpt, protected/<user>.simple.ckpt
        reports/*.csv, reports/*.json, reports/summary.txt
        registry.jsonl
        manifest.json
        run.log
        run.lock

One pipeline run owns its directory exclusively through run.lock.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import logsys
from exceptions import ConflictError, DataError, NotFoundError, PreconditionError

logger = logging.getLogger(__name__)

STAGES = ("codec", "baseline", "experts", "protected", "reports")


class RunDirectory:
    def __init__(self, root: str | Path, name: str):
        self.path = Path(root) / name
        self.name = name
        self._lock_fd: Optional[int] = None
        self._log_handler: Optional[logging.Handler] = None

    # ---- layout ----

    def create(self) -> "RunDirectory":
        for stage in STAGES:
            (self.path / stage).mkdir(parents=True, exist_ok=True)
        return self

    def exists(self) -> bool:
        return self.path.is_dir()

    @property
    def codec(self) -> Path:
        return self.path / "codec" / "codec.ckpt"

    @property
    def baseline(self) -> Path:
        return self.path / "baseline" / "baseline.ckpt"

    @property
    def registry(self) -> Path:
        return self.path / "registry.jsonl"

    @property
    def manifest(self) -> Path:
        return self.path / "manifest.json"

    @property
    def reports(self) -> Path:
        return self.path / "reports"

    def expert(self, user_id: str, role: str) -> Path:
        return self.path / "experts" / user_id / f"{role}.ckpt"

    def protected(self, user_id: str, simple: bool = False) -> Path:
        suffix = ".simple.ckpt" if simple else ".ckpt"
        return self.path / "protected" / f"{user_id}{suffix}"

    def report(self, filename: str) -> Path:
        return self.reports / filename

    def require(self, stage: str) -> Path:
        """Path of a stage's checkpoint, which must already exist."""
        path = {"codec": self.codec, "baseline": self.baseline, "registry": self.registry}[stage]
        if not path.is_file():
            raise PreconditionError(
                f"Stage '{stage}' has not been run: {path} is missing.", stage=stage
            )
        return path

    # ---- locking ----

    def __enter__(self) -> "RunDirectory":
        self.create()
        lock = self.path / "run.lock"
        try:
            self._lock_fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise ConflictError(
                f"Run directory {self.path} is locked by another run ({lock})."
            ) from e
        os.write(self._lock_fd, str(os.getpid()).encode("ascii"))
        self._log_handler = logsys.attach_run_log(self.path / "run.log")
        logger.info("Run %s opened", self.name)
        return self

    def __exit__(self, *exc) -> None:
        logsys.detach_run_log(self._log_handler)
        self._log_handler = None
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            self._lock_fd = None
            (self.path / "run.lock").unlink(missing_ok=True)

    # ---- small JSON documents ----

    def write_json(self, path: Path, document: Dict[str, Any]) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(path)
        return path

    def read_json(self, path: Path) -> Dict[str, Any]:
        if not path.is_file():
            raise NotFoundError(f"{path} not found.")
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"{path} is not valid JSON: {e}") from e

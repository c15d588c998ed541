from __future__ import annotations

import argparse
import functools
import json
import sys
import time
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Tuple

from pydantic import BaseModel

from backend.rundir import RunDirectory
from exceptions import ToolkitException
from schemas import PipelineConfig, load_config

log = getLogger(__name__)


# ---------- Success envelope ----------
class CommandEnvelope(BaseModel):
    command: str
    success: bool = True
    result: Any


def _emit(body: dict, stream) -> None:
    stream.write(json.dumps(body, indent=2, default=str) + "\n")
    stream.flush()


def _error_body(command: str, exc: ToolkitException) -> dict:
    body = {
        "command": command,
        "success": False,
        "error": {
            "title": exc.extra.get("title", exc.__class__.__name__),
            "detail": exc.detail,
            "code": exc.code,
        },
    }
    if exc.errors:
        body["error"]["errors"] = exc.errors
    partial = getattr(exc, "partial", None)
    if isinstance(partial, BaseModel):
        body["error"]["partial"] = partial.model_dump(mode="json")
    stage = getattr(exc, "stage", None)
    if stage:
        body["error"]["stage"] = stage
    return body


Handler = Callable[[argparse.Namespace], Any]


# ---------- Decorator ----------
def render(func: Handler) -> Callable[[argparse.Namespace], int]:
    """
    Wrap a command handler to:
      - envelope successful results on stdout, exit status 0
      - render ToolkitException as an error envelope on stderr with its exit code
      - wrap unknown errors via ToolkitException.from_unexpected
      - log only on exceptions
    """

    @functools.wraps(func)
    def wrapper(args: argparse.Namespace) -> int:
        started = time.perf_counter()
        ev = getattr(args, "command", None) or func.__name__
        try:
            result = func(args)
            _emit(CommandEnvelope(command=ev, result=result).model_dump(mode="json"), sys.stdout)
            return 0

        except ToolkitException as exc:
            level = 40 if exc.exit_code == 1 else 30
            log.log(
                level,
                "command.toolkit_exception:%s code=%s detail=%s duration_ms=%.2f",
                ev,
                exc.code,
                exc.detail,
                (time.perf_counter() - started) * 1000,
                exc_info=exc.exit_code == 1,
            )
            _emit(_error_body(ev, exc), sys.stderr)
            return exc.exit_code

        except Exception as exc:
            log.exception("command.unexpected:%s", ev)
            internal = ToolkitException.from_unexpected(exc)
            _emit(_error_body(ev, internal), sys.stderr)
            return internal.exit_code

    return wrapper


# ---------- Shared arguments ----------
def add_common(parser: argparse.ArgumentParser) -> argparse.ArgumentParser:
    parser.add_argument("--config", type=Path, default=None, help="TOML pipeline configuration")
    parser.add_argument("--seed", type=int, default=None, help="Override seeds.base")
    parser.add_argument("--out", type=Path, default=None, help="Runs root (default: KEYLOCK_RUNS_ROOT)")
    return parser


def pipeline_context(args: argparse.Namespace) -> Tuple[PipelineConfig, RunDirectory]:
    from main import config

    cfg = load_config(args.config).with_seed(args.seed)
    root = args.out or Path(config.settings["RUNS_ROOT"])
    return cfg, RunDirectory(root, cfg.name)

import argparse
import sys
from typing import List, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict

import logsys


class RuntimeSettings(BaseSettings):
    """Process-level settings read from KEYLOCK_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="KEYLOCK_", extra="ignore")

    DEVICE: str = "cpu"
    NUM_WORKERS: int = 0
    RUNS_ROOT: str = "runs"
    DEBUG: bool = False
    DATA_DIR: Optional[str] = None
    CACHE_DIR: Optional[str] = None
    HTTP_TIMEOUT: float = 30.0


# Configuration context
class Config:
    def __init__(self):
        self.settings = {}

    def setup(self):
        # Read environment variables and store them in the settings dictionary
        self.settings.update(RuntimeSettings().model_dump())


# Configure application settings
config = Config()
config.setup()

# Configure logging
logsys.configure(debug=config.settings["DEBUG"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="keylock",
        description="Key-based active authorization for image classifiers.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # import commands lazily: they pull in torch and the training modules
    from commands import (
        attack,
        baseline,
        codec,
        flipbits,
        protect,
        report,
        verify,
    )

    baseline.register(subparsers)
    codec.register(subparsers)
    protect.register(subparsers)
    verify.register(subparsers)
    attack.register(subparsers)
    flipbits.register(subparsers)
    report.register(subparsers)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(run())

import logging
import logging.config
from pathlib import Path
from typing import Optional

STANDARD_FORMAT = "[%(asctime)s] %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# libraries that log per request or per figure
QUIET = ("matplotlib", "PIL", "httpx", "httpcore")

_debug = False


def override_level(level: str) -> str:
    return "DEBUG" if _debug else level


def configure(debug: bool = False):
    """Console logging on stderr; stdout is reserved for command envelopes."""
    global _debug
    _debug = debug
    logging.config.dictConfig(
        {
            "version": 1,
            "disable_existing_loggers": False,
            "formatters": {
                "standard": {"format": STANDARD_FORMAT, "datefmt": DATE_FORMAT},
            },
            "handlers": {
                "default": {
                    "class": "logging.StreamHandler",
                    "level": override_level("INFO"),
                    "formatter": "standard",
                    "stream": "ext://sys.stderr",
                },
            },
            "root": {
                "level": override_level("INFO"),
                "handlers": ["default"],
            },
            "loggers": {
                name: {"level": override_level("WARNING"), "propagate": False} for name in QUIET
            },
        }
    )


def attach_run_log(path: Path) -> logging.Handler:
    """Mirror root logging into `path` (appending) until detach_run_log is called."""
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter(STANDARD_FORMAT, DATE_FORMAT))
    handler.setLevel(override_level("INFO"))
    logging.getLogger().addHandler(handler)
    return handler


def detach_run_log(handler: Optional[logging.Handler]) -> None:
    if handler is None:
        return
    logging.getLogger().removeHandler(handler)
    handler.close()

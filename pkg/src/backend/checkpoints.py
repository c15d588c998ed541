import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import torch

from exceptions import DataError, NotFoundError
from utils import digest_state

logger = logging.getLogger(__name__)

FORMAT = "keylock-ckpt"
VERSION = 1
KINDS = frozenset(["codec", "classifier", "expert", "protected", "generator"])


def save_checkpoint(
    path: str | Path,
    kind: str,
    state: Mapping[str, torch.Tensor],
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a versioned checkpoint container.

    :param path: Destination file; parent directories are created.
    :param kind: One of KINDS; checked again on load.
    :param state: Named parameter arrays (a state_dict or a nested mapping of them).
    :param metadata: Plain-data description (geometry, descriptor, config hash, ...).
    """
    if kind not in KINDS:
        raise DataError(f"Unknown checkpoint kind '{kind}'.")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "state": {k: v.detach().cpu() if torch.is_tensor(v) else v for k, v in state.items()},
        "digest": digest_state(state),
        "metadata": dict(metadata or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    logger.debug("Saved %s checkpoint to %s", kind, path)
    return path


def load_checkpoint(path: str | Path, kind: str) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """
    Read a checkpoint written by save_checkpoint.

    :return: (state, metadata)
    """
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"Checkpoint {path} not found.")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise DataError(f"Checkpoint {path} is unreadable: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise DataError(f"{path} is not a {FORMAT} container.")
    if payload.get("version") != VERSION:
        raise DataError(f"{path} has version {payload.get('version')}, expected {VERSION}.")
    if payload.get("kind") != kind:
        raise DataError(f"{path} holds a '{payload.get('kind')}' checkpoint, expected '{kind}'.")
    if "digest" in payload and digest_state(payload["state"]) != payload["digest"]:
        raise DataError(f"{path} failed its integrity check; the weights were altered after saving.")
    return payload["state"], payload["metadata"]


def read_metadata(path: str | Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"Checkpoint {path} not found.")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        return dict(payload["metadata"])
    except Exception as e:
        raise DataError(f"Checkpoint {path} is unreadable: {e}") from e

import hashlib
import json
import random
import re
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn


def is_valid_url(url):
    """Check if a string is a valid URL. Valid URLs are of the form 'protocol://hostname[:port]/path'.
    Args:
        url: The string to be checked.
    Returns:
        A boolean value indicating whether the string is a valid
    """
    pattern = re.compile(r"^(https|http)://[a-zA-Z0-9.-]+(?::\d+)?(?:/[^\s]*)?$")
    return bool(pattern.match(url))


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; returns a torch generator seeded the same way."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def resolve_device(name: str | None = None) -> torch.device:
    if name is None:
        from main import config

        name = config.settings["DEVICE"]
    if name.startswith("cuda") and not torch.cuda.is_available():
        return torch.device("cpu")
    return torch.device(name)


def loader_workers() -> int:
    from main import config

    return max(int(config.settings.get("NUM_WORKERS", 0)), 0)


def digest_json(payload: Any) -> str:
    """SHA-256 of the canonical JSON encoding of `payload`."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def digest_state(state: nn.Module | Mapping[str, Any]) -> str:
    """
    SHA-256 over parameter names and raw bytes; equal digests mean bit-identical
    weights. Nested mappings are walked with dotted names, non-tensors are skipped.
    """
    if isinstance(state, nn.Module):
        state = state.state_dict()
    h = hashlib.sha256()

    def walk(prefix: str, node: Mapping[str, Any]) -> None:
        for name in sorted(node):
            value = node[name]
            if isinstance(value, Mapping):
                walk(f"{prefix}{name}.", value)
            elif torch.is_tensor(value):
                h.update(f"{prefix}{name}".encode("utf-8"))
                h.update(value.detach().cpu().contiguous().reshape(-1).view(torch.uint8).numpy().tobytes())

    walk("", state)
    return h.hexdigest()

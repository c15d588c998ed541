"""
Suspect model endpoints: anything that maps a batch of images to labels.

- ModelEndpoint wraps a checkpoint loaded in-process.
- StdioEndpoint talks to a child process, one image file path per line in,
  one integer label per line out.
- HttpEndpoint POSTs each image as PNG and reads {"label": int} back.
"""

import contextlib
import io
import logging
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import List, Optional, Protocol, runtime_checkable

import httpx
import numpy as np
import torch
from PIL import Image

from exceptions import DataError, InvalidArgumentError, TransportError
from utils import is_valid_url

logger = logging.getLogger(__name__)


@runtime_checkable
class QueryEndpoint(Protocol):
    name: str

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        ...


def to_pil(image: torch.Tensor) -> Image.Image:
    arr = (image.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    return Image.fromarray(arr)


def png_bytes(image: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    to_pil(image).save(buf, format="PNG")
    return buf.getvalue()


class ModelEndpoint:
    def __init__(self, model, name: str = "model", batch_size: int = 256):
        self.model = model
        self.name = name
        self.batch_size = batch_size

    @classmethod
    def from_checkpoint(cls, path: str | Path, device: Optional[torch.device] = None) -> "ModelEndpoint":
        # imported here: the training modules import this package
        from distill import ProtectedModel
        from experts import load_classifier

        try:
            model = ProtectedModel.load(path, device)
        except DataError:
            model, _ = load_classifier(path, "classifier", device)
        return cls(model, name=Path(path).stem)

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        from experts import predict_labels

        return predict_labels(self.model, images, self.batch_size)


class StdioEndpoint:
    """Line protocol over a child process's standard streams."""

    def __init__(self, command: List[str] | str, name: Optional[str] = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.name = name or Path(self.command[0]).name
        self._proc: Optional[subprocess.Popen] = None
        self._tmp = tempfile.TemporaryDirectory(prefix="keylock-query-")

    def _process(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command,
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    text=True,
                    bufsize=1,
                )
            except OSError as e:
                raise TransportError(f"Cannot start suspect process {self.command}: {e}") from e
        return self._proc

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        proc = self._process()
        labels: List[int] = []
        for i, image in enumerate(images):
            path = Path(self._tmp.name) / f"q{i:06d}.png"
            to_pil(image).save(path)
            try:
                proc.stdin.write(f"{path}\n")
                proc.stdin.flush()
                reply = proc.stdout.readline()
                labels.append(int(reply.strip()))
            except (OSError, ValueError) as e:
                raise TransportError(
                    f"Suspect process {self.name} failed on query {i}: {e}",
                    partial=torch.tensor(labels, dtype=torch.long),
                ) from e
        return torch.tensor(labels, dtype=torch.long)

    def close(self) -> None:
        if self._proc is not None:
            with contextlib.suppress(OSError):
                if self._proc.stdin:
                    self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None
        self._tmp.cleanup()

    def __enter__(self) -> "StdioEndpoint":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class HttpEndpoint:
    def __init__(self, url: str, timeout: Optional[float] = None, name: Optional[str] = None):
        if not is_valid_url(url):
            raise InvalidArgumentError(f"'{url}' is not a valid http(s) URL.")
        if timeout is None:
            from main import config

            timeout = config.settings["HTTP_TIMEOUT"]
        self.url = url
        self.name = name or url
        self._http = httpx.Client(timeout=timeout)

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        labels: List[int] = []
        for i, image in enumerate(images):
            try:
                resp = self._http.post(self.url, files={"image": ("query.png", png_bytes(image), "image/png")})
                resp.raise_for_status()
                labels.append(int(resp.json()["label"]))
            except (httpx.HTTPError, KeyError, ValueError, TypeError) as e:
                raise TransportError(
                    f"Endpoint {self.url} failed on query {i}: {e}",
                    partial=torch.tensor(labels, dtype=torch.long),
                ) from e
        return torch.tensor(labels, dtype=torch.long)

    def close(self) -> None:
        self._http.close()


def open_endpoint(target: str) -> QueryEndpoint:
    """
    `http(s)://...` → HttpEndpoint, `cmd:<command line>` → StdioEndpoint,
    anything else is a checkpoint path.
    """
    if target.startswith(("http://", "https://")):
        return HttpEndpoint(target)
    if target.startswith("cmd:"):
        return StdioEndpoint(target[4:])
    return ModelEndpoint.from_checkpoint(target)

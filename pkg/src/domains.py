"""
Image datasets and the three training domains built from them.

For a user key k_j every benign image x gives three paired samples: x itself
(benign), x encoded with k_j (authorized) and x encoded with a per-sample
random wrong key (noise). Encoded images are produced on first access and
cached once per sample; `materialize()` fills the whole cache in batches.
"""

import logging
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset
from torchvision import datasets, transforms

from exceptions import DataError, InvalidArgumentError, NotFoundError
from keys import UserKey, expand_key
from schemas import AugmentName, AugmentOp, DatasetSource, DatasetSpec
from stegonet import StegoCodec
from utils import digest_state

logger = logging.getLogger(__name__)


# ============================================================
# LABELED IMAGE SETS
# ============================================================


@dataclass(eq=False)
class ImageSet(Dataset):
    """Images (N, 3, H, W) in [0, 1] with integer labels (N,)."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"Images must be N×3×H×W, got {tuple(self.images.shape)}.")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels."
            )
        self.images = self.images.float()
        self.labels = self.labels.long()

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, idx):
        return self.images[idx], self.labels[idx]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, n: Optional[int]) -> "ImageSet":
        if n is None or n >= len(self):
            return self
        return ImageSet(self.images[:n], self.labels[:n], self.num_classes)

    def sample(self, fraction: float, seed: int) -> "ImageSet":
        """Random subset of round(fraction·N) samples, at least one."""
        n = max(1, int(round(fraction * len(self))))
        idx = torch.randperm(len(self), generator=torch.Generator().manual_seed(seed))[:n]
        return ImageSet(self.images[idx], self.labels[idx], self.num_classes)


def synthetic_dataset(n: int, num_classes: int, image_size: int, seed: int) -> ImageSet:
    """
    Deterministic toy classification set: each class has its own colour and
    stripe frequency, overlaid with Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    palette = np.random.default_rng(1234).uniform(0.2, 0.8, size=(num_classes, 3))
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i, k in enumerate(labels):
        freq = 2 * np.pi * (1 + k % 5) / image_size
        angle = np.pi * (k // 5) / 4
        stripes = 0.15 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + rng.uniform(0, 2 * np.pi))
        images[i] = palette[k][:, None, None] + stripes[None] + rng.normal(0, 0.05, size=(3, image_size, image_size))
    return ImageSet(
        torch.from_numpy(np.clip(images, 0.0, 1.0)),
        torch.from_numpy(labels),
        num_classes,
    )


def _stack_torchvision(ds) -> Tuple[torch.Tensor, torch.Tensor]:
    images, labels = zip(*(ds[i] for i in range(len(ds))))
    return torch.stack(images), torch.as_tensor(labels)


def _load_packed(path: Path, split: str) -> Tuple[torch.Tensor, torch.Tensor]:
    """`.npz` with x_<split> (N×H×W×3 uint8 or N×3×H×W float) and y_<split>."""
    if not path.is_file():
        raise NotFoundError(f"Packed dataset {path} not found.")
    with np.load(path) as data:
        try:
            x, y = data[f"x_{split}"], data[f"y_{split}"]
        except KeyError as e:
            raise DataError(f"{path} has no arrays for split '{split}': {e}") from e
    if x.ndim != 4:
        raise DataError(f"{path}: x_{split} must be 4-D, got shape {x.shape}.")
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.transpose(0, 3, 1, 2)
    x = x.astype(np.float32)
    if x.max() > 1.0:
        x = x / 255.0
    return torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(y.astype(np.int64).ravel())


def load_dataset(spec: DatasetSpec, split: str = "train", seed: int = 0, root: Optional[str] = None) -> ImageSet:
    """
    Load one split of the configured dataset as an in-memory ImageSet.

    :param spec: Dataset section of the pipeline configuration.
    :param split: "train" or "test".
    :param seed: Seed of the synthetic source (test split uses seed + 1).
    :param root: Download/cache root for torchvision datasets.
    """
    if split not in ("train", "test"):
        raise InvalidArgumentError(f"Unknown split '{split}'.")
    cap = spec.train_size if split == "train" else spec.test_size
    size = spec.image_size
    to_tensor = transforms.Compose([transforms.Resize((size, size)), transforms.ToTensor()])

    if spec.source == DatasetSource.SYNTHETIC:
        n = cap or (2000 if split == "train" else 500)
        return synthetic_dataset(n, spec.num_classes, size, seed + (split == "test"))

    if spec.source == DatasetSource.FOLDER:
        folder = Path(spec.path) / split
        if not folder.is_dir():
            raise NotFoundError(f"Image folder {folder} not found.")
        images, labels = _stack_torchvision(datasets.ImageFolder(str(folder), transform=to_tensor))
    elif spec.source == DatasetSource.PACKED:
        images, labels = _load_packed(Path(spec.path), split)
        if images.shape[-1] != size:
            images = torch.nn.functional.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
    else:
        ds = datasets.CIFAR10(
            root or spec.path or "data",
            train=split == "train",
            download=spec.download,
            transform=to_tensor,
        )
        images, labels = _stack_torchvision(ds)

    logger.info("Loaded %s/%s: %d images of %s", spec.name, split, len(labels), tuple(images.shape[1:]))
    return ImageSet(images, labels, spec.num_classes).take(cap)


# ============================================================
# AUGMENTATION
# ============================================================


def _transform(op: AugmentOp, image_size: int):
    if op.name == AugmentName.CROP:
        return transforms.RandomCrop(image_size, padding=int(op.magnitude))
    if op.name == AugmentName.HFLIP:
        return transforms.RandomHorizontalFlip(p=op.magnitude)
    if op.name == AugmentName.ROTATION:
        return transforms.RandomRotation(degrees=op.magnitude)
    return transforms.RandomErasing(p=op.magnitude)


def _as_ops(policy: Iterable) -> List[AugmentOp]:
    ops = []
    for item in policy:
        if isinstance(item, AugmentOp):
            ops.append(item)
            continue
        name, magnitude = (item, 0.5) if isinstance(item, str) else item
        try:
            ops.append(AugmentOp(name=AugmentName(name), magnitude=magnitude))
        except ValueError as e:
            raise InvalidArgumentError(f"Unknown augmentation '{name}'.") from e
    return ops


def augment(batch: torch.Tensor, policy: Iterable) -> torch.Tensor:
    """
    Apply a label-preserving policy to every image of a batch independently.

    :param policy: AugmentOp items, names, or (name, magnitude) pairs.
    """
    ops = _as_ops(policy)
    if not ops:
        return batch
    pipeline = transforms.Compose([_transform(op, batch.shape[-1]) for op in ops])
    return torch.stack([pipeline(img) for img in batch])


# ============================================================
# DOMAINS
# ============================================================


class Domain(str, Enum):
    BENIGN = "benign"
    AUTHORIZED = "authorized"
    NOISE = "noise"

    @property
    def index(self) -> int:
        return DOMAINS.index(self)

    @classmethod
    def from_index(cls, i: int) -> "Domain":
        return DOMAINS[i]


DOMAINS = (Domain.BENIGN, Domain.AUTHORIZED, Domain.NOISE)


class DomainView(Dataset):
    """One domain of a triple as a (image, label) dataset."""

    def __init__(self, triple: "DomainTriple", domain: Domain):
        self.triple = triple
        self.domain = domain

    def __len__(self) -> int:
        return len(self.triple)

    def __getitem__(self, idx):
        return self.triple.image(self.domain, idx), self.triple.benign.labels[idx]


class MixedDomain(Dataset):
    """W = B ∪ A_j ∪ N_j; items are (image, label, domain index, sample index)."""

    def __init__(self, triple: "DomainTriple"):
        self.triple = triple

    def __len__(self) -> int:
        return 3 * len(self.triple)

    def __getitem__(self, idx):
        n = len(self.triple)
        domain, i = DOMAINS[idx // n], idx % n
        return self.triple.image(domain, i), self.triple.benign.labels[i], domain.index, i


class DomainTriple:
    """
    Paired benign / authorized / noise samples for one user key.

    Noise keys are kept as per-sample seeds; `noise_key(i)` regenerates them.
    """

    def __init__(self, benign: ImageSet, key: UserKey, codec: StegoCodec, noise_seeds: np.ndarray):
        self.benign = benign
        self.key = key
        self.codec = codec
        self.noise_seeds = np.asarray(noise_seeds, dtype=np.uint64)
        if len(self.noise_seeds) != len(benign):
            raise InvalidArgumentError("One noise seed per benign sample is required.")
        n = len(benign)
        self._cache = {
            Domain.AUTHORIZED: torch.empty_like(benign.images),
            Domain.NOISE: torch.empty_like(benign.images),
        }
        self._filled = {d: torch.zeros(n, dtype=torch.bool) for d in self._cache}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.benign)

    @property
    def labels(self) -> torch.Tensor:
        return self.benign.labels

    def noise_key(self, i: int) -> UserKey:
        """Random key for sample i, redrawn until it differs from the owner key."""
        rng = np.random.default_rng(int(self.noise_seeds[i]))
        while True:
            bits = rng.integers(0, 2, size=self.key.bits.shape, dtype=np.uint8)
            if not np.array_equal(bits, self.key.bits):
                return UserKey(bits)

    def _messages(self, domain: Domain, indices: Sequence[int]) -> torch.Tensor:
        size = self.codec.image_size
        if domain == Domain.AUTHORIZED:
            plane = torch.from_numpy(expand_key(self.key, size, size).bits.astype(np.float32))
            return plane.unsqueeze(0).expand(len(indices), -1, -1, -1)
        planes = [expand_key(self.noise_key(i), size, size).bits for i in indices]
        return torch.from_numpy(np.stack(planes).astype(np.float32))

    @torch.no_grad()
    def encode(self, domain: Domain, covers: torch.Tensor, indices: Sequence[int]) -> torch.Tensor:
        """Encode arbitrary covers with the keys that belong to `indices` in `domain`."""
        if domain == Domain.BENIGN:
            return covers
        self.codec.eval()
        return self.codec.encode(covers, self._messages(domain, indices)).cpu()

    def _fill(self, domain: Domain, indices: List[int]) -> None:
        missing = [i for i in indices if not self._filled[domain][i]]
        if not missing:
            return
        encoded = self.encode(domain, self.benign.images[missing], missing)
        with self._lock:
            for j, i in enumerate(missing):
                # first writer wins
                if not self._filled[domain][i]:
                    self._cache[domain][i] = encoded[j]
                    self._filled[domain][i] = True

    def image(self, domain: Domain, i: int) -> torch.Tensor:
        if domain == Domain.BENIGN:
            return self.benign.images[i]
        self._fill(domain, [int(i)])
        return self._cache[domain][i]

    def images(self, domain: Domain, indices: Sequence[int]) -> torch.Tensor:
        indices = [int(i) for i in indices]
        if domain == Domain.BENIGN:
            return self.benign.images[indices]
        self._fill(domain, indices)
        return self._cache[domain][indices]

    def cache_tag(self) -> str:
        """Names the encoded domains: key, codec weights, covers and noise seeds all enter it."""
        covers = digest_state({"covers": self.benign.images, "seeds": torch.from_numpy(self.noise_seeds.astype(np.int64))})
        return f"{self.key.fingerprint()[:16]}-{digest_state(self.codec)[:16]}-{covers[:16]}-{len(self)}"

    def materialize(self, batch_size: int = 256, cache_dir: Optional[str | Path] = None) -> "DomainTriple":
        """Encode every sample of both keyed domains, optionally through an on-disk cache."""
        cache_file = None
        if cache_dir is not None:
            cache_file = Path(cache_dir) / f"{self.cache_tag()}.pt"
            if cache_file.is_file():
                stored = torch.load(cache_file, map_location="cpu", weights_only=True)
                with self._lock:
                    for d in self._cache:
                        self._cache[d] = stored[d.value]
                        self._filled[d][:] = True
                logger.debug("Loaded encoded domains from %s", cache_file)
                return self
        for domain in self._cache:
            for start in range(0, len(self), batch_size):
                self._fill(domain, list(range(start, min(start + batch_size, len(self)))))
        if cache_file is not None:
            cache_file.parent.mkdir(parents=True, exist_ok=True)
            torch.save({d.value: t for d, t in self._cache.items()}, cache_file)
        return self

    # ---- views ----

    def view(self, domain: Domain | str) -> DomainView:
        return DomainView(self, Domain(domain))

    @property
    def authorized(self) -> DomainView:
        return self.view(Domain.AUTHORIZED)

    @property
    def noise(self) -> DomainView:
        return self.view(Domain.NOISE)

    def mixed(self) -> MixedDomain:
        return MixedDomain(self)

    def batches(
        self,
        batch_size: int,
        generator: torch.Generator,
        domains: Sequence[Domain] = DOMAINS,
        policy: Iterable = (),
        augment_before_encode: bool = False,
    ) -> Iterator[Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]]:
        """
        One shuffled epoch over the selected domains.

        :yield: (images, labels, domain indices, sample indices)
        """
        policy = _as_ops(policy)
        n = len(self)
        flat = torch.cat([torch.arange(n) + d.index * n for d in domains])
        order = flat[torch.randperm(len(flat), generator=generator)]
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            tags, idx = chunk // n, chunk % n
            images = torch.empty((len(chunk), *self.benign.image_shape))
            for d in domains:
                mask = tags == d.index
                if not mask.any():
                    continue
                sel = idx[mask].tolist()
                if augment_before_encode and policy:
                    images[mask] = self.encode(d, augment(self.benign.images[sel], policy), sel)
                else:
                    images[mask] = self.images(d, sel)
            if policy and not augment_before_encode:
                images = augment(images, policy)
            yield images, self.labels[idx], tags, idx


def build_domains(benign: ImageSet, key: UserKey, codec: StegoCodec, rng_seed: int) -> DomainTriple:
    """
    Pair every benign image with its authorized and noise counterparts.

    :param benign: Labeled covers.
    :param key: Owner key k_j.
    :param codec: Codec whose geometry matches the covers.
    :param rng_seed: Seed of the per-sample noise-key seeds.
    """
    if benign.image_shape != codec.geometry:
        raise InvalidArgumentError(
            f"Images of shape {benign.image_shape} do not fit codec geometry {codec.geometry}."
        )
    if key.r != codec.r or key.c != codec.key_channels:
        raise InvalidArgumentError(
            f"Key {key.c}×{key.r}×{key.r} does not fit codec key shape {codec.key_channels}×{codec.r}×{codec.r}."
        )
    seeds = np.random.default_rng(rng_seed).integers(0, 2**63, size=len(benign), dtype=np.uint64)
    return DomainTriple(benign, key, codec, seeds)

"""
User keys and the owner's key registry.

A user key is a binary c×r×r array. Before embedding it is tiled over the
image plane; after decoding, the plane is split back into r×r blocks and a
per-position majority vote recovers the key. The registry records which key
was issued to which user and where that user's protected checkpoint lives,
and answers tracing queries by Hamming distance.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np

from exceptions import ConflictError, DataError, InvalidArgumentError, NotFoundError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class UserKey:
    bits: np.ndarray
    user_id: str = ""

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 3 or bits.shape[1] != bits.shape[2] or bits.shape[1] < 1:
            raise InvalidArgumentError(f"Key bits must have shape c×r×r, got {bits.shape}.")
        if not np.isin(bits, (0, 1)).all():
            raise InvalidArgumentError("Key bits must be 0 or 1.")
        bits = bits.astype(np.uint8)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def c(self) -> int:
        return self.bits.shape[0]

    @property
    def r(self) -> int:
        return self.bits.shape[1]

    @property
    def size(self) -> int:
        return self.bits.size

    def same_bits(self, other: "UserKey") -> bool:
        return self.bits.shape == other.bits.shape and np.array_equal(self.bits, other.bits)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.bits.shape, dtype=np.int64).tobytes())
        h.update(pack_bits(self.bits))
        return h.hexdigest()

    def with_user(self, user_id: str) -> "UserKey":
        return UserKey(self.bits, user_id)


@dataclass(frozen=True, eq=False)
class ExpandedKey:
    """A key tiled to cover a c×h×w message plane."""

    bits: np.ndarray
    r: int

    @property
    def shape(self):
        return self.bits.shape


def pack_bits(bits: np.ndarray) -> bytes:
    """Row-major, most-significant-bit first per byte."""
    return np.packbits(np.asarray(bits, dtype=np.uint8).ravel(), bitorder="big").tobytes()


def unpack_bits(blob: bytes, c: int, r: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="big")
    if flat.size < c * r * r:
        raise DataError(f"Packed key holds {flat.size} bits, expected {c * r * r}.")
    return flat[: c * r * r].reshape(c, r, r)


def _identity_seed(user_id: str) -> int:
    return int.from_bytes(hashlib.sha256(user_id.encode("utf-8")).digest()[:8], "big")


def generate_key(user_id: str, r: int, c: int, rng_seed: int) -> UserKey:
    """
    Draw a uniform binary key for a user.

    :param user_id: Identity the key is derived from.
    :param r: Block side length.
    :param c: Number of key channels.
    :param rng_seed: Seed mixed with the identity; fixed (user_id, seed) gives a fixed key.
    :return: The c×r×r key.
    """
    if r < 1 or c < 1:
        raise InvalidArgumentError(f"Key geometry must be positive, got r={r}, c={c}.")
    rng = np.random.default_rng([_identity_seed(user_id), int(rng_seed) & 0xFFFFFFFFFFFFFFFF])
    return UserKey(rng.integers(0, 2, size=(c, r, r), dtype=np.uint8), user_id)


def random_key(r: int, c: int, rng: np.random.Generator) -> UserKey:
    return UserKey(rng.integers(0, 2, size=(c, r, r), dtype=np.uint8))


def expand_key(k: UserKey, h: int, w: int) -> ExpandedKey:
    if h % k.r or w % k.r or h < 1 or w < 1:
        raise InvalidArgumentError(f"Plane {h}×{w} is not a multiple of key block size {k.r}.")
    return ExpandedKey(np.tile(k.bits, (1, h // k.r, w // k.r)), k.r)


def split_blocks(plane: np.ndarray, r: int) -> np.ndarray:
    """
    Split a c×h×w plane into non-overlapping c×r×r blocks, row-major.

    :return: Array of shape (h/r · w/r, c, r, r).
    """
    plane = np.asarray(plane)
    if plane.ndim != 3:
        raise InvalidArgumentError(f"Plane must be c×h×w, got shape {plane.shape}.")
    c, h, w = plane.shape
    if r < 1 or h % r or w % r:
        raise InvalidArgumentError(f"Plane {h}×{w} is not a multiple of block size {r}.")
    return (
        plane.reshape(c, h // r, r, w // r, r)
        .transpose(1, 3, 0, 2, 4)
        .reshape(-1, c, r, r)
    )


def join_blocks(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    """Inverse of split_blocks."""
    blocks = np.asarray(blocks)
    n, c, r, _ = blocks.shape
    if n != (h // r) * (w // r):
        raise InvalidArgumentError(f"{n} blocks cannot tile a {h}×{w} plane.")
    return blocks.reshape(h // r, w // r, c, r, r).transpose(2, 0, 3, 1, 4).reshape(c, h, w)


def majority_vote(blocks: Sequence[np.ndarray] | np.ndarray, threshold: float = 0.5) -> UserKey:
    """
    Binarize each block at `threshold` and vote per position.

    A position is 1 when at least as many blocks carry a 1 as a 0, so ties
    resolve to 1.
    """
    if len(blocks) == 0:
        raise InvalidArgumentError("Majority vote needs at least one block.")
    stacked = np.stack([np.asarray(b) for b in blocks]) if not isinstance(blocks, np.ndarray) else blocks
    if stacked.ndim != 4:
        raise InvalidArgumentError(f"Blocks must be c×r×r, got stacked shape {stacked.shape}.")
    ones = (stacked >= threshold).sum(axis=0)
    zeros = stacked.shape[0] - ones
    return UserKey((ones >= zeros).astype(np.uint8))


def extract_key(plane: np.ndarray, r: int, threshold: float = 0.5) -> UserKey:
    """Vote(Split(plane)): recover a key from a decoded message plane."""
    return majority_vote(split_blocks(plane, r), threshold)


def hamming_distance(a: UserKey, b: UserKey) -> int:
    if a.bits.shape != b.bits.shape:
        raise InvalidArgumentError(f"Key shapes differ: {a.bits.shape} vs {b.bits.shape}.")
    return int(np.count_nonzero(a.bits != b.bits))


def flip_bits(k: UserKey, n_flips: int, rng: np.random.Generator) -> UserKey:
    """Return a copy of `k` with exactly `n_flips` distinct bits inverted."""
    if not 0 <= n_flips <= k.size:
        raise InvalidArgumentError(f"Cannot flip {n_flips} bits of a {k.size}-bit key.")
    flat = k.bits.ravel().copy()
    idx = rng.choice(k.size, size=n_flips, replace=False)
    flat[idx] ^= 1
    return UserKey(flat.reshape(k.bits.shape), k.user_id)


# ============================================================
# REGISTRY
# ============================================================


@dataclass
class RegistryEntry:
    user_id: str
    key: UserKey
    checkpoint: Optional[str] = None


@dataclass(frozen=True)
class TraceMatch:
    user_id: str
    distance: int
    ambiguous: bool = False


@dataclass
class KeyRegistry:
    """
    Ordered record of issued keys.

    User ids are unique and no two entries share identical key bits. Mutation
    is single-writer; `snapshot()` hands readers an independent copy.
    """

    entries: List[RegistryEntry] = field(default_factory=list)
    config_hash: Optional[str] = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[RegistryEntry]:
        return iter(self.entries)

    def register(self, user_id: str, key: UserKey, checkpoint: Optional[str] = None) -> RegistryEntry:
        for entry in self.entries:
            if entry.user_id == user_id:
                raise ConflictError(f"User '{user_id}' is already registered.")
            if entry.key.same_bits(key):
                raise ConflictError(
                    f"Key for '{user_id}' duplicates the key issued to '{entry.user_id}'."
                )
        entry = RegistryEntry(user_id, key.with_user(user_id), checkpoint)
        self.entries.append(entry)
        logger.info("Registered key %s for user %s", key.fingerprint()[:12], user_id)
        return entry

    def get(self, user_id: str) -> RegistryEntry:
        for entry in self.entries:
            if entry.user_id == user_id:
                return entry
        raise NotFoundError(f"User '{user_id}' is not registered.")

    def set_checkpoint(self, user_id: str, checkpoint: str) -> None:
        self.get(user_id).checkpoint = checkpoint

    def snapshot(self) -> "KeyRegistry":
        return KeyRegistry(
            [RegistryEntry(e.user_id, e.key, e.checkpoint) for e in self.entries],
            self.config_hash,
        )

    # ---- persistence: one JSON record per line ----

    def save(self, path: str | Path) -> None:
        path = Path(path)
        lines = []
        for e in self.entries:
            lines.append(
                json.dumps(
                    {
                        "user_id": e.user_id,
                        "r": e.key.r,
                        "c": e.key.c,
                        "bits": base64.b64encode(pack_bits(e.key.bits)).decode("ascii"),
                        "checkpoint": e.checkpoint,
                        "config_hash": self.config_hash,
                    },
                    sort_keys=True,
                )
            )
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "KeyRegistry":
        path = Path(path)
        if not path.is_file():
            raise NotFoundError(f"Key registry {path} not found.")
        registry = cls()
        hashes = set()
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                bits = unpack_bits(base64.b64decode(rec["bits"]), int(rec["c"]), int(rec["r"]))
                registry.register(rec["user_id"], UserKey(bits, rec["user_id"]), rec.get("checkpoint"))
                hashes.add(rec.get("config_hash"))
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"Corrupt registry record at {path}:{lineno}: {e}") from e
        if len(hashes) > 1:
            raise DataError(f"Registry {path} mixes configuration hashes {sorted(map(str, hashes))}.")
        registry.config_hash = hashes.pop() if hashes else None
        return registry


def trace_key(extracted: UserKey, registry: KeyRegistry, eps3: int) -> Optional[TraceMatch]:
    """
    Match an extracted key against the registry.

    :param extracted: Key recovered from an intercepted image.
    :param registry: Non-empty registry of issued keys.
    :param eps3: Largest Hamming distance still counted as a match.
    :return: The closest entry within eps3 (lowest index on ties, flagged ambiguous), else None.
    """
    if len(registry) == 0:
        raise InvalidArgumentError("Cannot trace against an empty registry.")
    distances = [hamming_distance(extracted, e.key) for e in registry.entries]
    best = int(np.argmin(distances))
    if distances[best] > eps3:
        return None
    ambiguous = distances.count(distances[best]) > 1
    return TraceMatch(registry.entries[best].user_id, distances[best], ambiguous)

# schemas/config.py
from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from exceptions import DataError, NotFoundError
from utils import digest_json


# ============================================================
# DATA
# ============================================================


class DatasetSource(str, Enum):
    SYNTHETIC = "synthetic"
    FOLDER = "folder"
    PACKED = "packed"
    CIFAR10 = "cifar10"


class AugmentName(str, Enum):
    CROP = "crop"
    HFLIP = "hflip"
    ROTATION = "rotation"
    ERASING = "erasing"


class AugmentOp(BaseModel):
    """
    One transform of an augmentation policy. `magnitude` means padding in pixels
    for crop, probability for hflip and erasing, and degrees for rotation.
    """

    model_config = ConfigDict(extra="forbid")

    name: AugmentName
    magnitude: float = Field(default=0.5, ge=0)


class DatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(default="synthetic", description="Free-form dataset label")
    source: DatasetSource = DatasetSource.SYNTHETIC
    path: Optional[str] = Field(default=None, description="Image-folder root or packed .npz file")
    image_size: int = Field(default=32, ge=4)
    num_classes: int = Field(default=10, ge=2)
    train_size: Optional[int] = Field(default=None, ge=1, description="Cap on training samples")
    test_size: Optional[int] = Field(default=None, ge=1, description="Cap on test samples")
    codec_subset: int = Field(default=2500, ge=1, description="Images used to train the codec")
    download: bool = False
    augmentation: List[AugmentOp] = Field(default_factory=list)
    augment_before_encode: bool = False

    @model_validator(mode="after")
    def _path_required(self):
        if self.source in (DatasetSource.FOLDER, DatasetSource.PACKED) and not self.path:
            raise ValueError(f"dataset.path is required for source '{self.source.value}'")
        return self


class KeySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    r: int = Field(default=16, ge=1, description="Key block side length")
    c: int = Field(default=1, ge=1, description="Key channels")


# ============================================================
# TRAINING STAGES
# ============================================================


class CodecConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_size: int = Field(default=32, ge=4)
    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    critic_lr: float = Field(default=1e-4, gt=0)
    decoding_weight: float = Field(default=1.0, ge=0)
    similarity_weight: float = Field(default=1.0, ge=0)
    realness_weight: float = Field(default=0.1, ge=0)
    critic_steps: int = Field(default=1, ge=1)
    critic_clip: float = Field(default=0.1, gt=0)


class ClassifierConfig(BaseModel):
    """Backbone shape and the baseline training schedule."""

    model_config = ConfigDict(extra="forbid")

    widths: Tuple[int, int, int, int] = (32, 64, 128, 256)
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=128, ge=1)
    lr: float = Field(default=0.05, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)


class ExpertConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    real_epochs: int = Field(default=5, ge=0, description="E1")
    real_lr: float = Field(default=0.01, gt=0, description="eta1")
    fake_iterations: int = Field(default=1000, ge=0, description="E2")
    fake_lr: float = Field(default=1e-3, gt=0, description="eta2")
    estimator_steps: int = Field(default=5, ge=1)
    estimator_lr: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=64, ge=2)


class DistillConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_at: float = Field(default=1000.0, ge=0, description="lambda1")
    lambda_crd: float = Field(default=1.0, ge=0, description="lambda2")
    alpha: float = Field(default=2.0, gt=1)
    temperature: float = Field(default=4.0, gt=0)
    n_neg: int = Field(default=4, ge=1)
    embed_dim: int = Field(default=128, ge=1)
    epochs: int = Field(default=50, ge=0, description="E3")
    lr: float = Field(default=1e-3, gt=0, description="eta3")
    batch_size: int = Field(default=128, ge=2)
    simple_ablation: bool = Field(
        default=False, description="Also distil a KL-only student per user"
    )

    def simple(self) -> "DistillConfig":
        return self.model_copy(update={"lambda_at": 0.0, "lambda_crd": 0.0})


class VerifyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eps1: float = Field(default=5.0, ge=0, description="Fidelity margin, accuracy points")
    eps2: float = Field(default=30.0, ge=0, description="Effectiveness margin, accuracy points")
    eps3: int = Field(default=1, ge=0, description="Hamming threshold for tracing")
    query_size: int = Field(default=100, ge=1)
    workers: int = Field(default=4, ge=1)


class AttackConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=30, ge=0)
    lr_scale: float = Field(default=0.1, gt=0, description="Multiplier on the baseline lr")
    batch_size: int = Field(default=128, ge=1)
    fractions: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3])
    wp_amounts: List[float] = Field(
        default_factory=lambda: [round(0.05 * i, 2) for i in range(20)]
    )
    fp_step: float = Field(default=0.1, gt=0, le=1)
    lambda4: float = Field(default=10.0, ge=0)
    generator_steps: int = Field(default=500, ge=0)
    generator_lr: float = Field(default=1e-3, gt=0)
    transfer_dataset: Optional[DatasetSpec] = Field(
        default=None, description="Target task of the transfer attack; defaults to the pipeline dataset"
    )

    @field_validator("fractions")
    @classmethod
    def _fractions_in_range(cls, v: List[float]) -> List[float]:
        for f in v:
            if not 0 < f <= 1:
                raise ValueError(f"data fraction {f} outside (0, 1]")
        return v


class SeedConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base: int = 0
    keys: int = 7
    domains: int = 11


# ============================================================
# PIPELINE
# ============================================================


class PipelineConfig(BaseModel):
    """Root configuration: every input of the model generation algorithm has a named key."""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(default="desk", pattern=r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")
    users: List[str] = Field(default_factory=list)
    layers: List[str] = Field(
        default_factory=lambda: ["stage1", "stage2", "stage3", "stage4"],
        min_length=1,
        description="T_sel, shallow to deep",
    )
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    key: KeySpec = Field(default_factory=KeySpec)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    experts: ExpertConfig = Field(default_factory=ExpertConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    attacks: AttackConfig = Field(default_factory=AttackConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)

    @model_validator(mode="after")
    def _key_fits_images(self):
        size = self.dataset.image_size
        if size % self.key.r:
            raise ValueError(
                f"image_size {size} is not a multiple of key block size r={self.key.r}"
            )
        if len(set(self.users)) != len(self.users):
            raise ValueError("user ids must be unique")
        return self

    def config_hash(self) -> str:
        return digest_json(self.model_dump(mode="json"))

    def with_seed(self, seed: Optional[int]) -> "PipelineConfig":
        if seed is None:
            return self
        return self.model_copy(update={"seeds": self.seeds.model_copy(update={"base": seed})})


def load_config(path: Optional[str | Path]) -> PipelineConfig:
    """
    Load and validate a TOML pipeline configuration.

    :param path: Path to the file; None yields the defaults.
    :return: The validated configuration.
    """
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"Configuration file {path} not found.")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise DataError(f"Configuration file {path} is not valid TOML: {e}") from e
    return parse_config(raw)


def parse_config(raw: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as e:
        raise DataError(
            "Configuration validation failed",
            errors=e.errors(include_url=False, include_context=False, include_input=False),
        ) from e

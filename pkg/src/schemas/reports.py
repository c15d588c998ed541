# schemas/reports.py
from __future__ import annotations

from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class MeanStd(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    mean: float
    std: float


class IqaReport(BaseModel):
    """Image-quality scores of encoded images against their covers."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    ssim: MeanStd
    psnr: MeanStd = Field(..., description="dB; +inf marks identical pairs")
    count: int = Field(..., ge=0)


class Verdict(str, Enum):
    INNOCENT = "innocent"
    PIRATED = "pirated"
    INCONCLUSIVE = "inconclusive"


class KeyAccuracy(BaseModel):
    user_id: str
    accuracy: float = Field(..., ge=0, le=100)
    unlocks: bool = False


class VerificationReport(BaseModel):
    suspect: str = Field(default="suspect", description="Label of the queried endpoint")
    verdict: Verdict
    matched_user: Optional[str] = None
    benign_accuracy: float = Field(..., ge=0, le=100)
    baseline_accuracy: float = Field(..., ge=0, le=100)
    per_key: List[KeyAccuracy] = Field(default_factory=list)
    eps1: float
    eps2: float
    collusion: List[str] = Field(default_factory=list, description="All keys that unlock, if more than one")
    error: Optional[str] = None
    config_hash: Optional[str] = None


class KeyTsr(BaseModel):
    user_id: str
    tsr: float = Field(..., ge=0, le=1)


class TraceReport(BaseModel):
    per_key: List[KeyTsr]
    culprit: Optional[str] = None
    confidence: float = Field(default=0.0, ge=0, le=1)
    eps3: int
    images: int
    config_hash: Optional[str] = None


class AttackResult(BaseModel):
    attack: str
    params: Dict[str, Any] = Field(default_factory=dict, description="Everything needed to re-run the attack")
    benign_acc: float = Field(..., ge=0, le=100)
    authorized_acc: Optional[float] = Field(default=None, ge=0, le=100)
    baseline: Optional[float] = Field(default=None, ge=0, le=100)
    target: str = "protected"
    config_hash: Optional[str] = None

    def to_row(self) -> Dict[str, Any]:
        params = ";".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return {
            "attack": self.attack,
            "target": self.target,
            "params": params,
            "benign_acc": self.benign_acc,
            "authorized_acc": self.authorized_acc,
            "baseline": self.baseline,
            "config_hash": self.config_hash,
        }


class ManifestEntry(BaseModel):
    user_id: str
    key_fingerprint: str
    checkpoint: str
    simple_checkpoint: Optional[str] = None
    authorized_acc: Optional[float] = None
    benign_acc: Optional[float] = None
    noise_acc: Optional[float] = None


class Manifest(BaseModel):
    run: str
    config_hash: str
    seeds: Dict[str, int]
    baseline_accuracy: Optional[float] = None
    entries: List[ManifestEntry] = Field(default_factory=list)


class FlipPoint(BaseModel):
    flips: int = Field(..., ge=0)
    accuracy: float = Field(..., ge=0, le=100)
    trials: int = Field(..., ge=1)

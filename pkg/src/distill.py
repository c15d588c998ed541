"""
Distil a user's mixture of experts into one protected student.

The student sees every sample of W and matches the expert picked by the
sample's domain tag. Three terms drive it: softened-logit KL, attention
transfer on the tapped layers, and a contrastive term that keeps each
student feature close to its own teacher feature and away from features of
other domains.
"""

import copy
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from backend.checkpoints import load_checkpoint, save_checkpoint
from backend.metrics import MetricsLog, as_log, summarize_row
from club import LayerSelection, pool_features
from domains import DOMAINS, DomainTriple
from exceptions import InvalidArgumentError, TrainingFailureError
from experts import TAPS, ExpertEnsemble, TappedClassifier, moe_forward
from keys import UserKey
from schemas import DistillConfig
from utils import seed_everything

logger = logging.getLogger(__name__)

AT_EPS = 1e-8


# ============================================================
# LOSSES
# ============================================================


def kl_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float = 4.0) -> torch.Tensor:
    """KL(softmax(teacher/τ) ‖ softmax(student/τ)), averaged over the batch."""
    if student_logits.shape != teacher_logits.shape:
        raise InvalidArgumentError(
            f"Logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}."
        )
    if torch.isnan(student_logits).any() or torch.isnan(teacher_logits).any():
        raise InvalidArgumentError("Logits contain NaN.")
    if student_logits.ndim == 1:
        student_logits, teacher_logits = student_logits.unsqueeze(0), teacher_logits.unsqueeze(0)
    loss = F.kl_div(
        F.log_softmax(student_logits / temperature, dim=-1),
        F.log_softmax(teacher_logits / temperature, dim=-1),
        log_target=True,
        reduction="batchmean",
    )
    return loss.clamp_min(0.0)


def attention_map(f: torch.Tensor, alpha: float = 2.0) -> torch.Tensor:
    """Σ_i |f_i|^α over the channel axis of (..., C, H, W)."""
    if alpha <= 1:
        raise InvalidArgumentError(f"Attention exponent must exceed 1, got {alpha}.")
    if f.ndim < 3:
        raise InvalidArgumentError(f"Activation must be C×H×W, got shape {tuple(f.shape)}.")
    return f.abs().pow(alpha).sum(dim=-3)


def _normalized_map(f: torch.Tensor, alpha: float) -> torch.Tensor:
    a = attention_map(f, alpha)
    v = a.reshape(-1, a.shape[-2] * a.shape[-1])
    return v / (v.norm(dim=1, keepdim=True) + AT_EPS)


def at_loss(teacher_f: torch.Tensor, student_f: torch.Tensor, alpha: float = 2.0) -> torch.Tensor:
    """
    L2 distance between the normalized, vectorized attention maps, batch mean.
    Channel counts may differ; spatial sizes may not.
    """
    if teacher_f.shape[-2:] != student_f.shape[-2:]:
        raise InvalidArgumentError(
            f"Spatial sizes differ: {tuple(teacher_f.shape[-2:])} vs {tuple(student_f.shape[-2:])}."
        )
    return (_normalized_map(teacher_f, alpha) - _normalized_map(student_f, alpha)).norm(dim=1).mean()


def multi_at_loss(
    teacher_feats: Mapping[str, torch.Tensor],
    student_feats: Mapping[str, torch.Tensor],
    sel: LayerSelection,
    alpha: float = 2.0,
) -> torch.Tensor:
    return torch.stack([at_loss(teacher_feats[l], student_feats[l], alpha) for l in sel]).sum()


class CrdCritic(nn.Module):
    """
    Per-layer critic: linear projections of pooled teacher and student features
    into a shared space and a scaled inner product. `forward` returns logits;
    `probability` maps them into (0, 1).
    """

    def __init__(self, teacher_dims: Mapping[str, int], student_dims: Mapping[str, int], sel: LayerSelection, embed_dim: int = 128):
        super().__init__()
        self.layers = tuple(sel)
        self.embed_dim = embed_dim
        self.teacher_proj = nn.ModuleDict({l: nn.Linear(teacher_dims[l], embed_dim) for l in self.layers})
        self.student_proj = nn.ModuleDict({l: nn.Linear(student_dims[l], embed_dim) for l in self.layers})

    def forward(self, layer: str, t: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        et = self.teacher_proj[layer](t)
        es = self.student_proj[layer](s)
        return (et * es).sum(dim=-1) / self.embed_dim**0.5

    def probability(self, layer: str, t: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(layer, t, s))


def sample_negatives(tags: torch.Tensor, n_neg: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    For each sample, `n_neg` in-batch indices carrying a different domain tag.

    :return: (N, n_neg) index tensor.
    """
    if n_neg < 1:
        raise InvalidArgumentError(f"n_neg must be at least 1, got {n_neg}.")
    tags = tags.cpu()
    weights = (tags.unsqueeze(0) != tags.unsqueeze(1)).float()
    if not (weights.sum(dim=1) > 0).all():
        raise InvalidArgumentError("Contrastive loss needs samples from at least two domains.")
    return torch.multinomial(weights, n_neg, replacement=True, generator=generator)


def crd_loss(
    teacher_feats: Mapping[str, torch.Tensor],
    student_feats: Mapping[str, torch.Tensor],
    tags: torch.Tensor,
    critic: CrdCritic,
    n_neg: int,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    −Σ_l E_pos[log h_l] − N_neg·Σ_l E_neg[log(1 − h_l)].

    Positives pair a sample's teacher and student features; negatives pair a
    teacher feature with the student feature of a sample from another domain.
    """
    neg = sample_negatives(tags, n_neg, generator).to(tags.device)
    total = []
    for layer in critic.layers:
        t = pool_features(teacher_feats[layer])
        s = pool_features(student_feats[layer])
        pos_logits = critic(layer, t, s)
        t_rep = t.unsqueeze(1).expand(-1, n_neg, -1).reshape(-1, t.shape[-1])
        s_neg = s[neg.reshape(-1)]
        neg_logits = critic(layer, t_rep, s_neg)
        total.append(-F.logsigmoid(pos_logits).mean() - n_neg * F.logsigmoid(-neg_logits).mean())
    return torch.stack(total).sum()


def distillation_loss(
    student_out: Tuple[torch.Tensor, Mapping[str, torch.Tensor]],
    teacher_out: Tuple[torch.Tensor, Mapping[str, torch.Tensor]],
    tags: torch.Tensor,
    critic: Optional[CrdCritic],
    cfg: DistillConfig,
    sel: LayerSelection,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    L_kl + λ1·L_at + λ2·L_crd. Terms with a zero weight are not computed, so
    with λ1 = λ2 = 0 the total is the KL term itself.
    """
    (s_logits, s_feats), (t_logits, t_feats) = student_out, teacher_out
    total = kl_loss(s_logits, t_logits, cfg.temperature)
    parts = {"kl": total.item()}
    if cfg.lambda_at > 0:
        at = multi_at_loss(t_feats, s_feats, sel, cfg.alpha)
        total = total + cfg.lambda_at * at
        parts["at"] = at.item()
    if cfg.lambda_crd > 0 and critic is not None and tags.unique().numel() > 1:
        crd = crd_loss(t_feats, s_feats, tags, critic, cfg.n_neg, generator)
        total = total + cfg.lambda_crd * crd
        parts["crd"] = crd.item()
    parts["total"] = total.item()
    return total, parts


# ============================================================
# PROTECTED MODEL
# ============================================================


@dataclass
class ProtectedModel:
    """A distilled student bound to one user key."""

    model: TappedClassifier
    key_fingerprint: str
    user_id: str = ""
    config: Dict[str, Any] = field(default_factory=dict)
    config_hash: Optional[str] = None
    simple: bool = False

    def __call__(self, x: torch.Tensor, return_features: bool = False):
        return self.model(x, return_features=return_features)

    @property
    def device(self) -> torch.device:
        return next(self.model.parameters()).device

    def eval(self) -> "ProtectedModel":
        self.model.eval()
        return self

    def matches(self, key: UserKey) -> bool:
        return key.fingerprint() == self.key_fingerprint

    def copy(self) -> "ProtectedModel":
        return copy.deepcopy(self)

    def save(self, path: str | Path) -> Path:
        meta = {
            "descriptor": self.model.descriptor(),
            "key_fingerprint": self.key_fingerprint,
            "user_id": self.user_id,
            "config": self.config,
            "config_hash": self.config_hash,
            "simple": self.simple,
        }
        return save_checkpoint(path, "protected", self.model.state_dict(), meta)

    @classmethod
    def load(cls, path: str | Path, device: Optional[torch.device] = None) -> "ProtectedModel":
        state, meta = load_checkpoint(path, "protected")
        desc = meta["descriptor"]
        model = TappedClassifier(desc["num_classes"], desc["widths"])
        model.load_state_dict(state)
        return cls(
            model.to(device or torch.device("cpu")).eval(),
            meta["key_fingerprint"],
            meta.get("user_id", ""),
            meta.get("config", {}),
            meta.get("config_hash"),
            meta.get("simple", False),
        )


def distill_student(
    ens: ExpertEnsemble,
    triple: DomainTriple,
    cfg: DistillConfig,
    sel: LayerSelection,
    seed: int = 0,
    log: Optional[MetricsLog] = None,
    policy=(),
    augment_before_encode: bool = False,
    config_hash: Optional[str] = None,
) -> ProtectedModel:
    """
    Train a randomly initialized student of the experts' architecture on W.

    The ensemble runs frozen in eval mode; the student and the contrastive
    critics have separate Adam optimizers and share one backward pass.
    """
    if ens.key is None:
        raise InvalidArgumentError("The ensemble is not bound to a key.")
    sel.check(TAPS)
    device = ens.device
    ens.eval()
    generator = seed_everything(seed)
    student = TappedClassifier(ens.real.num_classes, ens.real.widths).to(device)
    critic = CrdCritic(ens.real.tap_dims, student.tap_dims, sel, cfg.embed_dim).to(device)
    opt_student = torch.optim.Adam(student.parameters(), lr=cfg.lr)
    opt_critic = torch.optim.Adam(critic.parameters(), lr=cfg.lr)
    log = as_log(log)
    simple = cfg.lambda_at == 0 and cfg.lambda_crd == 0
    stage = "simple" if simple else "distill"
    last_stable = copy.deepcopy(student.state_dict())

    for epoch in range(1, cfg.epochs + 1):
        student.train()
        sums: Dict[str, float] = {}
        batches = 0
        epoch_iter = triple.batches(cfg.batch_size, generator, DOMAINS, policy, augment_before_encode)
        for images, _, tags, _ in tqdm(epoch_iter, desc=f"{stage} {epoch}", leave=False, disable=not sys.stderr.isatty()):
            images, tags = images.to(device), tags.to(device)
            with torch.no_grad():
                teacher_out = moe_forward(ens, images, tags, return_features=True)
            student_out = student(images, return_features=True)
            total, parts = distillation_loss(student_out, teacher_out, tags, critic, cfg, sel, generator)
            if not torch.isfinite(total):
                raise TrainingFailureError(
                    f"Distillation loss became {total.item()} in epoch {epoch}.", last_stable=last_stable
                )
            opt_student.zero_grad()
            opt_critic.zero_grad()
            total.backward()
            opt_student.step()
            opt_critic.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1

        row = {"user": ens.key.user_id, "stage": stage, "epoch": epoch, **{k: v / max(batches, 1) for k, v in sums.items()}}
        log.append(**row)
        logger.info("%s", summarize_row(row))
        last_stable = copy.deepcopy(student.state_dict())

    return ProtectedModel(
        student.eval(),
        ens.key.fingerprint(),
        ens.key.user_id,
        cfg.model_dump(mode="json"),
        config_hash,
        simple,
    )

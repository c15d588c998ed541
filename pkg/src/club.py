"""
CLUB mutual-information upper bound between paired feature vectors.

A small network q(ẑ|z) models ẑ as a diagonal Gaussian conditioned on z. With
N pairs the estimate is

    1/N Σ_m [ log q(ẑ_m|z_m) − 1/N Σ_n log q(ẑ_n|z_m) ]

using every pairing, not a sampled negative. It is differentiable in the
features, so a model can be trained to lower it.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import torch
from torch import nn

from exceptions import InvalidArgumentError, TrainingFailureError

logger = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
_LOG_2PI = math.log(2 * math.pi)


def _mlp(dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(dim, hidden),
        nn.ReLU(),
        nn.Linear(hidden, hidden),
        nn.ReLU(),
        nn.Linear(hidden, dim),
    )


class AuxEstimator(nn.Module):
    """Variational q(ẑ|z): mean and clamped log-variance of a diagonal Gaussian."""

    def __init__(self, dim: int, hidden: Optional[int] = None):
        super().__init__()
        self.dim = dim
        hidden = hidden or 2 * dim
        self.mean_net = _mlp(dim, hidden)
        self.logvar_net = _mlp(dim, hidden)
        self._optimizer: Optional[torch.optim.Optimizer] = None
        self._lr: Optional[float] = None

    def forward(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.mean_net(z), self.logvar_net(z).clamp(LOGVAR_MIN, LOGVAR_MAX)

    def log_likelihood(self, z: torch.Tensor, zhat: torch.Tensor) -> torch.Tensor:
        """log q(ẑ_i|z_i) per pair, shape (N,)."""
        mean, logvar = self(z)
        return -0.5 * (((zhat - mean) ** 2) / logvar.exp() + logvar + _LOG_2PI).sum(dim=-1)

    def pairwise_log_likelihood(self, z: torch.Tensor, zhat: torch.Tensor) -> torch.Tensor:
        """Matrix [m, n] = log q(ẑ_n|z_m), shape (N, N)."""
        mean, logvar = self(z)
        diff = zhat.unsqueeze(0) - mean.unsqueeze(1)
        return -0.5 * ((diff**2) / logvar.exp().unsqueeze(1) + logvar.unsqueeze(1) + _LOG_2PI).sum(dim=-1)

    def optimizer(self, lr: float) -> torch.optim.Optimizer:
        if self._optimizer is None or self._lr != lr:
            self._optimizer = torch.optim.Adam(self.parameters(), lr=lr)
            self._lr = lr
        return self._optimizer


@dataclass(frozen=True)
class LayerSelection:
    """Ordered tap names, shallow to deep."""

    layers: Tuple[str, ...]

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("Layer selection is empty.")
        object.__setattr__(self, "layers", tuple(self.layers))

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def check(self, available: Sequence[str]) -> "LayerSelection":
        """Every layer must be a tap of the backbone, in increasing depth."""
        missing = [l for l in self.layers if l not in available]
        if missing:
            raise InvalidArgumentError(f"Unknown layer taps {missing}; available: {list(available)}.")
        depth = [list(available).index(l) for l in self.layers]
        if any(b <= a for a, b in zip(depth, depth[1:])):
            raise InvalidArgumentError(f"Layers {list(self.layers)} are not in increasing depth.")
        return self


def _check_pair(z: torch.Tensor, zhat: torch.Tensor, est: Optional[AuxEstimator] = None) -> None:
    if z.ndim != 2 or zhat.ndim != 2 or z.shape != zhat.shape:
        raise InvalidArgumentError(f"Paired features must share shape N×d, got {tuple(z.shape)} and {tuple(zhat.shape)}.")
    if z.shape[0] < 1:
        raise InvalidArgumentError("At least one feature pair is required.")
    if est is not None and z.shape[1] != est.dim:
        raise InvalidArgumentError(f"Estimator expects d={est.dim}, features have d={z.shape[1]}.")


def fit_aux(z: torch.Tensor, zhat: torch.Tensor, est: AuxEstimator, steps: int, lr: float) -> AuxEstimator:
    """
    Maximize the mean log q(ẑ_i|z_i) over the pairs for `steps` Adam steps.
    Features are detached; only the estimator changes.
    """
    _check_pair(z, zhat, est)
    z, zhat = z.detach(), zhat.detach()
    opt = est.optimizer(lr)
    est.train()
    for step in range(steps):
        loss = -est.log_likelihood(z, zhat).mean()
        if not torch.isfinite(loss):
            raise TrainingFailureError(f"Estimator likelihood became {loss.item()} at step {step}.")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return est


def estimate_mi(z: torch.Tensor, zhat: torch.Tensor, est: AuxEstimator) -> torch.Tensor:
    """CLUB estimate over all N² pairings; exactly 0 for a single pair."""
    _check_pair(z, zhat, est)
    ll = est.pairwise_log_likelihood(z, zhat)
    positive = ll.diagonal()
    negative = ll.mean(dim=1)
    return (positive - negative).mean()


def pool_features(f: torch.Tensor) -> torch.Tensor:
    """Global average pool of an activation map to one vector per sample."""
    if f.ndim == 4:
        return f.mean(dim=(2, 3))
    if f.ndim == 2:
        return f
    raise InvalidArgumentError(f"Cannot pool features of shape {tuple(f.shape)}.")


def make_estimators(dims: Mapping[str, int], sel: LayerSelection) -> Dict[str, AuxEstimator]:
    missing = [l for l in sel if l not in dims]
    if missing:
        raise InvalidArgumentError(f"No feature dimension for layers {missing}.")
    return {l: AuxEstimator(dims[l]) for l in sel}


def tapped_features(
    model: Callable, batch: torch.Tensor, sel: LayerSelection
) -> Dict[str, torch.Tensor]:
    """Pooled tap outputs of `model(batch, return_features=True)` at the selected layers."""
    _, feats = model(batch, return_features=True)
    missing = [l for l in sel if l not in feats]
    if missing:
        raise InvalidArgumentError(f"Model has no taps at {missing}.")
    return {l: pool_features(feats[l]) for l in sel}


def fit_layers(
    feats_a: Mapping[str, torch.Tensor],
    feats_b: Mapping[str, torch.Tensor],
    ests: Mapping[str, AuxEstimator],
    steps: int,
    lr: float,
) -> None:
    for layer, est in ests.items():
        fit_aux(feats_a[layer], feats_b[layer], est, steps, lr)


def multilayer_mi(
    model_a: Callable,
    model_b: Callable,
    batch_a: torch.Tensor,
    batch_b: torch.Tensor,
    sel: LayerSelection,
    ests: Mapping[str, AuxEstimator],
) -> Tuple[Dict[str, torch.Tensor], torch.Tensor]:
    """
    Per-layer CLUB estimates between model_a on batch_a and model_b on batch_b.

    :return: ({layer: Î}, Σ_l Î); differentiable through both models.
    """
    if batch_a.shape[0] != batch_b.shape[0]:
        raise InvalidArgumentError("Paired batches must have the same size.")
    missing = [l for l in sel if l not in ests]
    if missing:
        raise InvalidArgumentError(f"No estimator for layers {missing}.")
    fa = tapped_features(model_a, batch_a, sel)
    fb = tapped_features(model_b, batch_b, sel)
    per_layer = {l: estimate_mi(fa[l], fb[l], ests[l]) for l in sel}
    return per_layer, torch.stack(list(per_layer.values())).sum()


def leakage_profile(
    source: Callable,
    source_batch: torch.Tensor,
    candidates: Mapping[str, Callable],
    candidate_batch: torch.Tensor,
    sel: LayerSelection,
    dims: Mapping[str, int],
    steps: int = 200,
    lr: float = 1e-3,
) -> list:
    """
    Per-layer MI between the source model's features on source_batch and each
    candidate's features on candidate_batch, with a fresh estimator fitted per
    (candidate, layer).

    :return: Rows {"model", "layer", "mi"}.
    """
    rows = []
    with torch.no_grad():
        fs = tapped_features(source, source_batch, sel)
    for name, model in candidates.items():
        with torch.no_grad():
            fc = tapped_features(model, candidate_batch, sel)
        ests = make_estimators(dims, sel)
        for layer in sel:
            est = ests[layer].to(fs[layer].device)
            fit_aux(fs[layer], fc[layer], est, steps, lr)
            with torch.no_grad():
                rows.append({"model": name, "layer": layer, "mi": estimate_mi(fs[layer], fc[layer], est).item()})
        logger.info("leakage %s: %s", name, " ".join(f"{r['layer']}={r['mi']:.3f}" for r in rows[-len(sel):]))
    return rows

"""
Classifiers and the per-user mixture of experts.

The real expert is the baseline fine-tuned on authorized images. The two fake
experts start from random weights and are trained only to share as little
information as possible with the real expert: one on benign images, one on
noise images. The ensemble has no gating network; a domain tag picks the
expert.
"""

import copy
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from backend.checkpoints import load_checkpoint, save_checkpoint
from backend.metrics import MetricsLog, as_log, summarize_row
from club import LayerSelection, estimate_mi, fit_layers, make_estimators, tapped_features
from domains import DOMAINS, Domain, DomainTriple, DomainView
from exceptions import InvalidArgumentError, TrainingFailureError
from keys import UserKey
from schemas import ClassifierConfig, ExpertConfig
from utils import loader_workers, resolve_device, seed_everything

logger = logging.getLogger(__name__)

TAPS = ("stage1", "stage2", "stage3", "stage4")


def _stage(in_channels: int, out_channels: int, pool: bool) -> nn.Sequential:
    layers = [nn.MaxPool2d(2)] if pool else []
    layers += [
        nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    ]
    return nn.Sequential(*layers)


class TappedClassifier(nn.Module):
    """
    Four conv-bn-relu ×2 stages with a tap after each, then a linear head.

    Input: (N, 3, H, W)
    Output: (N, K) logits, plus {stage_i: activation} when return_features=True
    """

    def __init__(self, num_classes: int = 10, widths: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        if len(widths) != len(TAPS):
            raise InvalidArgumentError(f"Expected {len(TAPS)} stage widths, got {list(widths)}.")
        self.num_classes = num_classes
        self.widths = tuple(int(w) for w in widths)
        channels = (3, *self.widths)
        self.stages = nn.ModuleList(
            _stage(channels[i], channels[i + 1], pool=i > 0) for i in range(len(TAPS))
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(self.widths[-1], num_classes)

    def forward(self, x: torch.Tensor, return_features: bool = False):
        feats = {}
        for name, stage in zip(TAPS, self.stages):
            x = stage(x)
            feats[name] = x
        logits = self.head(self.pool(x).flatten(1))
        return (logits, feats) if return_features else logits

    @property
    def tap_dims(self) -> Dict[str, int]:
        return dict(zip(TAPS, self.widths))

    @property
    def last_conv(self) -> nn.Conv2d:
        return [m for m in self.stages[-1] if isinstance(m, nn.Conv2d)][-1]

    def descriptor(self) -> Dict[str, Any]:
        return {"arch": "tapped-cnn", "widths": list(self.widths), "num_classes": self.num_classes}

    def freeze_body(self) -> "TappedClassifier":
        for p in self.stages.parameters():
            p.requires_grad_(False)
        return self

    def reset_head(self, num_classes: Optional[int] = None) -> "TappedClassifier":
        self.num_classes = num_classes or self.num_classes
        self.head = nn.Linear(self.widths[-1], self.num_classes).to(self.head.weight.device)
        return self


def save_classifier(model: TappedClassifier, path: str | Path, kind: str = "classifier", metadata: Optional[Dict[str, Any]] = None) -> Path:
    meta = {"descriptor": model.descriptor(), **(metadata or {})}
    return save_checkpoint(path, kind, model.state_dict(), meta)


def load_classifier(path: str | Path, kind: str = "classifier", device: Optional[torch.device] = None) -> Tuple[TappedClassifier, Dict[str, Any]]:
    state, meta = load_checkpoint(path, kind)
    desc = meta["descriptor"]
    model = TappedClassifier(desc["num_classes"], desc["widths"])
    model.load_state_dict(state)
    return model.to(device or torch.device("cpu")).eval(), meta


# ============================================================
# EVALUATION
# ============================================================


def _progress(iterable, desc: str):
    return tqdm(iterable, desc=desc, leave=False, disable=not sys.stderr.isatty())


@torch.no_grad()
def predict_labels(model: Callable, images: torch.Tensor, batch_size: int = 256, device: Optional[torch.device] = None) -> torch.Tensor:
    device = device or _device_of(model)
    if isinstance(model, nn.Module):
        model.eval()
    out = [
        model(images[i : i + batch_size].to(device)).argmax(dim=1).cpu()
        for i in range(0, images.shape[0], batch_size)
    ]
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


@torch.no_grad()
def evaluate_accuracy(model: Callable, dataset: Dataset, batch_size: int = 256, device: Optional[torch.device] = None) -> float:
    """Top-1 accuracy in percent over a dataset of (image, label, ...) items."""
    if len(dataset) == 0:
        raise InvalidArgumentError("Cannot evaluate on an empty dataset.")
    device = device or _device_of(model)
    if isinstance(model, nn.Module):
        model.eval()
    correct = 0
    for batch in DataLoader(dataset, batch_size=batch_size):
        images, labels = batch[0].to(device), batch[1].to(device)
        correct += (model(images).argmax(dim=1) == labels).sum().item()
    return 100.0 * correct / len(dataset)


def domain_accuracies(model: Callable, triple: DomainTriple, batch_size: int = 256) -> Dict[str, float]:
    """Accuracy on each domain of a triple. `model` may be a classifier or a tag-aware callable."""
    out = {}
    model.eval()
    for domain in DOMAINS:
        fn = model
        if getattr(model, "needs_tag", False):
            fn = lambda x, d=domain: model(x, d)  # noqa: E731
        out[domain.value] = evaluate_accuracy(fn, triple.view(domain), batch_size, _device_of(model))
    return out


def _device_of(model: Any) -> torch.device:
    if isinstance(model, nn.Module):
        try:
            return next(model.parameters()).device
        except StopIteration:
            pass
    return getattr(model, "device", torch.device("cpu"))


# ============================================================
# TRAINING
# ============================================================


def _supervised_epochs(
    model: TappedClassifier,
    loader_fn: Callable[[int], Any],
    epochs: int,
    opt: torch.optim.Optimizer,
    sched: Optional[Any],
    log: MetricsLog,
    stage: str,
    extra: Optional[Dict[str, Any]] = None,
) -> TappedClassifier:
    device = _device_of(model)
    last_stable = copy.deepcopy(model.state_dict())
    for epoch in range(1, epochs + 1):
        model.train()
        total, seen, correct = 0.0, 0, 0
        for images, labels in _progress(loader_fn(epoch), f"{stage} {epoch}"):
            images, labels = images.to(device), labels.to(device)
            logits = model(images)
            loss = F.cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise TrainingFailureError(
                    f"{stage} loss became {loss.item()} in epoch {epoch}.", last_stable=last_stable
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * images.shape[0]
            correct += (logits.argmax(dim=1) == labels).sum().item()
            seen += images.shape[0]
        if sched is not None:
            sched.step()
        row = {**(extra or {}), "stage": stage, "epoch": epoch, "loss": total / max(seen, 1), "train_acc": 100.0 * correct / max(seen, 1)}
        log.append(**row)
        logger.info("%s", summarize_row(row))
        last_stable = copy.deepcopy(model.state_dict())
    return model.eval()


def train_baseline(
    train: Dataset,
    cfg: ClassifierConfig,
    num_classes: int,
    seed: int = 0,
    log: Optional[MetricsLog] = None,
    device: Optional[torch.device] = None,
) -> TappedClassifier:
    """Train the unprotected classifier from scratch with momentum SGD and cross-entropy."""
    device = device or resolve_device()
    generator = seed_everything(seed)
    model = TappedClassifier(num_classes, cfg.widths).to(device)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))

    def loader(_epoch):
        for batch in DataLoader(
            train, batch_size=cfg.batch_size, shuffle=True, generator=generator, num_workers=loader_workers()
        ):
            yield batch[0], batch[1]

    return _supervised_epochs(model, loader, cfg.epochs, opt, sched, as_log(log), "baseline")


def finetune_real(
    baseline: TappedClassifier,
    authorized: DomainView,
    cfg: ExpertConfig,
    seed: int = 0,
    log: Optional[MetricsLog] = None,
    momentum: float = 0.9,
    user_id: str = "",
) -> TappedClassifier:
    """
    Fine-tune a copy of the baseline on authorized images only.

    :param authorized: The authorized view of a DomainTriple.
    :return: The real expert; the baseline is left untouched.
    """
    if not isinstance(authorized, DomainView) or authorized.domain != Domain.AUTHORIZED:
        got = getattr(authorized, "domain", type(authorized).__name__)
        raise InvalidArgumentError(f"Real expert trains on the authorized domain, got {got}.")
    real = copy.deepcopy(baseline)
    opt = torch.optim.SGD(real.parameters(), lr=cfg.real_lr, momentum=momentum)
    generator = torch.Generator().manual_seed(seed)
    triple = authorized.triple

    def loader(_epoch):
        for images, labels, _, _ in triple.batches(cfg.batch_size, generator, domains=(Domain.AUTHORIZED,)):
            yield images, labels

    extra = {"user": user_id, "expert": "real"}
    return _supervised_epochs(real, loader, cfg.real_epochs, opt, None, as_log(log), "real", extra)


def train_fake(
    real: TappedClassifier,
    target: Domain | str,
    triple: DomainTriple,
    sel: LayerSelection,
    cfg: ExpertConfig,
    seed: int = 0,
    log: Optional[MetricsLog] = None,
    user_id: str = "",
) -> TappedClassifier:
    """
    Train a fake expert for the benign or noise domain.

    Each iteration fits the per-layer estimators on (real on authorized, fake on
    target) feature pairs for `cfg.estimator_steps` steps, then takes one Adam
    step on the fake expert that lowers the summed MI. No label loss is used.

    :return: The fake expert; with 0 iterations, its random initialization.
    """
    target = Domain(target)
    if target == Domain.AUTHORIZED:
        raise InvalidArgumentError("Fake experts target the benign or noise domain.")
    sel.check(TAPS)
    device = _device_of(real)
    generator = seed_everything(seed)
    fake = TappedClassifier(real.num_classes, real.widths).to(device)
    ests = {l: e.to(device) for l, e in make_estimators(fake.tap_dims, sel).items()}
    opt = torch.optim.Adam(fake.parameters(), lr=cfg.fake_lr)
    real.eval()
    log = as_log(log)
    every = max(1, cfg.fake_iterations // 10)
    name = f"fake_{target.value}"

    for it in _progress(range(1, cfg.fake_iterations + 1), name):
        idx = torch.randint(0, len(triple), (cfg.batch_size,), generator=generator).tolist()
        anchor = triple.images(Domain.AUTHORIZED, idx).to(device)
        paired = triple.images(target, idx).to(device)
        with torch.no_grad():
            fr = tapped_features(real, anchor, sel)

        fake.train()
        ff = tapped_features(fake, paired, sel)
        fit_layers(fr, {l: f.detach() for l, f in ff.items()}, ests, cfg.estimator_steps, cfg.estimator_lr)

        per_layer = {l: estimate_mi(fr[l], ff[l], ests[l]) for l in sel}
        loss = torch.stack(list(per_layer.values())).sum()
        if not torch.isfinite(loss):
            raise TrainingFailureError(f"{name} MI became {loss.item()} at iteration {it}.")
        opt.zero_grad()
        loss.backward()
        opt.step()

        if it % every == 0 or it == cfg.fake_iterations:
            for layer, mi in per_layer.items():
                log.append(user=user_id, expert=name, step=it, layer=layer, mi=mi.item())
            logger.info("%s it=%d mi=%.4f", name, it, loss.item())

    return fake.eval()


# ============================================================
# MIXTURE OF EXPERTS
# ============================================================


@dataclass
class ExpertEnsemble:
    real: TappedClassifier
    fake_benign: TappedClassifier
    fake_noise: TappedClassifier
    key: Optional[UserKey] = None

    needs_tag = True

    def expert(self, tag: Domain | str) -> TappedClassifier:
        try:
            domain = Domain(tag)
        except ValueError as e:
            raise InvalidArgumentError(f"Unknown domain tag '{tag}'.") from e
        return {
            Domain.AUTHORIZED: self.real,
            Domain.BENIGN: self.fake_benign,
            Domain.NOISE: self.fake_noise,
        }[domain]

    def eval(self) -> "ExpertEnsemble":
        for m in (self.real, self.fake_benign, self.fake_noise):
            m.eval()
        return self

    @property
    def device(self) -> torch.device:
        return _device_of(self.real)

    def __call__(self, x: torch.Tensor, tag, return_features: bool = False):
        return moe_forward(self, x, tag, return_features)


def moe_forward(ens: ExpertEnsemble, x: torch.Tensor, tag, return_features: bool = False):
    """
    Dispatch to the expert of a domain tag.

    :param tag: One Domain (or its name) for the whole batch, or a tensor of
                per-sample domain indices.
    """
    if not torch.is_tensor(tag):
        return ens.expert(tag)(x, return_features=return_features)

    tags = tag.to(x.device).long()
    if tags.shape != (x.shape[0],):
        raise InvalidArgumentError(f"Expected one tag per sample, got shape {tuple(tags.shape)}.")
    if ((tags < 0) | (tags >= len(DOMAINS))).any():
        raise InvalidArgumentError(f"Unknown domain index in {tags.unique().tolist()}.")

    logits, feats = None, {}
    for domain in DOMAINS:
        mask = tags == domain.index
        if not mask.any():
            continue
        out, f = ens.expert(domain)(x[mask], return_features=True)
        if logits is None:
            logits = out.new_empty((x.shape[0], out.shape[1]))
        logits[mask] = out
        for name, value in f.items():
            if name not in feats:
                feats[name] = value.new_empty((x.shape[0], *value.shape[1:]))
            feats[name][mask] = value
    return (logits, feats) if return_features else logits

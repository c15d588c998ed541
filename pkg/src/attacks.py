"""
Robustness harness: attacks an adversary can mount on a stolen protected model.

Every attack works on a deep copy, so the model handed in (and its checkpoint)
is never modified.
"""

import copy
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

from matplotlib.figure import Figure
import torch
import torch.nn.functional as F
import torch.nn.utils.prune as prune
from torch import nn

from domains import ImageSet
from exceptions import InvalidArgumentError, TrainingFailureError
from experts import TappedClassifier, evaluate_accuracy
from schemas import AttackResult
from stegonet import DenseEncoder

logger = logging.getLogger(__name__)

FINETUNE_STRATEGIES = ("FTAL", "FTLL", "RTAL", "RTLL")
PRUNE_MODES = ("WP", "FP")


def _unwrap(model) -> TappedClassifier:
    """Deep copy of the classifier inside a ProtectedModel (or of a bare classifier)."""
    inner = getattr(model, "model", model)
    if not isinstance(inner, TappedClassifier):
        raise InvalidArgumentError(f"Cannot attack a {type(model).__name__}.")
    return copy.deepcopy(inner)


@contextmanager
def _seeded_init(seed: int) -> Iterator[None]:
    """Deterministic layer initialization; the caller's global RNG stream is restored on exit."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _score(model: nn.Module, benign_test: ImageSet, authorized_test: Optional[ImageSet]) -> Tuple[float, Optional[float]]:
    benign = evaluate_accuracy(model, benign_test)
    authorized = evaluate_accuracy(model, authorized_test) if authorized_test is not None else None
    return benign, authorized


def _train_head_or_all(
    model: TappedClassifier,
    train: ImageSet,
    params: List[nn.Parameter],
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    body_frozen: bool,
) -> TappedClassifier:
    device = next(model.parameters()).device
    opt = torch.optim.SGD(params, lr=lr, momentum=0.9)
    generator = torch.Generator().manual_seed(seed)
    for epoch in range(1, epochs + 1):
        model.train()
        if body_frozen:
            model.stages.eval()
        order = torch.randperm(len(train), generator=generator)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            images, labels = train.images[idx].to(device), train.labels[idx].to(device)
            loss = F.cross_entropy(model(images), labels)
            if not torch.isfinite(loss):
                raise TrainingFailureError(f"Attack loss became {loss.item()} in epoch {epoch}.")
            opt.zero_grad()
            loss.backward()
            opt.step()
        logger.debug("attack epoch %d loss=%.4f", epoch, loss.item())
    return model.eval()


def finetune_attack(
    model,
    strategy: str,
    train_subset: ImageSet,
    benign_test: ImageSet,
    authorized_test: Optional[ImageSet] = None,
    epochs: int = 30,
    lr: float = 0.005,
    batch_size: int = 128,
    seed: int = 0,
    baseline: Optional[float] = None,
    fraction: Optional[float] = None,
) -> Tuple[TappedClassifier, AttackResult]:
    """
    Fine-tune a copy on a benign subset.

    FTAL/FTLL update all layers / the last layer; RTAL/RTLL first re-initialize
    the last layer, then update all layers / the last layer.
    """
    if strategy not in FINETUNE_STRATEGIES:
        raise InvalidArgumentError(f"Unknown fine-tuning strategy '{strategy}'; expected one of {FINETUNE_STRATEGIES}.")
    if len(train_subset) == 0:
        raise InvalidArgumentError("Fine-tuning subset is empty.")
    attacked = _unwrap(model)
    if strategy.startswith("RT"):
        with _seeded_init(seed):
            attacked.reset_head()
    last_only = strategy.endswith("LL")
    params = list(attacked.head.parameters()) if last_only else list(attacked.parameters())
    _train_head_or_all(attacked, train_subset, params, epochs, lr, batch_size, seed, body_frozen=last_only)

    benign, authorized = _score(attacked, benign_test, authorized_test)
    result = AttackResult(
        attack=strategy,
        params={"fraction": fraction, "epochs": epochs, "lr": lr, "seed": seed, "samples": len(train_subset)},
        benign_acc=benign,
        authorized_acc=authorized,
        baseline=baseline,
    )
    logger.info("%s: benign=%.2f authorized=%s", strategy, benign, authorized)
    return attacked, result


def weight_sparsity(model: nn.Module) -> float:
    """Fraction of exactly-zero weights over all conv and linear layers."""
    weights = [m.weight for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    zeros = sum((w == 0).sum().item() for w in weights)
    return zeros / sum(w.numel() for w in weights)


def prune_attack(
    model,
    mode: str,
    amount: float,
    benign_test: ImageSet,
    authorized_test: Optional[ImageSet] = None,
    baseline: Optional[float] = None,
) -> Tuple[TappedClassifier, AttackResult]:
    """
    WP: global L1 pruning of `amount` of all conv/linear weights.
    FP: L1 pruning of `amount` of the last convolutional layer's filters.
    """
    if mode not in PRUNE_MODES:
        raise InvalidArgumentError(f"Unknown pruning mode '{mode}'; expected one of {PRUNE_MODES}.")
    if not 0.0 <= amount < 1.0:
        raise InvalidArgumentError(f"Pruning amount {amount} outside [0, 1).")
    attacked = _unwrap(model)
    if amount > 0:
        if mode == "WP":
            params = [(m, "weight") for m in attacked.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
            prune.global_unstructured(params, pruning_method=prune.L1Unstructured, amount=amount)
            for m, name in params:
                prune.remove(m, name)
        else:
            conv = attacked.last_conv
            prune.ln_structured(conv, "weight", amount=amount, n=1, dim=0)
            prune.remove(conv, "weight")

    benign, authorized = _score(attacked, benign_test, authorized_test)
    result = AttackResult(
        attack=mode,
        params={"amount": round(amount, 4), "sparsity": round(weight_sparsity(attacked), 6)},
        benign_acc=benign,
        authorized_acc=authorized,
        baseline=baseline,
    )
    logger.info("%s %.2f: benign=%.2f authorized=%s", mode, amount, benign, authorized)
    return attacked, result


def prune_sweep(
    model,
    mode: str,
    amounts: Iterable[float],
    benign_test: ImageSet,
    authorized_test: Optional[ImageSet] = None,
    baseline: Optional[float] = None,
) -> List[AttackResult]:
    return [prune_attack(model, mode, a, benign_test, authorized_test, baseline)[1] for a in amounts]


def fp_amounts(step: float) -> List[float]:
    n = int(round(1 / step))
    return [round(i * step, 4) for i in range(n) if i * step < 1]


def plot_pruning_curves(results: Sequence[AttackResult], path: str | Path) -> Path:
    """Benign and authorized accuracy against pruning amount, one panel per mode."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig = Figure(figsize=(10, 4))
    axes = fig.subplots(1, 2, sharey=True)
    for ax, mode in zip(axes, PRUNE_MODES):
        rows = sorted((r for r in results if r.attack == mode), key=lambda r: r.params["amount"])
        xs = [100 * r.params["amount"] for r in rows]
        ax.plot(xs, [r.benign_acc for r in rows], marker="o", label="benign")
        if rows and rows[0].authorized_acc is not None:
            ax.plot(xs, [r.authorized_acc for r in rows], marker="s", label="authorized")
        ax.set_title(mode)
        ax.set_xlabel("pruned (%)")
        ax.grid(alpha=0.3)
        ax.legend()
    axes[0].set_ylabel("accuracy (%)")
    fig.tight_layout()
    fig.savefig(path)
    return path


def transfer_attack(
    model,
    new_train: ImageSet,
    new_test: ImageSet,
    epochs: int = 30,
    lr: float = 0.005,
    batch_size: int = 128,
    seed: int = 0,
    expected_shape: Optional[Tuple[int, int, int]] = None,
    baseline: Optional[float] = None,
    target: str = "protected",
) -> Tuple[TappedClassifier, AttackResult]:
    """Freeze every layer but a fresh last layer sized for the new task, then train that layer."""
    if new_train.image_shape != new_test.image_shape:
        raise InvalidArgumentError("Transfer train and test images differ in shape.")
    if expected_shape is not None and new_train.image_shape != tuple(expected_shape):
        raise InvalidArgumentError(
            f"Transfer images {new_train.image_shape} do not match the model input {tuple(expected_shape)}."
        )
    if len(new_train) == 0:
        raise InvalidArgumentError("Transfer training set is empty.")
    attacked = _unwrap(model)
    attacked.freeze_body()
    with _seeded_init(seed):
        attacked.reset_head(new_train.num_classes)
    _train_head_or_all(attacked, new_train, list(attacked.head.parameters()), epochs, lr, batch_size, seed, body_frozen=True)
    benign, _ = _score(attacked, new_test, None)
    result = AttackResult(
        attack="transfer",
        params={"epochs": epochs, "lr": lr, "seed": seed, "classes": new_train.num_classes},
        benign_acc=benign,
        baseline=baseline,
        target=target,
    )
    logger.info("transfer (%s): accuracy=%.2f", target, benign)
    return attacked, result


def reverse_engineer(
    model,
    benign_subset: ImageSet,
    test: ImageSet,
    authorized_pairs: Optional[torch.Tensor] = None,
    lambda4: float = 10.0,
    steps: int = 500,
    lr: float = 1e-3,
    batch_size: int = 64,
    hidden_size: int = 32,
    seed: int = 0,
    baseline: Optional[float] = None,
) -> Tuple[DenseEncoder, AttackResult]:
    """
    Train a key-less encoder-shaped generator G so that the frozen model
    classifies G(x) correctly.

    Without pairs (first assumption) the loss is cross-entropy only; with
    authorized images aligned to `benign_subset` (second assumption) it adds
    λ4·MSE(G(x), x⁺).
    """
    if len(benign_subset) == 0 or len(test) == 0:
        raise InvalidArgumentError("Reverse engineering needs non-empty training and test sets.")
    if authorized_pairs is not None and authorized_pairs.shape != benign_subset.images.shape:
        raise InvalidArgumentError("Authorized pairs must align with the benign subset.")
    victim = _unwrap(model).eval()
    for p in victim.parameters():
        p.requires_grad_(False)
    device = next(victim.parameters()).device
    with _seeded_init(seed):
        generator = DenseEncoder(0, hidden_size).to(device)
    opt = torch.optim.Adam(generator.parameters(), lr=lr)
    rng = torch.Generator().manual_seed(seed)

    for step in range(1, steps + 1):
        generator.train()
        idx = torch.randint(0, len(benign_subset), (min(batch_size, len(benign_subset)),), generator=rng)
        x, y = benign_subset.images[idx].to(device), benign_subset.labels[idx].to(device)
        out = generator(x).clamp(0.0, 1.0)
        loss = F.cross_entropy(victim(out), y)
        if authorized_pairs is not None:
            loss = loss + lambda4 * F.mse_loss(out, authorized_pairs[idx].to(device))
        if not torch.isfinite(loss):
            raise TrainingFailureError(f"Generator loss became {loss.item()} at step {step}.")
        opt.zero_grad()
        loss.backward()
        opt.step()

    generator.eval()
    with torch.no_grad():
        forged = torch.cat(
            [generator(test.images[i : i + 256].to(device)).clamp(0.0, 1.0).cpu() for i in range(0, len(test), 256)]
        )
    accuracy = evaluate_accuracy(victim, ImageSet(forged, test.labels, test.num_classes))
    assumption = 2 if authorized_pairs is not None else 1
    result = AttackResult(
        attack=f"reverse-a{assumption}",
        params={"steps": steps, "lr": lr, "lambda4": lambda4 if assumption == 2 else None, "samples": len(benign_subset), "seed": seed},
        benign_acc=accuracy,
        baseline=baseline,
    )
    logger.info("reverse engineering (assumption %d): accuracy=%.2f", assumption, accuracy)
    return generator, result

"""
Ownership verification and culprit tracing.

Two routes lead from a suspect back to a user:

- Intercepted images: decode each image with the private decoder, vote the
  key out and compare it with every registered key (tracing success rate).
- Black-box queries: measure a suspect endpoint's accuracy on benign query
  images and on the same images encoded with each registered key. A pirated
  copy of user j's model is accurate only under k_j.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from backend.endpoints import QueryEndpoint
from domains import ImageSet
from exceptions import InvalidArgumentError, ToolkitException, TransportError
from experts import predict_labels
from keys import KeyRegistry, hamming_distance
from schemas import KeyAccuracy, KeyTsr, TraceReport, Verdict, VerificationReport
from stegonet import StegoCodec, encode_batched

logger = logging.getLogger(__name__)


def trace_intercepted(
    images: torch.Tensor,
    codec: StegoCodec,
    registry: KeyRegistry,
    eps3: int = 1,
    batch_size: int = 256,
    config_hash: Optional[str] = None,
) -> TraceReport:
    """
    Tracing success rate of every registered key over intercepted images.

    TSR(k) is the fraction of images whose extracted key lies within eps3 of k.
    The culprit is the key with the highest TSR, if that TSR is above 0.
    """
    if len(registry) == 0:
        raise InvalidArgumentError("Cannot trace against an empty registry.")
    if images.shape[0] == 0:
        raise InvalidArgumentError("No intercepted images to trace.")
    codec.eval()
    extracted = []
    for start in range(0, images.shape[0], batch_size):
        extracted.extend(codec.extract_keys(images[start : start + batch_size]))

    per_key = []
    for entry in registry:
        hits = sum(hamming_distance(k, entry.key) <= eps3 for k in extracted)
        per_key.append(KeyTsr(user_id=entry.user_id, tsr=hits / len(extracted)))

    best = max(per_key, key=lambda t: t.tsr)
    culprit = best.user_id if best.tsr > 0 else None
    logger.info("Traced %d images: culprit=%s tsr=%.3f", len(extracted), culprit, best.tsr)
    return TraceReport(
        per_key=per_key,
        culprit=culprit,
        confidence=best.tsr,
        eps3=eps3,
        images=len(extracted),
        config_hash=config_hash,
    )


def _accuracy(labels: torch.Tensor, truth: torch.Tensor) -> float:
    return 100.0 * (labels.cpu() == truth.cpu()).float().mean().item()


def decide_verdict(
    benign_acc: float,
    per_key: List[KeyAccuracy],
    baseline_acc: float,
    eps1: float,
    eps2: float,
) -> Tuple[Verdict, Optional[str], List[str]]:
    """
    A key unlocks the suspect when its accuracy is within eps1 of the baseline
    and more than eps2 above the benign accuracy. The suspect is locked when
    its benign accuracy is more than eps2 below the baseline.

    pirated: locked and exactly one key unlocks.
    inconclusive: several keys unlock (listed as collusion), or the pattern fits neither case.
    innocent: not locked and no key unlocks.
    """
    for k in per_key:
        k.unlocks = k.accuracy >= baseline_acc - eps1 and k.accuracy - benign_acc > eps2
    unlocking = [k.user_id for k in per_key if k.unlocks]
    locked = benign_acc < baseline_acc - eps2
    if len(unlocking) > 1:
        return Verdict.INCONCLUSIVE, None, unlocking
    if locked and len(unlocking) == 1:
        return Verdict.PIRATED, unlocking[0], []
    if not locked and not unlocking:
        return Verdict.INNOCENT, None, []
    return Verdict.INCONCLUSIVE, None, []


def blackbox_verify(
    endpoint: QueryEndpoint,
    queries: ImageSet,
    codec: StegoCodec,
    registry: KeyRegistry,
    eps1: float,
    eps2: float,
    baseline_acc: float,
    workers: int = 4,
    suspect: Optional[str] = None,
    config_hash: Optional[str] = None,
) -> VerificationReport:
    """
    Query the suspect with D_q and with D_q encoded under every registered key.

    Queries are issued concurrently; the report is assembled in registry order.
    On endpoint failure a TransportError carries the partial report.
    """
    if len(queries) == 0:
        raise InvalidArgumentError("The query set is empty.")
    if len(registry) == 0:
        raise InvalidArgumentError("Cannot verify against an empty registry.")
    suspect = suspect or getattr(endpoint, "name", "suspect")
    variants: Dict[str, torch.Tensor] = {"": queries.images}
    for entry in registry:
        variants[entry.user_id] = encode_batched(codec, queries.images, entry.key)

    accuracies: Dict[str, float] = {}
    failure: Optional[BaseException] = None
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {name: pool.submit(endpoint.predict, images) for name, images in variants.items()}
        for name, fut in futures.items():
            try:
                accuracies[name] = _accuracy(fut.result(), queries.labels)
            except Exception as e:
                failure = failure or e

    benign_acc = accuracies.get("", 0.0)
    per_key = [
        KeyAccuracy(user_id=e.user_id, accuracy=accuracies[e.user_id])
        for e in registry
        if e.user_id in accuracies
    ]

    if failure is not None:
        partial = VerificationReport(
            suspect=suspect,
            verdict=Verdict.INCONCLUSIVE,
            benign_accuracy=benign_acc,
            baseline_accuracy=baseline_acc,
            per_key=per_key,
            eps1=eps1,
            eps2=eps2,
            error=str(failure),
            config_hash=config_hash,
        )
        if isinstance(failure, ToolkitException) and not isinstance(failure, TransportError):
            raise failure
        raise TransportError(f"Querying {suspect} failed: {failure}", partial=partial) from failure

    verdict, matched, collusion = decide_verdict(benign_acc, per_key, baseline_acc, eps1, eps2)
    logger.info("Suspect %s: %s (matched=%s, benign=%.2f)", suspect, verdict.value, matched, benign_acc)
    return VerificationReport(
        suspect=suspect,
        verdict=verdict,
        matched_user=matched,
        benign_accuracy=benign_acc,
        baseline_accuracy=baseline_acc,
        per_key=per_key,
        eps1=eps1,
        eps2=eps2,
        collusion=collusion,
        config_hash=config_hash,
    )


def is_correct(truth: Optional[str], report: VerificationReport) -> bool:
    """Innocent suspects must be declared innocent; pirated ones must name the right user."""
    if truth is None:
        return report.verdict == Verdict.INNOCENT
    return report.verdict == Verdict.PIRATED and report.matched_user == truth


def tracing_accuracy(results: Sequence[Tuple[Optional[str], VerificationReport]]) -> float:
    """
    Percentage of suspects traced correctly.

    :param results: (ground truth user id or None for innocent, report) per suspect.
    """
    if not results:
        raise InvalidArgumentError("Tracing accuracy needs at least one suspect.")
    return 100.0 * sum(is_correct(t, r) for t, r in results) / len(results)


def key_confusion_matrix(
    models: Mapping[str, object],
    registry: KeyRegistry,
    test: ImageSet,
    codec: StegoCodec,
    batch_size: int = 256,
) -> pd.DataFrame:
    """
    Accuracy of every protected model (rows) on test images encoded with every
    registered key (columns), plus a "benign" column for raw images.
    """
    encoded = {e.user_id: encode_batched(codec, test.images, e.key) for e in registry}
    rows = {}
    for name, model in models.items():
        row = {"benign": _accuracy(predict_labels(model, test.images, batch_size), test.labels)}
        for user_id, images in encoded.items():
            row[user_id] = _accuracy(predict_labels(model, images, batch_size), test.labels)
        rows[name] = row
    frame = pd.DataFrame.from_dict(rows, orient="index")
    frame.index.name = "model"
    return frame


def diagonal_margin(frame: pd.DataFrame) -> float:
    """Smallest gap between a model's own key and its best other key; positive means a dominant diagonal."""
    margins = []
    for model in frame.index:
        if model not in frame.columns:
            continue
        others = frame.loc[model].drop(labels=[model, "benign"], errors="ignore")
        if len(others):
            margins.append(frame.loc[model, model] - others.max())
    return float(np.min(margins)) if margins else float("nan")

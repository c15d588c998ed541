"""
Pipeline stages behind the command line.

Each cmd_* function takes a validated PipelineConfig and a run directory,
writes its artifacts there and returns a plain-data summary for the command
envelope.
"""

import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from PIL import Image

from attacks import (
    FINETUNE_STRATEGIES,
    fp_amounts,
    finetune_attack,
    plot_pruning_curves,
    prune_sweep,
    reverse_engineer,
    transfer_attack,
)
from backend.checkpoints import read_metadata
from backend.endpoints import open_endpoint
from backend.metrics import MetricsLog
from backend.rundir import RunDirectory
from club import LayerSelection, leakage_profile
from distill import ProtectedModel, distill_student
from domains import Domain, DomainTriple, ImageSet, build_domains, load_dataset
from exceptions import DataError, InvalidArgumentError, NotFoundError, ToolkitException
from experts import (
    TAPS,
    ExpertEnsemble,
    TappedClassifier,
    domain_accuracies,
    evaluate_accuracy,
    finetune_real,
    load_classifier,
    save_classifier,
    train_baseline,
    train_fake,
)
from keys import KeyRegistry, UserKey, flip_bits, generate_key, hamming_distance, random_key
from schemas import FlipPoint, Manifest, ManifestEntry, PipelineConfig
from stegonet import StegoCodec, bit_accuracy, encode_batched, iqa, residual_transplant_rate, train_codec
from utils import resolve_device
from verify import (
    blackbox_verify,
    diagonal_margin,
    key_confusion_matrix,
    trace_intercepted,
    tracing_accuracy,
)

logger = logging.getLogger(__name__)

EXPERT_ROLES = ("real", "fake_benign", "fake_noise")


def user_seed(seed: int, user_id: str) -> int:
    """Stable per-user seed derived from a base seed."""
    digest = hashlib.sha256(f"{seed}:{user_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def _settings() -> Dict[str, Any]:
    from main import config

    return config.settings


def _log(run: RunDirectory, name: str, cfg: PipelineConfig) -> MetricsLog:
    return MetricsLog(run.report(f"{name}.csv"), cfg.config_hash())


def _data(cfg: PipelineConfig, split: str) -> ImageSet:
    return load_dataset(cfg.dataset, split, seed=cfg.seeds.base, root=_settings().get("DATA_DIR"))


def _check_hash(meta: Dict[str, Any], cfg: PipelineConfig, what: str) -> None:
    found = meta.get("config_hash")
    if found is not None and found != cfg.config_hash():
        raise DataError(
            f"{what} was produced with configuration {found[:12]}, current is {cfg.config_hash()[:12]}."
        )


# ============================================================
# BASELINE AND CODEC
# ============================================================


def cmd_train_baseline(cfg: PipelineConfig, run: RunDirectory) -> Dict[str, Any]:
    with run:
        train, test = _data(cfg, "train"), _data(cfg, "test")
        model = train_baseline(
            train,
            cfg.classifier,
            cfg.dataset.num_classes,
            seed=cfg.seeds.base,
            log=_log(run, "baseline", cfg),
            device=resolve_device(),
        )
        accuracy = evaluate_accuracy(model, test)
        save_classifier(
            model,
            run.baseline,
            metadata={"accuracy": accuracy, "config_hash": cfg.config_hash(), "seeds": cfg.seeds.model_dump()},
        )
    logger.info("Baseline accuracy %.2f%%", accuracy)
    return {"checkpoint": str(run.baseline), "accuracy": accuracy}


def key_extraction_rate(codec: StegoCodec, images: torch.Tensor, eps3: int, seed: int) -> float:
    """Fraction of images whose key, embedded at random per image, is recovered within eps3."""
    rng = np.random.default_rng(seed)
    hits = 0
    for image in images:
        key = random_key(codec.r, codec.key_channels, rng)
        extracted = codec.extract_keys(encode_batched(codec, image.unsqueeze(0), key))[0]
        hits += hamming_distance(extracted, key) <= eps3
    return hits / max(len(images), 1)


def cmd_train_codec(cfg: PipelineConfig, run: RunDirectory) -> Dict[str, Any]:
    with run:
        train, test = _data(cfg, "train"), _data(cfg, "test")
        covers = train.take(cfg.dataset.codec_subset)
        codec = train_codec(
            covers.images,
            cfg.dataset.image_size,
            cfg.key.c,
            cfg.key.r,
            cfg.codec,
            seed=cfg.seeds.base,
            log=_log(run, "codec", cfg),
            device=resolve_device(),
        )
        held_out = test.take(500).images
        key = generate_key("codec-check", cfg.key.r, cfg.key.c, cfg.seeds.keys)
        stego = encode_batched(codec, held_out, key)
        summary = {
            "bit_accuracy": bit_accuracy(codec, held_out, seed=cfg.seeds.base),
            "extraction_rate": key_extraction_rate(codec, held_out, cfg.verify.eps3, cfg.seeds.keys),
            "iqa": iqa(held_out, stego).model_dump(),
            "transplant_failure_rate": residual_transplant_rate(codec, held_out, key, cfg.verify.eps3)
            if len(held_out) > 1
            else None,
            "config_hash": cfg.config_hash(),
        }
        codec.save(run.codec, {"config_hash": cfg.config_hash(), "dataset": cfg.dataset.name})
        run.write_json(run.report("codec.json"), summary)
    logger.info("Codec extraction rate %.3f", summary["extraction_rate"])
    return {"checkpoint": str(run.codec), **summary}


# ============================================================
# PROTECT
# ============================================================


def _load_codec(run: RunDirectory, cfg: PipelineConfig) -> StegoCodec:
    codec = StegoCodec.load(run.require("codec"), resolve_device())
    _check_hash(codec.metadata, cfg, "The codec")
    return codec


def _load_baseline(run: RunDirectory, cfg: PipelineConfig):
    model, meta = load_classifier(run.require("baseline"), "classifier", resolve_device())
    _check_hash(meta, cfg, "The baseline")
    return model, meta.get("accuracy")


def _expert(
    run: RunDirectory,
    user_id: str,
    role: str,
    cfg: PipelineConfig,
    train_fn,
) -> TappedClassifier:
    path = run.expert(user_id, role)
    if path.is_file():
        model, meta = load_classifier(path, "expert", resolve_device())
        _check_hash(meta, cfg, f"Expert {user_id}/{role}")
        logger.info("Reusing expert %s/%s", user_id, role)
        return model
    model = train_fn()
    save_classifier(model, path, "expert", {"user_id": user_id, "role": role, "config_hash": cfg.config_hash()})
    return model


def _protected(run: RunDirectory, user_id: str, simple: bool, cfg: PipelineConfig, train_fn) -> ProtectedModel:
    path = run.protected(user_id, simple)
    if path.is_file():
        model = ProtectedModel.load(path, resolve_device())
        if model.config_hash != cfg.config_hash():
            raise DataError(f"{path} was produced with a different configuration.")
        return model
    model = train_fn()
    model.save(path)
    return model


def _registry(run: RunDirectory, cfg: PipelineConfig) -> KeyRegistry:
    if run.registry.is_file():
        registry = KeyRegistry.load(run.registry)
        if registry.config_hash not in (None, cfg.config_hash()):
            raise DataError(f"Registry {run.registry} belongs to a different configuration.")
        return registry
    return KeyRegistry(config_hash=cfg.config_hash())


def _user_key(registry: KeyRegistry, user_id: str, cfg: PipelineConfig) -> UserKey:
    key = generate_key(user_id, cfg.key.r, cfg.key.c, cfg.seeds.keys + cfg.seeds.base)
    try:
        existing = registry.get(user_id).key
    except NotFoundError:
        return key
    if not existing.same_bits(key):
        raise DataError(f"Registered key of '{user_id}' does not match its derivation.")
    return existing


def protect_user(
    cfg: PipelineConfig,
    run: RunDirectory,
    user_id: str,
    key: UserKey,
    codec: StegoCodec,
    baseline: TappedClassifier,
    train: ImageSet,
    test: ImageSet,
) -> Dict[str, Any]:
    """Domains → real expert → two fake experts → MoE → student(s) for one user."""
    seed = user_seed(cfg.seeds.domains + cfg.seeds.base, user_id)
    sel = LayerSelection(tuple(cfg.layers)).check(TAPS)
    triple = build_domains(train, key, codec, seed).materialize(cache_dir=_settings().get("CACHE_DIR"))
    experts_log = _log(run, "experts", cfg)

    real = _expert(
        run, user_id, "real", cfg,
        lambda: finetune_real(baseline, triple.authorized, cfg.experts, seed, experts_log,
                              cfg.classifier.momentum, user_id),
    )
    fakes = {
        role: _expert(
            run, user_id, role, cfg,
            lambda d=domain: train_fake(real, d, triple, sel, cfg.experts, seed + 1 + d.index, experts_log, user_id),
        )
        for role, domain in (("fake_benign", Domain.BENIGN), ("fake_noise", Domain.NOISE))
    }
    ens = ExpertEnsemble(real, fakes["fake_benign"], fakes["fake_noise"], key)

    def distil(dcfg):
        return lambda: distill_student(
            ens, triple, dcfg, sel, seed, _log(run, "distill", cfg),
            cfg.dataset.augmentation, cfg.dataset.augment_before_encode, cfg.config_hash(),
        )

    protected = _protected(run, user_id, False, cfg, distil(cfg.distill))
    simple = None
    if cfg.distill.simple_ablation:
        simple = _protected(run, user_id, True, cfg, distil(cfg.distill.simple()))

    # accuracy triples on held-out images
    test_triple = build_domains(test, key, codec, seed + 7).materialize()
    accuracy_log = _log(run, "accuracy", cfg)
    candidates = {"unprotected": baseline, "moe": ens, "protected": protected}
    if simple is not None:
        candidates["simple"] = simple
    triples = {}
    for name, model in candidates.items():
        acc = domain_accuracies(model, test_triple)
        accuracy_log.append(user=user_id, model=name, **acc)
        triples[name] = acc

    _leakage(cfg, run, user_id, sel, ens, baseline, protected, simple, test_triple)
    return {"protected": protected, "simple": simple, "accuracy": triples["protected"]}


def _leakage(cfg, run, user_id, sel, ens, baseline, protected, simple, triple: DomainTriple) -> None:
    n = min(len(triple), 256)
    idx = list(range(n))
    device = ens.device
    authorized = triple.images(Domain.AUTHORIZED, idx).to(device)
    benign = triple.images(Domain.BENIGN, idx).to(device)
    candidates = {"unprotected": baseline, "fake_benign": ens.fake_benign, "protected": protected.model}
    if simple is not None:
        candidates["simple"] = simple.model
    rows = leakage_profile(
        ens.real, authorized, candidates, benign, sel, ens.real.tap_dims,
        steps=cfg.experts.estimator_steps * 40, lr=cfg.experts.estimator_lr,
    )
    log = _log(run, "leakage", cfg)
    for row in rows:
        log.append(user=user_id, **row)


def cmd_protect(cfg: PipelineConfig, users: Optional[Sequence[str]], run: RunDirectory) -> Dict[str, Any]:
    """
    Produce one protected model per user and record their keys.

    Existing expert and student checkpoints of the same configuration are reused,
    so an interrupted run resumes where it stopped.
    """
    users = list(users or cfg.users)
    if not users:
        raise InvalidArgumentError("No users given; pass --users or set `users` in the configuration.")
    if len(set(users)) != len(users):
        raise InvalidArgumentError("User ids must be unique.")

    with run:
        codec = _load_codec(run, cfg)
        baseline, baseline_acc = _load_baseline(run, cfg)
        train, test = _data(cfg, "train"), _data(cfg, "test")
        registry = _registry(run, cfg)
        manifest = Manifest(
            run=run.name,
            config_hash=cfg.config_hash(),
            seeds=cfg.seeds.model_dump(),
            baseline_accuracy=baseline_acc,
        )
        models: Dict[str, ProtectedModel] = {}

        for user_id in users:
            key = _user_key(registry, user_id, cfg)
            out = protect_user(cfg, run, user_id, key, codec, baseline, train, test)
            models[user_id] = out["protected"]
            checkpoint = str(run.protected(user_id))
            if any(e.user_id == user_id for e in registry):
                registry.set_checkpoint(user_id, checkpoint)
            else:
                registry.register(user_id, key, checkpoint)
            registry.save(run.registry)
            manifest.entries.append(
                ManifestEntry(
                    user_id=user_id,
                    key_fingerprint=key.fingerprint(),
                    checkpoint=checkpoint,
                    simple_checkpoint=str(run.protected(user_id, True)) if out["simple"] else None,
                    authorized_acc=out["accuracy"]["authorized"],
                    benign_acc=out["accuracy"]["benign"],
                    noise_acc=out["accuracy"]["noise"],
                )
            )

        confusion = key_confusion_matrix(models, registry, test, codec)
        confusion.to_csv(run.report("confusion.csv"))
        run.write_json(run.manifest, manifest.model_dump(mode="json"))
    return manifest.model_dump(mode="json")


# ============================================================
# VERIFY / TRACE
# ============================================================


def cmd_verify(
    cfg: PipelineConfig,
    run: RunDirectory,
    suspects: Sequence[str],
    truths: Optional[Sequence[Optional[str]]] = None,
) -> Dict[str, Any]:
    """
    Black-box verification of each suspect endpoint; with ground truth
    (a user id, or None for an innocent suspect) the tracing accuracy is added.
    """
    if not suspects:
        raise InvalidArgumentError("No suspects given.")
    if truths is not None and len(truths) != len(suspects):
        raise InvalidArgumentError("Give one ground-truth label per suspect.")
    with run:
        registry = KeyRegistry.load(run.require("registry"))
        codec = _load_codec(run, cfg)
        _, baseline_acc = _load_baseline(run, cfg)
        queries = _data(cfg, "test").take(cfg.verify.query_size)

        reports = []
        for suspect in suspects:
            endpoint = open_endpoint(suspect)
            try:
                reports.append(
                    blackbox_verify(
                        endpoint, queries, codec, registry, cfg.verify.eps1, cfg.verify.eps2,
                        baseline_acc, cfg.verify.workers, suspect, cfg.config_hash(),
                    )
                )
            finally:
                close = getattr(endpoint, "close", None)
                if close:
                    close()

        result: Dict[str, Any] = {"reports": [r.model_dump(mode="json") for r in reports]}
        if truths is not None:
            result["tracing_accuracy"] = tracing_accuracy(list(zip(truths, reports)))
        result["config_hash"] = cfg.config_hash()
        run.write_json(run.report("verify.json"), result)
    return result


def load_images(path: str | Path, image_size: int) -> torch.Tensor:
    """Images from a directory of PNG/JPEG files (sorted by name) or an `.npz` with an `images` array."""
    path = Path(path)
    if path.is_file() and path.suffix == ".npz":
        with np.load(path) as data:
            if "images" not in data:
                raise DataError(f"{path} has no 'images' array.")
            x = data["images"].astype(np.float32)
        if x.ndim != 4:
            raise DataError(f"{path}: images must be 4-D, got {x.shape}.")
        if x.shape[-1] == 3 and x.shape[1] != 3:
            x = x.transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(x / 255.0 if x.max() > 1.0 else x))
    if not path.is_dir():
        raise NotFoundError(f"No images at {path}.")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise InvalidArgumentError(f"{path} contains no images.")
    arrays = []
    for f in files:
        img = Image.open(f).convert("RGB")
        if img.size != (image_size, image_size):
            raise InvalidArgumentError(f"{f} is {img.size[0]}×{img.size[1]}, expected {image_size}×{image_size}.")
        arrays.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    return torch.from_numpy(np.stack(arrays))


def cmd_trace(cfg: PipelineConfig, run: RunDirectory, images: str | Path) -> Dict[str, Any]:
    with run:
        registry = KeyRegistry.load(run.require("registry"))
        codec = _load_codec(run, cfg)
        report = trace_intercepted(
            load_images(images, cfg.dataset.image_size), codec, registry, cfg.verify.eps3,
            config_hash=cfg.config_hash(),
        )
        result = report.model_dump(mode="json")
        run.write_json(run.report("trace.json"), result)
    return result


# ============================================================
# ATTACKS / FLIPBITS
# ============================================================


def _target_model(run: RunDirectory, cfg: PipelineConfig, user_id: str, target: str):
    if target == "unprotected":
        return _load_baseline(run, cfg)[0]
    path = run.protected(user_id, simple=target == "simple")
    if not path.is_file():
        raise NotFoundError(f"No {target} model for user '{user_id}' at {path}.")
    return ProtectedModel.load(path, resolve_device())


def cmd_attack(
    cfg: PipelineConfig,
    run: RunDirectory,
    kind: str,
    user_id: str,
    target: str = "protected",
    strategies: Optional[Sequence[str]] = None,
    assumption: int = 1,
    plot: bool = False,
) -> Dict[str, Any]:
    """Run one attack family against a user's protected (or simple-distilled) model."""
    if target not in ("protected", "simple"):
        raise InvalidArgumentError(f"Unknown attack target '{target}'.")
    with run:
        registry = KeyRegistry.load(run.require("registry"))
        key = registry.get(user_id).key
        codec = _load_codec(run, cfg)
        baseline, baseline_acc = _load_baseline(run, cfg)
        model = _target_model(run, cfg, user_id, target)
        train, test = _data(cfg, "train"), _data(cfg, "test")
        authorized_test = ImageSet(encode_batched(codec, test.images, key), test.labels, test.num_classes)
        seed = cfg.seeds.base
        lr = cfg.classifier.lr * cfg.attacks.lr_scale
        results = []

        if kind == "finetune":
            for strategy in strategies or FINETUNE_STRATEGIES:
                for fraction in cfg.attacks.fractions:
                    _, res = finetune_attack(
                        model, strategy, train.sample(fraction, seed), test, authorized_test,
                        cfg.attacks.epochs, lr, cfg.attacks.batch_size, seed, baseline_acc, fraction,
                    )
                    results.append(res)
        elif kind == "prune":
            results += prune_sweep(model, "WP", cfg.attacks.wp_amounts, test, authorized_test, baseline_acc)
            results += prune_sweep(model, "FP", fp_amounts(cfg.attacks.fp_step), test, authorized_test, baseline_acc)
            if plot:
                plot_pruning_curves(results, run.report(f"pruning-{user_id}-{target}.png"))
        elif kind == "transfer":
            spec = cfg.attacks.transfer_dataset or cfg.dataset
            new_train = load_dataset(spec, "train", seed=seed + 101).take(len(train))
            new_test = load_dataset(spec, "test", seed=seed + 101)
            for name, victim in ((target, model), ("unprotected", baseline)):
                _, res = transfer_attack(
                    victim, new_train, new_test, cfg.attacks.epochs, lr, cfg.attacks.batch_size, seed,
                    expected_shape=test.image_shape, baseline=baseline_acc, target=name,
                )
                results.append(res)
        elif kind == "reverse":
            if assumption not in (1, 2):
                raise InvalidArgumentError(f"Unknown assumption {assumption}; expected 1 or 2.")
            for fraction in cfg.attacks.fractions:
                subset = train.sample(fraction, seed)
                pairs = encode_batched(codec, subset.images, key) if assumption == 2 else None
                _, res = reverse_engineer(
                    model, subset, test, pairs, cfg.attacks.lambda4, cfg.attacks.generator_steps,
                    cfg.attacks.generator_lr, cfg.attacks.batch_size, cfg.codec.hidden_size, seed, baseline_acc,
                )
                res.params["fraction"] = fraction
                results.append(res)
        else:
            raise InvalidArgumentError(f"Unknown attack '{kind}'.")

        log = _log(run, "attacks", cfg)
        for res in results:
            if res.target == "protected":
                res.target = target
            res.config_hash = cfg.config_hash()
            log.append(user=user_id, **{k: v for k, v in res.to_row().items() if k != "config_hash"})
    return {"user": user_id, "results": [r.model_dump(mode="json") for r in results]}


def cmd_flipbits(
    cfg: PipelineConfig,
    run: RunDirectory,
    user_id: str,
    max_flips: int = 24,
    trials: int = 5,
) -> Dict[str, Any]:
    """Accuracy of a protected model on test images encoded with its key after n random bit flips."""
    if trials < 1:
        raise InvalidArgumentError("At least one trial per flip count is required.")
    with run:
        registry = KeyRegistry.load(run.require("registry"))
        key = registry.get(user_id).key
        if max_flips > key.size or max_flips < 0:
            raise InvalidArgumentError(f"Cannot flip {max_flips} bits of a {key.size}-bit key.")
        codec = _load_codec(run, cfg)
        model = _target_model(run, cfg, user_id, "protected")
        test = _data(cfg, "test").take(cfg.verify.query_size * 5)
        rng = np.random.default_rng(user_seed(cfg.seeds.base, user_id))
        log = _log(run, "flipbits", cfg)

        points: List[FlipPoint] = []
        for n in range(0, max_flips + 1):
            accs = []
            for _ in range(trials if n else 1):
                corrupted = flip_bits(key, n, rng)
                encoded = ImageSet(encode_batched(codec, test.images, corrupted), test.labels, test.num_classes)
                accs.append(evaluate_accuracy(model, encoded))
            point = FlipPoint(flips=n, accuracy=float(np.mean(accs)), trials=len(accs))
            log.append(user=user_id, **point.model_dump())
            points.append(point)
    return {"user": user_id, "curve": [p.model_dump() for p in points]}


# ============================================================
# REPORT
# ============================================================


REPORT_TABLES = ("codec", "baseline", "accuracy", "confusion", "leakage", "attacks", "flipbits", "distill")


def _read_table(path: Path) -> pd.DataFrame:
    if path.stem == "confusion":
        try:
            return pd.read_csv(path, index_col="model")
        except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise DataError(f"Metrics file {path} is corrupt: {e}") from e
    return MetricsLog(path).read()


def _section(title: str, body: str) -> str:
    return f"== {title} ==\n{body.rstrip()}\n"


def cmd_report(run_dir: str | Path) -> Dict[str, Any]:
    """
    Gather a run's metrics into reports/summary.txt.

    Unreadable files are skipped with a warning. Directories whose artifacts
    carry more than one configuration hash are refused. Output is a pure
    function of the directory contents.
    """
    root = Path(run_dir)
    if not root.is_dir():
        raise NotFoundError(f"Run directory {root} not found.")
    run = RunDirectory(root.parent, root.name)
    reports = run.reports
    if not any(root.iterdir()) or not (run.manifest.is_file() or (reports.is_dir() and any(reports.glob("*.csv")))):
        raise InvalidArgumentError(f"Run directory {root} holds no results.")

    with run:
        warnings: List[str] = []
        hashes = set()
        sections: List[str] = []

        if run.manifest.is_file():
            try:
                manifest = Manifest.model_validate(run.read_json(run.manifest))
                hashes.add(manifest.config_hash)
                table = pd.DataFrame([e.model_dump() for e in manifest.entries])
                head = f"run={manifest.run} config={manifest.config_hash[:12]} baseline={manifest.baseline_accuracy}"
                sections.append(_section("manifest", head + "\n" + (table.to_string(index=False) if len(table) else "")))
            except (ToolkitException, ValueError) as e:
                warnings.append(f"manifest.json: {e}")
        if run.registry.is_file():
            try:
                hashes.add(KeyRegistry.load(run.registry).config_hash)
            except ToolkitException as e:
                warnings.append(f"registry.jsonl: {e.detail}")

        stored = []
        for stage, path in (("codec", run.codec), ("baseline", run.baseline)):
            if not path.is_file():
                continue
            try:
                meta = read_metadata(path)
            except ToolkitException as e:
                warnings.append(f"{path.name}: {e.detail}")
                continue
            fields = " ".join(f"{k}={meta[k]}" for k in sorted(meta) if k not in ("config_hash", "seeds"))
            stored.append(f"{stage}: {fields}")
        if stored:
            sections.append(_section("checkpoints", "\n".join(stored)))

        for name in REPORT_TABLES:
            path = run.report(f"{name}.csv")
            if not path.is_file():
                continue
            try:
                frame = _read_table(path)
            except ToolkitException as e:
                warnings.append(f"{path.name}: {e.detail}")
                continue
            if "config_hash" in frame.columns:
                hashes.update(frame["config_hash"].dropna().unique().tolist())
                frame = frame.drop(columns="config_hash")
            if name == "leakage" and {"model", "layer", "mi"} <= set(frame.columns):
                frame = frame.pivot_table(index=["user", "model"] if "user" in frame else "model", columns="layer", values="mi")
            body = frame.to_string()
            if name == "confusion":
                body += f"\ndiagonal margin: {diagonal_margin(frame):.2f}"
            sections.append(_section(name, body))

        for name in ("codec", "verify", "trace"):
            path = run.report(f"{name}.json")
            if path.is_file():
                try:
                    doc = run.read_json(path)
                except ToolkitException as e:
                    warnings.append(f"{path.name}: {e.detail}")
                    continue
                if doc.get("config_hash"):
                    hashes.add(doc["config_hash"])
                body = "\n".join(f"{k}: {v}" for k, v in sorted(doc.items()) if k != "config_hash")
                sections.append(_section(f"{name} (json)", body))

        hashes.discard(None)
        if len(hashes) > 1:
            raise DataError(f"Run directory {root} mixes configurations: {sorted(h[:12] for h in hashes)}.")

        if warnings:
            sections.append(_section("warnings", "\n".join(warnings)))
        for w in warnings:
            logger.warning("%s", w)
        text = "\n".join(sections)
        out = run.report("summary.txt")
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_suffix(".txt.tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(out)
    return {"summary": str(out), "sections": len(sections), "warnings": warnings}

import json
import logging

import numpy as np
import pandas as pd
import pytest
import torch

from backend.checkpoints import load_checkpoint, read_metadata, save_checkpoint
from backend.metrics import MetricsLog
from backend.rundir import RunDirectory
from exceptions import ConflictError, DataError, InvalidArgumentError, NotFoundError, PreconditionError
from keys import KeyRegistry
from pipeline import (
    cmd_attack,
    cmd_flipbits,
    cmd_protect,
    cmd_report,
    cmd_trace,
    cmd_train_baseline,
    cmd_train_codec,
    cmd_verify,
    load_images,
    user_seed,
)
from schemas import Manifest, load_config, parse_config
from stegonet import StegoCodec, encode_batched
from utils import digest_state


def test_user_seed_is_stable_and_user_specific():
    assert user_seed(3, "alice") == user_seed(3, "alice")
    assert user_seed(3, "alice") != user_seed(3, "bob")
    assert user_seed(3, "alice") != user_seed(4, "alice")


def test_config_hash_follows_content(tiny_config):
    same = parse_config(tiny_config.model_dump(mode="json"))
    assert same.config_hash() == tiny_config.config_hash()
    assert tiny_config.with_seed(None) is tiny_config
    assert tiny_config.with_seed(99).config_hash() != tiny_config.config_hash()


def test_config_validation_errors(tmp_path):
    with pytest.raises(NotFoundError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("name = [unclosed")
    with pytest.raises(DataError):
        load_config(bad)
    with pytest.raises(DataError) as info:
        parse_config({"dataset": {"image_size": 30}, "key": {"r": 16}})
    assert "multiple" in str(info.value.errors)
    with pytest.raises(DataError):
        parse_config({"users": ["alice", "alice"]})
    with pytest.raises(DataError):
        parse_config({"dataset": {"source": "folder"}})
    with pytest.raises(DataError):
        parse_config({"attacks": {"fractions": [1.5]}})
    with pytest.raises(DataError):
        parse_config({"unknown_section": {}})


def test_config_loads_from_toml(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('name = "toml-run"\nusers = ["a", "b"]\n\n[key]\nr = 8\n\n[verify]\neps3 = 2\n')
    cfg = load_config(path)
    assert cfg.name == "toml-run" and cfg.users == ["a", "b"]
    assert cfg.key.r == 8 and cfg.verify.eps3 == 2 and cfg.distill.lambda_at == 1000.0


def test_run_directory_is_exclusive(tmp_path):
    run = RunDirectory(tmp_path, "r")
    with run:
        with pytest.raises(ConflictError):
            with RunDirectory(tmp_path, "r"):
                pass
    with RunDirectory(tmp_path, "r"):
        assert (tmp_path / "r" / "run.lock").is_file()
    assert not (tmp_path / "r" / "run.lock").exists()


def test_open_run_mirrors_logs_into_run_log(tmp_path, caplog):
    caplog.set_level(logging.INFO)
    with RunDirectory(tmp_path, "r"):
        logging.getLogger("pipeline").info("stage finished")
    logging.getLogger("pipeline").info("after close")
    text = (tmp_path / "r" / "run.log").read_text(encoding="utf-8")
    assert "Run r opened" in text and "stage finished" in text
    assert "after close" not in text


def test_missing_stage_is_a_precondition_failure(tmp_path, tiny_config):
    run = RunDirectory(tmp_path, tiny_config.name)
    with pytest.raises(PreconditionError) as info:
        cmd_protect(tiny_config, None, run)
    assert info.value.stage == "codec"
    assert not (run.path / "run.lock").exists()


def test_protect_needs_users(tmp_path, tiny_config):
    cfg = tiny_config.model_copy(update={"users": []})
    with pytest.raises(InvalidArgumentError):
        cmd_protect(cfg, None, RunDirectory(tmp_path, "x"))
    with pytest.raises(InvalidArgumentError):
        cmd_protect(cfg, ["a", "a"], RunDirectory(tmp_path, "x"))


def test_checkpoint_kind_is_checked(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", "codec", {}, {"r": 4})
    assert load_checkpoint(path, "codec")[1] == {"r": 4}
    assert read_metadata(path) == {"r": 4}
    with pytest.raises(DataError):
        load_checkpoint(path, "protected")
    with pytest.raises(DataError):
        save_checkpoint(tmp_path / "d.ckpt", "weights", {})
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "junk.ckpt", "codec")
    with pytest.raises(NotFoundError):
        load_checkpoint(tmp_path / "none.ckpt", "codec")


def test_metrics_log_appends_with_hash(tmp_path):
    log = MetricsLog(tmp_path / "m.csv", config_hash="h1")
    log.append(epoch=1, loss=0.5)
    log.append(epoch=2, loss=0.25)
    frame = log.read()
    assert list(frame["epoch"]) == [1, 2] and set(frame["config_hash"]) == {"h1"}
    (tmp_path / "bad.csv").write_bytes(b"\xff\xfe\x00garbage")
    with pytest.raises(DataError):
        MetricsLog(tmp_path / "bad.csv").read()


def test_load_images_from_npz_and_folder(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(3, 8, 8, 3), dtype=np.uint8)
    np.savez(tmp_path / "x.npz", images=arr)
    loaded = load_images(tmp_path / "x.npz", 8)
    assert loaded.shape == (3, 3, 8, 8) and loaded.max() <= 1.0
    np.savez(tmp_path / "y.npz", other=arr)
    with pytest.raises(DataError):
        load_images(tmp_path / "y.npz", 8)
    (tmp_path / "empty").mkdir()
    with pytest.raises(InvalidArgumentError):
        load_images(tmp_path / "empty", 8)
    with pytest.raises(NotFoundError):
        load_images(tmp_path / "nowhere", 8)


# ---- report ----


def _write_results(run: RunDirectory, config_hash: str = "h1") -> None:
    MetricsLog(run.report("accuracy.csv"), config_hash).append(user="alice", model="protected", benign=10.0, authorized=90.0, noise=9.0)
    MetricsLog(run.report("attacks.csv"), config_hash).append(user="alice", attack="WP", benign_acc=50.0)


def test_report_of_a_missing_or_empty_run(tmp_path):
    with pytest.raises(NotFoundError):
        cmd_report(tmp_path / "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(InvalidArgumentError):
        cmd_report(tmp_path / "empty")


def test_report_is_deterministic(tmp_path):
    run = RunDirectory(tmp_path, "r")
    _write_results(run)
    first = cmd_report(run.path)
    text = run.report("summary.txt").read_text()
    second = cmd_report(run.path)
    assert run.report("summary.txt").read_text() == text
    assert first == second and first["warnings"] == []
    assert "== accuracy ==" in text and "== attacks ==" in text


def test_report_refuses_mixed_configurations(tmp_path):
    run = RunDirectory(tmp_path, "r")
    _write_results(run, "h1")
    MetricsLog(run.report("flipbits.csv"), "h2").append(user="alice", flips=0, accuracy=90.0, trials=1)
    with pytest.raises(DataError):
        cmd_report(run.path)


def test_report_warns_about_unreadable_files(tmp_path):
    run = RunDirectory(tmp_path, "r")
    _write_results(run)
    run.report("leakage.csv").write_bytes(b"\xff\xfe\x00garbage")
    run.report("codec.json").write_text("{not json")
    out = cmd_report(run.path)
    assert len(out["warnings"]) == 2
    assert "== warnings ==" in run.report("summary.txt").read_text()



def test_report_shows_checkpoint_metadata_and_diagonal_margin(tmp_path):
    run = RunDirectory(tmp_path, "r")
    _write_results(run)
    save_checkpoint(run.baseline, "classifier", {}, {"accuracy": 81.5, "config_hash": "h1"})
    confusion = pd.DataFrame(
        {"benign": [10.0, 12.0], "alice": [90.0, 20.0], "bob": [15.0, 88.0]},
        index=pd.Index(["alice", "bob"], name="model"),
    )
    confusion.to_csv(run.report("confusion.csv"))

    cmd_report(run.path)
    text = run.report("summary.txt").read_text()
    assert "baseline: accuracy=81.5" in text
    assert "diagonal margin: 68.00" in text


# ---- end to end ----


@pytest.mark.slow
def test_full_pipeline_on_a_tiny_run(tmp_path, tiny_config):
    cfg = tiny_config
    run = RunDirectory(tmp_path, cfg.name)

    baseline = cmd_train_baseline(cfg, run)
    assert 0.0 <= baseline["accuracy"] <= 100.0
    codec_summary = cmd_train_codec(cfg, run)
    assert 0.0 <= codec_summary["extraction_rate"] <= 1.0

    manifest = Manifest.model_validate(cmd_protect(cfg, None, run))
    assert [e.user_id for e in manifest.entries] == ["alice", "bob"]
    assert all(e.simple_checkpoint for e in manifest.entries)
    registry = KeyRegistry.load(run.registry)
    assert [e.user_id for e in registry] == ["alice", "bob"]
    assert registry.config_hash == cfg.config_hash()
    confusion = pd.read_csv(run.report("confusion.csv"), index_col="model")
    assert list(confusion.columns) == ["benign", "alice", "bob"]
    leakage = pd.read_csv(run.report("leakage.csv"))
    assert set(leakage["model"]) == {"unprotected", "fake_benign", "protected", "simple"}

    # re-running resumes from the stored checkpoints with the same keys
    again = cmd_protect(cfg, None, run)
    assert [e["key_fingerprint"] for e in again["entries"]] == [e.key_fingerprint for e in manifest.entries]

    verified = cmd_verify(cfg, run, [str(run.protected("alice"))], ["alice"])
    assert len(verified["reports"]) == 1 and 0.0 <= verified["tracing_accuracy"] <= 100.0
    assert verified["reports"][0]["suspect"].endswith("alice.ckpt")

    codec = StegoCodec.load(run.codec)
    covers = torch.rand(4, 3, 8, 8, generator=torch.Generator().manual_seed(4))
    np.savez(tmp_path / "intercepted.npz", images=encode_batched(codec, covers, registry.get("bob").key).numpy())
    traced = cmd_trace(cfg, run, tmp_path / "intercepted.npz")
    assert traced["images"] == 4 and [t["user_id"] for t in traced["per_key"]] == ["alice", "bob"]

    pruned = cmd_attack(cfg, run, "prune", "alice", plot=True)
    assert {r["attack"] for r in pruned["results"]} == {"WP", "FP"}
    assert run.report("pruning-alice-protected.png").is_file()
    tuned = cmd_attack(cfg, run, "finetune", "alice", target="simple", strategies=["FTLL"])
    assert [r["target"] for r in tuned["results"]] == ["simple"]
    moved = cmd_attack(cfg, run, "transfer", "bob")
    assert [r["target"] for r in moved["results"]] == ["protected", "unprotected"]
    reversed_ = cmd_attack(cfg, run, "reverse", "bob", assumption=2)
    assert reversed_["results"][0]["attack"] == "reverse-a2"
    with pytest.raises(NotFoundError):
        cmd_attack(cfg, run, "prune", "mallory")

    curve = cmd_flipbits(cfg, run, "alice", max_flips=2, trials=2)
    assert [p["flips"] for p in curve["curve"]] == [0, 1, 2]
    assert [p["trials"] for p in curve["curve"]] == [1, 2, 2]

    summary = cmd_report(run.path)
    assert summary["warnings"] == []
    text = run.report("summary.txt").read_text()
    for section in ("manifest", "accuracy", "confusion", "leakage", "attacks", "flipbits"):
        assert f"== {section} ==" in text
    assert json.loads(run.manifest.read_text())["config_hash"] == cfg.config_hash()


def test_metrics_log_widens_its_header(tmp_path):
    log = MetricsLog(tmp_path / "m.csv")
    log.append(stage="real", epoch=1, loss=0.5)
    log.append(stage="fake", step=3, mi=0.1)
    log.append(stage="real", epoch=2)
    frame = log.read()
    assert list(frame["stage"]) == ["real", "fake", "real"]
    assert frame["mi"].iloc[1] == 0.1 and frame["epoch"].iloc[2] == 2


def test_checkpoint_rejects_altered_weights(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", "codec", {"encoder": {"w": torch.ones(3)}, "step": torch.tensor(2)})
    state, _ = load_checkpoint(path, "codec")
    assert torch.equal(state["encoder"]["w"], torch.ones(3))

    payload = torch.load(path, weights_only=True)
    payload["state"]["encoder"]["w"][0] = 5.0
    torch.save(payload, path)
    with pytest.raises(DataError, match="integrity"):
        load_checkpoint(path, "codec")


def test_state_digest_tracks_weights(classifier):
    before = digest_state(classifier)
    assert digest_state(classifier.state_dict()) == before
    with torch.no_grad():
        classifier.head.weight[0, 0] += 1.0
    assert digest_state(classifier) != before


@pytest.mark.parametrize(
    "stage",
    [
        lambda cfg, run: cmd_verify(cfg, run, [str(run.baseline)]),
        lambda cfg, run: cmd_trace(cfg, run, run.path / "intercepted"),
        lambda cfg, run: cmd_attack(cfg, run, "prune", "alice"),
        lambda cfg, run: cmd_flipbits(cfg, run, "alice"),
        lambda cfg, run: cmd_report(run.path),
    ],
    ids=["verify", "trace", "attack", "flipbits", "report"],
)
def test_every_stage_refuses_a_locked_run(tmp_path, tiny_config, stage):
    run = RunDirectory(tmp_path, tiny_config.name)
    _write_results(run)
    with run:
        with pytest.raises(ConflictError):
            stage(tiny_config, RunDirectory(tmp_path, tiny_config.name))
        assert not run.report("summary.txt").exists()
    assert not (run.path / "run.lock").exists()


def test_datasets_download_under_data_dir_not_cache_dir(monkeypatch, tiny_config):
    import pipeline
    from main import config

    seen = {}

    def fake_load(spec, split, seed=0, root=None):
        seen["root"] = root
        return "loaded"

    monkeypatch.setitem(config.settings, "DATA_DIR", "/data/downloads")
    monkeypatch.setitem(config.settings, "CACHE_DIR", "/data/encoded")
    monkeypatch.setattr(pipeline, "load_dataset", fake_load)

    assert pipeline._data(tiny_config, "train") == "loaded"
    assert seen["root"] == "/data/downloads"

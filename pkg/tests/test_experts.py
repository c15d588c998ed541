import pytest
import torch

from attacks import finetune_attack, prune_attack, transfer_attack
from backend.metrics import MetricsLog
from club import LayerSelection, leakage_profile
from domains import Domain, ImageSet, build_domains, synthetic_dataset
from exceptions import InvalidArgumentError, NotFoundError
from experts import (
    TAPS,
    ExpertEnsemble,
    TappedClassifier,
    domain_accuracies,
    evaluate_accuracy,
    finetune_real,
    load_classifier,
    moe_forward,
    predict_labels,
    save_classifier,
    train_baseline,
    train_fake,
)
from schemas import ClassifierConfig, ExpertConfig
from utils import digest_state

from conftest import IMAGE_SIZE, NUM_CLASSES, WIDTHS


def _same_weights(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


@pytest.fixture
def ensemble(keys):
    torch.manual_seed(0)
    experts = [TappedClassifier(NUM_CLASSES, WIDTHS).eval() for _ in range(3)]
    return ExpertEnsemble(*experts, key=keys["alice"])


def test_classifier_exposes_four_taps(classifier, images):
    logits, feats = classifier(images.images[:2], return_features=True)
    assert logits.shape == (2, NUM_CLASSES)
    assert list(feats) == list(TAPS)
    assert [f.shape[1] for f in feats.values()] == list(WIDTHS)
    assert feats["stage1"].shape[-1] == IMAGE_SIZE
    assert classifier.tap_dims == dict(zip(TAPS, WIDTHS))


def test_classifier_rejects_wrong_stage_count():
    with pytest.raises(InvalidArgumentError):
        TappedClassifier(NUM_CLASSES, (4, 4, 8))


def test_classifier_checkpoint_round_trip(tmp_path, classifier, images):
    path = save_classifier(classifier, tmp_path / "c.ckpt", metadata={"accuracy": 50.0})
    loaded, meta = load_classifier(path)
    assert meta["accuracy"] == 50.0
    assert torch.equal(classifier(images.images[:3]), loaded(images.images[:3]))
    with pytest.raises(NotFoundError):
        load_classifier(tmp_path / "missing.ckpt")


def test_evaluate_accuracy_of_an_oracle_is_100(images):
    oracle = lambda x: torch.nn.functional.one_hot(  # noqa: E731
        images.labels[: x.shape[0]], NUM_CLASSES
    ).float()
    assert evaluate_accuracy(oracle, images, batch_size=len(images)) == 100.0
    with pytest.raises(InvalidArgumentError):
        evaluate_accuracy(oracle, ImageSet(images.images[:0], images.labels[:0]))


def test_predict_labels_batches(classifier, images):
    full = predict_labels(classifier, images.images, batch_size=len(images))
    assert torch.equal(predict_labels(classifier, images.images, batch_size=5), full)


def test_train_baseline_logs_epochs(tmp_path, images):
    log = MetricsLog(tmp_path / "baseline.csv")
    cfg = ClassifierConfig(widths=WIDTHS, epochs=2, batch_size=8)
    model = train_baseline(images, cfg, NUM_CLASSES, seed=0, log=log)
    assert not model.training
    frame = log.read()
    assert list(frame["epoch"]) == [1, 2] and set(frame["stage"]) == {"baseline"}


def test_single_tag_dispatch_is_the_expert_itself(ensemble, images):
    x = images.images[:4]
    for domain, expert in (
        (Domain.AUTHORIZED, ensemble.real),
        (Domain.BENIGN, ensemble.fake_benign),
        (Domain.NOISE, ensemble.fake_noise),
    ):
        assert torch.equal(moe_forward(ensemble, x, domain), expert(x))
        assert torch.equal(ensemble(x, domain.value), expert(x))


def test_per_sample_tags_route_each_image(ensemble, images):
    x = images.images[:6]
    tags = torch.tensor([0, 1, 2, 2, 1, 0])
    logits, feats = moe_forward(ensemble, x, tags, return_features=True)
    for i, t in enumerate(tags.tolist()):
        expert = ensemble.expert(Domain.from_index(t))
        assert torch.allclose(logits[i], expert(x[i : i + 1])[0], atol=1e-5)
    assert set(feats) == set(TAPS) and feats["stage4"].shape[0] == 6


def test_unknown_tags_are_rejected(ensemble, images):
    x = images.images[:2]
    with pytest.raises(InvalidArgumentError):
        moe_forward(ensemble, x, "stolen")
    with pytest.raises(InvalidArgumentError):
        moe_forward(ensemble, x, torch.tensor([0, 3]))
    with pytest.raises(InvalidArgumentError):
        moe_forward(ensemble, x, torch.tensor([0]))


def test_domain_accuracies_cover_all_three_domains(ensemble, triple, classifier):
    assert set(domain_accuracies(ensemble, triple)) == {"benign", "authorized", "noise"}
    acc = domain_accuracies(classifier, triple)
    assert all(0 <= v <= 100 for v in acc.values())


def test_finetune_real_needs_the_authorized_view(classifier, triple):
    with pytest.raises(InvalidArgumentError):
        finetune_real(classifier, triple.noise, ExpertConfig(real_epochs=1))
    with pytest.raises(InvalidArgumentError):
        finetune_real(classifier, triple.benign, ExpertConfig(real_epochs=1))


def test_finetune_real_leaves_the_baseline_untouched(classifier, triple):
    before = {k: v.clone() for k, v in classifier.state_dict().items()}
    untouched = finetune_real(classifier, triple.authorized, ExpertConfig(real_epochs=0))
    assert _same_weights(untouched, classifier) and untouched is not classifier

    real = finetune_real(classifier, triple.authorized, ExpertConfig(real_epochs=1, batch_size=8))
    assert all(torch.equal(before[k], v) for k, v in classifier.state_dict().items())
    assert not _same_weights(real, classifier)


def test_fake_with_zero_iterations_is_its_seeded_init(classifier, triple):
    sel = LayerSelection(TAPS)
    fake = train_fake(classifier, Domain.BENIGN, triple, sel, ExpertConfig(fake_iterations=0), seed=4)
    torch.manual_seed(4)
    assert _same_weights(fake, TappedClassifier(NUM_CLASSES, WIDTHS))


def test_fake_training_logs_per_layer_mi(tmp_path, classifier, triple):
    log = MetricsLog(tmp_path / "experts.csv")
    cfg = ExpertConfig(fake_iterations=2, batch_size=8, estimator_steps=1)
    sel = LayerSelection(("stage3", "stage4"))
    fake = train_fake(classifier, "noise", triple, sel, cfg, seed=1, log=log, user_id="alice")
    frame = log.read()
    assert set(frame["layer"]) == {"stage3", "stage4"}
    assert set(frame["expert"]) == {"fake_noise"}
    assert not fake.training


def test_fake_cannot_target_the_authorized_domain(classifier, triple):
    with pytest.raises(InvalidArgumentError):
        train_fake(classifier, Domain.AUTHORIZED, triple, LayerSelection(TAPS), ExpertConfig())


def test_later_training_and_attacks_leave_the_fakes_bit_identical(classifier, triple):
    sel = LayerSelection(("stage3", "stage4"))
    cfg = ExpertConfig(real_epochs=1, fake_iterations=2, batch_size=8, estimator_steps=1)
    fakes = {d: train_fake(classifier, d, triple, sel, cfg, seed=2) for d in (Domain.BENIGN, Domain.NOISE)}
    ens = ExpertEnsemble(classifier, fakes[Domain.BENIGN], fakes[Domain.NOISE])
    before = {d: digest_state(m) for d, m in fakes.items()}

    ens.real = finetune_real(classifier, triple.authorized, cfg)
    for fake in fakes.values():
        finetune_attack(fake, "RTAL", triple.benign, triple.benign, epochs=1, batch_size=8)
        prune_attack(fake, "WP", 0.5, triple.benign)
        transfer_attack(fake, triple.benign, triple.benign, epochs=1, batch_size=8)

    assert {d: digest_state(m) for d, m in fakes.items()} == before
    assert ens.fake_benign is fakes[Domain.BENIGN] and ens.fake_noise is fakes[Domain.NOISE]


@pytest.mark.slow
def test_fake_training_cuts_feature_leakage_against_the_unprotected_model(keys, codec):
    covers = synthetic_dataset(512, NUM_CLASSES, IMAGE_SIZE, seed=7)
    triple = build_domains(covers, keys["alice"], codec, rng_seed=5)
    torch.manual_seed(0)
    baseline = TappedClassifier(NUM_CLASSES, WIDTHS)
    real = finetune_real(baseline, triple.authorized, ExpertConfig(real_epochs=2, batch_size=32), seed=1)
    sel = LayerSelection(TAPS)
    cfg = ExpertConfig(fake_iterations=300, batch_size=64, estimator_steps=5)
    fake = train_fake(real, Domain.BENIGN, triple, sel, cfg, seed=3)

    authorized = triple.images(Domain.AUTHORIZED, list(range(len(triple))))
    benign = triple.images(Domain.BENIGN, list(range(len(triple))))
    rows = leakage_profile(real.eval(), authorized, {"unprotected": baseline.eval(), "fake": fake}, benign, sel, real.tap_dims, steps=300)
    total = {name: sum(r["mi"] for r in rows if r["model"] == name) for name in ("unprotected", "fake")}
    assert total["unprotected"] > 0
    assert total["fake"] <= 0.7 * total["unprotected"]

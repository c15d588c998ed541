import math

import pytest
import torch

from club import (
    AuxEstimator,
    LayerSelection,
    estimate_mi,
    fit_aux,
    leakage_profile,
    make_estimators,
    multilayer_mi,
    pool_features,
)
from exceptions import InvalidArgumentError
from experts import TAPS, TappedClassifier

from conftest import NUM_CLASSES, WIDTHS


def _gaussian_pairs(n: int, dim: int, rho: float, seed: int):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(n, dim, generator=g)
    noise = torch.randn(n, dim, generator=g)
    return z, rho * z + math.sqrt(1 - rho**2) * noise


def test_single_pair_estimates_zero():
    est = AuxEstimator(3)
    z = torch.randn(1, 3)
    assert estimate_mi(z, z + 1, est).item() == pytest.approx(0.0, abs=1e-6)


def test_estimate_is_invariant_to_joint_permutation():
    torch.manual_seed(0)
    est = AuxEstimator(4)
    z, zhat = _gaussian_pairs(32, 4, 0.5, seed=1)
    perm = torch.randperm(32)
    a = estimate_mi(z, zhat, est)
    b = estimate_mi(z[perm], zhat[perm], est)
    assert a.item() == pytest.approx(b.item(), abs=1e-5)


def test_fit_aux_is_deterministic_and_zero_steps_is_a_no_op():
    z, zhat = _gaussian_pairs(64, 2, 0.5, seed=0)
    torch.manual_seed(3)
    a = AuxEstimator(2)
    before = {k: v.clone() for k, v in a.state_dict().items()}
    fit_aux(z, zhat, a, steps=0, lr=1e-2)
    assert all(torch.equal(before[k], v) for k, v in a.state_dict().items())

    torch.manual_seed(3)
    b = AuxEstimator(2)
    fit_aux(z, zhat, a, steps=20, lr=1e-2)
    fit_aux(z, zhat, b, steps=20, lr=1e-2)
    assert estimate_mi(z, zhat, a).item() == pytest.approx(estimate_mi(z, zhat, b).item())


def test_mismatched_features_are_rejected():
    est = AuxEstimator(3)
    with pytest.raises(InvalidArgumentError):
        estimate_mi(torch.randn(4, 3), torch.randn(5, 3), est)
    with pytest.raises(InvalidArgumentError):
        estimate_mi(torch.randn(4, 2), torch.randn(4, 2), est)


def test_estimate_bounds_correlated_gaussians():
    # true MI at correlation 0.8 is 0.511 nats; the bound sits above it
    torch.manual_seed(0)
    z, zhat = _gaussian_pairs(2048, 1, 0.8, seed=0)
    est = fit_aux(z, zhat, AuxEstimator(1, hidden=16), steps=1500, lr=5e-3)
    with torch.no_grad():
        assert estimate_mi(z, zhat, est).item() >= 0.511 - 0.05


def test_estimate_is_near_zero_for_independent_features():
    torch.manual_seed(0)
    z, zhat = _gaussian_pairs(2048, 1, 0.0, seed=1)
    est = fit_aux(z, zhat, AuxEstimator(1, hidden=16), steps=1500, lr=5e-3)
    with torch.no_grad():
        assert abs(estimate_mi(z, zhat, est).item()) < 0.1


def test_learned_mean_recovers_a_linear_map():
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(4)
    z = torch.randn(2048, 1, generator=g)
    zhat = 0.9 * z + 0.3 * torch.randn(2048, 1, generator=g)
    est = fit_aux(z, zhat, AuxEstimator(1, hidden=16), steps=1500, lr=5e-3)
    probe = torch.linspace(-1.5, 1.5, 31).unsqueeze(1)
    with torch.no_grad():
        mean, _ = est(probe)
    slope = ((probe - probe.mean()) * (mean - mean.mean())).sum() / ((probe - probe.mean()) ** 2).sum()
    assert slope.item() == pytest.approx(0.9, abs=0.1)


@pytest.mark.parametrize("rho", [0.0, 0.5, 0.8])
def test_estimate_is_close_to_or_above_the_true_mi(rho):
    truth = -0.5 * math.log(1 - rho**2)
    torch.manual_seed(0)
    z, zhat = _gaussian_pairs(2048, 1, rho, seed=2)
    est = fit_aux(z, zhat, AuxEstimator(1, hidden=16), steps=1500, lr=5e-3)
    with torch.no_grad():
        assert estimate_mi(z, zhat, est).item() >= truth - 0.1


def test_estimate_is_differentiable_in_the_features():
    est = AuxEstimator(2)
    z = torch.randn(8, 2)
    zhat = torch.randn(8, 2, requires_grad=True)
    estimate_mi(z, zhat, est).backward()
    assert zhat.grad is not None and torch.isfinite(zhat.grad).all()


def test_layer_selection_checks_taps_and_order():
    assert LayerSelection(("stage2", "stage4")).check(TAPS)
    with pytest.raises(InvalidArgumentError):
        LayerSelection(("stage5",)).check(TAPS)
    with pytest.raises(InvalidArgumentError):
        LayerSelection(("stage3", "stage1")).check(TAPS)
    with pytest.raises(InvalidArgumentError):
        LayerSelection(())


def test_pool_features_averages_spatial_maps():
    f = torch.arange(8.0).reshape(1, 2, 2, 2)
    assert torch.equal(pool_features(f), torch.tensor([[1.5, 5.5]]))
    with pytest.raises(InvalidArgumentError):
        pool_features(torch.zeros(2, 2, 2))


def test_multilayer_mi_of_a_single_sample_is_zero(images):
    torch.manual_seed(0)
    a, b = TappedClassifier(NUM_CLASSES, WIDTHS).eval(), TappedClassifier(NUM_CLASSES, WIDTHS).eval()
    sel = LayerSelection(TAPS)
    ests = make_estimators(a.tap_dims, sel)
    per_layer, total = multilayer_mi(a, b, images.images[:1], images.images[1:2], sel, ests)
    assert set(per_layer) == set(TAPS)
    assert total.item() == pytest.approx(0.0, abs=1e-5)


def test_multilayer_mi_requires_estimators_and_taps(images):
    model = TappedClassifier(NUM_CLASSES, WIDTHS).eval()
    sel = LayerSelection(("stage1", "stage2"))
    with pytest.raises(InvalidArgumentError):
        multilayer_mi(model, model, images.images[:2], images.images[:2], sel, {})
    with pytest.raises(InvalidArgumentError):
        make_estimators({"stage1": 4}, sel)


def test_leakage_profile_yields_a_row_per_model_and_layer(images):
    torch.manual_seed(0)
    source = TappedClassifier(NUM_CLASSES, WIDTHS).eval()
    others = {"same": source, "other": TappedClassifier(NUM_CLASSES, WIDTHS).eval()}
    sel = LayerSelection(("stage3", "stage4"))
    rows = leakage_profile(source, images.images, others, images.images, sel, source.tap_dims, steps=5)
    assert [(r["model"], r["layer"]) for r in rows] == [
        ("same", "stage3"),
        ("same", "stage4"),
        ("other", "stage3"),
        ("other", "stage4"),
    ]
    assert all(math.isfinite(r["mi"]) for r in rows)

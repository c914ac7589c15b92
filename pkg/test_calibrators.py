"""
Tests for temperature scaling, ensembling and PseudoCal
"""

import numpy as np
import pytest
import torch
import torch.nn as nn

from calibrators import (GlobalTemperature, apply_temperature, ensemble_probs, fit_global_temperature,
                         pseudocal_fit, temperature_nll)
from errors import DomainError, EmptySampleError, InsufficientDataError, ShapeError
from metrics import IGNORE_INDEX


def calibrated_logits(num_classes=5, size=250, seed=0):
    """Logits z with labels drawn from softmax(z), so T = 1 is the true temperature"""
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=2.0, size=(1, num_classes, size, size))
    probs = np.exp(z - z.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(np.moveaxis(probs, 1, -1), axis=-1)
    u = rng.random((1, size, size, 1))
    labels = np.minimum((cdf < u).sum(axis=-1), num_classes - 1)
    return torch.from_numpy(z), torch.from_numpy(labels)


def linear_model(scale=1.0, seed=0):
    torch.manual_seed(seed)
    conv = nn.Conv2d(3, 3, kernel_size=1)
    nn.init.normal_(conv.weight, std=2.0)
    nn.init.normal_(conv.bias, std=0.5)

    def model(x):
        return scale * conv(x)
    return model


def mixup_posterior_model(k=1.0, lam=0.6):
    """
    Two-class model that is exactly calibrated on lam-mixtures, times k

    Channel 0 of every image is i.i.d. U(0, 1) per pixel. The pseudo-label of
    a blend is [x_a <= 0.5] from the dominant image, and g(v) is the exact
    P(x_a > 0.5 | lam * x_a + (1 - lam) * x_b = v), so softmax of the
    unscaled logits is the true pseudo-label distribution.
    """
    def model(x):
        v = x[:, :1]
        lo = ((v - lam) / (1.0 - lam)).clamp(min=0.0)
        hi = (v / (1.0 - lam)).clamp(max=1.0)
        cut = torch.minimum(torch.maximum((v - 0.5 * lam) / (1.0 - lam), lo), hi)
        g = ((cut - lo) / (hi - lo).clamp(min=1e-12)).clamp(1e-6, 1.0 - 1e-6)
        h = torch.log(g) - torch.log1p(-g)
        return k * torch.cat([h, torch.zeros_like(h)], dim=1)
    return model


def test_apply_temperature_examples():
    logits = torch.tensor([[2.0, 0.0]])
    assert apply_temperature(logits, 1.0)[0, 0].item() == pytest.approx(0.8808, abs=1e-4)
    assert apply_temperature(logits, 2.0)[0, 0].item() == pytest.approx(0.7311, abs=1e-4)
    assert apply_temperature(logits, 1e6)[0, 0].item() == pytest.approx(0.5, abs=1e-5)
    assert apply_temperature(logits, GlobalTemperature(2.0))[0, 0].item() == pytest.approx(0.7311, abs=1e-4)


def test_apply_temperature_rejects_non_positive():
    logits = torch.zeros(1, 2, 2, 2)
    with pytest.raises(DomainError):
        apply_temperature(logits, 0.0)
    with pytest.raises(DomainError):
        apply_temperature(logits, torch.tensor([[[1.0, -1.0], [1.0, 1.0]]]))


def test_apply_temperature_map_shapes():
    logits = torch.randn(2, 3, 4, 4)
    per_pixel = torch.rand(2, 4, 4) + 0.5
    probs = apply_temperature(logits, per_pixel)
    assert probs.shape == logits.shape
    torch.testing.assert_close(probs.sum(dim=1), torch.ones(2, 4, 4))
    with pytest.raises(ShapeError):
        apply_temperature(logits, torch.ones(2, 5, 5))


def test_temperature_preserves_argmax():
    torch.manual_seed(0)
    logits = torch.randn(1, 4, 100, 100, dtype=torch.float64)
    temps = torch.exp(torch.randn(1, 100, 100, dtype=torch.float64))
    assert torch.equal(apply_temperature(logits, temps).argmax(dim=1), logits.argmax(dim=1))


@pytest.mark.parametrize("k", [0.5, 1.0, 2.0, 4.0])
def test_fit_recovers_miscalibration(k):
    z, labels = calibrated_logits()
    fitted = fit_global_temperature(k * z, labels)
    assert fitted.value == pytest.approx(k, rel=0.05)


def test_fit_is_local_minimum():
    z, labels = calibrated_logits(size=100, seed=1)
    fitted = fit_global_temperature(2.0 * z, labels).value
    best = temperature_nll(2.0 * z, labels, fitted)
    for delta in (0.05, -0.05, 0.01, -0.01):
        assert temperature_nll(2.0 * z, labels, fitted + delta) >= best - 1e-12


def test_fit_ignores_per_pixel_logit_shift():
    z, labels = calibrated_logits(num_classes=4, size=100, seed=3)
    shift = 5.0 * torch.randn(1, 1, 100, 100, dtype=torch.float64)
    plain = fit_global_temperature(2.0 * z, labels).value
    shifted = fit_global_temperature(2.0 * z + shift, labels).value
    assert shifted == pytest.approx(plain, abs=1e-3)


def test_fit_ignores_ignored_pixels():
    z, labels = calibrated_logits(size=100, seed=2)
    masked = labels.clone()
    masked[:, :50] = IGNORE_INDEX
    reference = fit_global_temperature(z[:, :, 50:], labels[:, 50:]).value
    assert fit_global_temperature(z, masked).value == pytest.approx(reference)


def test_fit_without_labeled_pixels_raises():
    logits = torch.randn(1, 2, 3, 3)
    with pytest.raises(EmptySampleError):
        fit_global_temperature(logits, torch.full((1, 3, 3), IGNORE_INDEX))


def test_ensemble_averages_logits():
    members = [torch.tensor([[1.0, 0.0]]), torch.tensor([[3.0, 0.0]])]
    expected = torch.softmax(torch.tensor([[2.0, 0.0]]), dim=1)
    torch.testing.assert_close(ensemble_probs(members), expected)

    z = torch.randn(1, 3, 4, 4)
    torch.testing.assert_close(ensemble_probs([z, -z]), torch.full((1, 3, 4, 4), 1.0 / 3))


def test_ensemble_rejects_mismatched_members():
    with pytest.raises(InsufficientDataError):
        ensemble_probs([])
    with pytest.raises(ShapeError):
        ensemble_probs([torch.zeros(1, 2, 2, 2), torch.zeros(1, 3, 2, 2)])


def test_pseudocal_with_unit_lambda_matches_self_fit():
    images = torch.rand(8, 3, 8, 8)
    model = linear_model()
    fitted = pseudocal_fit(model, images, np.random.default_rng(3), mixup_lambda=1.0)

    order = np.random.default_rng(3).permutation(8)
    x_a = images[torch.as_tensor(order[0::2])]
    with torch.no_grad():
        logits = model(x_a)
    reference = fit_global_temperature(logits, logits.argmax(dim=1))
    assert fitted.value == pytest.approx(reference.value, rel=1e-4)
    assert fitted.method == "pseudocal"


def test_pseudocal_tracks_logit_scale():
    images = torch.rand(16, 3, 8, 8)
    ratios = []
    for k in (0.5, 1.0, 2.0):
        fitted = pseudocal_fit(linear_model(scale=k), images, np.random.default_rng(0), mixup_lambda=0.6)
        ratios.append(fitted.value / k)
    assert ratios[0] == pytest.approx(ratios[1], rel=0.01)
    assert ratios[2] == pytest.approx(ratios[1], rel=0.01)


def test_pseudocal_is_deterministic_per_seed():
    images = torch.rand(10, 3, 8, 8)
    model = linear_model()
    first = pseudocal_fit(model, images, np.random.default_rng(11))
    second = pseudocal_fit(model, images, np.random.default_rng(11))
    assert first.value == second.value


def test_pseudocal_needs_two_images():
    with pytest.raises(InsufficientDataError):
        pseudocal_fit(linear_model(), torch.rand(1, 3, 8, 8), np.random.default_rng(0))


def test_global_temperature_round_trip(tmp_path):
    record = GlobalTemperature(1.7, method="tempscal_src", fingerprint="abc", seed=4)
    loaded = GlobalTemperature.load(record.save(tmp_path / "temperature.json"))
    assert loaded == record
    with pytest.raises(DomainError):
        GlobalTemperature(0.0)


@pytest.mark.parametrize("k", [0.5, 1.0, 2.0])
def test_pseudocal_recovers_scale_of_mixup_calibrated_model(k):
    images = torch.rand(128, 3, 32, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    fitted = pseudocal_fit(mixup_posterior_model(k), images, np.random.default_rng(1), mixup_lambda=0.6)
    assert fitted.value == pytest.approx(k, rel=0.1)

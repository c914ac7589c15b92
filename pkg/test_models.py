"""
Tests for the segmentation network, the Meta Temperature Network and parameter helpers
"""

import pytest
import torch
import torch.nn as nn

from errors import DomainError, ShapeError
from models import (MAX_TEMPERATURE, MIN_TEMPERATURE, MetaTemperatureNet, SegNet, clone_head,
                    count_parameters, ema_update, freeze, mtn_forward, parameter_digest)


def test_segnet_output_shape():
    net = SegNet(num_classes=4)
    logits = net(torch.rand(2, 3, 32, 32))
    assert logits.shape == (2, 4, 32, 32)


def test_segnet_head_substitution_matches_module_head():
    torch.manual_seed(0)
    net = SegNet(num_classes=3).eval()
    x = torch.rand(1, 3, 16, 16)
    head = clone_head(net)
    torch.testing.assert_close(net(x, head), net(x), rtol=0, atol=0)


def test_clone_head_is_independent():
    net = SegNet(num_classes=3)
    head = clone_head(net)
    assert count_parameters(head) == count_parameters(net.head)
    assert all(p.requires_grad for p in head.values())
    with torch.no_grad():
        head["weight"].add_(1.0)
    assert not torch.equal(head["weight"], net.head.weight)


def test_mtn_starts_at_unit_temperature():
    mtn = MetaTemperatureNet(num_classes=4)
    temps = mtn(torch.rand(2, 3, 16, 16), torch.randn(2, 4, 16, 16))
    assert temps.shape == (2, 1, 16, 16)
    torch.testing.assert_close(temps, torch.ones_like(temps), rtol=0, atol=1e-5)


def test_mtn_zero_projection_gives_softplus_floor():
    mtn = MetaTemperatureNet(num_classes=2)
    with torch.no_grad():
        mtn.project.weight.zero_()
        mtn.project.bias.zero_()
    temps = mtn(torch.rand(1, 3, 8, 8), torch.randn(1, 2, 8, 8))
    assert temps.min().item() == pytest.approx(0.7431, abs=1e-4)
    assert temps.max().item() == pytest.approx(0.7431, abs=1e-4)


def test_mtn_temperature_stays_in_range():
    torch.manual_seed(1)
    mtn = MetaTemperatureNet(num_classes=3)
    nn.init.normal_(mtn.project.weight, std=50.0)
    temps = mtn(torch.rand(4, 3, 16, 16), 10.0 * torch.randn(4, 3, 16, 16))
    assert temps.min().item() >= MIN_TEMPERATURE
    assert temps.max().item() <= MAX_TEMPERATURE


def test_mtn_init_temperature_must_be_in_range():
    with pytest.raises(DomainError):
        MetaTemperatureNet(num_classes=2, init_temperature=0.01)


def test_mtn_forward_detaches_logits():
    mtn = MetaTemperatureNet(num_classes=2)
    nn.init.normal_(mtn.project.weight)
    logits = torch.randn(1, 2, 8, 8, requires_grad=True)
    mtn_forward(mtn, torch.rand(1, 3, 8, 8), logits).sum().backward()
    assert logits.grad is None
    assert mtn.project.weight.grad is not None


def test_mtn_forward_checks_alignment():
    mtn = MetaTemperatureNet(num_classes=2)
    with pytest.raises(ShapeError):
        mtn_forward(mtn, torch.rand(1, 3, 8, 8), torch.randn(2, 2, 8, 8))


@pytest.mark.parametrize("gamma, expected", [(1.0, 1.0), (0.0, 0.0), (0.99, 0.99)])
def test_ema_update_examples(gamma, expected):
    target = {"w": torch.tensor([1.0], dtype=torch.float64)}
    ema_update(target, {"w": torch.tensor([0.0], dtype=torch.float64)}, gamma)
    assert target["w"].item() == pytest.approx(expected)


def test_ema_update_on_modules_copies_integer_buffers():
    target, source = SegNet(2), SegNet(2)
    source.train()
    source(torch.rand(2, 3, 8, 8))
    ema_update(target, source, 0.0)
    for (name, t), s in zip(target.state_dict().items(), source.state_dict().values()):
        assert torch.equal(t, s), name


def test_ema_update_rejects_bad_gamma_and_shapes():
    with pytest.raises(DomainError):
        ema_update({"w": torch.zeros(1)}, {"w": torch.zeros(1)}, 1.5)
    with pytest.raises(ShapeError):
        ema_update({"w": torch.zeros(1)}, {"w": torch.zeros(2)}, 0.5)


def test_freeze_and_digest():
    net = freeze(SegNet(2))
    assert not any(p.requires_grad for p in net.parameters())
    before = parameter_digest(net)
    assert parameter_digest(net) == before
    with torch.no_grad():
        net.head.bias.add_(1.0)
    assert parameter_digest(net) != before

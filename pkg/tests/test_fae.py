import numpy as np
import pytest
import torch
from torch import nn

from cfpct.errors import DomainError, ShapeError, ValidationError
from cfpct.fae import FaeConfig, build_fae, extract_pyramid, freeze, load_fae, save_fae
from cfpct.pipeline import Volume

DESK = FaeConfig(input_size=64, width_multiplier=0.25, blocks_per_stage=(1, 1, 3, 1), residual_layers=6)


def conv_census(model):
    return [m for m in model.modules() if isinstance(m, nn.Conv2d)]


def test_paper_shape_deepest_output():
    model = build_fae(FaeConfig(), seed=0)
    with torch.no_grad():
        taps = model(torch.zeros(1, 1, 256, 256))
    assert [tuple(t.shape[1:]) for t in taps] == [(32, 256, 256), (64, 128, 128), (128, 64, 64), (256, 32, 32)]


def test_paper_shape_layer_census():
    model = build_fae(FaeConfig(), seed=0)
    convs = conv_census(model)
    assert len(convs) == 5 + 2 * 31
    assert sum(isinstance(m, nn.MaxPool2d) for m in model.modules()) == 3
    assert not any(isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d, nn.GroupNorm)) for m in model.modules())


def test_desk_shapes_and_law():
    model = build_fae(DESK, seed=0)
    x = torch.rand(2, 1, 64, 64)
    taps = model(x)
    assert tuple(taps[-1].shape) == (2, 64, 8, 8)
    for level, t in enumerate(taps):
        assert t.shape[1] == DESK.channels[level]
        assert t.shape[-1] == 64 >> level


def test_same_seed_same_init():
    a, b = build_fae(DESK, 3), build_fae(DESK, 3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = build_fae(DESK, 4)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_config_validation():
    with pytest.raises(ValidationError, match="sums to"):
        FaeConfig(blocks_per_stage=(1, 1, 1, 1)).validate()
    with pytest.raises(ValidationError):
        FaeConfig(input_size=60).validate()
    with pytest.raises(ValidationError):
        FaeConfig(stage_channels=(1, 2, 3)).validate()


def test_pyramid_nonnegative_and_pure():
    model = build_fae(DESK, 1)
    img = np.random.default_rng(0).uniform(0, 0.25, (64, 64)).astype(np.float32)
    p1 = extract_pyramid(model, img)
    p2 = extract_pyramid(model, img)
    assert len(p1) == 4
    for a, b in zip(p1, p2):
        assert a.dim() == 3 and float(a.min()) >= 0
        assert torch.equal(a, b)


def test_zero_image_zero_bias_gives_zero_pyramid():
    model = build_fae(DESK, 1)
    for p in model.parameters():
        if p.dim() == 1:
            assert float(p.detach().abs().max()) == 0.0
    assert all(float(t.abs().max()) == 0.0 for t in extract_pyramid(model, np.zeros((64, 64), np.float32)))


def test_extract_pyramid_errors():
    model = build_fae(DESK, 1)
    with pytest.raises(ShapeError):
        extract_pyramid(model, np.zeros((32, 32), np.float32))
    with pytest.raises(DomainError):
        extract_pyramid(model, Volume(np.zeros((1, 64, 64), np.float32), value_domain="HU"))
    lac = Volume(np.full((1, 64, 64), 0.1, np.float32), value_domain="LAC")
    assert len(extract_pyramid(model, lac)) == 4


def test_gradient_reaches_every_parameter():
    model = build_fae(DESK, 2)
    x = torch.rand(2, 1, 64, 64)
    model(x)[3].pow(2).mean().backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and float(p.grad.abs().sum()) > 0, name


def test_last_shared_conv_is_final_backbone_conv():
    model = build_fae(DESK, 0)
    assert model.last_shared_conv is conv_census(model)[-1]


def test_checkpoint_roundtrip(tmp_path):
    model = build_fae(DESK, 5)
    path = save_fae(tmp_path / "fae.npz", model, seed=5)
    back = load_fae(path)
    assert back.cfg == DESK
    for (na, pa), (nb, pb) in zip(model.state_dict().items(), back.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)


def test_freeze():
    model = freeze(build_fae(DESK, 0))
    assert not model.training
    assert not any(p.requires_grad for p in model.parameters())

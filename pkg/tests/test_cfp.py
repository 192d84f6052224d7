import numpy as np
import pytest
import torch

from cfpct.cfp import CfpConfig, cfp_loss, content_loss, gram, style_loss
from cfpct.errors import ShapeError, ValidationError
from oracles import content_loop, finite_difference_error, gram_loop, style_loop


def rand(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape))


def pyramid(seed, channels=(2, 3, 4, 5), side=8):
    return [rand(c, side >> i, side >> i, seed=seed * 10 + i).abs() for i, c in enumerate(channels)]


def test_content_loss_examples():
    a = rand(3, 4, 5)
    assert float(content_loss(a, a)) == 0.0
    for shape in ((1, 1, 1), (2, 3, 3), (4, 2, 7)):
        x = rand(*shape, seed=1)
        assert float(content_loss(x, x + 1)) == pytest.approx(1.0, abs=1e-12)
    x, y = rand(2, 3, 3, seed=2), rand(2, 3, 3, seed=3)
    assert float(content_loss(x, y)) == pytest.approx(content_loop(x.numpy(), y.numpy()), abs=1e-6)
    assert float(content_loss(x, y)) == float(content_loss(y, x))
    with pytest.raises(ShapeError):
        content_loss(x, rand(2, 3, 4))


def test_gram_examples():
    g = gram(torch.ones(2, 2, 2, dtype=torch.float64))
    assert torch.allclose(g, torch.full((2, 2), 0.5, dtype=torch.float64))
    assert torch.count_nonzero(gram(torch.zeros(3, 4, 4))) == 0
    for seed in range(10):
        x = rand(4, 3, 5, seed=seed)
        g = gram(x)
        assert torch.allclose(g, g.T)
        assert float(torch.linalg.eigvalsh(g).min()) >= -1e-8
        assert np.allclose(g.numpy(), gram_loop(x.numpy()), atol=1e-6)


def test_style_loss_examples():
    a = rand(2, 2, 2, seed=4)
    assert float(style_loss(a, a)) == 0.0
    perm = torch.randperm(9, generator=torch.Generator().manual_seed(0))
    x = rand(3, 3, 3, seed=5)
    xp = x.reshape(3, 9)[:, perm].reshape(3, 3, 3)
    assert float(style_loss(x, xp)) == pytest.approx(0.0, abs=1e-12)
    b = rand(2, 2, 2, seed=6)
    assert float(style_loss(a, b)) == pytest.approx(style_loop(a.numpy(), b.numpy()), abs=1e-6)
    assert float(style_loss(a, b)) == pytest.approx(float(style_loss(b, a)), abs=1e-15)
    # spatial sizes may differ
    assert float(style_loss(rand(2, 4, 4), rand(2, 3, 5))) >= 0
    with pytest.raises(ShapeError):
        style_loss(rand(2, 2, 2), rand(3, 2, 2))


def test_cfp_examples():
    pa, pb = pyramid(1), pyramid(2)
    assert float(cfp_loss(pa, pa)) == 0.0
    cfg = CfpConfig(a=1.0, b=0.0, s1=1)
    assert float(cfp_loss(pa, pb, cfg)) == float(content_loss(pa[0], pb[0]))
    assert float(cfp_loss(pa, pb, CfpConfig(b=0.0, s1=1))) == pytest.approx(0.5 * float(content_loss(pa[0], pb[0])), rel=1e-15)
    manual = 0.5 / 2 * (content_loop(pa[0].numpy(), pb[0].numpy()) + content_loop(pa[1].numpy(), pb[1].numpy()))
    manual += 0.5 / 4 * sum(style_loop(pa[i].numpy(), pb[i].numpy()) for i in range(4))
    assert float(cfp_loss(pa, pb)) == pytest.approx(manual, abs=1e-6)


def test_cfp_config_errors():
    with pytest.raises(ValidationError):
        CfpConfig(s1=5).validate()
    with pytest.raises(ValidationError):
        CfpConfig(a=-1).validate()
    with pytest.raises(ValidationError):
        cfp_loss(pyramid(0)[:2], pyramid(1)[:2])
    with pytest.raises(ShapeError):
        cfp_loss(pyramid(0), pyramid(1)[:3])


def test_batched_inputs_average_per_sample():
    a, b = rand(3, 2, 4, 4, seed=7), rand(3, 2, 4, 4, seed=8)
    per = [float(style_loss(a[i], b[i])) for i in range(3)]
    assert float(style_loss(a, b)) == pytest.approx(np.mean(per), rel=1e-12)
    per = [float(content_loss(a[i], b[i])) for i in range(3)]
    assert float(content_loss(a, b)) == pytest.approx(np.mean(per), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    b = rand(3, 4, 4, seed=100 + seed)
    a = rand(3, 4, 4, seed=200 + seed)
    assert finite_difference_error(lambda x: content_loss(x, b), a) < 1e-4
    assert finite_difference_error(lambda x: style_loss(x, b), a) < 1e-4
    sides = (4, 2, 1, 1)
    pb = [rand(3, s, s, seed=300 + seed + i).abs() for i, s in enumerate(sides)]
    rest = [rand(3, s, s, seed=400 + seed + i).abs() for i, s in enumerate(sides)]
    assert finite_difference_error(lambda x: cfp_loss([x] + rest[1:], pb), a.abs()) < 1e-4

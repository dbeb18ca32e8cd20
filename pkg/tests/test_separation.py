import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles as o
from conftest import SMALL_CHANNELS
from fosp import compositor
from fosp.separation import (
    Inpainter,
    coverage_mask,
    masked_region_error,
    separate,
    train_inpainter,
)


def _inpainter(seed=0, dtype=torch.float64, width=4):
    torch.manual_seed(seed)
    return Inpainter(SMALL_CHANNELS, width=width).to(dtype).eval()


def _image(size=64, seed=0, batch=1, dtype=torch.float64):
    return torch.rand(batch, 3, size, size, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_blank_encode_is_deterministic():
    net = _inpainter()
    x = _image()
    blank = torch.zeros(1, 1, 64, 64, dtype=torch.float64)
    with torch.no_grad():
        assert torch.equal(net.encode(x, blank), net.encode(x, blank))


def test_zero_focus_map_equals_blank():
    net = _inpainter()
    x = _image()
    fm = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    with torch.no_grad():
        a = net.encode(x, F.interpolate(fm, size=(64, 64), mode="bilinear", align_corners=False))
        b = net.encode(x, torch.zeros(1, 1, 64, 64, dtype=torch.float64))
    assert torch.equal(a, b)


def test_latent_and_decoder_scales_at_512():
    net = _inpainter(dtype=torch.float32)
    with torch.no_grad():
        latent = net.encode(torch.rand(1, 3, 512, 512), torch.zeros(1, 1, 512, 512))
        feats = net.decode(latent)
    assert latent.shape == (1, SMALL_CHANNELS[0], 16, 16)
    assert [f.shape[-1] for f in feats] == [16, 32, 64, 128]
    assert [f.shape[1] for f in feats] == list(SMALL_CHANNELS)


def test_mask_size_mismatch():
    net = _inpainter()
    with pytest.raises(ValueError):
        net.encode(_image(), torch.zeros(1, 1, 32, 32, dtype=torch.float64))


def test_zero_latent_zero_bias_decodes_to_zero():
    net = _inpainter()
    with torch.no_grad():
        for dec in net.decoders:
            dec.conv1.bias.zero_()
            dec.conv2.bias.zero_()
        feats = net.decode(torch.zeros(1, SMALL_CHANNELS[0], 2, 2, dtype=torch.float64))
    assert all(torch.count_nonzero(f) == 0 for f in feats)


def test_decode_matches_reference():
    net = _inpainter(seed=7)
    latent = torch.randn(1, SMALL_CHANNELS[0], 2, 2, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
    with torch.no_grad():
        feats = net.decode(latent)
    x = o.t2n(latent)
    for dec, got in zip(net.decoders, feats[1:]):
        x = o.conv2d(o.gelu(o.conv2d(o.nearest2x(x), *o.conv_of(dec.conv1))), *o.conv_of(dec.conv2))
        np.testing.assert_allclose(o.t2n(got), x, atol=1e-6)


@pytest.mark.parametrize("param_seed", [0, 1, 2])
def test_null_separation_is_exact(param_seed):
    net = _inpainter(seed=param_seed)
    x = _image(seed=param_seed, batch=2)
    with torch.no_grad():
        fg = separate(x, torch.zeros(2, 1, 4, 4, dtype=torch.float64), net, beta=10.0)
    assert all(torch.count_nonzero(f) == 0 for f in fg)


def test_gain_is_linear_and_non_negative():
    net = _inpainter(seed=4)
    x = _image(seed=4)
    fm = torch.rand(1, 1, 4, 4, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    with torch.no_grad():
        a = separate(x, fm, net, beta=10.0)
        b = separate(x, fm, net, beta=20.0)
    for u, v in zip(a, b):
        assert torch.equal(v, 2 * u)
        assert (u >= 0).all()


def test_foreground_shapes_mirror_backbone():
    from fosp.backbone import HierarchicalEncoder

    x = _image(size=128, dtype=torch.float32)
    with torch.no_grad():
        feats = HierarchicalEncoder(SMALL_CHANNELS)(x)
        fg = separate(x, torch.rand(1, 1, 8, 8), _inpainter(dtype=torch.float32), 10.0)
    assert [f.shape for f in fg] == [f.shape for f in feats]


class _StubInpainter:
    """Branch features differ by exactly 0.3 at one element when the mask is non-zero."""

    def encode(self, image, mask):
        return mask.sum().reshape(1, 1, 1, 1)

    def decode(self, latent):
        f = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
        if latent.item() > 0:
            f[0, 1, 0, 1] = 0.3
        return [f]


def test_gain_of_ten_on_single_difference():
    fg = separate(torch.zeros(1, 3, 32, 32, dtype=torch.float64), torch.ones(1, 1, 2, 2, dtype=torch.float64), _StubInpainter(), 10.0)
    assert fg[0][0, 1, 0, 1].item() == pytest.approx(3.0, abs=1e-12)
    assert torch.count_nonzero(fg[0]) == 1


@pytest.mark.parametrize("beta", [0.0, -1.0])
def test_non_positive_gain_rejected(beta):
    with pytest.raises(ValueError):
        separate(_image(), None, _inpainter(), beta)


def _pairs(n, seed, size=64):
    images, backgrounds, masks = [], [], []
    cfg = compositor.DatasetConfig(height=size, width=size)
    for i in range(n):
        s, _ = compositor.make_sample(seed * 1000 + i, cfg)
        images.append(s.image)
        backgrounds.append(s.background)
        masks.append(s.mask)
    to_t = lambda a: torch.from_numpy(np.stack(a)).permute(0, 3, 1, 2).float().contiguous()  # noqa: E731
    return to_t(images), to_t(backgrounds), torch.from_numpy(np.stack(masks)[:, None].astype(np.float32))


def test_zero_steps_leave_parameters_unchanged():
    net = _inpainter(dtype=torch.float32)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    x, b, y = _pairs(4, seed=1)
    train_inpainter(net, x, b, y, steps=0)
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())


def test_training_is_seed_deterministic():
    x, b, y = _pairs(8, seed=2)
    runs = []
    for _ in range(2):
        net = _inpainter(seed=3, dtype=torch.float32)
        runs.append(train_inpainter(net, x, b, y, steps=5, batch_size=4, seed=9).losses)
    assert runs[0] == runs[1]


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train_inpainter(_inpainter(dtype=torch.float32), torch.zeros(0, 3, 64, 64), torch.zeros(0, 3, 64, 64), torch.zeros(0, 1, 64, 64))


@pytest.fixture(scope="module")
def trained_inpainter():
    """Trained on 200 composited images, with 100 held-out images for evaluation."""
    x, b, y = _pairs(200, seed=5)
    torch.manual_seed(0)
    net = Inpainter((64, 40, 16, 8), width=8).eval()
    untrained = {k: v.clone() for k, v in net.state_dict().items()}
    result = train_inpainter(net, x, b, y, steps=400, batch_size=6, seed=0, log_every=0)
    return net, untrained, result, _pairs(100, seed=6)


@pytest.mark.slow
def test_training_reduces_masked_region_error(trained_inpainter):
    net, untrained, result, (x, b, y) = trained_inpainter
    fresh = Inpainter((64, 40, 16, 8), width=8).eval()
    fresh.load_state_dict(untrained)
    before = masked_region_error(fresh, x[:50], b[:50], y[:50])
    after = masked_region_error(net, x[:50], b[:50], y[:50])
    assert after < before
    assert all(np.isfinite(result.losses))


@pytest.mark.slow
def test_foreground_concentrates_on_true_smoke(trained_inpainter):
    net, _, _, (x, b, y) = trained_inpainter
    hits = 0
    with torch.no_grad():
        for i in range(100):
            fg = separate(x[i : i + 1], coverage_mask(y[i : i + 1]), net, 10.0)
            energy = F.interpolate(fg[-1].mean(1, keepdim=True), size=x.shape[-2:], mode="nearest")[0, 0]
            inside = y[i, 0] > 0
            hits += bool(energy[inside].mean() > energy[~inside].mean())
    assert hits >= 90, hits

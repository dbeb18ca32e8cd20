import pytest
import torch

from fosp.backbone import HierarchicalEncoder, ShapeError, check_pyramid


def _encoder(channels=(16, 12, 8, 4), mixer="conv", seed=0):
    torch.manual_seed(seed)
    return HierarchicalEncoder(channels, mixer=mixer).double()


@pytest.mark.parametrize("size,expected", [(512, [16, 32, 64, 128]), (64, [2, 4, 8, 16])])
def test_pyramid_scales(size, expected):
    enc = _encoder().float()
    with torch.no_grad():
        feats = enc(torch.rand(1, 3, size, size))
    assert [f.shape[-1] for f in feats] == expected
    assert [f.shape[-2] for f in feats] == expected
    assert [f.shape[1] for f in feats] == [16, 12, 8, 4]
    check_pyramid(feats, size, size)


def test_non_square_ladder():
    enc = _encoder().float()
    with torch.no_grad():
        feats = enc(torch.rand(2, 3, 64, 128))
    for a, b in zip(feats, feats[1:]):
        assert b.shape[-2] == 2 * a.shape[-2] and b.shape[-1] == 2 * a.shape[-1]


def test_divisibility_error_names_both_axes():
    with pytest.raises(ShapeError, match="height=60 and width=60"):
        _encoder()(torch.rand(1, 3, 60, 60, dtype=torch.float64))


def test_divisibility_error_names_single_axis():
    with pytest.raises(ShapeError, match="width=70") as exc:
        _encoder()(torch.rand(1, 3, 64, 70, dtype=torch.float64))
    assert "height" not in str(exc.value)


def test_non_finite_rejected():
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64)
    x[0, 1, 3, 3] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        _encoder()(x)


@pytest.mark.parametrize("mixer", ["conv", "attention"])
def test_deterministic(mixer):
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    a = _encoder(mixer=mixer, seed=3).float()
    b = _encoder(mixer=mixer, seed=3).float()
    with torch.no_grad():
        fa, fb = a(x), b(x)
    for u, v in zip(fa, fb):
        assert torch.equal(u, v)


def test_parameter_count_deterministic():
    count = lambda m: sum(p.numel() for p in m.parameters())  # noqa: E731
    assert count(_encoder(seed=1)) == count(_encoder(seed=2))
    assert count(HierarchicalEncoder((32, 16, 8, 4), depths=(2, 1, 1, 1))) > count(HierarchicalEncoder((32, 16, 8, 4)))


def test_every_parameter_influences_output():
    enc = _encoder(channels=(8, 6, 4, 4), seed=5)
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        ref = enc(x)
        for name, p in enc.named_parameters():
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + 1e-4
                out = enc(x)
                flat[j] = orig
                changed = any(not torch.equal(a, b) for a, b in zip(ref, out))
                assert changed, f"{name}[{j}] has no effect"

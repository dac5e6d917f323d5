import pytest
import torch

from golfnrt.features import FeatureExtractor, extract
from golfnrt.numkernel import ShapeError, grad_check, make_generator


def image(h, w, seed=0):
    return torch.rand(h, w, 3, generator=make_generator(seed), dtype=torch.float64)


def test_pyramid_shapes():
    pyr = FeatureExtractor(8, generator=make_generator(0))(image(64, 64))
    assert pyr.quarter.shape == (1, 16, 16, 8)
    assert pyr.eighth.shape == (1, 8, 8, 8)
    assert pyr.sixteenth.shape == (1, 4, 4, 8)


def test_non_multiple_sizes_are_padded_then_cropped():
    pyr = FeatureExtractor(8, generator=make_generator(0))(image(20, 36))
    assert pyr.quarter.shape[1:3] == (5, 9)
    assert pyr.eighth.shape[1:3] == (3, 5)
    assert pyr.sixteenth.shape[1:3] == (2, 3)


def test_undersized_image_rejected():
    with pytest.raises(ShapeError):
        FeatureExtractor(8)(image(8, 32))
    with pytest.raises(ShapeError):
        FeatureExtractor(8)(torch.zeros(1, 16, 16, 4, dtype=torch.float64))


def test_constant_image_bias_free_gives_constant_interior():
    fx = FeatureExtractor(8, bias=False, generator=make_generator(1))
    pyr = fx(torch.full((64, 64, 3), 0.4, dtype=torch.float64))
    for level in (pyr.quarter, pyr.eighth, pyr.sixteenth):
        # reflection padding of a constant map is the same constant, so every cell agrees
        assert (level - level[:, :1, :1]).abs().max() < 1e-12


def test_bottom_up_quarter_shift_equivariance():
    # the stride-4 bottom-up path alone is equivariant to 4 pixel shifts
    fx = FeatureExtractor(8, generator=make_generator(2))
    img = image(64, 64, seed=3).permute(2, 0, 1).unsqueeze(0)
    shifted = torch.roll(img, shifts=4, dims=-1)
    a = fx.bottom_up(img)[0]
    b = fx.bottom_up(shifted)[0]
    assert (b[..., 4:12, 5:13] - a[..., 4:12, 4:12]).abs().max() < 1e-6


def test_full_pyramid_quarter_shift_equivariance():
    # top-down merges from the 1/16 level make the pyramid equivariant to 16 pixel shifts (4 quarter cells)
    fx = FeatureExtractor(8, generator=make_generator(2))
    img = image(128, 128, seed=4)
    shifted = torch.roll(img, shifts=16, dims=1)
    a, b = fx(img).quarter[0], fx(shifted).quarter[0]
    assert (b[8:24, 12:24] - a[8:24, 8:20]).abs().max() < 1e-6


def test_shared_weights_across_views():
    fx = FeatureExtractor(8, generator=make_generator(0))
    views = torch.stack([image(32, 32, 1), image(32, 32, 2), image(32, 32, 3)])
    batch = fx(views)
    for i in range(3):
        one = extract(views[i], fx)
        assert torch.equal(batch.view(i).quarter, one.quarter)
    perm = fx(views[[2, 0, 1]])
    assert torch.equal(perm.eighth, batch.eighth[[2, 0, 1]])
    assert torch.equal(batch.select([1]).quarter, batch.quarter[[1]])


def test_deterministic_under_fixed_weights():
    a = FeatureExtractor(8, generator=make_generator(5))(image(32, 32))
    b = FeatureExtractor(8, generator=make_generator(5))(image(32, 32))
    assert torch.equal(a.quarter, b.quarter) and torch.equal(a.sixteenth, b.sixteenth)


def test_pyramid_gradients():
    fx = FeatureExtractor(4, generator=make_generator(0))
    img = image(16, 16)
    w = [torch.randn(1, 4 // s, 4 // s, 4, generator=make_generator(s), dtype=torch.float64) for s in (1, 2, 4)]

    def loss():
        p = fx(img)
        return (p.quarter * w[0]).sum() + (p.eighth * w[1]).sum() + (p.sixteenth * w[2]).sum()

    report = grad_check(loss, fx, entries_per_param=4)
    assert report.passed, str(report)

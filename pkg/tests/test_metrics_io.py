import numpy as np
import pytest

from golfnrt.harness.imageio import load_float_dump, load_png, save_float_dump, save_png, to_uint8
from golfnrt.harness.metrics import mse, psnr, ssim


def reference_ssim(a, b):
    """Loop-per-window SSIM with an explicitly built 11x11 Gaussian window."""
    size, sigma = 11, 1.5
    ax = np.arange(size) - 5.0
    win = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    win /= win.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        for i in range(x.shape[0] - size + 1):
            for j in range(x.shape[1] - size + 1):
                px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
                mx, my = (win * px).sum(), (win * py).sum()
                vx = (win * (px - mx) ** 2).sum()
                vy = (win * (py - my) ** 2).sum()
                cov = (win * (px - mx) * (py - my)).sum()
                vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_identical_images():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert psnr(img, img) == 99.0
    assert abs(ssim(img, img) - 1.0) < 1e-12


def test_uniform_offset_gives_20_db():
    img = np.random.default_rng(1).uniform(0, 0.9, size=(12, 12, 3))
    assert abs(mse(img, img + 0.1) - 0.01) < 1e-12
    assert abs(psnr(img, img + 0.1) - 20.0) < 1e-9


def test_ssim_matches_reference():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(20, 18, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ssim(a, b) - reference_ssim(a, b)) < 1e-6
    c = rng.uniform(size=(20, 18, 3))
    assert abs(ssim(a, c) - reference_ssim(a, c)) < 1e-6
    assert -1 <= ssim(a, 1 - a) <= 1


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12, 3)), np.zeros((12, 12, 1)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(3).uniform(-0.2, 1.2, size=(9, 7, 3))
    path = save_png(tmp_path / "a.png", img)
    back = load_png(path)
    assert back.shape == (9, 7, 3)
    assert np.array_equal(to_uint8(back), to_uint8(img))


def test_float_dump_is_lossless(tmp_path):
    arr = np.random.default_rng(4).normal(size=(5, 6, 3))
    arr[0, 0, 0] = np.nextafter(1.0, 2.0)
    path = save_float_dump(tmp_path / "a.f64", arr, {"camera": 3})
    back, meta = load_float_dump(path)
    assert np.array_equal(back, arr) and meta == {"camera": 3}
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_float_dump(tmp_path / "junk")

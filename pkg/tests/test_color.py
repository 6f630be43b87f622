import numpy as np
import pytest

from optiacoustic.color import color_correct


def test_low_contrast_gray_is_stretched():
    ramp = np.tile(np.linspace(100, 120, 32).astype(np.uint8), (8, 1))
    img = np.repeat(ramp[..., None], 3, axis=2)
    out = color_correct(img)
    assert out.dtype == np.uint8 and out.shape == img.shape
    assert int(out[..., 0].max()) - int(out[..., 0].min()) > 200
    # neutral input stays neutral
    assert np.max(np.abs(out[..., 0].astype(int) - out[..., 2].astype(int))) <= 2


def test_constant_image_is_left_alone():
    img = np.full((4, 5, 3), (90, 140, 60), dtype=np.uint8)
    out = color_correct(img)
    np.testing.assert_allclose(out.astype(int), img.astype(int), atol=2)


def test_input_is_not_modified():
    img = np.random.default_rng(0).integers(0, 60, (6, 6, 3), dtype=np.uint8)
    before = img.copy()
    color_correct(img)
    np.testing.assert_array_equal(img, before)


@pytest.mark.parametrize(
    "img",
    [np.zeros((4, 4), dtype=np.uint8), np.zeros((4, 4, 4), dtype=np.uint8), np.zeros((4, 4, 3), dtype=np.float32)],
)
def test_non_rgb8_input_is_rejected(img):
    with pytest.raises(ValueError):
        color_correct(img)

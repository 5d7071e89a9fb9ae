import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facepipe.errors import InvalidInputError
from facepipe.tensor import (Image, LetterboxMeta, Tensor, bilinear_sample, letterbox,
                             normalize_to_tensor)


def gradient(w, h):
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    px = np.stack([xs % 256, ys % 256, (xs + ys) % 256], axis=-1)
    return Image(px.astype(np.uint8))


class TestTensor:
    def test_f32_rejects_qscale(self):
        with pytest.raises(InvalidInputError):
            Tensor(np.zeros(3, np.float32), qscale=0.1)

    def test_i8_needs_positive_qscale(self):
        with pytest.raises(InvalidInputError):
            Tensor(np.zeros(3, np.int8))
        with pytest.raises(InvalidInputError):
            Tensor(np.zeros(3, np.int8), qscale=0.0)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            Tensor.f32([1.0, np.nan])

    def test_immutable(self):
        t = Tensor.f32([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 3.0

    def test_dequantize(self):
        t = Tensor(np.array([64, -127], np.int8), qscale=0.5)
        np.testing.assert_array_equal(t.dequantize(), [32.0, -63.5])


class TestLetterbox:
    def test_identity(self):
        img = gradient(640, 640)
        out, meta = letterbox(img, 640, 640)
        np.testing.assert_array_equal(out.pixels, img.pixels)
        assert meta == LetterboxMeta(1.0, 0.0, 0.0, 640, 640)

    def test_640x480(self):
        out, meta = letterbox(gradient(640, 480), 640, 640)
        assert meta.scale == 1.0 and meta.pad_top == 80 and meta.pad_left == 0
        assert (out.width, out.height) == (640, 640)
        assert np.all(out.pixels[:80] == 114) and np.all(out.pixels[560:] == 114)

    def test_1280x720(self):
        out, meta = letterbox(gradient(1280, 720), 640, 640)
        assert meta.scale == 0.5 and meta.pad_top == 140 and meta.pad_left == 0
        assert np.all(out.pixels[:140] == 114)
        assert np.all(out.pixels[500:] == 114)
        assert not np.all(out.pixels[140] == 114)

    def test_odd_padding_goes_bottom_right(self):
        out, meta = letterbox(Image.blank(10, 7, (255, 0, 0)), 10, 10, fill=0)
        # 3 spare rows: 1 on top, 2 at the bottom
        assert meta.pad_top == 1
        assert np.all(out.pixels[0] == 0) and np.all(out.pixels[8:] == 0)
        assert np.all(out.pixels[1:8, :, 0] == 255)

    def test_fill_configurable(self):
        out, _ = letterbox(Image.blank(4, 2), 4, 4, fill=7)
        assert out.pixels[0, 0, 0] == 7

    def test_rejects_bad_target(self):
        with pytest.raises(InvalidInputError):
            letterbox(Image.blank(4, 4), 0, 4)

    def test_zero_sized_image_rejected(self):
        with pytest.raises(InvalidInputError):
            Image(np.zeros((0, 5, 3), np.uint8))


class TestNormalize:
    def test_zero(self):
        t = normalize_to_tensor(Image.blank(3, 2))
        assert t.shape == (1, 3, 2, 3)
        assert not t.data.any()

    def test_white_is_one(self):
        t = normalize_to_tensor(Image.blank(1, 1, (255, 255, 255)))
        assert np.all(t.data == 1.0)

    def test_128(self):
        t = normalize_to_tensor(Image.blank(1, 1, (128, 0, 0)))
        assert t.data[0, 0, 0, 0] == pytest.approx(0.501960784, abs=1e-7)

    def test_channel_order_rgb(self):
        t = normalize_to_tensor(Image.blank(1, 1, (255, 0, 51)))
        np.testing.assert_allclose(t.data.ravel(), [1.0, 0.0, 0.2], atol=1e-7)

    @given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
    def test_range(self, px):
        t = normalize_to_tensor(Image(px))
        assert t.data.min() >= 0.0 and t.data.max() <= 1.0


class TestBilinear:
    def test_lattice_exact(self):
        img = gradient(5, 4)
        for y in range(4):
            for x in range(5):
                assert bilinear_sample(img, x, y) == tuple(float(v) for v in img.pixels[y, x])

    def test_midpoint(self):
        px = np.zeros((1, 2, 3), np.uint8)
        px[0, 1] = 100
        assert bilinear_sample(Image(px), 0.5, 0.0) == (50.0, 50.0, 50.0)

    def test_clamps_outside(self):
        img = gradient(5, 4)
        assert bilinear_sample(img, -3.0, -7.0) == tuple(float(v) for v in img.pixels[0, 0])
        assert bilinear_sample(img, 99.0, 2.0) == tuple(float(v) for v in img.pixels[2, 4])

    @settings(max_examples=50)
    @given(st.floats(-2, 6), st.floats(-2, 5))
    def test_continuous(self, x, y):
        img = gradient(5, 4)
        a = np.array(bilinear_sample(img, x, y))
        b = np.array(bilinear_sample(img, x + 1e-7, y + 1e-7))
        # max gradient magnitude is 255 per pixel per axis
        assert np.max(np.abs(a - b)) <= 255 * 2e-7 + 1e-9


@settings(max_examples=200)
@given(st.integers(1, 2000), st.integers(1, 2000), st.floats(0, 1), st.floats(0, 1))
def test_letterbox_point_round_trip(w, h, fx, fy):
    from facepipe.detect import Detection, unmap_coords
    # meta only; no need to build the image
    r = min(640 / w, 640 / h)
    new_w, new_h = min(640, max(1, int(np.floor(w * r + 0.5)))), min(640, max(1, int(np.floor(h * r + 0.5))))
    meta = LetterboxMeta(r, float((640 - new_w) // 2), float((640 - new_h) // 2), w, h)
    px, py = fx * w, fy * h
    lx, ly = meta.to_letterbox(px, py)
    det = Detection((lx - 1, ly - 1, lx + 1, ly + 1), 1.0, ((lx, ly),) * 5)
    out = unmap_coords([det], meta)
    assert out, "in-bounds point must survive unmapping"
    qx, qy = out[0].landmarks[0]
    assert abs(qx - px) <= 0.51 and abs(qy - py) <= 0.51

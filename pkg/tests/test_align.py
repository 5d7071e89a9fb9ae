import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facepipe.align import (DEFAULT_TEMPLATE, IDENTITY, SimilarityTransform, align_face,
                            align_transform, crop_face, eye_order_ok, residual,
                            solve_similarity, warp_crop)
from facepipe.detect import Detection
from facepipe.errors import DegenerateConfigurationError, InvalidInputError
from facepipe.tensor import Image

TPL = np.array(DEFAULT_TEMPLATE)


def gradient(w, h):
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    return Image(np.stack([xs % 256, ys % 256, (3 * xs + ys) % 256], -1).astype(np.uint8))


def det_with(landmarks):
    lm = np.asarray(landmarks)
    box = (lm[:, 0].min() - 10, lm[:, 1].min() - 10, lm[:, 0].max() + 10, lm[:, 1].max() + 10)
    return Detection(box, 0.9, tuple(map(tuple, lm)))


class TestSolve:
    def test_identity(self):
        T = solve_similarity(TPL, TPL)
        assert T.a == pytest.approx(1, abs=1e-12) and T.b == pytest.approx(0, abs=1e-12)
        assert T.tx == pytest.approx(0, abs=1e-9) and T.ty == pytest.approx(0, abs=1e-9)

    def test_rotation_90(self):
        rot = np.stack([-TPL[:, 1], TPL[:, 0]], axis=1)
        T = solve_similarity(TPL, rot)
        np.testing.assert_allclose([T.a, T.b, T.tx, T.ty], [0, 1, 0, 0], atol=1e-9)

    def test_recover_synthetic(self):
        truth = SimilarityTransform(1.3, 0.2, 5.0, -3.0)
        pts = np.array([[3.0, 7.0], [11.0, -2.0], [-4.0, 5.5], [0.5, 0.25], [9.0, 13.0]])
        T = solve_similarity(pts, truth.apply(pts))
        np.testing.assert_allclose([T.a, T.b, T.tx, T.ty], [1.3, 0.2, 5.0, -3.0], atol=1e-9)
        assert residual(T, pts, truth.apply(pts)) < 1e-9

    def test_coincident(self):
        with pytest.raises(DegenerateConfigurationError):
            solve_similarity(np.ones((5, 2)), TPL)

    def test_bad_shapes(self):
        with pytest.raises(InvalidInputError):
            solve_similarity(TPL[:4], TPL)

    @settings(max_examples=100)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_residual_never_worse_than_identity(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.uniform(-50, 50, (5, 2))
        dst = rng.uniform(-50, 50, (5, 2))
        T = solve_similarity(src, dst)
        assert residual(T, src, dst) <= residual(IDENTITY, src, dst) + 1e-9

    @settings(max_examples=100)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_local_optimality(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.uniform(0, 100, (5, 2))
        dst = rng.uniform(0, 100, (5, 2))
        T = solve_similarity(src, dst)
        base = residual(T, src, dst)
        for k in range(4):
            p = np.array([T.a, T.b, T.tx, T.ty])
            for step in (1e-3, -1e-3):
                q = p.copy()
                q[k] += step
                assert residual(SimilarityTransform(*q), src, dst) >= base - 1e-9

    def test_inverse(self):
        T = SimilarityTransform(0.8, -0.3, 4.0, 9.0)
        pts = TPL
        np.testing.assert_allclose(T.inverse().apply(T.apply(pts)), pts, atol=1e-12)


class TestWarp:
    def test_identity_crop(self):
        img = gradient(150, 130)
        out = warp_crop(img, IDENTITY, 112, 112)
        np.testing.assert_array_equal(out.pixels, img.pixels[:112, :112])

    def test_translation(self):
        img = gradient(150, 130)
        # output (u, v) samples source (u + 10, v)
        out = warp_crop(img, SimilarityTransform(1, 0, -10, 0), 100, 100)
        np.testing.assert_array_equal(out.pixels, img.pixels[:100, 10:110])

    def test_constant(self):
        img = Image.blank(50, 40, (12, 200, 77))
        out = warp_crop(img, SimilarityTransform(0.7, 0.4, -3, 8), 112, 112)
        assert np.all(out.pixels == (12, 200, 77))

    def test_zero_scale(self):
        with pytest.raises(DegenerateConfigurationError):
            warp_crop(Image.blank(4, 4), SimilarityTransform(0, 0, 0, 0), 4, 4)


class TestAlignFace:
    def test_template_landmarks(self):
        img = gradient(200, 200)
        out = align_face(img, det_with(TPL))
        assert out.pixels.shape == (112, 112, 3)
        np.testing.assert_array_equal(out.pixels, img.pixels[:112, :112])

    def test_scaled_template(self):
        T = align_transform(det_with(TPL * 2 + (30, 40)))
        assert T.scale == pytest.approx(0.5, abs=1e-9)
        assert T.angle == pytest.approx(0.0, abs=1e-9)

    def test_mirrored_landmarks_flagged(self, caplog):
        mirrored = TPL[[1, 0, 2, 4, 3]]
        with caplog.at_level(logging.WARNING, logger="facepipe.align"):
            T = align_transform(det_with(mirrored))
        assert not eye_order_ok(T, mirrored)
        assert "eye order" in caplog.text
        # a reflection cannot be expressed, so the fit collapses its scale
        assert T.scale < 0.5

    def test_normal_landmarks_not_flagged(self, caplog):
        with caplog.at_level(logging.WARNING, logger="facepipe.align"):
            align_transform(det_with(TPL + 5))
        assert caplog.text == ""

    @settings(max_examples=30)
    @given(st.floats(0.3, 3), st.floats(-0.5, 0.5), st.floats(-20, 20), st.floats(-20, 20))
    def test_output_always_112(self, s, ang, dx, dy):
        T = SimilarityTransform(s * np.cos(ang), s * np.sin(ang), dx + 60, dy + 60)
        out = align_face(gradient(160, 160), det_with(T.apply(TPL)))
        assert out.pixels.shape == (112, 112, 3)

    def test_crop_face(self):
        img = Image.blank(64, 64, (9, 9, 9))
        out = crop_face(img, Detection((10, 10, 40, 50), 0.9, ((20, 20),) * 5))
        assert out.pixels.shape == (112, 112, 3) and np.all(out.pixels == 9)

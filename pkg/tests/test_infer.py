import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facepipe.errors import (BadMagicError, DanglingRefError, InvalidInputError,
                             ModelFormatError, QuantizationError, ShapeMismatchError,
                             TruncatedError)
from facepipe.infer import (ModelBuilder, QuantParams, calibrate, count_flops, dequantize,
                            dump_model, forward_f32, forward_i8, load_model, quantize,
                            quantize_model, read_model, write_model)
from facepipe.infer.engine import SCALE_FLOOR, round_half_away
from facepipe.tensor import Tensor
from oracles import naive_forward, random_micronet, relative_error


def linear_4_2():
    return ModelBuilder((1, 4)).linear(np.arange(8.0).reshape(2, 4), [0.5, -0.5]).build()


def split(data):
    (hlen,) = struct.unpack_from("<I", data, 4)
    return json.loads(data[8:8 + hlen]), data[8 + hlen:]


def join(header, blob):
    h = json.dumps(header).encode()
    return b"FTM1" + struct.pack("<I", len(h)) + h + blob


class TestContainer:
    def test_minimal_linear(self):
        m = load_model(dump_model(linear_4_2()))
        assert len(m.layers) == 1
        assert m.layers[0].kind == "linear"
        assert m.embedding_dim == 2

    def test_layout(self):
        data = dump_model(linear_4_2())
        assert data[:4] == b"FTM1"
        header, blob = split(data)
        assert header["version"] == 1
        assert len(blob) == sum(t["byte_len"] for t in header["tensors"])
        w = next(t for t in header["tensors"] if t["name"].endswith(".weight"))
        vals = np.frombuffer(blob[w["offset"]:w["offset"] + w["byte_len"]], "<f4")
        np.testing.assert_array_equal(vals, np.arange(8.0))

    def test_round_trip_bit_exact(self, rng, tmp_path):
        m = random_micronet(rng)
        write_model(m, tmp_path / "m.ftm")
        m2 = read_model(tmp_path / "m.ftm")
        assert dump_model(m2) == dump_model(m)
        x = Tensor.f32(rng.uniform(-1, 1, m.input_shape))
        assert forward_f32(m2, x).data.tobytes() == forward_f32(m, x).data.tobytes()

    def test_quantized_round_trip(self, rng):
        m = random_micronet(rng)
        x = Tensor.f32(rng.uniform(-1, 1, m.input_shape))
        q = quantize_model(m, calibrate(m, [x]))
        q2 = load_model(dump_model(q))
        assert q2.quantized
        assert forward_i8(q2, x).data.tobytes() == forward_i8(q, x).data.tobytes()

    def test_bad_magic(self):
        data = dump_model(linear_4_2())
        with pytest.raises(BadMagicError):
            load_model(b"XXXX" + data[4:])

    def test_truncated_blob(self):
        data = dump_model(linear_4_2())
        with pytest.raises(TruncatedError):
            load_model(data[:-3])

    def test_offset_past_end(self):
        header, blob = split(dump_model(linear_4_2()))
        header["tensors"][0]["offset"] = len(blob) + 100
        with pytest.raises(TruncatedError):
            load_model(join(header, blob))

    def test_truncated_header(self):
        data = dump_model(linear_4_2())
        with pytest.raises(TruncatedError):
            load_model(data[:20])
        with pytest.raises(TruncatedError):
            load_model(data[:6])

    def test_dangling_ref(self):
        header, blob = split(dump_model(linear_4_2()))
        header["layers"][0]["weight_refs"]["weight"] = "nope"
        with pytest.raises(DanglingRefError):
            load_model(join(header, blob))

    def test_shape_mismatch(self):
        header, blob = split(dump_model(linear_4_2()))
        w = next(t for t in header["tensors"] if t["name"].endswith(".weight"))
        w["shape"] = [4, 2]
        with pytest.raises(ShapeMismatchError):
            load_model(join(header, blob))

    def test_errors_are_distinct(self):
        classes = {BadMagicError, TruncatedError, DanglingRefError, ShapeMismatchError}
        for a in classes:
            assert issubclass(a, ModelFormatError)
            for b in classes - {a}:
                assert not issubclass(a, b)

    def test_geometry_mismatch(self):
        b = ModelBuilder((1, 4)).linear(np.ones((3, 4)))
        with pytest.raises(ShapeMismatchError):
            b.linear(np.ones((2, 4))).build()

    @settings(max_examples=60)
    @given(st.binary(max_size=64))
    def test_garbage_never_crashes_uncleanly(self, data):
        with pytest.raises(ModelFormatError):
            load_model(data)


class TestForward:
    def test_identity_conv(self, rng):
        m = ModelBuilder((1, 1, 5, 5)).conv2d(np.ones((1, 1, 1, 1)), [0.0]).build()
        x = Tensor.f32(rng.normal(size=(1, 1, 5, 5)))
        np.testing.assert_array_equal(forward_f32(m, x).data, x.data)

    def test_linear_hand(self):
        m = ModelBuilder((1, 2)).linear([[1, 2], [3, 4]]).build()
        np.testing.assert_array_equal(forward_f32(m, Tensor.f32([[1, 1]])).data, [[3, 7]])

    def test_zero_weights_give_bias(self, rng):
        m = ModelBuilder((1, 2, 4, 4)).conv2d(np.zeros((3, 2, 3, 3)), [1, 2, 3]).build()
        out = forward_f32(m, Tensor.f32(rng.normal(size=(1, 2, 4, 4)))).data
        assert out.shape == (1, 3, 2, 2)
        np.testing.assert_array_equal(out[0, :, 0, 0], [1, 2, 3])

    def test_depthwise_constant_interior(self):
        k = np.full((2, 1, 3, 3), 1 / 9)
        m = ModelBuilder((1, 2, 6, 6)).depthwise(k, padding=1).build()
        out = forward_f32(m, Tensor.f32(np.full((1, 2, 6, 6), 0.7))).data
        np.testing.assert_allclose(out[:, :, 1:-1, 1:-1], 0.7, rtol=1e-6)

    def test_prelu_hand(self):
        m = ModelBuilder((1, 1)).prelu(0.25).build()
        np.testing.assert_array_equal(forward_f32(m, Tensor.f32([[-4.0]])).data, [[-1.0]])
        np.testing.assert_array_equal(forward_f32(m, Tensor.f32([[3.0]])).data, [[3.0]])

    def test_cross_correlation(self):
        # no kernel flip: a kernel with 1 at its top-left picks the upper-left neighbour
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 0, 0] = 1
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out = forward_f32(ModelBuilder(x.shape).conv2d(k).build(), Tensor.f32(x)).data
        np.testing.assert_array_equal(out[0, 0], x[0, 0, :2, :2])

    def test_l2norm(self):
        m = ModelBuilder((1, 2)).l2norm().build()
        np.testing.assert_allclose(forward_f32(m, Tensor.f32([[3, 4]])).data, [[0.6, 0.8]])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            forward_f32(linear_4_2(), Tensor.f32([[1, 2, 3]]))

    def test_random_3_layer_matches_oracle(self):
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 10:
            m = random_micronet(rng, max_layers=3)
            if len(m.layers) != 3:
                continue
            x = rng.uniform(-1, 1, m.input_shape)
            got = forward_f32(m, Tensor.f32(x)).data
            assert relative_error(got, naive_forward(m, x)) <= 1e-5
            checked += 1

    def test_deterministic(self, rng):
        m = random_micronet(rng)
        x = Tensor.f32(rng.uniform(-1, 1, m.input_shape))
        a = forward_f32(m, x).data.tobytes()
        assert all(forward_f32(m, x).data.tobytes() == a for _ in range(3))


class TestFlops:
    def test_linear(self):
        assert count_flops(linear_4_2()) == 16

    def test_empty(self):
        assert count_flops(ModelBuilder((1, 4)).build()) == 0

    def test_conv(self):
        m = ModelBuilder((1, 1, 8, 8)).conv2d(np.ones((1, 1, 3, 3)), padding=1).build()
        assert count_flops(m) == 1152

    def test_additive(self, rng):
        b = ModelBuilder((1, 2, 8, 8)).conv2d(rng.normal(size=(4, 2, 3, 3)), padding=1)
        first = count_flops(b.build())
        b.depthwise(rng.normal(size=(4, 1, 3, 3)), stride=2, padding=1)
        both = count_flops(b.build())
        tail = count_flops(ModelBuilder((1, 4, 8, 8))
                           .depthwise(rng.normal(size=(4, 1, 3, 3)), stride=2, padding=1).build())
        assert both == first + tail


class TestQuantization:
    def test_zero_round_trip(self):
        assert dequantize(quantize(0.0, 0.1), 0.1) == 0.0

    def test_hand_value(self):
        assert quantize(0.5, 1 / 127) == 64
        assert dequantize(np.int8(64), 1 / 127) == pytest.approx(0.50394, abs=1e-5)

    def test_round_half_away(self):
        np.testing.assert_array_equal(round_half_away(np.array([0.5, -0.5, 1.5, -2.5])),
                                      [1, -1, 2, -3])

    def test_clamps(self):
        assert quantize(1000.0, 1.0) == 127 and quantize(-1000.0, 1.0) == -127

    @given(st.floats(1e-6, 1e3), st.floats(-1, 1))
    def test_round_trip_bound(self, scale, frac):
        x = frac * 127 * scale
        err = abs(float(dequantize(quantize(x, scale), scale)) - x)
        # dequantize works in f32, so allow its rounding on top of scale/2
        assert err <= scale / 2 + 1e-6 * abs(x) + 1e-12

    def test_calibration_unit_range(self):
        m = ModelBuilder((1, 3)).linear(np.eye(3)).build()
        p = calibrate(m, [Tensor.f32([[-1.0, 0.2, 1.0]])])
        assert p["input"].scale == pytest.approx(1 / 127)
        assert p["linear_0"].scale == pytest.approx(1 / 127)
        assert p["linear_0"].weight_scale == pytest.approx(1 / 127)

    def test_calibration_single_sample(self):
        m = ModelBuilder((1, 2)).linear([[2.0, 0.0], [0.0, 1.0]]).build()
        p = calibrate(m, [Tensor.f32([[0.3, -0.9]])])
        assert p["linear_0"].scale == pytest.approx(0.9 / 127)

    def test_calibration_zero_floor(self):
        m = ModelBuilder((1, 2)).linear(np.zeros((2, 2))).build()
        p = calibrate(m, [Tensor.f32([[0.0, 0.0]])])
        assert p["input"].scale == SCALE_FLOOR
        assert p["linear_0"].scale == SCALE_FLOOR
        q = quantize_model(m, p)
        np.testing.assert_array_equal(forward_i8(q, Tensor.f32([[0.0, 0.0]])).data, [[0, 0]])

    def test_calibration_needs_samples(self):
        with pytest.raises(QuantizationError):
            calibrate(linear_4_2(), [])

    def test_missing_params(self):
        with pytest.raises(QuantizationError):
            quantize_model(linear_4_2(), {"input": QuantParams(0.1)})

    def test_scale_must_be_positive(self):
        with pytest.raises(QuantizationError):
            QuantParams(0.0)

    def test_i8_needs_quantized_model(self):
        with pytest.raises(QuantizationError):
            forward_i8(linear_4_2(), Tensor.f32([[1, 2, 3, 4]]))

    def test_weights_become_i8(self):
        m = linear_4_2()
        q = quantize_model(m, calibrate(m, [Tensor.f32([[1, 2, 3, 4]])]))
        w = q.weights["linear_0.weight"]
        assert w.dtype == "i8" and w.data.dtype == np.int8
        assert q.weights["linear_0.bias"].dtype == "f32"

    def test_i8_close_to_f32(self):
        rng = np.random.default_rng(11)
        good = 0
        for _ in range(20):
            m = random_micronet(rng)
            samples = [Tensor.f32(rng.uniform(-1, 1, m.input_shape)) for _ in range(4)]
            q = quantize_model(m, calibrate(m, samples))
            x = Tensor.f32(rng.uniform(-1, 1, m.input_shape))
            a = forward_f32(m, x).data.ravel().astype(np.float64)
            b = forward_i8(q, x).data.ravel().astype(np.float64)
            denom = np.linalg.norm(a) * np.linalg.norm(b)
            cos = 1.0 if denom == 0 and not a.any() and not b.any() else a @ b / max(denom, 1e-30)
            good += cos >= 0.98
        assert good >= 19

    def test_i8_deterministic(self, rng):
        m = random_micronet(rng)
        x = Tensor.f32(rng.uniform(-1, 1, m.input_shape))
        q = quantize_model(m, calibrate(m, [x]))
        assert forward_i8(q, x).data.tobytes() == forward_i8(q, x).data.tobytes()

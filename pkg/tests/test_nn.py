import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcodec.errors import FormatError, ShapeError
from lcodec.nn import (
    CONV,
    DECODER,
    DECONV,
    ENCODER,
    RELU,
    LayerSpec,
    ModelGraph,
    conv2d_int,
    deconv2d_int,
    forward,
    forward_batch,
    influence_footprint,
    influence_support,
    relu_int,
)
from lcodec.qtensor import QTensor
from lcodec.toy import reference_decoder
from oracles import conv_scalar, deconv_scalar


def _random_layer(rng, kind, cin, cout, k, s, wmax=300):
    w = rng.integers(-wmax, wmax + 1, size=(cout, cin, k, k))
    b = rng.integers(-5000, 5001, size=cout)
    return LayerSpec(kind, cin, cout, k, s, w, b, int(rng.integers(4, 10)), int(rng.integers(2, 8)))


def _shift(in_shift, layer):
    return in_shift + layer.w_shift - layer.out_shift


class TestConvDeconvOracle:
    @pytest.mark.parametrize("seed", range(20))
    def test_conv_matches_scalar(self, seed):
        rng = np.random.default_rng(seed)
        k, s = int(rng.choice([1, 3, 5])), int(rng.choice([1, 2]))
        cin, cout = rng.integers(1, 4, size=2)
        layer = _random_layer(rng, CONV, int(cin), int(cout), k, s)
        x = QTensor(rng.integers(-2000, 2001, size=(cin, rng.integers(3, 9), rng.integers(3, 9))), 6)
        got = conv2d_int(x, layer)
        assert got.q_shift == layer.out_shift
        np.testing.assert_array_equal(got.data, conv_scalar(x.data, layer.weights, layer.biases, s, _shift(6, layer)))

    @pytest.mark.parametrize("seed", range(20))
    def test_deconv_matches_scalar(self, seed):
        rng = np.random.default_rng(100 + seed)
        k, s = int(rng.choice([1, 3, 5])), int(rng.choice([1, 2, 3]))
        cin, cout = rng.integers(1, 4, size=2)
        layer = _random_layer(rng, DECONV, int(cin), int(cout), k, s)
        x = QTensor(rng.integers(-2000, 2001, size=(cin, rng.integers(1, 6), rng.integers(1, 6))), 5)
        got = deconv2d_int(x, layer)
        np.testing.assert_array_equal(got.data, deconv_scalar(x.data, layer.weights, layer.biases, s, _shift(5, layer)))

    def test_stride2_5x5_on_8x8(self):
        rng = np.random.default_rng(3)
        layer = _random_layer(rng, CONV, 3, 2, 5, 2)
        x = QTensor(rng.integers(-1000, 1000, size=(3, 8, 8)), 8)
        out = conv2d_int(x, layer)
        assert out.shape == (2, 4, 4)
        np.testing.assert_array_equal(out.data, conv_scalar(x.data, layer.weights, layer.biases, 2, _shift(8, layer)))

    def test_identity_1x1(self):
        layer = LayerSpec(CONV, 2, 2, 1, 1, np.eye(2).reshape(2, 2, 1, 1) * 2**10, np.zeros(2), 10, 7)
        x = QTensor(np.arange(-9, 9).reshape(2, 3, 3), 7)
        out = conv2d_int(x, layer)
        assert out == x and out.q_shift == 7

    def test_zero_weights_and_zero_input(self):
        rng = np.random.default_rng(0)
        zero = LayerSpec(CONV, 2, 3, 5, 2, np.zeros((3, 2, 5, 5)), np.zeros(3), 8, 8)
        x = QTensor(rng.integers(-100, 100, size=(2, 6, 6)), 8)
        assert not conv2d_int(x, zero).data.any()
        layer = LayerSpec(DECONV, 2, 3, 5, 2, rng.integers(-9, 9, size=(3, 2, 5, 5)), np.zeros(3), 8, 8)
        assert not deconv2d_int(QTensor(np.zeros((2, 3, 3)), 8), layer).data.any()

    def test_one_hot_deconv_of_ones_gives_5x5_patch(self):
        layer = LayerSpec(DECONV, 1, 1, 5, 2, np.ones((1, 1, 5, 5)), np.zeros(1), 0, 0)
        x = np.zeros((1, 5, 5))
        x[0, 2, 2] = 1
        out = deconv2d_int(QTensor(x, 0), layer).data[0]
        expected = np.zeros((10, 10))
        expected[2:7, 2:7] = 1
        np.testing.assert_array_equal(out, expected)

    def test_shape_mismatch_names_layer(self):
        layer = LayerSpec(CONV, 3, 2, 3, 1, np.zeros((2, 3, 3, 3)), np.zeros(2), 0, 0)
        with pytest.raises(ShapeError) as info:
            conv2d_int(QTensor(np.zeros((2, 4, 4)), 0), layer, index=4)
        assert info.value.layer_index == 4

    def test_relu(self):
        out = relu_int(QTensor(np.array([[[-3, 0, 7]]]), 3))
        np.testing.assert_array_equal(out.data, [[[0, 0, 7]]])
        assert not relu_int(QTensor(-np.ones((2, 2, 2)), 0)).data.any()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_conv_is_linear_without_rounding(self, seed):
        # with shift 0 no rounding happens, so conv(a + b) == conv(a) + conv(b) - bias
        rng = np.random.default_rng(seed)
        w = rng.integers(-20, 21, size=(2, 2, 3, 3))
        layer = LayerSpec(CONV, 2, 2, 3, 2, w, np.array([3, -4]), 0, 0)
        a = rng.integers(-30, 31, size=(2, 5, 5))
        b = rng.integers(-30, 31, size=(2, 5, 5))
        f = lambda v: conv2d_int(QTensor(v, 0), layer).data.astype(np.int64)  # noqa: E731
        np.testing.assert_array_equal(f(a + b), f(a) + f(b) - np.array([3, -4])[:, None, None])


class TestGraph:
    def test_empty_graph_is_identity(self):
        g = ModelGraph((), ENCODER, 8)
        x = QTensor(np.arange(12).reshape(1, 3, 4), 8)
        assert forward(g, x) == x

    def test_conv_deconv_shape_round_trip(self):
        rng = np.random.default_rng(0)
        enc = ModelGraph(tuple(_random_layer(rng, CONV, c, 2 if i == 3 else 3, 5, 2) for i, c in enumerate([3, 3, 3, 3])),
                         ENCODER, 8)
        layers = []
        for i, c in enumerate([2, 3, 3, 3]):
            layers.append(_random_layer(rng, DECONV, c, 3, 5, 2))
        dec = ModelGraph(tuple(layers), DECODER, 0)
        lat = forward(enc, QTensor(rng.integers(0, 256, size=(3, 64, 64)), 8))
        assert lat.shape == (2, 4, 4)
        out = forward_batch(dec, lat.data[None].astype(np.int64) // 64)
        assert out.shape == (1, 3, 64, 64)

    def test_decoder_on_zero_latent_is_bias_path(self):
        l1 = LayerSpec(DECONV, 1, 2, 3, 2, np.ones((2, 1, 3, 3)), np.array([300, -300]), 4, 4)
        l2 = LayerSpec(DECONV, 2, 1, 1, 1, np.full((1, 2, 1, 1), 16), np.array([5 << 8]), 4, 8)
        g = ModelGraph((l1, LayerSpec(RELU), l2), DECODER, 0)
        out = forward(g, QTensor(np.zeros((1, 3, 3)), 0))
        # layer 1: requant(300, 0) = 300 ; relu ; layer 2: (16*300 + 1280) at shift 8 -> rescale 0
        h1 = [300, 0]
        acc = 16 * h1[0] + 16 * h1[1] + (5 << 8)
        expected = min((acc + 0), 256)
        np.testing.assert_array_equal(out.data, np.full((1, 6, 6), expected))

    def test_graph_validation(self):
        conv = LayerSpec(CONV, 3, 4, 3, 1, np.zeros((4, 3, 3, 3)), np.zeros(4), 0, 0)
        deconv = LayerSpec(DECONV, 4, 3, 3, 1, np.zeros((3, 4, 3, 3)), np.zeros(3), 0, 0)
        with pytest.raises(ShapeError):
            ModelGraph((deconv,), ENCODER, 8)
        with pytest.raises(ShapeError):
            ModelGraph((conv, LayerSpec(RELU)), ENCODER, 8)
        with pytest.raises(ShapeError) as info:
            ModelGraph((conv, conv), ENCODER, 8)
        assert info.value.layer_index == 1

    def test_qmdl_round_trip_and_truncation(self, tmp_path):
        g = reference_decoder(4, 6, seed=2)
        assert ModelGraph.from_bytes(g.to_bytes()).to_bytes() == g.to_bytes()
        g.save(tmp_path / "d.qmdl")
        assert ModelGraph.load(tmp_path / "d.qmdl").to_bytes() == g.to_bytes()
        buf = g.to_bytes()
        for n in (0, 5, 20, len(buf) // 2, len(buf) - 1):
            with pytest.raises(FormatError):
                ModelGraph.from_bytes(buf[:n])


def one_hot_extents(graph: ModelGraph) -> list[int]:
    """Width of the nonzero output region of a centred one-hot latent, per deconv prefix.

    Every kernel is replaced by ones so the support is not hidden by
    cancellation or ReLU.
    """
    x = np.zeros((1, 1, 9, 9))
    x[0, 0, 4, 4] = 1
    ones, extents = [], []
    for layer in graph.weighted_layers:
        k = layer.kernel
        ones.append(LayerSpec(DECONV, 1, 1, k, layer.stride, np.ones((1, 1, k, k)), np.zeros(1), 0, 0))
        y = forward_batch(ModelGraph(tuple(ones), DECODER, 0), x)[0, 0]
        cols = np.nonzero(y.any(axis=0))[0]
        extents.append(int(cols[-1] - cols[0] + 1))
    return extents


class TestFootprint:
    def test_reference_architecture(self):
        dec = reference_decoder(8, 8)
        assert influence_footprint(dec) == (2, 61)
        assert one_hot_extents(dec) == [5, 13, 29, 61]

    def test_support_of_dense_and_offset_kernels(self):
        assert influence_support(reference_decoder(4, 4)) == (-30, 30)
        w = np.zeros((1, 1, 5, 5))
        w[0, 0, 2:4, 2:4] = 1
        layer = LayerSpec(DECONV, 1, 1, 5, 2, w, np.zeros(1), 0, 0)
        g = ModelGraph((layer, LayerSpec(RELU), layer), DECODER, 0)
        assert influence_support(g) == (0, 3)
        x = np.zeros((1, 1, 6, 6))
        x[0, 0, 2, 2] = 1
        rows = np.nonzero(forward_batch(g, x)[0, 0].any(axis=1))[0]
        assert (rows[0] - 2 * 4, rows[-1] - 2 * 4) == (0, 3)

    def test_single_1x1_layer(self):
        g = ModelGraph((LayerSpec(DECONV, 1, 1, 1, 1, np.ones((1, 1, 1, 1)), np.zeros(1), 0, 0),), DECODER, 0)
        assert influence_footprint(g) == (1, 1)

    def test_footprint_bounds_real_perturbation(self):
        # changing one latent value only alters outputs inside its footprint
        dec = reference_decoder(4, 4, seed=5)
        _, extent = influence_footprint(dec)
        rng = np.random.default_rng(0)
        lat = rng.integers(-3, 4, size=(1, 4, 9, 9))
        bumped = lat.copy()
        bumped[0, 1, 4, 4] += 3
        diff = forward_batch(dec, bumped) != forward_batch(dec, lat)
        rows = np.nonzero(diff[0].any(axis=(0, 2)))[0]
        cols = np.nonzero(diff[0].any(axis=(0, 1)))[0]
        assert rows[-1] - rows[0] + 1 <= extent and cols[-1] - cols[0] + 1 <= extent

    def test_crop_decode_is_exact_over_central_window(self):
        dec = reference_decoder(4, 6, seed=9)
        radius, extent = influence_footprint(dec)
        half, t = extent // 4, dec.total_stride
        rng = np.random.default_rng(1)
        lat = rng.integers(-4, 5, size=(4, 9, 9))
        full = forward_batch(dec, lat[None])[0]
        for i, j in [(4, 4), (0, 0), (8, 3), (2, 7)]:
            i0, i1 = max(0, i - radius), min(9, i + radius + 1)
            j0, j1 = max(0, j - radius), min(9, j + radius + 1)
            crop = forward_batch(dec, lat[None, :, i0:i1, j0:j1])[0]
            r0, r1 = max(i * t - half, 0), min(i * t + half + 1, 9 * t)
            c0, c1 = max(j * t - half, 0), min(j * t + half + 1, 9 * t)
            # interior crops reproduce the full decode exactly; border crops touch the zero padding
            if i0 == i - radius and i1 == i + radius + 1 and j0 == j - radius and j1 == j + radius + 1:
                np.testing.assert_array_equal(
                    crop[:, r0 - i0 * t : r1 - i0 * t, c0 - j0 * t : c1 - j0 * t], full[:, r0:r1, c0:c1]
                )

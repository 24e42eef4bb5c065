import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reportgen import autodiff as ad
from reportgen.autodiff import Tensor, parameter
from reportgen.config import EncoderConfig
from reportgen.data import generate_case, render_anomaly, render_background, _finish, case_rngs
from reportgen.encoder import (
    BaselineEncoder,
    Encoder,
    FeaturePyramid,
    baseline_encode,
    bifpn_fuse,
    encode,
    extract_features,
    fusion_coefficients,
    image_attention,
    minimum_image_size,
    resize,
    spatial_gate,
    weighted_fusion,
)
from reportgen.errors import ConfigError
from reportgen.metrics import FindingLabel


def swish(x):
    return x / (1.0 + np.exp(-x))


def channel_ln(x, eps=1e-5):
    mu = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@pytest.fixture(scope="module")
def encoder():
    return Encoder(EncoderConfig(), 64, rng=np.random.default_rng(0))


@pytest.fixture(scope="module")
def image():
    return generate_case(11).image


class TestResize:
    def test_identity(self, image):
        np.testing.assert_array_equal(resize(image, 1.0).data, image)

    @pytest.mark.parametrize("factor", [0.25, 0.5, 0.7, 0.9])
    def test_constant_image(self, factor):
        out = resize(np.full((1, 10, 7), 0.3), factor)
        assert out.shape == (1, math.ceil(10 * factor), math.ceil(7 * factor))
        np.testing.assert_allclose(out.data, 0.3, rtol=0, atol=1e-15)

    def test_ramp_halving(self):
        ramp = np.arange(16.0).reshape(1, 4, 4)
        # half-pixel centres fall midway between source pixels: 2x2 block means
        expected = np.array([[[2.5, 4.5], [10.5, 12.5]]])
        np.testing.assert_allclose(resize(ramp, 0.5).data, expected, atol=1e-12)

    @pytest.mark.parametrize("factor", [0.0, -0.5, 1.5])
    def test_out_of_range(self, factor):
        with pytest.raises(ConfigError):
            resize(np.ones((1, 4, 4)), factor)


class TestExtractFeatures:
    def layers(self, n=2, c=16, rng=None):
        rng = rng or np.random.default_rng(0)
        out, c_in = [], 1
        for _ in range(n):
            out.append((parameter(rng.normal(size=(c, c_in, 3, 3))), parameter(np.zeros(c))))
            c_in = c
        return out

    def test_zero_image(self):
        out = extract_features(np.zeros((1, 64, 64)), self.layers())
        assert not out.data.any()

    def test_shape(self):
        assert extract_features(np.ones((1, 64, 64)), self.layers()).shape == (16, 16, 16)

    def test_identity_pointwise_kernel(self, image):
        layer = (parameter(np.ones((4, 1, 1, 1))), parameter(np.zeros(4)))
        out = extract_features(image, [layer], stride=1).data
        for c in range(4):
            np.testing.assert_allclose(out[c], swish(image[0]), atol=1e-15)


class TestFusion:
    def test_equal_weights_identical_inputs(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 3)))
        out, coeffs = weighted_fusion([x, x], parameter(np.ones(2)))
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)
        np.testing.assert_array_equal(coeffs, [0.5, 0.5])

    def test_negative_weight_drops_input(self):
        a = Tensor(np.ones((2, 2)))
        b = Tensor(np.full((2, 2), 100.0))
        out, coeffs = weighted_fusion([a, b], parameter(np.array([0.7, -2.0])))
        assert coeffs[1] == 0.0
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_set_weights(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[0.0, 4.0], [8.0, -4.0]]))
        out, coeffs = weighted_fusion([a, b], parameter(np.array([1.0, 3.0])))
        np.testing.assert_allclose(coeffs, [0.25, 0.75])
        np.testing.assert_allclose(out.data, [[0.25, 3.5], [6.75, -2.0]], atol=1e-15)

    def test_all_rectified_to_zero_falls_back_to_uniform(self):
        coeffs = fusion_coefficients(parameter(np.array([-1.0, -2.0, -0.5]))).data
        np.testing.assert_array_equal(coeffs, np.full(3, 1 / 3))

    @settings(max_examples=300)
    @given(arrays(np.float64, st.integers(2, 3), elements=st.floats(-10, 10)))
    def test_convex_combination(self, w):
        c = fusion_coefficients(parameter(w)).data
        assert (c >= 0).all()
        assert abs(c.sum() - 1.0) < 1e-9


class TestBifpn:
    def params(self, C, levels, depth=1, w=None):
        """Nodes whose conv is the identity, so a node is swish(channel-LN(fusion))."""
        eye = np.zeros((C, C, 3, 3))
        eye[np.arange(C), np.arange(C), 1, 1] = 1.0
        p = {}
        for r in range(depth):
            nodes = [(f"td{l}", 2) for l in range(levels - 1)] + [(f"out{l}", 3 if l < levels - 1 else 2)
                                                                   for l in range(1, levels)]
            for node, fan in nodes:
                base = f"encoder.bifpn.{r}.{node}"
                p[f"{base}.w"] = parameter(np.ones(fan) if w is None else np.array(w[node]))
                p[f"{base}.conv.weight"] = parameter(eye)
                p[f"{base}.conv.bias"] = parameter(np.zeros(C))
                p[f"{base}.norm.gain"] = parameter(np.ones(C))
                p[f"{base}.norm.bias"] = parameter(np.zeros(C))
        return p

    def test_two_levels_scripted(self):
        rng = np.random.default_rng(3)
        fine, coarse = rng.normal(size=(1, 2, 2, 2)), rng.normal(size=(1, 2, 1, 1))
        pyr = FeaturePyramid([Tensor(fine), Tensor(coarse)])
        params = self.params(2, 2, w={"td0": [1.0, 3.0], "out1": [2.0, 2.0]})
        out = bifpn_fuse(pyr, params, depth=1)
        up = np.broadcast_to(coarse, fine.shape)  # bilinear 1x1 -> 2x2 replicates
        td0 = swish(channel_ln((0.25 * fine + 0.75 * up)[0]))
        out1 = swish(channel_ln((0.5 * coarse[0] + 0.5 * td0.mean(axis=(1, 2), keepdims=True))))
        np.testing.assert_allclose(out.levels[0].data[0], td0, atol=1e-12)
        np.testing.assert_allclose(out.levels[1].data[0], out1, atol=1e-12)

    def test_records_every_node(self, encoder, image):
        _, pyr = encoder.forward(image[None], return_pyramid=True)
        coeffs = pyr.metadata["fusion_coefficients"]
        assert len(coeffs) == 3 * 4  # depth 3, two top-down + two bottom-up nodes
        for _, c in coeffs:
            assert (c >= 0).all() and abs(c.sum() - 1) < 1e-9

    def test_single_level_passthrough(self):
        x = Tensor(np.ones((1, 2, 3, 3)))
        out = bifpn_fuse(FeaturePyramid([x]), {}, depth=3)
        assert out.levels[0] is x
        assert "warning" in out.metadata


class TestImageAttention:
    def test_zero_projection_is_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 7, 7)))
        out, scores = spatial_gate(x, Tensor(np.zeros((3, 1))))
        np.testing.assert_allclose(scores, 1 / 49, rtol=1e-15)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-15, atol=0)

    def test_single_position(self):
        x = Tensor(np.array([[[[2.0]], [[-1.0]]]]))
        _, scores = spatial_gate(x, Tensor(np.array([[0.3], [0.9]])))
        assert scores.tolist() == [[1.0]]

    def test_two_position_hand_case(self):
        x = Tensor(np.array([[[[1.0, 2.0]]]]))
        out, _ = spatial_gate(x, Tensor(np.array([[1.0]])))
        e = math.e
        np.testing.assert_allclose(out.data[0, 0, 0], [2 / (1 + e), 4 * e / (1 + e)], atol=1e-15)

    def test_levels_and_scores(self):
        levels = [Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 2, 2, 2)))]
        params = {f"encoder.attn.{i}.weight": Tensor(np.zeros((2, 1))) for i in range(2)}
        out = image_attention(FeaturePyramid(levels), params)
        assert [s.shape for s in out.metadata["attention_scores"]] == [(1, 16), (1, 4)]


class TestEncode:
    def test_default_shape(self, encoder, image):
        assert encoder.encode(image).shape == (48, 64)
        assert encoder.memory_length() == 48

    def test_batch_matches_single(self, encoder, image):
        other = generate_case(12).image
        batch = encoder.forward(np.stack([image, other])).data
        np.testing.assert_allclose(batch[1], encoder.encode(other).data, atol=1e-12)

    def test_zero_image_zero_biases(self):
        enc = Encoder(EncoderConfig(), 64, rng=np.random.default_rng(1))
        for name, t in enc.params.items():
            if name.endswith("bias"):
                t.data[...] = 0.0
        assert not enc.encode(np.zeros((1, 64, 64))).data.any()

    def test_deterministic(self, image):
        a = Encoder(EncoderConfig(), 64, rng=np.random.default_rng(5)).encode(image).data
        b = Encoder(EncoderConfig(), 64, rng=np.random.default_rng(5)).encode(image).data
        np.testing.assert_array_equal(a, b)

    def test_functional_entry_point(self, encoder, image):
        np.testing.assert_array_equal(encode(image, encoder.cfg, encoder.params).data, encoder.encode(image).data)

    def test_too_small(self, encoder):
        need = minimum_image_size(encoder.cfg)
        with pytest.raises(ConfigError, match=f"{need}x{need}"):
            encoder.encode(np.zeros((1, need - 1, need - 1)))
        encoder.encode(np.zeros((1, need, need)))

    def test_translated_patch_changes_memory(self, encoder):
        _, bg_rng, _ = case_rngs(3)
        background = render_background(bg_rng)
        left = _finish(background + render_anomaly(FindingLabel.INTRAPARENCHYMAL, "left", "large",
                                                   np.random.default_rng(0)))
        right = _finish(background + render_anomaly(FindingLabel.INTRAPARENCHYMAL, "right", "large",
                                                     np.random.default_rng(0)))
        diff = encoder.encode(left).data - encoder.encode(right).data
        assert np.linalg.norm(diff) > 0

    def test_gradient_reaches_every_parameter(self, image):
        enc = Encoder(EncoderConfig(), 64, rng=np.random.default_rng(2))
        rng = np.random.default_rng(0)
        memory = enc.forward(rng.uniform(size=(2, 1, 64, 64)))
        memory.backward(rng.normal(size=memory.shape))
        for name, t in enc.params.items():
            assert t.grad is not None and np.abs(t.grad).max() > 0, name

    @pytest.mark.parametrize("scales,grid,depth", [([1.0, 0.5], 2, 1), ([1.0], 4, 2), ([0.9, 0.6, 0.3], None, 1)])
    def test_shape_contract(self, scales, grid, depth):
        cfg = EncoderConfig(scales=scales, channels=4, bifpn_depth=depth, pool_grid=grid)
        enc = Encoder(cfg, 8, rng=np.random.default_rng(0))
        memory = enc.encode(np.random.default_rng(1).uniform(size=(1, 40, 40)))
        assert memory.shape == (enc.memory_length((40, 40)), 8)


class TestBaseline:
    def test_shape(self, image):
        enc = BaselineEncoder(EncoderConfig(kind="baseline"), 64, rng=np.random.default_rng(0))
        assert enc.encode(image).shape == (16, 64)

    def test_zero_image(self):
        enc = BaselineEncoder(EncoderConfig(kind="baseline"), 64, rng=np.random.default_rng(0))
        for name, t in enc.params.items():
            if name.endswith("bias"):
                t.data[...] = 0.0
        assert not baseline_encode(np.zeros((1, 64, 64)), enc.cfg, enc.params).data.any()

    def test_fewer_parameters(self, encoder):
        base = BaselineEncoder(EncoderConfig(kind="baseline"), 64, rng=np.random.default_rng(0))
        assert base.num_parameters() < encoder.num_parameters()

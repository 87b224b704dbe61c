import numpy as np
import pytest

from fuseseg import fusion
from fuseseg.errors import ShapeError
from fuseseg.rng import Stream
from fuseseg.tensor import Parameter, Tensor, backward, record, tsum, mul_elementwise


def randt(seed, shape, std=1.0, grad=False):
    data = Stream(seed).normal(int(np.prod(shape)), 0.0, std).reshape(shape)
    return Tensor(data, requires_grad=grad)


class TestNaive:
    def test_add_identity(self):
        x = randt(0, (2, 3, 4, 4))
        out = fusion.fuse_add([x, Tensor(np.zeros_like(x.data))])
        assert np.array_equal(out.data, x.data)

    def test_concat_channel_sum(self):
        out = fusion.fuse_concat([randt(0, (1, 2, 3, 3)), randt(1, (1, 5, 3, 3))])
        assert out.shape == (1, 7, 3, 3)

    def test_add_of_copies(self):
        x = randt(2, (1, 2, 3, 3))
        out = fusion.fuse_add([x] * 4)
        assert np.allclose(out.data, 4.0 * x.data)


class TestWeightedConcat:
    def test_unit_weights_bit_identical_to_naive(self):
        x1, x2 = randt(3, (2, 3, 5, 5)), randt(4, (2, 4, 5, 5))
        a = fusion.weighted_concat(x1, x2, 1.0, 1.0).data
        b = fusion.fuse_concat([x1, x2]).data
        assert a.tobytes() == b.tobytes()

    def test_zero_alpha_zeroes_skip_channels(self):
        x1, x2 = randt(5, (1, 3, 4, 4)), randt(6, (1, 2, 4, 4))
        out = fusion.weighted_concat(x1, x2, 0.0, 1.0).data
        assert np.all(out[:, :3] == 0.0)
        assert np.array_equal(out[:, 3:], x2.data)

    def test_hand_case(self):
        x1 = Tensor(np.full((1, 1, 1, 1), 2.0))
        x2 = Tensor(np.full((1, 1, 1, 1), 6.0))
        out = fusion.weighted_concat(x1, x2, 0.5, 1.0).data.ravel()
        assert out.tolist() == [1.0, 6.0]

    def test_gradient_scales_by_alpha_exactly(self):
        # d(loss)/d(x1) under the weighted concat is alpha times the naive value
        alpha = 0.5  # exact scaling in binary floating point
        probe = randt(8, (1, 5, 4, 4))
        grads = {}
        for use_alpha in (True, False):
            x1 = randt(7, (1, 2, 4, 4), grad=True)
            x2 = randt(9, (1, 3, 4, 4), grad=True)
            with record() as tape:
                if use_alpha:
                    out = fusion.weighted_concat(x1, x2, alpha, 1.0)
                else:
                    out = fusion.fuse_concat([x1, x2])
                loss = tsum(mul_elementwise(out, probe))
            backward(loss, tape)
            grads[use_alpha] = x1.grad
        assert np.array_equal(grads[True], alpha * grads[False])


class TestDynamic:
    def test_unit_weights_identity(self):
        x = randt(10, (2, 4, 3, 3))
        w = Parameter("w", np.ones(4), "fusion_channel")
        assert np.array_equal(fusion.dynamic_channel_weight(x, w).data, x.data)

    def test_per_channel_scaling(self):
        x = Tensor(np.ones((1, 2, 2, 2)))
        w = Parameter("w", np.array([2.0, 0.0]), "fusion_channel")
        out = fusion.dynamic_channel_weight(x, w).data
        assert np.all(out[:, 0] == 2.0) and np.all(out[:, 1] == 0.0)

    def test_weight_gradient_formula(self):
        # grad(w_c) = sum over pixels of x_c * upstream_c
        x = randt(11, (2, 3, 4, 4), grad=True)
        w = Parameter("w", np.array([0.5, 1.5, -2.0]), "fusion_channel")
        upstream = randt(12, (2, 3, 4, 4))
        with record() as tape:
            loss = tsum(mul_elementwise(fusion.dynamic_channel_weight(x, w), upstream))
        backward(loss, tape)
        expect = (x.data * upstream.data).sum(axis=(0, 2, 3))
        assert np.allclose(w.grad, expect, rtol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            fusion.dynamic_channel_weight(randt(0, (1, 3, 2, 2)),
                                          Parameter("w", np.ones(4), "fusion_channel"))


class TestGate:
    def test_zero_weights_give_half(self):
        x = randt(13, (2, 3, 4, 4))
        w = Parameter("g", np.zeros((1, 3, 1, 1)), "gate_weight")
        assert np.all(fusion.gate(x, w).data == 0.5)

    def test_open_interval(self):
        x = randt(14, (2, 3, 4, 4), std=2.0)
        w = Parameter("g", Stream(15).normal(3).reshape(1, 3, 1, 1), "gate_weight")
        out = fusion.gate(x, w).data
        assert out.min() > 0.0 and out.max() < 1.0

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            fusion.gate(randt(0, (1, 3, 2, 2)),
                        Parameter("g", np.zeros((1, 4, 1, 1)), "gate_weight"))


class TestGff:
    def test_saturated_gate(self):
        x = randt(16, (1, 2, 3, 3))
        one = Tensor(np.ones((1, 1, 3, 3)))
        other = randt(17, (1, 2, 3, 3))
        out = fusion.gff_fuse(x, [other], one, [Tensor(np.full((1, 1, 3, 3), 0.3))])
        assert np.allclose(out.data, 2.0 * x.data)

    def test_closed_gate(self):
        x = randt(18, (1, 2, 3, 3))
        other = randt(19, (1, 2, 3, 3))
        g_other = Tensor(np.full((1, 1, 3, 3), 0.3))
        out = fusion.gff_fuse(x, [other], Tensor(np.zeros((1, 1, 3, 3))), [g_other])
        assert np.allclose(out.data, x.data + 0.3 * other.data)

    def test_empty_peers(self):
        x = randt(20, (1, 2, 3, 3))
        g = Tensor(np.full((1, 1, 3, 3), 0.25))
        out = fusion.gff_fuse(x, [], g, [])
        assert np.allclose(out.data, 1.25 * x.data)


class TestGatedConcat:
    def test_zero_gate_convs(self):
        # G1 = G2 = 0.5 -> x1' = 1.5*x1 + 0.25*x2, x2' = 1.5*x2 + 0.25*x1
        x1, x2 = randt(21, (1, 3, 4, 4)), randt(22, (1, 3, 4, 4))
        w1 = Parameter("g1", np.zeros((1, 3, 1, 1)), "gate_weight")
        w2 = Parameter("g2", np.zeros((1, 3, 1, 1)), "gate_weight")
        out = fusion.gated_concat(x1, x2, w1, w2).data
        assert np.allclose(out[:, :3], 1.5 * x1.data + 0.25 * x2.data)
        assert np.allclose(out[:, 3:], 1.5 * x2.data + 0.25 * x1.data)

    def test_zero_second_branch(self):
        x1 = randt(23, (1, 2, 3, 3))
        x2 = Tensor(np.zeros_like(x1.data))
        w1 = Parameter("g1", np.zeros((1, 2, 1, 1)), "gate_weight")
        w2 = Parameter("g2", np.zeros((1, 2, 1, 1)), "gate_weight")
        out = fusion.gated_concat(x1, x2, w1, w2).data
        assert np.allclose(out[:, :2], 1.5 * x1.data)
        assert np.allclose(out[:, 2:], 0.25 * x1.data)

    def test_output_channels(self):
        x1, x2 = randt(24, (2, 4, 3, 3)), randt(25, (2, 4, 3, 3))
        w1 = Parameter("g1", np.zeros((1, 4, 1, 1)), "gate_weight")
        w2 = Parameter("g2", np.zeros((1, 4, 1, 1)), "gate_weight")
        assert fusion.gated_concat(x1, x2, w1, w2).shape == (2, 8, 3, 3)

    def test_shape_mismatch(self):
        w = Parameter("g", np.zeros((1, 2, 1, 1)), "gate_weight")
        with pytest.raises(ShapeError):
            fusion.gated_concat(randt(0, (1, 2, 3, 3)), randt(1, (1, 2, 4, 4)), w, w)


class TestAbsorbWeight:
    def test_unit_scale(self):
        w = randt(26, (4, 3, 3, 3))
        assert np.array_equal(fusion.absorb_weight(w, 1.0).data, w.data)

    def test_tenth_scale_on_ones(self):
        w = Tensor(np.ones((2, 2, 1, 1)))
        assert np.allclose(fusion.absorb_weight(w, 0.1).data, 0.1)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            fusion.absorb_weight(randt(0, (1, 1, 1, 1)), float("nan"))


class TestFusionSpec:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            fusion.FusionSpec("mystery")

    def test_constants_only_for_weighted(self):
        with pytest.raises(ValueError):
            fusion.FusionSpec("dynamic", alpha=0.5)

    def test_site_constants_counting(self):
        site = fusion.FusionSite("s", fusion.FusionSpec("weighted", 0.5, 1.0), 4, 4)
        assert site.constants() == [0.5]
        neutral = fusion.FusionSite("s2", fusion.FusionSpec("weighted", 1.0, 1.0), 4, 4)
        assert neutral.constants() == []

    def test_gated_site_needs_equal_channels(self):
        with pytest.raises(ShapeError):
            fusion.FusionSite("s", fusion.FusionSpec("gated"), 4, 8)

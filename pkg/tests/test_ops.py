import numpy as np
import pytest

from fuseseg import ops
from fuseseg.errors import DataError, ShapeError
from fuseseg.layers import Conv2d
from fuseseg.rng import Stream
from fuseseg.tensor import Tensor


def randt(seed, shape, std=1.0):
    return Tensor(Stream(seed).normal(int(np.prod(shape)), 0.0, std).reshape(shape))


class TestConv2d:
    def test_sum_of_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        assert ops.conv2d(x, w).data.reshape(()) == 9.0

    def test_one_by_one_identity(self):
        x = randt(0, (2, 1, 5, 5))
        w = Tensor(np.ones((1, 1, 1, 1)))
        assert np.array_equal(ops.conv2d(x, w).data, x.data)

    def test_strided_shape(self):
        x = randt(1, (1, 8, 16, 16))
        w = randt(2, (16, 8, 3, 3))
        assert ops.conv2d(x, w, stride=2, padding=1).shape == (1, 16, 8, 8)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv2d(randt(0, (1, 3, 4, 4)), randt(1, (2, 4, 1, 1)))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            ops.conv2d(randt(0, (1, 1, 2, 2)), randt(1, (1, 1, 3, 3)))

    def test_positive_homogeneity(self):
        x = randt(3, (2, 3, 6, 6))
        w = randt(4, (4, 3, 3, 3))
        c = 0.37
        a = ops.conv2d(x, Tensor(w.data * c), padding=1).data
        b = c * ops.conv2d(x, w, padding=1).data
        assert np.abs(a - b).max() <= 1e-6 * max(1.0, np.abs(b).max())

    def test_bias(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((3, 1, 1, 1)))
        b = Tensor(np.array([1.0, 2.0, 3.0]))
        out = ops.conv2d(x, w, b)
        assert np.array_equal(out.data[0, :, 0, 0], [1.0, 2.0, 3.0])


class TestBatchNorm:
    def test_standardizes(self):
        x = randt(5, (4, 3, 8, 8), std=2.5)
        w = Tensor(np.ones(3))
        b = Tensor(np.zeros(3))
        out = ops.batch_norm2d(x, w, b, np.zeros(3), np.ones(3), training=True).data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(out.var(axis=(0, 2, 3)) - 1.0).max() < 1e-4

    def test_constant_channel_gives_bias(self):
        x = Tensor(np.full((2, 1, 4, 4), 7.0))
        out = ops.batch_norm2d(x, Tensor(np.ones(1)), Tensor(np.full(1, 3.0)),
                               np.zeros(1), np.ones(1), training=True).data
        assert np.abs(out - 3.0).max() < 1e-6

    def test_affine_after_standardization(self):
        x = randt(6, (4, 2, 10, 10), std=3.0)
        out = ops.batch_norm2d(x, Tensor(np.full(2, 2.0)), Tensor(np.full(2, 3.0)),
                               np.zeros(2), np.ones(2), training=True).data
        assert np.abs(out.mean(axis=(0, 2, 3)) - 3.0).max() < 1e-5
        assert np.abs(out.std(axis=(0, 2, 3)) - 2.0).max() < 1e-3

    def test_degenerate_statistics_error(self):
        x = Tensor(np.ones((1, 3, 1, 1)))
        with pytest.raises(ShapeError):
            ops.batch_norm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                             np.zeros(3), np.ones(3), training=True)

    def test_running_stats_update(self):
        x = randt(7, (4, 2, 6, 6), std=2.0)
        rm, rv = np.zeros(2), np.ones(2)
        ops.batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                         training=True, momentum=0.1)
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        assert np.allclose(rm, 0.1 * mu)
        assert np.allclose(rv, 0.9 + 0.1 * var)

    def test_inference_uses_running_stats(self):
        x = randt(8, (2, 2, 4, 4))
        rm = np.array([1.0, -1.0])
        rv = np.array([4.0, 0.25])
        out = ops.batch_norm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                               rm, rv, training=False).data
        expect = (x.data - rm[:, None, None]) / np.sqrt(rv[:, None, None] + 1e-5)
        assert np.allclose(out, expect)


class TestActivations:
    def test_relu(self):
        out = ops.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_subgradient_at_zero_is_zero(self):
        from fuseseg.tensor import backward, record, tsum

        x = Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
        with record() as tape:
            loss = tsum(ops.relu(x))
        backward(loss, tape)
        assert x.grad.tolist() == [0.0, 0.0, 1.0]

    def test_relu_positive_homogeneity_exact(self):
        z = randt(9, (100,))
        c = 2.0  # exact in binary floating point
        assert np.array_equal(ops.relu(Tensor(c * z.data)).data, c * ops.relu(z).data)

    def test_sigmoid_at_zero(self):
        assert ops.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_sigmoid_bounded(self):
        out = ops.sigmoid(randt(10, (1000,), std=5.0)).data
        assert out.min() > 0.0 and out.max() < 1.0


class TestBilinear:
    def test_constant_preserved_exactly(self):
        x = Tensor(np.full((1, 2, 4, 4), 5.0))
        out = ops.bilinear_upsample(x, 2).data
        assert np.all(out == 5.0)

    def test_shape_doubles(self):
        assert ops.bilinear_upsample(randt(0, (1, 3, 8, 8)), 2).shape == (1, 3, 16, 16)

    def test_half_pixel_oracle(self):
        # hand evaluation of the documented formula for the row [0, 3]:
        # src(i) = clamp((i + 0.5)/2 - 0.5, 0, 1) -> [0, 0.25, 0.75, 1]
        x = Tensor(np.array([0.0, 3.0]).reshape(1, 1, 1, 2))
        out = ops.bilinear_resize(x, 1, 4).data.ravel()
        assert np.allclose(out, [0.0, 0.75, 2.25, 3.0], atol=1e-12)

    def test_downsample(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        out = ops.bilinear_resize(x, 2, 2)
        assert out.shape == (1, 1, 2, 2)
        # 2x2 half-pixel downsample averages each quadrant
        assert np.allclose(out.data.ravel(), [2.5, 4.5, 10.5, 12.5])

    def test_interp_matrix_rows_sum_to_one(self):
        m = ops.interp_matrix(10, 7)
        assert np.allclose(m.sum(axis=1), 1.0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        k = 5
        logits = Tensor(np.zeros((2, k, 3, 3)))
        labels = np.zeros((2, 3, 3), np.int64)
        assert ops.cross_entropy(logits, labels).item() == pytest.approx(np.log(k), rel=1e-12)

    def test_confident_correct_logits(self):
        logits = np.zeros((1, 2, 2, 2))
        logits[:, 1] = 30.0
        labels = np.ones((1, 2, 2), np.int64)
        assert ops.cross_entropy(Tensor(logits), labels).item() < 1e-4

    def test_two_class_closed_form(self):
        logits = Tensor(np.array([0.0, 1.0]).reshape(1, 2, 1, 1))
        labels = np.array([[[1]]])
        expect = np.log1p(np.exp(-1.0))
        assert ops.cross_entropy(logits, labels).item() == pytest.approx(expect, rel=1e-12)

    def test_label_out_of_range(self):
        logits = Tensor(np.zeros((1, 2, 2, 2)))
        with pytest.raises(DataError):
            ops.cross_entropy(logits, np.full((1, 2, 2), 2, np.int64))


class TestFlops:
    def test_single_mac(self):
        conv = Conv2d("c", 1, 1, 1)
        assert conv.flops(1, 1) == 1

    def test_conv_mac_formula(self):
        conv = Conv2d("c", 8, 16, 3, padding=1)
        # out_h * out_w * O * I * kh * kw
        assert conv.flops(16, 16) == 16 * 16 * 16 * 8 * 9 == 294912

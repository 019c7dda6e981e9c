import numpy as np
import pytest

from gpmcl.layers import Conv2d, Flatten, Linear, MaxPool2d, ReLU, im2col
from gpmcl.seeding import generator

from oracles import conv2d_direct, patches_direct


def conv_weight_4d(layer):
    # (C_i*k*k, C_o) filter matrix viewed as (C_o, C_i, k, k)
    k = layer.kernel
    return layer.weight.T.reshape(layer.out_channels, layer.in_channels, k, k)


class TestIm2col:
    def test_single_pixel(self):
        x = np.array([[[3.5]]])
        assert im2col(x, kernel=1).tolist() == [[3.5]]

    def test_full_image_patch(self):
        x = np.arange(9.0).reshape(1, 3, 3)
        cols = im2col(x, kernel=3, stride=1, padding=0)
        assert cols.shape == (1, 9)
        assert np.array_equal(cols[0], x.ravel())

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 8, 8))
        cols = im2col(x, kernel=3, stride=1, padding=1)
        assert np.allclose(cols, patches_direct(x, 3, 1, 1), atol=1e-12)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            im2col(np.zeros((2, 2)), kernel=1)

    def test_rejects_empty_output(self):
        with pytest.raises(ValueError):
            im2col(np.zeros((1, 2, 2)), kernel=5, stride=1, padding=0)


class TestConvForward:
    @pytest.mark.parametrize("kernel", [1, 3, 5])
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("padding", [0, 1])
    def test_equals_direct_convolution(self, kernel, stride, padding):
        rng = np.random.default_rng(kernel * 100 + stride * 10 + padding)
        layer = Conv2d(3, 4, kernel, generator(1, kernel, stride, padding),
                       stride=stride, padding=padding)
        x = rng.standard_normal((2, 3, 8, 8))
        out = layer.forward(x)
        w4 = conv_weight_4d(layer)
        for i in range(2):
            assert np.abs(out[i] - conv2d_direct(x[i], w4, stride, padding)).max() <= 1e-10

    def test_im2col_times_weight_is_direct_convolution(self):
        rng = np.random.default_rng(5)
        layer = Conv2d(3, 6, 3, generator(2, "w"), stride=1, padding=1)
        x = rng.standard_normal((3, 8, 8))
        cols = im2col(x, 3, 1, 1)
        out = (cols @ layer.weight).reshape(8, 8, 6).transpose(2, 0, 1)
        assert np.abs(out - conv2d_direct(x, conv_weight_4d(layer), 1, 1)).max() <= 1e-10

    def test_shape_mismatch(self):
        layer = Conv2d(3, 4, 3, generator(0, "w"))
        with pytest.raises(ValueError):
            layer.forward(np.zeros((1, 2, 8, 8)))


class TestPoolFlattenRelu:
    def test_maxpool_forward_backward_routing(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        pool = MaxPool2d(2)
        out = pool.forward(x)
        assert out.tolist() == [[[[4.0]]]]
        dx, _ = pool.backward(np.array([[[[5.0]]]]))
        assert dx.tolist() == [[[[0.0, 0.0], [0.0, 5.0]]]]

    def test_maxpool_crops_odd_sizes(self):
        x = np.arange(25.0).reshape(1, 1, 5, 5)
        out = MaxPool2d(2).forward(x)
        assert out.shape == (1, 1, 2, 2)
        assert out[0, 0].tolist() == [[6.0, 8.0], [16.0, 18.0]]

    def test_flatten_round_trip(self):
        x = np.arange(24.0).reshape(2, 3, 2, 2)
        f = Flatten()
        y = f.forward(x)
        assert y.shape == (2, 12)
        dx, _ = f.backward(y)
        assert np.array_equal(dx, x)

    def test_relu(self):
        r = ReLU()
        x = np.array([[-1.0, 0.0, 2.0]])
        assert r.forward(x).tolist() == [[0.0, 0.0, 2.0]]
        dx, _ = r.backward(np.array([[1.0, 1.0, 1.0]]))
        assert dx.tolist() == [[0.0, 0.0, 1.0]]


class TestLinear:
    def test_forward_is_matmul(self):
        layer = Linear(3, 2, generator(0, "lin"))
        layer.weight = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        x = np.array([[1.0, 2.0, 3.0]])
        assert layer.forward(x).tolist() == [[1.0, 2.0]]

    def test_backward_outer_product(self):
        layer = Linear(2, 1, generator(0, "lin"))
        layer.weight = np.zeros((1, 2))
        x = np.array([[1.0, 0.0]])
        layer.forward(x)
        _, dw = layer.backward(np.array([[-1.0]]))
        assert dw.tolist() == [[-1.0, 0.0]]

    def test_glorot_bound(self):
        layer = Linear(30, 20, generator(0, "lin"))
        bound = np.sqrt(6.0 / 50.0)
        assert np.abs(layer.weight).max() <= bound
        assert layer.weight.std() > 0.1 * bound

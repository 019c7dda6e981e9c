"""Layers with explicit forward/backward passes.

No autograd: each layer caches what its backward pass needs during
``forward`` and returns ``(input_gradient, weight_gradient)`` from
``backward``. Convolution is expressed as matrix multiplication over
unrolled input patches, which is also what exposes the patch vectors the
projection memory needs: for a linear layer the remembered representation
is its input vector, for a convolution it is the column of unrolled
patches.

Weight layout:

* ``Linear.weight``: ``(out_dim, in_dim)``, output ``y = x @ W.T``;
* ``Conv2d.weight``: ``(in_channels * k * k, out_channels)``, output
  ``O = X @ W`` per sample where row ``j`` of ``X`` is the j-th patch.

No bias terms anywhere.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def glorot_uniform(shape: tuple[int, int], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unroll one ``(C, h, w)`` input into its ``(h_o * w_o, C * k * k)`` patch matrix.

    Row ``j`` is the flattened receptive field of output position ``j``
    (row-major over the output grid, channel-major within the patch), so
    convolution with a ``(C * k * k, C_o)`` filter matrix is exactly
    ``im2col(x) @ W``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (C, h, w) input, got shape {x.shape}")
    cols, h_o, w_o = _im2col_batch(x[None], kernel, stride, padding)
    return cols[0]


def _im2col_batch(x: np.ndarray, kernel: int, stride: int,
                  padding: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    h_o = conv_output_size(h, kernel, stride, padding)
    w_o = conv_output_size(w, kernel, stride, padding)
    if h_o < 1 or w_o < 1:
        raise ValueError(
            f"kernel {kernel}/stride {stride}/padding {padding} leaves no "
            f"output for input {h}x{w}"
        )
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + w] = x
    else:
        xp = np.ascontiguousarray(x)
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, h_o, w_o, kernel, kernel),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, h_o * w_o, c * kernel * kernel)
    return np.ascontiguousarray(cols), h_o, w_o


def _col2im_batch(dcols: np.ndarray, x_shape: tuple, kernel: int, stride: int,
                  padding: int, h_o: int, w_o: int) -> np.ndarray:
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    d6 = dcols.reshape(n, h_o, w_o, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
    for a in range(kernel):
        for b in range(kernel):
            dxp[:, :, a:a + h_o * stride:stride, b:b + w_o * stride:stride] += d6[..., a, b]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


class Linear:
    """Fully-connected layer, no bias."""

    kind = "fc"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = glorot_uniform((out_dim, in_dim), in_dim, out_dim, rng)
        self._x: np.ndarray | None = None

    @property
    def memory_dim(self) -> int:
        # Dimension of the vectors the projection memory stores for this
        # layer: its input dimension.
        return self.in_dim

    def forward(self, x: np.ndarray, capture: bool = True) -> np.ndarray:
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[1]}")
        if capture:
            self._x = x
        return x @ self.weight.T

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dw = dy.T @ self._x
        dx = dy @ self.weight
        return dx, dw

    def representation(self) -> np.ndarray:
        # Columns are the captured input vectors.
        return self._x.T


class Conv2d:
    """2-D convolution (cross-correlation) as patch-matrix multiplication."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        d = in_channels * kernel * kernel
        self.weight = glorot_uniform(
            (d, out_channels),
            in_channels * kernel * kernel,
            out_channels * kernel * kernel,
            rng,
        )
        self._cols: np.ndarray | None = None
        self._x_shape: tuple | None = None
        self._out_hw: tuple[int, int] | None = None

    @property
    def memory_dim(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def forward(self, x: np.ndarray, capture: bool = True) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected (n, {self.in_channels}, h, w) input, got {x.shape}"
            )
        cols, h_o, w_o = _im2col_batch(x, self.kernel, self.stride, self.padding)
        if capture:
            self._cols = cols
            self._x_shape = x.shape
            self._out_hw = (h_o, w_o)
        n = x.shape[0]
        out = cols.reshape(n * h_o * w_o, -1) @ self.weight
        return out.reshape(n, h_o, w_o, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = dy.shape[0]
        h_o, w_o = self._out_hw
        dy_cols = dy.transpose(0, 2, 3, 1).reshape(n * h_o * w_o, self.out_channels)
        cols2 = self._cols.reshape(n * h_o * w_o, -1)
        dw = cols2.T @ dy_cols
        dcols = dy_cols @ self.weight.T
        dx = _col2im_batch(
            dcols.reshape(n, h_o * w_o, -1), self._x_shape,
            self.kernel, self.stride, self.padding, h_o, w_o,
        )
        return dx, dw

    def representation(self) -> np.ndarray:
        # Columns are the captured patch vectors, all samples concatenated.
        n, hw, d = self._cols.shape
        return self._cols.reshape(n * hw, d).T


class ReLU:
    kind = "relu"
    weight = None

    def forward(self, x: np.ndarray, capture: bool = True) -> np.ndarray:
        out = np.maximum(x, 0.0)
        if capture:
            self._mask = x > 0.0
        return out

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, None]:
        return dy * self._mask, None


class MaxPool2d:
    """Non-overlapping max pooling (stride equals the window size)."""

    kind = "pool"
    weight = None

    def __init__(self, kernel: int = 2):
        self.kernel = kernel

    def forward(self, x: np.ndarray, capture: bool = True) -> np.ndarray:
        n, c, h, w = x.shape
        k = self.kernel
        h2, w2 = h // k, w // k
        if h2 < 1 or w2 < 1:
            raise ValueError(f"input {h}x{w} too small for pool window {k}")
        windows = x[:, :, :h2 * k, :w2 * k]
        windows = windows.reshape(n, c, h2, k, w2, k).transpose(0, 1, 2, 4, 3, 5)
        flat = windows.reshape(n, c, h2, w2, k * k)
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if capture:
            self._idx = idx
            self._x_shape = x.shape
        return out

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, None]:
        n, c, h, w = self._x_shape
        k = self.kernel
        h2, w2 = h // k, w // k
        dflat = np.zeros((n, c, h2, w2, k * k))
        np.put_along_axis(dflat, self._idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros((n, c, h, w))
        dwin = dflat.reshape(n, c, h2, w2, k, k).transpose(0, 1, 2, 4, 3, 5)
        dx[:, :, :h2 * k, :w2 * k] = dwin.reshape(n, c, h2 * k, w2 * k)
        return dx, None


class Flatten:
    kind = "flatten"
    weight = None

    def forward(self, x: np.ndarray, capture: bool = True) -> np.ndarray:
        if capture:
            self._x_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, None]:
        return dy.reshape(self._x_shape), None

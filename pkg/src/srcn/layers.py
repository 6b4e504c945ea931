"""Layer objects for the convolutional encoder and the affine heads."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, batch_norm, conv2d, flatten, linear, max_pool2d, relu

__all__ = ["ConvBlock", "DenseLayer", "conv_block_forward", "dense_forward", "flatten", "glorot_uniform"]


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ConvBlock:
    """conv2d(same) -> optional 2x2 max pool -> relu -> batch norm."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        pool: bool,
        rng: np.random.Generator | None = None,
        kernel_size: int = 3,
        eps: float = 1e-5,
        momentum: float = 0.99,
    ):
        k = kernel_size
        shape = (c_out, c_in, k, k)
        if rng is None:
            kernels = np.zeros(shape)
        else:
            kernels = glorot_uniform(rng, shape, c_in * k * k, c_out * k * k)
        self.kernels = Tensor(kernels, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.gamma = Tensor(np.ones(c_out), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out), requires_grad=True)
        self.running_mean = np.zeros(c_out)
        self.running_var = np.ones(c_out)
        self.pool = pool
        self.eps = eps
        self.momentum = momentum

    @property
    def c_in(self) -> int:
        return self.kernels.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernels.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"kernels": self.kernels, "bias": self.bias, "gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def output_shape(self, h: int, w: int) -> tuple[int, int, int]:
        if self.pool:
            h, w = h // 2, w // 2
        return (self.c_out, h, w)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return conv_block_forward(self, x, training)


def conv_block_forward(block: ConvBlock, x: Tensor, training: bool) -> Tensor:
    """Run one block on an [N, C_in, H, W] batch.

    Batch norm needs a leading batch axis, so a single [C, H, W] image is
    treated as a batch of one (inference mode only).
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    out = conv2d(x, block.kernels, block.bias, padding="same")
    if block.pool:
        out = max_pool2d(out)
    out = relu(out)
    out = batch_norm(
        out, block.gamma, block.beta, block.running_mean, block.running_var,
        training=training, eps=block.eps, momentum=block.momentum,
    )
    if unbatched:
        out = out.reshape(out.shape[1:])
    return out


class DenseLayer:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        if rng is None:
            w = np.zeros((n_out, n_in))
        else:
            w = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    """``weight . x + bias`` with no activation; ``x`` is [in] or [N, in]."""
    return linear(x, layer.weight, layer.bias)

"""Residual CoordConv critic over channels-last RGB patches.

The critic is piecewise linear (convolutions, leaky ReLU, residual sums), so
its input gradient is a product of weight matrices and constant activation
masks. ``input_gradient`` builds that product on the autodiff graph, which
makes the R1 penalty differentiable w.r.t. the critic weights without
second-order autodiff.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

import tensor_core as tc
from tensor_core import Tensor

SLOPE = 0.2
SKIP_SCALE = 1.0 / math.sqrt(2.0)


def coordinate_channels(height: int, width: int) -> np.ndarray:
    """(H, W, 2) pixel-center x, y in [-1, 1]."""
    ys = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    y, x = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([x, y], axis=-1)


@dataclass
class Conv:
    weight: Tensor  # (k*k*C_in, C_out)
    bias: Tensor
    k: int
    stride: int = 1
    pad: int = 0

    @classmethod
    def create(cls, name: str, c_in: int, c_out: int, k: int, stride: int, pad: int,
               rng: np.random.Generator) -> Conv:
        fan_in = k * k * c_in
        std = math.sqrt(2.0 / (1.0 + SLOPE ** 2)) / math.sqrt(fan_in)
        return cls(tc.parameter(rng.normal(0.0, std, (fan_in, c_out)), f"{name}.weight"),
                   tc.parameter(np.zeros(c_out), f"{name}.bias"), k, stride, pad)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def input_grad(self, g: Tensor, size: tuple[int, int]) -> Tensor:
        """Adjoint of the convolution applied to an output gradient."""
        return tc.fold(g @ tc.transpose(self.weight), size, self.k, self.stride, self.pad)

    def parameters(self, name: str) -> dict[str, Tensor]:
        return {f"{name}.weight": self.weight, f"{name}.bias": self.bias}


@dataclass
class ResidualBlock:
    conv1: Conv
    conv2: Conv
    skip: Conv

    @classmethod
    def create(cls, name: str, c_in: int, c_out: int, rng: np.random.Generator) -> ResidualBlock:
        return cls(Conv.create(f"{name}.conv1", c_in, c_out, 3, 1, 1, rng),
                   Conv.create(f"{name}.conv2", c_out, c_out, 3, 2, 1, rng),
                   Conv.create(f"{name}.skip", c_in, c_out, 1, 2, 0, rng))


class Discriminator:
    def __init__(self, resolution: int, widths: tuple[int, ...], rng: np.random.Generator):
        self.resolution = resolution
        self.coords = coordinate_channels(resolution, resolution)
        self.from_rgb = Conv.create("from_rgb", 5, max(1, widths[0] // 2), 1, 1, 0, rng)
        self.blocks: list[ResidualBlock] = []
        c_in, size = self.from_rgb.weight.shape[1], resolution
        for i, c_out in enumerate(widths):
            self.blocks.append(ResidualBlock.create(f"block{i}", c_in, c_out, rng))
            c_in, size = c_out, (size - 1) // 2 + 1
        self.head_weight = tc.parameter(rng.normal(0.0, 1.0 / math.sqrt(size * size * c_in), (size * size * c_in, 1)),
                                        "head.weight")
        self.head_bias = tc.parameter(np.zeros(1), "head.bias")

    def parameters(self) -> dict[str, Tensor]:
        params = self.from_rgb.parameters("from_rgb")
        for i, block in enumerate(self.blocks):
            params |= block.conv1.parameters(f"block{i}.conv1")
            params |= block.conv2.parameters(f"block{i}.conv2")
            params |= block.skip.parameters(f"block{i}.skip")
        return params | {"head.weight": self.head_weight, "head.bias": self.head_bias}

    def _check(self, images) -> Tensor:
        images = tc.as_tensor(images)
        r = self.resolution
        if images.ndim != 4 or images.shape[1:] != (r, r, 3):
            raise tc.ShapeError("discriminator", images.shape, (r, r, 3),
                                detail="resolution mismatch")
        return images

    def _with_coords(self, images: Tensor) -> Tensor:
        coords = np.broadcast_to(self.coords, (images.shape[0],) + self.coords.shape)
        return tc.concat([images, Tensor(coords)], axis=-1)

    def _trunk(self, images: Tensor, masks: list[np.ndarray] | None = None) -> Tensor:
        def act(x: Tensor) -> Tensor:
            if masks is not None:
                masks.append(np.where(x.data > 0, 1.0, SLOPE))
            return tc.leaky_relu(x, SLOPE)

        x = act(self.from_rgb(self._with_coords(images)))
        for block in self.blocks:
            main = act(block.conv2(act(block.conv1(x))))
            x = (main + block.skip(x)) * SKIP_SCALE
        b = x.shape[0]
        return (x.reshape(b, -1) @ self.head_weight + self.head_bias).reshape(b)

    def __call__(self, images) -> Tensor:
        """Scores, shape (B,)."""
        return self._trunk(self._check(images))

    score = __call__

    def input_gradient(self, images) -> Tensor:
        """dD/dI for each image, (B, R, R, 3), traced w.r.t. the critic weights."""
        images = self._check(images)
        masks: list[np.ndarray] = []
        sizes: list[tuple[int, int]] = []
        with tc.no_grad():
            self._trunk(images, masks)
        size = (self.resolution, self.resolution)
        for _ in self.blocks:
            sizes.append(size)
            size = ((size[0] - 1) // 2 + 1, (size[1] - 1) // 2 + 1)
        b = images.shape[0]
        c_last = self.head_weight.shape[0] // (size[0] * size[1])
        g = (Tensor(np.ones((b, 1))) @ tc.transpose(self.head_weight)).reshape(b, size[0], size[1], c_last)
        mask_iter = iter(reversed(masks))
        for block, in_size in zip(reversed(self.blocks), reversed(sizes)):
            g = g * SKIP_SCALE
            g_skip = block.skip.input_grad(g, in_size)
            g_main = block.conv2.input_grad(g * Tensor(next(mask_iter)), in_size)
            g_main = block.conv1.input_grad(g_main * Tensor(next(mask_iter)), in_size)
            g = g_main + g_skip
        g = self.from_rgb.input_grad(g * Tensor(next(mask_iter)), (self.resolution, self.resolution))
        return g[..., :3]


def r1_penalty(critic, images) -> Tensor:
    """Mean over the batch of ||dD/dI||^2."""
    grad = critic.input_gradient(images)
    b = grad.shape[0]
    return (grad * grad).reshape(b, -1).sum(axis=-1).mean()

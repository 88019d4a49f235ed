"""Parameter-owning container and the conv+BN+ReLU layer used throughout."""

from __future__ import annotations

import numpy as np

from . import ops
from .params import BufferStore, ParameterStore
from .tensor import Tensor


class Network:
    """Parameters, BN buffers and a train/eval flag shared by all modules."""

    def __init__(self, seed: int = 0):
        self.params = ParameterStore()
        self.buffers = BufferStore()
        self.rng = np.random.default_rng(seed)
        self.training = True

    def train(self, mode: bool = True) -> "Network":
        self.training = mode
        return self

    def eval(self) -> "Network":
        return self.train(False)

    # -- initialisation helpers

    def add_conv(self, prefix: str, c_in: int, c_out: int, k: int, bias: bool = True) -> None:
        fan_in = c_in * k * k
        self.params.add(f"{prefix}/kernel", self.rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k)))
        if bias:
            self.params.add(f"{prefix}/bias", np.zeros(c_out))

    def add_conv_bn(self, prefix: str, c_in: int, c_out: int) -> None:
        # conv bias is redundant in front of BN
        self.add_conv(prefix, c_in, c_out, 3, bias=False)
        self.params.add(f"{prefix}/bn/gamma", np.ones(c_out))
        self.params.add(f"{prefix}/bn/beta", np.zeros(c_out))
        self.buffers.add(f"{prefix}/bn", c_out)

    def add_matrix(self, name: str, rows: int, cols: int) -> None:
        self.params.add(name, self.rng.normal(0.0, 1.0 / np.sqrt(rows), (rows, cols)))

    # -- layers

    def conv(self, prefix: str, x: Tensor, padding: int = 0) -> Tensor:
        bias = self.params[f"{prefix}/bias"] if f"{prefix}/bias" in self.params else None
        return ops.conv2d(x, self.params[f"{prefix}/kernel"], bias, stride=1, padding=padding)

    def conv_bn_relu(self, prefix: str, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.params[f"{prefix}/kernel"], None, stride=1, padding=1)
        y = ops.batchnorm(
            y,
            self.params[f"{prefix}/bn/gamma"],
            self.params[f"{prefix}/bn/beta"],
            self.buffers[f"{prefix}/bn"],
            train=self.training,
        )
        return ops.relu(y)

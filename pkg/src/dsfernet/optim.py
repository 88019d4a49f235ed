"""Adam with decoupled weight decay and a linear-to-zero learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .config import OptimConfig
from .errors import NumericError
from .params import ParameterStore

DECAYED_SUFFIXES = ("/kernel", "/w_d", "/w_s")


def linear_lr(lr0: float, iteration: int, decay_end_iter: int) -> float:
    return lr0 * max(0.0, 1.0 - iteration / decay_end_iter)


def is_decayed(name: str) -> bool:
    """Weight decay touches conv kernels and Hopfield projections, not biases or BN affine."""
    return name.endswith(DECAYED_SUFFIXES)


class Adam:
    def __init__(self, params: ParameterStore, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        for name, t in self.params.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        bc1 = 1.0 - cfg.beta1 ** self.step_count
        bc2 = 1.0 - cfg.beta2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            data = t.data
            if cfg.weight_decay and is_decayed(name):
                data = data * (1.0 - lr * cfg.weight_decay)
            t.data = data - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_epsilon)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"{k}/adam_m": a.copy() for k, a in self.m.items()}
        out.update({f"{k}/adam_v": a.copy() for k, a in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"{k}/adam_m"])
            self.v[k] = np.array(arrays[f"{k}/adam_v"])
        self.step_count = step_count


def adam_step(params: ParameterStore, optimizer: Adam, lr_t: float) -> None:
    optimizer.step(lr_t)

"""Named parameter and buffer containers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .ops import RunningStats
from .tensor import Tensor


class ParameterStore:
    """Ordered mapping ``"stage/layer/name" -> Tensor``; insertion order is iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in self._params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)


class BufferStore:
    """Batch-norm running statistics keyed like parameters."""

    def __init__(self):
        self._stats: dict[str, RunningStats] = {}

    def add(self, name: str, channels: int) -> RunningStats:
        if name in self._stats:
            raise KeyError(f"duplicate buffer {name!r}")
        self._stats[name] = RunningStats(channels)
        return self._stats[name]

    def __getitem__(self, name: str) -> RunningStats:
        return self._stats[name]

    def items(self):
        return self._stats.items()

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, s in self._stats.items():
            out[f"{k}/running_mean"] = s.mean.copy()
            out[f"{k}/running_var"] = s.var.copy()
        return out

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, s in self._stats.items():
            s.mean = np.array(arrays[f"{k}/running_mean"], dtype=np.float64)
            s.var = np.array(arrays[f"{k}/running_var"], dtype=np.float64)

"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward

DENOM_FLOOR = 1e-12


def _evaluate(fn: Callable[[Sequence[Tensor]], Tensor], arrays: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    with ops.trace_kinks() as decisions:
        value = fn([Tensor(a) for a in arrays]).item()
    return value, decisions


def _same_piece(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(
    fn: Callable[[Sequence[Tensor]], Tensor], point: Sequence[np.ndarray], step: float, shrink_steps: int = 3
) -> list[np.ndarray]:
    """Central differences that stay on the smooth piece containing ``point``.

    If ``x +- step`` flips a branch decision of relu, clamp, abs_diff or
    maxpool2, the step is divided by 10 (up to ``shrink_steps`` times). If a
    kink still lies within the smallest step, a second-order one-sided
    difference is taken on a side that stays on the same piece.
    """
    arrays = [np.array(p, dtype=np.float64) for p in point]
    f0, base = _evaluate(fn, arrays)
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]

            def at(offset):
                flat[i] = orig + offset
                try:
                    return _evaluate(fn, arrays)
                finally:
                    flat[i] = orig

            h = step
            estimate = None
            for _ in range(shrink_steps + 1):
                (fp, dp), (fm, dm) = at(h), at(-h)
                if estimate is None:
                    estimate = (fp - fm) / (2 * h)
                if _same_piece(dp, base) and _same_piece(dm, base):
                    estimate = (fp - fm) / (2 * h)
                    break
                h /= 10
            else:
                for side in (1.0, -1.0):
                    (f1, d1), (f2, d2) = at(side * h), at(2 * side * h)
                    if _same_piece(d1, base) and _same_piece(d2, base):
                        estimate = side * (4 * f1 - f2 - 3 * f0) / (2 * h)
                        break
            gflat[i] = estimate
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[[Sequence[Tensor]], Tensor], point: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in point]
    backward(fn(leaves))
    return [leaf.grad if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / denom


def grad_check(graph_builder: Callable[[Sequence[Tensor]], Tensor], point: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences.

    ``graph_builder`` maps a list of input tensors to a scalar tensor and must
    be deterministic. Every element of every input in ``point`` is perturbed.
    """
    a = analytic_grad(graph_builder, point)
    n = numeric_grad(graph_builder, point, step)
    worst = 0.0
    for ga, gn in zip(a, n):
        if ga.size:
            worst = max(worst, float(relative_error(ga, gn).max()))
    return worst


# ---------------------------------------------------------------- suite used by the CLI

TOLERANCE = 1e-4


@dataclass
class CheckRow:
    name: str
    kind: str  # "op" or "composite"
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def _weighted(y: Tensor, rng: np.random.Generator) -> Tensor:
    # a random linear functional exercises every output element
    return ops.sum(ops.mul(y, rng.normal(size=y.shape)))


def _op_cases() -> dict[str, tuple[Callable, Callable]]:
    return {
        "conv2d": (lambda r: [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
                   lambda t, r: _weighted(ops.conv2d(t[0], t[1], t[2], 1, 1), r)),
        "conv2d_stride2": (lambda r: [r.normal(size=(2, 5, 5)), r.normal(size=(2, 2, 3, 3)), r.normal(size=2)],
                           lambda t, r: _weighted(ops.conv2d(t[0], t[1], t[2], 2, 1), r)),
        "maxpool2": (lambda r: [r.normal(size=(2, 2, 4, 4))], lambda t, r: _weighted(ops.maxpool2(t[0]), r)),
        "relu": (lambda r: [r.normal(size=(3, 4))], lambda t, r: _weighted(ops.relu(t[0]), r)),
        "sigmoid": (lambda r: [r.normal(size=(3, 4))], lambda t, r: _weighted(ops.sigmoid(t[0]), r)),
        "softmax_rows": (lambda r: [r.normal(size=(2, 3, 4))], lambda t, r: _weighted(ops.softmax_rows(t[0]), r)),
        "batchnorm": (lambda r: [r.normal(size=(2, 3, 3, 3)), r.normal(size=3) + 1.5, r.normal(size=3)],
                      lambda t, r: _weighted(ops.batchnorm(t[0], t[1], t[2], ops.RunningStats(3)), r)),
        "matmul": (lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))], lambda t, r: _weighted(ops.matmul(t[0], t[1]), r)),
        "concat_channels": (lambda r: [r.normal(size=(2, 3, 3)), r.normal(size=(1, 3, 3))],
                            lambda t, r: _weighted(ops.concat_channels(t[0], t[1]), r)),
        "elementwise_mul": (lambda r: [r.normal(size=(3, 4, 4)), r.normal(size=(1, 4, 4))],
                            lambda t, r: _weighted(ops.mul(t[0], t[1]), r)),
        "abs_diff": (lambda r: [r.normal(size=(2, 3, 3)), r.normal(size=(2, 3, 3))],
                     lambda t, r: _weighted(ops.abs_diff(t[0], t[1]), r)),
        "upsample2x": (lambda r: [r.normal(size=(2, 3, 4))], lambda t, r: _weighted(ops.upsample2x(t[0]), r)),
        "reshape_matrix": (lambda r: [r.normal(size=(3, 2, 4))], lambda t, r: _weighted(ops.reshape_matrix(t[0]), r)),
        "channel_mean": (lambda r: [r.normal(size=(2, 3, 2, 2))], lambda t, r: _weighted(ops.channel_mean(t[0]), r)),
    }


def _tiny_config():
    from .config import EncoderConfig, RunConfig

    cfg = RunConfig()
    cfg.encoder = EncoderConfig(stage_widths=[2, 3, 4, 4, 4], convs_per_stage=[1, 1, 1, 1, 1])
    cfg.dsfr.proj_dim = 3
    return cfg


def _bind(net, names: list[str], tensors: Sequence[Tensor]) -> None:
    for name, t in zip(names, tensors):
        net.params._params[name] = t


def _dsfr_case(seed: int):
    from .dsfr import dsfr_forward, init_dsfr
    from .nn import Network

    net = Network(seed)
    init_dsfr(net, 4, 3, 2)
    names = list(net.params)
    r = np.random.default_rng(seed)
    point = [r.normal(size=(2, 3, 2, 3)), r.normal(size=(2, 3, 2, 3))] + [net.params[n].data.copy() for n in names]

    def graph(t):
        _bind(net, names, t[2:])
        out = dsfr_forward(net, 4, t[0], t[1], 0.7)
        wr = np.random.default_rng(seed + 1)
        return ops.add(_weighted(out.intermediate_map, wr), _weighted(out.retrieved_map, wr))

    return graph, point


def _cf_case(seed: int):
    from .config import DecoderConfig
    from .decoder import cf_block, init_decoder
    from .nn import Network

    cfg = _tiny_config()
    net = Network(seed)
    init_decoder(net, cfg.encoder, DecoderConfig())
    names = [n for n in net.params if n.startswith("decoder/cf4/")]
    r = np.random.default_rng(seed)
    point = [r.normal(size=(2, 4, 4, 4)), r.normal(size=(2, 4, 4, 4)), r.random((2, 1, 4, 4)), r.normal(size=(2, 4, 4, 4))]
    point += [net.params[n].data + 0.1 * r.normal(size=net.params[n].shape) for n in names]

    def graph(t):
        _bind(net, names, t[4:])
        return _weighted(cf_block(net, 4, t[0], t[1], t[2], t[3]), np.random.default_rng(seed + 1))

    return graph, point


def _network_case(seed: int):
    from . import losses
    from .model import DsferNet

    net = DsferNet(_tiny_config(), seed=seed)
    names = list(net.params)
    r = np.random.default_rng(seed)
    x1, x2 = r.random((2, 3, 32, 32)), r.random((2, 3, 32, 32))
    label = (r.random((2, 32, 32)) > 0.8).astype(np.float64)
    point = [net.params[n].data + 0.05 * r.normal(size=net.params[n].shape) for n in names]

    def graph(t):
        _bind(net, names, t)
        out = net(x1, x2)
        wbce = losses.weighted_bce(losses.changed_probability(out.logits), label, 0.2, 0.8)
        dice = [
            losses.dice_loss(losses.changed_probability(out.dsfr[s].intermediate_map), losses.downsample_label(label, s))
            for s in (4, 5)
        ]
        return losses.total_loss(wbce, dice[0], dice[1], 1.0)

    return graph, point


COMPOSITES = {"dsfr_stage": _dsfr_case, "cf_stage": _cf_case, "full_network": _network_case}


def run_suite(scale: str = "small") -> list[CheckRow]:
    """Check every primitive op and the three composite graphs.

    ``small`` uses one random instance per op; ``large`` uses five.
    """
    if scale not in ("small", "large"):
        raise ValueError(f"scale must be 'small' or 'large', got {scale!r}")
    seeds = range(1) if scale == "small" else range(5)
    rows = []
    for name, (make_point, graph) in _op_cases().items():
        start = time.perf_counter()
        worst = 0.0
        for seed in seeds:
            point = make_point(np.random.default_rng(seed))
            worst = max(worst, grad_check(lambda t: graph(t, np.random.default_rng(100 + seed)), point))
        rows.append(CheckRow(name, "op", worst, time.perf_counter() - start))
    for name, case in COMPOSITES.items():
        start = time.perf_counter()
        graph, point = case(0)
        rows.append(CheckRow(name, "composite", grad_check(graph, point), time.perf_counter() - start))
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    lines = [f"{'check':<18} {'kind':<10} {'max rel err':>12}  result", "-" * 50]
    for r in rows:
        lines.append(f"{r.name:<18} {r.kind:<10} {r.error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

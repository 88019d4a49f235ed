"""Training loop, evaluation, inference and the experiment sweeps built on them."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import ChangeSample, DatasetSplit, batches, load_dataset, split, stack, synth_generate
from .errors import ConfigError, NumericError
from .metrics import ConfusionCounts, binarize, confusion, metrics
from .model import DsferNet, ForwardOutput
from .optim import Adam, linear_lr
from .tensor import backward, no_grad

log = logging.getLogger(__name__)

EVAL_BATCH = 16


# ---------------------------------------------------------------- data plumbing

def load_samples(cfg: RunConfig) -> list[ChangeSample]:
    d = cfg.data
    if d.root:
        return load_dataset(d.root)
    return synth_generate(d.synth_seed, d.synth_n, d.synth_size, d.difficulty)


def prepare_data(cfg: RunConfig, samples: Optional[Sequence[ChangeSample]] = None) -> tuple[dict[str, ChangeSample], DatasetSplit]:
    samples = list(samples) if samples is not None else load_samples(cfg)
    return {s.id: s for s in samples}, split(samples, cfg.data.split_ratios, cfg.data.split_seed)


def resolve_class_weights(cfg: RunConfig, by_id: dict[str, ChangeSample], split_: DatasetSplit) -> tuple[float, float]:
    lc = cfg.loss
    if lc.w0 is not None and lc.w1 is not None:
        return lc.w0, lc.w1
    w0, w1 = losses.class_weights(by_id[i].label for i in split_.train)
    return (lc.w0 if lc.w0 is not None else w0), (lc.w1 if lc.w1 is not None else w1)


# ---------------------------------------------------------------- losses / prediction

def compute_losses(out: ForwardOutput, label: np.ndarray, w0: float, w1: float, lam: float, dice_eps: float) -> dict:
    prob = losses.changed_probability(out.logits)
    wbce = losses.weighted_bce(prob, label, w0, w1)
    if out.dsfr:
        dice = {
            s: losses.dice_loss(losses.changed_probability(o.intermediate_map), losses.downsample_label(label, s), dice_eps)
            for s, o in out.dsfr.items()
        }
        total = losses.total_loss(wbce, dice[4], dice[5], lam)
        d4, d5 = dice[4], dice[5]
    else:
        d4 = d5 = 0.0
        total = wbce
    return {"wbce": wbce, "dice4": d4, "dice5": d5, "total": total}


def _value(x) -> float:
    return x.item() if hasattr(x, "item") else float(x)


def predict_proba(net: DsferNet, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Changed-class probability ``[n, h, w]`` in eval mode."""
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            out = net(x1, x2)
            return losses.changed_probability(out.logits).data
    finally:
        net.train(was_training)


def evaluate_samples(net: DsferNet, samples: Sequence[ChangeSample], batch_size: int = EVAL_BATCH) -> tuple[ConfusionCounts, dict]:
    cc = ConfusionCounts()
    for i in range(0, len(samples), batch_size):
        b = stack(samples[i:i + batch_size])
        prob = predict_proba(net, b.x1, b.x2)
        cc = cc + confusion(binarize(prob), b.label)
    return cc, metrics(cc)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict] = field(default_factory=list)
    split: Optional[DatasetSplit] = None
    samples: dict[str, ChangeSample] = field(default_factory=dict)


def snapshot(net: DsferNet, opt: Adam, iteration: int, val: dict, weights: tuple[float, float]) -> Checkpoint:
    return Checkpoint(
        config=copy.deepcopy(net.cfg),
        params=net.params.snapshot(),
        buffers=net.buffers.arrays(),
        optimizer=opt.state(),
        optimizer_step=opt.step_count,
        iteration=iteration,
        val_metrics=dict(val),
        class_weights=weights,
    )


def net_from_checkpoint(ckpt: Checkpoint) -> DsferNet:
    net = DsferNet(ckpt.config)
    net.params.load(ckpt.params)
    net.buffers.load(ckpt.buffers)
    return net.eval()


def train(
    cfg: RunConfig,
    samples: Optional[Sequence[ChangeSample]] = None,
    out_dir: Optional[str | Path] = None,
    on_record: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Optimise the full network and keep the checkpoint with the best validation F1.

    With ``out_dir`` the metrics log (``metrics.jsonl``) and the ``best.ckpt`` /
    ``last.ckpt`` files are written there.
    """
    cfg.validate()
    by_id, split_ = prepare_data(cfg, samples)
    w0, w1 = resolve_class_weights(cfg, by_id, split_)
    val_samples = [by_id[i] for i in split_.val]
    net = DsferNet(cfg).train()
    opt = Adam(net.params, cfg.optim)
    loop = cfg.loop
    per_epoch = len(split_.train) // loop.batch_size
    if per_epoch == 0:
        raise NumericError(f"batch size {loop.batch_size} exceeds training set of {len(split_.train)}")

    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")

    history: list[dict] = []
    best: Optional[Checkpoint] = None
    best_f1 = -math.inf
    start = time.perf_counter()
    it = 0
    try:
        epoch = 0
        while it < loop.max_iters:
            for b in batches(by_id, split_, "train", loop.batch_size, loop.seed, epoch, cfg.data.augment):
                if it >= loop.max_iters:
                    break
                lr = linear_lr(cfg.optim.lr0, it, cfg.schedule.decay_end_iter)
                net.params.zero_grad()
                out = net(b.x1, b.x2)
                terms = compute_losses(out, b.label, w0, w1, cfg.loss.lam, cfg.loss.dice_epsilon)
                values = {k: _value(v) for k, v in terms.items()}
                if not all(math.isfinite(v) for v in values.values()):
                    raise NumericError(f"non-finite loss at iteration {it}: {values}")
                backward(terms["total"])
                opt.step(lr)
                record = {"iter": it, "lr": lr, **values}
                it += 1
                if it % loop.val_every == 0 or it == loop.max_iters:
                    _, vm = evaluate_samples(net, val_samples)
                    record["val_F1"] = vm["F1"]
                    if vm["F1"] > best_f1:
                        best_f1 = vm["F1"]
                        best = snapshot(net, opt, it, vm, (w0, w1))
                    log.info("iter %d  loss %.4f  val F1 %.4f", it, values["total"], vm["F1"])
                record["wall"] = round(time.perf_counter() - start, 3)
                history.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                if on_record is not None:
                    on_record(record)
            epoch += 1
    finally:
        if log_fh is not None:
            log_fh.close()

    # the final iteration always validates, so best is set
    last = snapshot(net, opt, it, {"F1": history[-1]["val_F1"]}, (w0, w1))
    if out_dir is not None:
        save_checkpoint(best, out_dir / "best.ckpt")
        save_checkpoint(last, out_dir / "last.ckpt")
    return TrainResult(best, last, history, split_, by_id)


# ---------------------------------------------------------------- evaluation / inference

def evaluate(
    ckpt: Checkpoint | str | Path,
    part: str = "test",
    cfg: Optional[RunConfig] = None,
    samples: Optional[Sequence[ChangeSample]] = None,
) -> dict:
    """Metrics of a checkpoint on one split part.

    ``cfg`` (if given) supplies the data settings and must describe the same
    architecture as the checkpoint.
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt, expect=cfg)
    elif cfg is not None and cfg.architecture_hash() != ckpt.config_hash:
        raise ConfigError("checkpoint architecture does not match the requested configuration")
    data_cfg = cfg or ckpt.config
    by_id, split_ = prepare_data(data_cfg, samples)
    net = net_from_checkpoint(ckpt)
    chosen = [by_id[i] for i in split_.part(part)]
    cc, m = evaluate_samples(net, chosen)
    return {"part": part, "n_samples": len(chosen), "confusion": cc.as_dict(), "metrics": m, "iteration": ckpt.iteration}


@dataclass
class InferResult:
    prob: np.ndarray  # [h, w]
    binary: np.ndarray  # [h, w] uint8
    confusion_rgb: Optional[np.ndarray]  # [h, w, 3] uint8, only with a label


CONFUSION_COLOURS = {
    "tp": (255, 255, 255),
    "fp": (0, 255, 255),
    "tn": (0, 0, 0),
    "fn": (255, 0, 0),
}


def confusion_image(pred_binary: np.ndarray, label: np.ndarray) -> np.ndarray:
    """RGB map: TP white, FP cyan, TN black, FN red."""
    p = np.asarray(pred_binary).astype(bool)
    y = np.asarray(label).astype(bool)
    img = np.zeros(p.shape + (3,), dtype=np.uint8)
    img[p & y] = CONFUSION_COLOURS["tp"]
    img[p & ~y] = CONFUSION_COLOURS["fp"]
    img[~p & y] = CONFUSION_COLOURS["fn"]
    return img


def infer(net: DsferNet, x1: np.ndarray, x2: np.ndarray, label: Optional[np.ndarray] = None) -> InferResult:
    prob = predict_proba(net, x1[None], x2[None])[0]
    binary = binarize(prob)
    return InferResult(prob, binary, confusion_image(binary, label) if label is not None else None)


def retrieval_maps(net: DsferNet, x1: np.ndarray, x2: np.ndarray) -> dict[int, np.ndarray]:
    """Retrieved change maps of stages 4 and 5 at stage resolution."""
    if not net.cfg.dsfr.enabled:
        return {}
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            out = net(x1[None], x2[None])
    finally:
        net.train(was_training)
    return {s: o.retrieved_map.data[0, 0] for s, o in out.dsfr.items()}


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    return np.zeros_like(x) if hi - lo <= 0 else (x - lo) / (hi - lo)


# ---------------------------------------------------------------- experiment sweeps

ABLATIONS = {
    "Base+Concat": {"decoder.fusion": "concat", "dsfr.enabled": False},
    "Base+CF": {"decoder.fusion": "cf", "dsfr.enabled": False},
    "Base+Concat+DSFR": {"decoder.fusion": "concat", "dsfr.enabled": True},
    "Base+CF+DSFR": {"decoder.fusion": "cf", "dsfr.enabled": True},
}


def _with(cfg: RunConfig, **changes) -> RunConfig:
    cfg = copy.deepcopy(cfg)
    for dotted, value in changes.items():
        section, key = dotted.split(".")
        setattr(getattr(cfg, section), key, value)
    return cfg


def ablation(
    cfg: RunConfig,
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] = tuple(ABLATIONS),
    samples: Optional[Sequence[ChangeSample]] = None,
) -> list[dict]:
    """Train each variant once per seed on the same split; report test metrics."""
    samples = list(samples) if samples is not None else load_samples(cfg)
    rows = []
    for name in variants:
        for seed in seeds:
            run_cfg = _with(cfg, **{"loop.seed": seed}, **ABLATIONS[name])
            result = train(run_cfg, samples)
            report = evaluate(result.best, "test", run_cfg, samples)
            rows.append({"variant": name, "seed": seed, **report["metrics"]})
    return rows


def summarize_ablation(rows: list[dict]) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(r["F1"])
    return {k: float(np.mean(v)) for k, v in out.items()}


def lambda_sweep(
    cfg: RunConfig,
    lambdas: Sequence[float] = (0.0, 0.01, 0.1, 1.0, 10.0),
    samples: Optional[Sequence[ChangeSample]] = None,
) -> list[dict]:
    """Retrain per dice weight; each row holds test F1/OA and the lr trace."""
    samples = list(samples) if samples is not None else load_samples(cfg)
    rows = []
    for lam in lambdas:
        run_cfg = _with(cfg, **{"loss.lam": float(lam)})
        result = train(run_cfg, samples)
        report = evaluate(result.best, "test", run_cfg, samples)
        rows.append(
            {
                "lambda": float(lam),
                "F1": report["metrics"]["F1"],
                "OA": report["metrics"]["OA"],
                "lr_trace": [r["lr"] for r in result.history],
            }
        )
    return rows


def format_lambda_table(rows: list[dict]) -> str:
    lines = [f"{'lambda':>8} | {'F1':>6} | {'OA':>6}", "-" * 26]
    for r in rows:
        lines.append(f"{r['lambda']:>8g} | {100 * r['F1']:6.2f} | {100 * r['OA']:6.2f}")
    return "\n".join(lines)


def format_ablation_table(rows: list[dict]) -> str:
    means = summarize_ablation(rows)
    lines = [f"{'variant':<18} | {'F1 (mean)':>9} | per-seed F1", "-" * 50]
    for name, mean_f1 in means.items():
        per = ", ".join(f"{100 * r['F1']:.2f}" for r in rows if r["variant"] == name)
        lines.append(f"{name:<18} | {100 * mean_f1:9.2f} | {per}")
    return "\n".join(lines)

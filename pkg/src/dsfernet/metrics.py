"""Pixel confusion counts and the P / R / F1 / OA / IoU scores derived from them."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> dict:
        return asdict(self)


def binarize(prob: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.uint8)


def confusion(pred_binary, label) -> ConfusionCounts:
    p = np.asarray(pred_binary).astype(bool)
    y = np.asarray(label).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"prediction {p.shape} and label {y.shape} differ")
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def metrics(cc: ConfusionCounts) -> dict[str, float]:
    """Precision, recall, F1, overall accuracy and IoU as fractions in [0, 1].

    A matrix with no TP, FP or FN (only true negatives) scores 1 everywhere;
    otherwise an empty denominator yields 0.
    """
    if cc.tp + cc.fp + cc.fn == 0:
        return {"P": 1.0, "R": 1.0, "F1": 1.0, "OA": 1.0, "IoU": 1.0}
    p = cc.tp / (cc.tp + cc.fp) if cc.tp + cc.fp else 0.0
    r = cc.tp / (cc.tp + cc.fn) if cc.tp + cc.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    oa = (cc.tp + cc.tn) / cc.total
    iou = cc.tp / (cc.tp + cc.fp + cc.fn)
    return {"P": p, "R": r, "F1": f1, "OA": oa, "IoU": iou}


def as_percentages(m: dict[str, float]) -> dict[str, float]:
    return {k: round(100.0 * v, 2) for k, v in m.items()}

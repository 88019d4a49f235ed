"""PNG exports: probability and binary maps, confusion colouring, retrieval panels."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import ChangeSample, to_uint8
from .losses import downsample_label
from .metrics import confusion, metrics
from .model import DsferNet
from .train import InferResult, minmax, retrieval_maps

PANEL_SCALE = 8  # nearest-neighbour magnification of the stage-resolution tiles
GAP = 4


def save_gray(path: Path, x: np.ndarray) -> None:
    Image.fromarray(to_uint8(x), mode="L").save(path)


def save_infer(result: InferResult, out_dir: str | Path, stem: str = "pred") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"prob": out_dir / f"{stem}_prob.png", "binary": out_dir / f"{stem}_binary.png"}
    save_gray(paths["prob"], result.prob)
    save_gray(paths["binary"], result.binary.astype(np.float64))
    if result.confusion_rgb is not None:
        paths["confusion"] = out_dir / f"{stem}_confusion.png"
        Image.fromarray(result.confusion_rgb, mode="RGB").save(paths["confusion"])
    return paths


def block_mean(x: np.ndarray, factor: int) -> np.ndarray:
    """Area downsampling of ``[..., h, w]`` by an integer factor."""
    h, w = x.shape[-2:]
    lead = x.shape[:-2]
    return x.reshape(lead + (h // factor, factor, w // factor, factor)).mean(axis=(-3, -1))


def _tile(x: np.ndarray) -> np.ndarray:
    """``[h,w]`` or ``[3,h,w]`` in [0,1] -> magnified ``[H,W,3]`` uint8."""
    rgb = np.repeat(x[None], 3, axis=0) if x.ndim == 2 else x
    rgb = np.repeat(np.repeat(rgb, PANEL_SCALE, axis=1), PANEL_SCALE, axis=2)
    return to_uint8(rgb.transpose(1, 2, 0))


def _row(tiles: list[np.ndarray]) -> np.ndarray:
    h = tiles[0].shape[0]
    gap = np.full((h, GAP, 3), 255, np.uint8)
    parts = []
    for t in tiles:
        parts += [t, gap]
    return np.concatenate(parts[:-1], axis=1)


def retrieval_panel(sample: ChangeSample, maps: dict[int, np.ndarray]) -> np.ndarray:
    """Two rows, one per retrieval stage: t1, t2 and label reduced to the
    stage resolution, followed by the min-max normalised retrieved map."""
    rows = []
    for stage in sorted(maps):
        f = 2 ** (stage - 1)
        rows.append(
            _row([
                _tile(block_mean(sample.image_t1, f)),
                _tile(block_mean(sample.image_t2, f)),
                _tile(downsample_label(sample.label, stage)),
                _tile(minmax(maps[stage])),
            ])
        )
    width = max(r.shape[1] for r in rows)
    padded = [np.pad(r, ((0, GAP), (0, width - r.shape[1]), (0, 0)), constant_values=255) for r in rows]
    return np.concatenate(padded, axis=0)[:-GAP]


def export_retrieval(net: DsferNet, sample: ChangeSample, out_dir: str | Path) -> dict[str, Path]:
    """Write ``<id>_FR4.png``, ``<id>_FR5.png`` and the side-by-side ``<id>_panel.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = retrieval_maps(net, sample.image_t1, sample.image_t2)
    if not maps:
        raise ValueError("retrieval is disabled in this model; nothing to export")
    paths = {}
    for stage, m in maps.items():
        paths[f"FR{stage}"] = out_dir / f"{sample.id}_FR{stage}.png"
        save_gray(paths[f"FR{stage}"], minmax(m))
    paths["panel"] = out_dir / f"{sample.id}_panel.png"
    Image.fromarray(retrieval_panel(sample, maps), mode="RGB").save(paths["panel"])
    return paths


def retrieval_overlap(fr_map: np.ndarray, label: np.ndarray, stage: int, threshold: float = 0.5) -> float:
    """IoU between the high-activation region of a retrieved map and the label
    reduced to the same stage (max rule)."""
    high = minmax(fr_map) > threshold
    return metrics(confusion(high, downsample_label(label, stage)))["IoU"]

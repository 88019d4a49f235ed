"""Bitemporal tile datasets: PNG folder I/O, synthetic generation, splits, batches.

On-disk layout (shared by real corpora and materialized synthetic sets)::

    <root>/A/<id>.png      image at t1
    <root>/B/<id>.png      image at t2
    <root>/label/<id>.png  change mask, 0 / 255
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

IMAGE_DIRS = ("A", "B", "label")


@dataclass
class ChangeSample:
    image_t1: np.ndarray  # [3, h, w] float64 in [0, 1]
    image_t2: np.ndarray  # [3, h, w]
    label: np.ndarray  # [h, w] in {0, 1}
    id: str

    def __post_init__(self):
        if self.image_t1.shape != self.image_t2.shape or self.image_t1.shape[1:] != self.label.shape:
            raise DataError(
                f"sample {self.id!r}: mismatched dims t1={self.image_t1.shape} "
                f"t2={self.image_t2.shape} label={self.label.shape}"
            )


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int = 0

    def part(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split part {name!r}")
        return getattr(self, name)


# ---------------------------------------------------------------- PNG I/O

def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_label(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.float64)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Path, chw: np.ndarray) -> None:
    Image.fromarray(to_uint8(np.asarray(chw).transpose(1, 2, 0)), mode="RGB").save(path)


def write_label(path: Path, label: np.ndarray) -> None:
    Image.fromarray((np.asarray(label) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_dataset(root: str | Path) -> list[ChangeSample]:
    """Read every ``A/<id>.png`` with its ``B`` and ``label`` counterparts, sorted by id."""
    root = Path(root)
    for d in IMAGE_DIRS:
        if not (root / d).is_dir():
            raise DataError(f"{root}: missing subdirectory {d}/")
    samples = []
    for path in sorted((root / "A").glob("*.png")):
        sid = path.stem
        missing = [str(root / d / path.name) for d in ("B", "label") if not (root / d / path.name).exists()]
        if missing:
            raise DataError(f"sample {sid!r}: missing counterpart file(s) {missing}")
        samples.append(
            ChangeSample(read_image(path), read_image(root / "B" / path.name), read_label(root / "label" / path.name), sid)
        )
    if not samples:
        raise DataError(f"{root}: no samples found in A/")
    return samples


def save_dataset(samples: Sequence[ChangeSample], root: str | Path) -> None:
    root = Path(root)
    for d in IMAGE_DIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "A" / f"{s.id}.png", s.image_t1)
        write_image(root / "B" / f"{s.id}.png", s.image_t2)
        write_label(root / "label" / f"{s.id}.png", s.label)


# ---------------------------------------------------------------- synthetic pairs

@dataclass(frozen=True)
class Difficulty:
    changes: tuple[int, int]  # inclusive range of changed objects
    distractors: tuple[int, int]  # unchanged objects present in both images
    gain: float  # max |t2 gain - 1|
    offset: float  # max |t2 brightness offset|
    noise: float  # per-pixel gaussian sigma


DIFFICULTIES = {
    0: Difficulty((1, 3), (0, 0), 0.0, 0.0, 0.0),
    1: Difficulty((1, 3), (1, 3), 0.2, 0.08, 0.02),
    2: Difficulty((1, 4), (2, 5), 0.35, 0.12, 0.04),
}


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = np.empty((3, size, size))
    for ch in range(3):
        base = rng.uniform(0.3, 0.6)
        wave = np.zeros((size, size))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 4.0, 2)
            phase = rng.uniform(0, 2 * np.pi)
            wave += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        bg[ch] = base + 0.04 * wave + rng.uniform(-0.04, 0.04, (size, size))
    # stays within [0.14, 0.76], so object colours below always differ
    return bg


def _object_mask(rng: np.random.Generator, size: int, occupied: np.ndarray) -> Optional[np.ndarray]:
    lo, hi = max(2, size // 8), max(3, size // 3)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(50):
        if rng.random() < 0.5:
            hgt, wid = rng.integers(lo, hi + 1, 2)
            y0 = rng.integers(0, size - hgt + 1)
            x0 = rng.integers(0, size - wid + 1)
            mask = (yy >= y0) & (yy < y0 + hgt) & (xx >= x0) & (xx < x0 + wid)
        else:
            r = rng.uniform(lo / 2, hi / 2)
            cy, cx = rng.uniform(r, size - r, 2)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        # keep a one-pixel gap to everything placed so far
        grown = mask.copy()
        grown[1:] |= mask[:-1]
        grown[:-1] |= mask[1:]
        grown[:, 1:] |= mask[:, :-1]
        grown[:, :-1] |= mask[:, 1:]
        if mask.any() and not (grown & occupied).any():
            occupied |= mask
            return mask
    return None


def _object_colour(rng: np.random.Generator) -> np.ndarray:
    high = rng.random(3) < 0.5
    return np.where(high, rng.uniform(0.86, 1.0, 3), rng.uniform(0.0, 0.04, 3))


def synth_sample(seed: int, index: int, size: int = 64, difficulty: int = 1) -> ChangeSample:
    """One synthetic pair, fully determined by ``(seed, index, size, difficulty)``."""
    if size % 16:
        raise ConfigError(f"synthetic tile size {size} must be divisible by 16")
    if difficulty not in DIFFICULTIES:
        raise ConfigError(f"difficulty must be one of {sorted(DIFFICULTIES)}, got {difficulty}")
    diff = DIFFICULTIES[difficulty]
    rng = np.random.default_rng([seed, index])
    bg = _background(rng, size)
    t1, t2 = bg.copy(), bg.copy()
    occupied = np.zeros((size, size), dtype=bool)
    label = np.zeros((size, size))

    for _ in range(rng.integers(diff.changes[0], diff.changes[1] + 1)):
        mask = _object_mask(rng, size, occupied)
        if mask is None:
            continue
        colour = _object_colour(rng)[:, None]
        target = t2 if rng.random() < 0.5 else t1  # inserted vs removed
        target[:, mask] = colour
        label[mask] = 1.0
    for _ in range(rng.integers(diff.distractors[0], diff.distractors[1] + 1)):
        mask = _object_mask(rng, size, occupied)
        if mask is None:
            continue
        colour = _object_colour(rng)[:, None]
        t1[:, mask] = colour
        t2[:, mask] = colour

    if diff.gain or diff.offset:
        gain = 1.0 + rng.uniform(-diff.gain, diff.gain)
        offset = rng.uniform(-diff.offset, diff.offset)
        t2 = gain * t2 + offset
    if diff.noise:
        t1 = t1 + rng.normal(0.0, diff.noise, t1.shape)
        t2 = t2 + rng.normal(0.0, diff.noise, t2.shape)
    t1 = np.clip(t1, 0.0, 1.0)
    t2 = np.clip(t2, 0.0, 1.0)
    return ChangeSample(t1, t2, label, f"synth_{seed}_{index:05d}")


def synth_generate(seed: int, n: int, size: int = 64, difficulty: int = 1) -> list[ChangeSample]:
    return [synth_sample(seed, i, size, difficulty) for i in range(n)]


# ---------------------------------------------------------------- splits and batches

def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share, then hand leftovers to the largest fractional parts."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {list(ratios)}")
    exact = [r * n for r in ratios]
    # 1e-9 guards against products like 0.7 * 10 = 7.000000000000001
    sizes = [int(np.floor(e + 1e-9)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(ids: Sequence[str], ratios: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    ids = [s.id if isinstance(s, ChangeSample) else s for s in ids]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate sample ids")
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    return DatasetSplit(
        shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:], seed
    )


def iterate_batches(
    split_: DatasetSplit, part: str, batch_size: int, seed: int, epoch: int, shuffle: bool = True
) -> list[list[str]]:
    """Batches of ids for one epoch; order is a pure function of ``(seed, epoch)``.

    With shuffling the trailing partial batch is dropped; without it (evaluation)
    every id appears once.
    """
    ids = split_.part(part)
    if batch_size > len(ids):
        raise ConfigError(f"batch size {batch_size} exceeds {part} size {len(ids)}")
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(ids))
        ids = [ids[i] for i in order]
        stop = len(ids) - len(ids) % batch_size
    else:
        stop = len(ids)
    return [ids[i:i + batch_size] for i in range(0, stop, batch_size)]


@dataclass
class Batch:
    x1: np.ndarray  # [n, 3, h, w]
    x2: np.ndarray
    label: np.ndarray  # [n, h, w]
    ids: list[str] = field(default_factory=list)


def stack(samples: Sequence[ChangeSample], augment_rng: Optional[np.random.Generator] = None) -> Batch:
    x1, x2, y = [], [], []
    for s in samples:
        a, b, lab = s.image_t1, s.image_t2, s.label
        if augment_rng is not None:
            k = int(augment_rng.integers(4))
            flip = bool(augment_rng.integers(2))
            a, b, lab = (np.rot90(t, k, axes=(-2, -1)) for t in (a, b, lab))
            if flip:
                a, b, lab = (t[..., ::-1] for t in (a, b, lab))
        x1.append(a)
        x2.append(b)
        y.append(lab)
    return Batch(
        np.ascontiguousarray(np.stack(x1)),
        np.ascontiguousarray(np.stack(x2)),
        np.ascontiguousarray(np.stack(y)),
        [s.id for s in samples],
    )


def batches(
    by_id: dict[str, ChangeSample], split_: DatasetSplit, part: str, batch_size: int, seed: int, epoch: int, augment: bool = False
) -> Iterator[Batch]:
    rng = np.random.default_rng([seed, epoch, 1]) if augment else None
    for ids in iterate_batches(split_, part, batch_size, seed, epoch):
        yield stack([by_id[i] for i in ids], rng)

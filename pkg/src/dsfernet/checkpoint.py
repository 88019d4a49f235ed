"""Single-file binary checkpoints.

Layout::

    8 bytes   magic  b"DSFERCKP"
    4 bytes   format version, little-endian uint32
    8 bytes   header length N, little-endian uint64
    N bytes   UTF-8 JSON header (config hash, config, iteration, metrics,
              manifest of arrays with offsets into the payload)
    ...       payload: little-endian float64 arrays, back to back
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, from_dict
from .errors import ConfigError, DataError

MAGIC = b"DSFERCKP"
VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    iteration: int = 0
    val_metrics: dict = field(default_factory=dict)
    class_weights: Optional[tuple[float, float]] = None

    @property
    def config_hash(self) -> str:
        return self.config.architecture_hash()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    groups = {"param": ckpt.params, "buffer": ckpt.buffers, "optim": ckpt.optimizer}
    manifest = []
    chunks = []
    offset = 0
    for group, arrays in groups.items():
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            manifest.append({"group": group, "name": name, "shape": list(a.shape), "offset": offset})
            chunks.append(a.tobytes())
            offset += a.nbytes
    header = {
        "config_hash": ckpt.config_hash,
        "config": ckpt.config.to_dict(),
        "iteration": ckpt.iteration,
        "optimizer_step": ckpt.optimizer_step,
        "val_metrics": ckpt.val_metrics,
        "class_weights": list(ckpt.class_weights) if ckpt.class_weights else None,
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path: str | Path, expect: Optional[RunConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` the architecture hashes must agree."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + n])
    payload = memoryview(raw)[20 + n:]
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "optim": {}}
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        groups[entry["group"]][entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    cfg = from_dict(header["config"])
    if cfg.architecture_hash() != header["config_hash"]:
        raise DataError(f"{path}: stored config does not match its hash")
    if expect is not None and expect.architecture_hash() != header["config_hash"]:
        raise ConfigError(
            f"{path}: checkpoint architecture {header['config_hash']} does not match "
            f"requested architecture {expect.architecture_hash()}"
        )
    cw = header.get("class_weights")
    return Checkpoint(
        config=cfg,
        params=groups["param"],
        buffers=groups["buffer"],
        optimizer=groups["optim"],
        optimizer_step=header["optimizer_step"],
        iteration=header["iteration"],
        val_metrics=header["val_metrics"],
        class_weights=tuple(cw) if cw else None,
    )

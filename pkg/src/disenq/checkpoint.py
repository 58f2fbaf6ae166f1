"""Deterministic checkpoint container.

Layout: 8-byte magic, 8-byte little-endian header length, canonical JSON
header (sorted keys), then the raw array buffers in header order. The
encoding has no timestamps or environment-dependent fields, so
save -> load -> save reproduces the file byte for byte.

The header embeds the full run config and its hash; loading verifies the
hash and, when the caller supplies an expected hash, refuses mismatches.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DQCKPT01"


@dataclass
class CheckpointData:
    """In-memory checkpoint: config dict + state arrays + counters."""

    config: dict
    config_hash: str
    epoch: int
    rng_state: dict
    model_state: dict      # name -> ndarray
    optimizer_state: dict  # {"step": int, "exp_avg": {...}, "exp_avg_sq": {...}}


def _canonical_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _flatten_arrays(data: CheckpointData) -> dict:
    arrays = {f"model/{n}": a for n, a in data.model_state.items()}
    arrays.update({f"opt/exp_avg/{n}": a
                   for n, a in data.optimizer_state["exp_avg"].items()})
    arrays.update({f"opt/exp_avg_sq/{n}": a
                   for n, a in data.optimizer_state["exp_avg_sq"].items()})
    return arrays


def save_checkpoint(path, data: CheckpointData) -> Path:
    """Write atomically (tmp + rename) so an interrupted save never clobbers
    the previous checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _flatten_arrays(data)
    index = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype != np.float64:
            raise ValueError(f"checkpoint arrays must be float64; {name} is {a.dtype}")
        index.append({"name": name, "shape": list(a.shape)})
    header = {
        "config": data.config,
        "config_hash": data.config_hash,
        "epoch": int(data.epoch),
        "optimizer_step": int(data.optimizer_state["step"]),
        "rng_state": data.rng_state,
        "arrays": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for entry in index:
            fh.write(np.ascontiguousarray(arrays[entry["name"]], dtype="<f8").tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_config_hash: str = None) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode())
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

    stored_hash = header["config_hash"]
    if _canonical_hash(header["config"]) != stored_hash:
        raise ValueError(f"{path}: embedded config does not match its stored hash")
    if expected_config_hash is not None and expected_config_hash != stored_hash:
        raise ValueError(
            f"{path}: checkpoint was written with a different config "
            f"(hash {stored_hash[:12]}..., expected {expected_config_hash[:12]}...)")

    model_state, exp_avg, exp_avg_sq = {}, {}, {}
    for name, a in arrays.items():
        if name.startswith("model/"):
            model_state[name[len("model/"):]] = a
        elif name.startswith("opt/exp_avg/"):
            exp_avg[name[len("opt/exp_avg/"):]] = a
        elif name.startswith("opt/exp_avg_sq/"):
            exp_avg_sq[name[len("opt/exp_avg_sq/"):]] = a
        else:
            raise ValueError(f"{path}: unknown array group for {name}")
    optimizer_state = {
        "step": int(header.get("optimizer_step", 0)),
        "exp_avg": exp_avg,
        "exp_avg_sq": exp_avg_sq,
    }
    return CheckpointData(
        config=header["config"], config_hash=stored_hash,
        epoch=int(header["epoch"]), rng_state=header["rng_state"],
        model_state=model_state, optimizer_state=optimizer_state)

"""Checkpoints: a directory holding a text manifest and a raw little-endian parameter file.

``manifest.txt`` lists the format version, epoch, config hash, the RNG
state as JSON, the configuration echo (``config.<key> = value``) and one
``tensor = name rows cols offset`` line per array. ``params.bin`` holds the
arrays back to back as little-endian float64 in row-major order.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from ..model import ModelState
from .config import FORMAT_VERSION, parse_config

MAGIC = "deepufm-checkpoint"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    state: ModelState
    epoch: int
    config: object
    rng_state: dict


def tensor_names(L):
    return ["H1"] + [f"W{l}" for l in range(1, L + 1)]


def save_checkpoint(path, state, epoch, config, rng_state):
    os.makedirs(path, exist_ok=True)
    arrays = state.params()
    lines = [
        f"format = {MAGIC}",
        f"version = {FORMAT_VERSION}",
        f"epoch = {int(epoch)}",
        f"config_hash = {config.hash}",
        f"rng = {json.dumps(rng_state, sort_keys=True)}",
    ]
    lines += [f"config.{line}" for line in config.to_text().splitlines()]
    offset = 0
    for name, arr in zip(tensor_names(state.L), arrays):
        rows, cols = arr.shape
        lines.append(f"tensor = {name} {rows} {cols} {offset}")
        offset += rows * cols
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    with open(os.path.join(path, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def load_checkpoint(path):
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.isfile(manifest):
        raise CheckpointError(f"{path}: no manifest.txt")
    header, cfg_lines, tensors = {}, [], []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition(" = ")
            if key.startswith("config."):
                cfg_lines.append(f"{key[7:]} = {value}")
            elif key == "tensor":
                name, rows, cols, offset = value.split()
                tensors.append((name, int(rows), int(cols), int(offset)))
            else:
                header[key] = value
    if header.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    if int(header.get("version", -1)) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    config = parse_config("\n".join(cfg_lines))
    if config.hash != header.get("config_hash"):
        raise CheckpointError(f"{path}: config echo does not match its recorded hash")
    flat = np.fromfile(os.path.join(path, "params.bin"), dtype=_DTYPE)
    expected = tensor_names(config.hyper.L)
    if [t[0] for t in tensors] != expected:
        raise CheckpointError(f"{path}: expected tensors {expected}")
    arrays = []
    for name, rows, cols, offset in tensors:
        if offset + rows * cols > flat.size:
            raise CheckpointError(f"{path}: params.bin too short for {name}")
        arrays.append(flat[offset : offset + rows * cols].reshape(rows, cols).astype(np.float64))
    state = ModelState(arrays[0], tuple(arrays[1:]))
    try:
        state.check(config.hyper)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return Checkpoint(state, int(header["epoch"]), config, json.loads(header["rng"]))

"""Portable checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"GSGCNCKP"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    manifest length L in bytes
    offset 20  L bytes   UTF-8 JSON manifest
    offset 20+L          data section: raw little-endian arrays, back to back

The manifest holds ``model_config``, ``train_config`` (or null), ``epoch``,
``history`` and ``arrays``: a list of ``{"name", "dtype", "shape", "offset",
"nbytes"}`` with offsets relative to the start of the data section. Array
names are ``param:<name>``, ``buffer:<name>`` (BN running statistics) and
``momentum:<name>`` (SGD momentum buffers). ``dtype`` is ``"<f4"`` unless the
run used 64-bit verification mode (``"<f8"``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, ModelParams, expected_param_shapes

if TYPE_CHECKING:
    from .training import EpochRecord, TrainConfig, TrainState

MAGIC = b"GSGCNCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    model_config: ModelConfig
    train_config: dict | None = None
    epoch: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def save_checkpoint(state_or_params, model_config: ModelConfig, train_config: "TrainConfig | None",
                    path) -> Path:
    """Write params (or a whole ``TrainState``) to ``path`` atomically."""
    from .training import TrainState

    if isinstance(state_or_params, TrainState):
        params, epoch = state_or_params.params, state_or_params.epoch
        momentum = state_or_params.momentum
        history = [vars(r) for r in state_or_params.history]
    else:
        params, epoch, momentum, history = state_or_params, 0, {}, []
    arrays: list[tuple[str, np.ndarray]] = []
    arrays += [(f"param:{n}", t.data) for n, t in params.tensors.items()]
    arrays += [(f"buffer:{n}", b) for n, b in params.buffers.items()]
    arrays += [(f"momentum:{n}", b) for n, b in momentum.items()]
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": VERSION,
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "epoch": epoch,
        "history": history,
        "data_bytes": offset,
        "arrays": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    raw = Path(path).read_bytes()
    return _split(raw)[0]


def _split(raw: bytes) -> tuple[dict, memoryview]:
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"checkpoint is {len(raw)} bytes, shorter than its header")
    magic, version, mlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a GS-GCN checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if len(raw) < start + mlen:
        raise CheckpointTruncatedError("checkpoint truncated inside the manifest")
    manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    data = memoryview(raw)[start + mlen:]
    if len(data) != manifest["data_bytes"]:
        raise CheckpointTruncatedError(
            f"data section is {len(data)} bytes, manifest declares {manifest['data_bytes']}"
        )
    return manifest, data


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint, verifying every array shape against the model config.

    With ``expected_config`` the shapes are checked against that config instead
    of the one echoed in the file.
    """
    manifest, data = _split(Path(path).read_bytes())
    stored = ModelConfig.from_dict(manifest["model_config"])
    config = expected_config or stored
    want = expected_param_shapes(config)
    params = ModelParams()
    momentum: dict[str, np.ndarray] = {}
    seen = set()
    for e in manifest["arrays"]:
        kind, name = e["name"].split(":", 1)
        arr = np.frombuffer(data[e["offset"]:e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arr = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="), copy=True)
        key = name if kind == "param" else f"buffer:{name}"
        if kind in ("param", "buffer"):
            if key not in want:
                raise CheckpointShapeError(f"parameter {name!r} is not part of the configured model")
            if tuple(arr.shape) != want[key]:
                raise CheckpointShapeError(
                    f"parameter {name!r} has shape {tuple(arr.shape)}, config expects {want[key]}"
                )
            seen.add(key)
        if kind == "param":
            params.tensors[name] = Tensor(arr, requires_grad=True, name=name)
            params.tensors[name].data = arr  # keep stored dtype exactly
        elif kind == "buffer":
            params.buffers[name] = arr
        elif kind == "momentum":
            momentum[name] = arr
        else:
            raise CheckpointError(f"unknown array kind {kind!r}")
    missing = sorted(set(want) - seen)
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks parameter {missing[0]!r}")
    return Checkpoint(params, stored, manifest.get("train_config"), manifest.get("epoch", 0),
                      momentum, manifest.get("history", []))

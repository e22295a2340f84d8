"""Single-file checkpoints: a JSON header followed by raw little-endian float64 data.

Layout::

    NA2Q-CKPT\\n
    <header byte length, decimal>\\n
    <header JSON, keys sorted>
    <tensor payload>

The writer never embeds timestamps or host details, so saving the same
content twice yields identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .numerics import DTYPE

MAGIC = b"NA2Q-CKPT\n"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], config: Mapping[str, Any],
                    meta: Mapping[str, Any]) -> None:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f8", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": "na2q-checkpoint", "version": FORMAT_VERSION, "config": dict(config),
              "meta": dict(meta), "tensors": index}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(head)}\n".encode())
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any], dict[str, Any]]:
    """Return (tensors, config, meta); unknown formats or versions raise FormatError."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    nl = data.index(b"\n", pos)
    try:
        n = int(data[pos:nl])
        header = json.loads(data[nl + 1:nl + 1 + n])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if header.get("format") != "na2q-checkpoint" or header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    payload = data[nl + 1 + n:]
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(entry["shape"])
        tensors[entry["name"]] = torch.tensor(arr.copy(), dtype=DTYPE)
    return tensors, header["config"], header["meta"]

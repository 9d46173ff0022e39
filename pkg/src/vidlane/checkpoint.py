"""Deterministic binary checkpoints.

Layout: 8-byte magic, 4-byte little-endian header length, a sorted-key JSON
header (format version, run config, step counter, array table), then raw
little-endian float64 blobs in the header's order. Equal weights always give
equal bytes; nothing time- or host-dependent is written.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .lanehead import LaneBasis
from .model import LaneNet

MAGIC = b"VLANECK\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(net: LaneNet) -> dict[str, np.ndarray]:
    out = {f"param.{k}": p.data for k, p in net.parameters().items()}
    out["basis.U"] = net.basis.U
    out["basis.row_positions"] = net.basis.row_positions
    out["basis.x_mean"] = net.basis.x_mean
    return out


def dumps(net: LaneNet, step: int = 0) -> bytes:
    arrays = _arrays(net)
    names = sorted(arrays)
    header = {
        "version": FORMAT_VERSION,
        "config": net.cfg.to_dict(),
        "step": int(step),
        "arrays": [[n, list(arrays[n].shape)] for n in names],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blobs = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names)
    return MAGIC + struct.pack("<I", len(head)) + head + blobs


def save(net: LaneNet, path, step: int = 0) -> None:
    Path(path).write_bytes(dumps(net, step))


def loads(data: bytes, source: str = "<bytes>") -> tuple[LaneNet, int]:
    if data[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{source}: corrupt header: {e}") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: format version {header.get('version')} != supported {FORMAT_VERSION}")
    cfg = RunConfig.from_dict(header["config"])
    offset = 12 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{source}: truncated while reading {name}")
        arrays[name] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{source}: {len(data) - offset} trailing bytes")
    basis = LaneBasis(arrays["basis.U"], arrays["basis.row_positions"], arrays["basis.x_mean"])
    net = LaneNet.init(cfg, basis)
    params = net.parameters()
    expected = {f"param.{k}" for k in params}
    stored = {n for n in arrays if n.startswith("param.")}
    if expected != stored:
        raise CheckpointError(f"{source}: parameter names differ from the architecture: "
                              f"missing {sorted(expected - stored)}, unexpected {sorted(stored - expected)}")
    for k, p in params.items():
        a = arrays[f"param.{k}"]
        if a.shape != p.data.shape:
            raise CheckpointError(f"{source}: {k} has shape {a.shape}, architecture needs {p.data.shape}")
        p.data[...] = a
    return net, int(header["step"])


def load(path) -> tuple[LaneNet, int]:
    p = Path(path)
    return loads(p.read_bytes(), str(p))

"""``.rapw`` checkpoint files: magic, version, JSON header, raw float32 payloads."""

import json
import struct
from pathlib import Path

import numpy as np

from ..field import FormatError
from .network import ArchitectureConfig, DualStreamParameters

MAGIC = b"RAPW"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def encode_checkpoint(params: DualStreamParameters, extra: dict | None = None,
                      aux: dict[str, np.ndarray] | None = None) -> bytes:
    """Serialize parameters plus optional auxiliary tensors (e.g. optimizer moments)."""
    tensors = dict(params.tensors)
    for k, v in (aux or {}).items():
        tensors["aux:" + k] = v
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": params.config.to_dict(), "tensors": manifest, "extra": extra or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def decode_checkpoint(buf: bytes):
    """Returns ``(params, extra, aux)``."""
    if len(buf) < _PREFIX.size:
        raise FormatError("checkpoint shorter than its fixed prefix", len(buf))
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise FormatError("truncated JSON header", len(buf))
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"unreadable JSON header: {exc}", _PREFIX.size) from None
    cfg = ArchitectureConfig.from_dict(header["config"])
    tensors, aux = {}, {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(buf):
            raise FormatError(f"tensor {entry['name']} runs past end of file", len(buf))
        arr = np.frombuffer(buf, dtype="<f4", count=entry["nbytes"] // 4, offset=lo)
        arr = arr.astype(np.float32).reshape(entry["shape"])
        if entry["name"].startswith("aux:"):
            aux[entry["name"][4:]] = arr
        else:
            tensors[entry["name"]] = arr
    expected = DualStreamParameters.zeros(cfg).tensors
    if set(expected) != set(tensors):
        raise FormatError("tensor names do not match the architecture config", _PREFIX.size)
    for k, v in expected.items():
        if v.shape != tensors[k].shape:
            raise FormatError(f"tensor {k} has shape {tensors[k].shape}, config implies {v.shape}", _PREFIX.size)
    ordered = {k: tensors[k] for k in expected}
    return DualStreamParameters(cfg, ordered), header["extra"], aux


def save_checkpoint(path, params, extra=None, aux=None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, extra, aux))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())

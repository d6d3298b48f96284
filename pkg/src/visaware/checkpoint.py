"""Binary checkpoint files.

Layout: an 8-byte little-endian manifest length, the manifest as UTF-8 JSON,
then every parameter as little-endian float64 concatenated in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError, VersionError
from .tensor import Tensor

FORMAT_VERSION = 1
_HEADER = struct.Struct("<Q")
_LE_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    module: str
    params: dict                    # name -> float64 array
    config: dict = field(default_factory=dict)
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}


def _as_array(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, value in ckpt.params.items():
        arr = _as_array(value)
        raw = arr.astype(_LE_F64).tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "module": ckpt.module, "params": entries,
                "payload_bytes": offset, "config": ckpt.config, "seed": ckpt.seed, "extra": ckpt.extra}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return _HEADER.pack(len(head)) + head + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _HEADER.size:
        raise IntegrityError("checkpoint is shorter than its header")
    (n,) = _HEADER.unpack_from(blob)
    if _HEADER.size + n > len(blob):
        raise IntegrityError("checkpoint manifest is truncated")
    try:
        manifest = json.loads(blob[_HEADER.size:_HEADER.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable manifest: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint format version {version!r}")
    payload = memoryview(blob)[_HEADER.size + n:]
    expected = 0
    for entry in manifest["params"]:
        if entry["offset"] != expected:
            raise IntegrityError(f"parameter {entry['name']!r} has offset {entry['offset']}, expected {expected}")
        expected += int(np.prod(entry["shape"], dtype=np.int64)) * 8
    if expected != manifest.get("payload_bytes") or expected != len(payload):
        raise IntegrityError(
            f"payload holds {len(payload)} bytes; manifest shapes require {expected}")
    params = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_LE_F64, count=count, offset=entry["offset"])
        params[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    return Checkpoint(manifest["module"], params, manifest.get("config") or {}, manifest.get("seed"),
                      manifest.get("extra") or {})


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(encode_checkpoint(ckpt))
    return p


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())

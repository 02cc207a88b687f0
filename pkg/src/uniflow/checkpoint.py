"""UFAD binary container for parameters and generated latents.

Layout (all little-endian)::

    b"UFAD" | u32 version | u64 manifest length | manifest | f32 payload

The manifest is UTF-8 JSON (sorted keys) followed by a ``\\n#crc32=xxxxxxxx``
line covering the JSON text, so any corrupted manifest byte is caught before
anything is parsed. The JSON lists each tensor's name, dtype, shape and byte
offset into the payload, plus free-form metadata and a CRC of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, Params, param_shapes, params_from_arrays

MAGIC = b"UFAD"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class FormatError(ValueError):
    """The file is not a valid UFAD container."""


class IncompatibleCheckpoint(ValueError):
    """The stored parameter manifest does not match the requested config."""


def _encode_manifest(doc: dict) -> bytes:
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return body + b"\n#crc32=%08x" % zlib.crc32(body)


def write_ufad(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "dtype": "f32", "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    payload = b"".join(chunks)
    manifest = _encode_manifest(
        {"meta": meta or {}, "tensors": entries, "payload_bytes": len(payload), "payload_crc32": zlib.crc32(payload)}
    )
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        f.write(manifest)
        f.write(payload)


def read_ufad(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header at offset {len(raw)}")
    magic, version, mlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    start = _HEADER.size
    if start + mlen > len(raw):
        raise FormatError(f"manifest truncated at offset {len(raw)} (expected {start + mlen})")
    manifest = raw[start : start + mlen]
    body, sep, tail = manifest.rpartition(b"\n#crc32=")
    if not sep or tail != b"%08x" % zlib.crc32(body):
        raise FormatError(f"manifest checksum mismatch in manifest at offset {start}")
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest at offset {start}: {exc}") from None
    pstart = start + mlen
    payload = raw[pstart:]
    if len(payload) != doc["payload_bytes"]:
        raise FormatError(f"payload truncated at offset {len(raw)} (expected {pstart + doc['payload_bytes']})")
    if zlib.crc32(payload) != doc["payload_crc32"]:
        raise FormatError(f"payload checksum mismatch in payload at offset {pstart}")
    tensors = {}
    for e in doc["tensors"]:
        if e["dtype"] != "f32":
            raise FormatError(f"unsupported dtype {e['dtype']!r} for {e['name']} in manifest at offset {start}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        off = e["offset"]
        if off + 4 * n > len(payload):
            raise FormatError(f"tensor {e['name']} overruns payload at offset {pstart + off}")
        tensors[e["name"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(e["shape"]).copy()
    return tensors, doc["meta"]


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]  # float32
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, config: ModelConfig, params: Params, step: int = 0, rng_state: dict | None = None):
        return cls(config, {n: p.data.astype(np.float32) for n, p in params.items()}, step, rng_state or {})

    def to_params(self) -> Params:
        return params_from_arrays({n: a.astype(np.float64) for n, a in self.params.items()})


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {"kind": "checkpoint", "config": ckpt.config.to_dict(), "step": ckpt.step, "rng_state": ckpt.rng_state}
    write_ufad(path, ckpt.params, meta)


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint; with ``config`` given, check its manifest against that config."""
    tensors, meta = read_ufad(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path} holds {meta.get('kind')!r}, not a checkpoint")
    stored = ModelConfig(**meta["config"])
    expected = param_shapes(config or stored)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    wrong = sorted(n for n in set(expected) & set(tensors) if tuple(tensors[n].shape) != expected[n])
    if missing or extra or wrong:
        raise IncompatibleCheckpoint(f"manifest mismatch: missing={missing} extra={extra} wrong_shape={wrong}")
    ordered = {n: tensors[n] for n in expected}
    return Checkpoint(config or stored, ordered, int(meta.get("step", 0)), meta.get("rng_state", {}))

"""Delta-only binary checkpoints: trainable parameters, never frozen weights.

Layout (all integers little-endian):

    magic "PETL" | u32 version | 32-byte arch fingerprint (sha256)
    u32 method-blob length | UTF-8 JSON {method, hyper-params, head, use_layers}
    u32 entry count
    per entry: u16 name length | name bytes | u8 dtype tag | u8 ndim |
               u32 * ndim shape | raw values
    u32 CRC32 over everything above

The CRC is verified before any value is applied, so corrupt or truncated
files fail closed with no partial load.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict

import numpy as np

from .backbone import Backbone, HeadConfig, build_head
from .petl import (
    Adapter,
    AdaptedModel,
    BitFit,
    FullFinetune,
    Lora,
    MethodConfig,
    Prefix,
    Probing,
    Prompt,
    Ssf,
    apply_method,
    method_name,
)

MAGIC = b"PETL"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}

_METHOD_TYPES = {
    "adapter": Adapter,
    "prompt": Prompt,
    "prefix": Prefix,
    "bitfit": BitFit,
    "ssf": Ssf,
    "lora": Lora,
    "ft": FullFinetune,
    "probing": Probing,
}


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    """File is corrupt or truncated; nothing was loaded."""


class FingerprintMismatchError(CheckpointError):
    pass


def _method_blob(model: AdaptedModel) -> bytes:
    payload = {
        "method": method_name(model.method),
        "params": asdict(model.method),
        "use_layers": model.base.use_layers,
        "head": asdict(model.head.config) if model.head is not None else None,
    }
    return json.dumps(payload, sort_keys=True).encode()


def _trainable_entries(model: AdaptedModel) -> list:
    entries = [p for p in model.injected.values() if p.trainable]
    entries += [p for _, p in model.base.registry.items() if p.trainable]
    if model.head is not None:
        entries += [p for p in model.head.registry.values() if p.trainable]
    return sorted(entries, key=lambda p: p.name)


def save_delta(model: AdaptedModel, path: str) -> int:
    """Write every trainable parameter; returns the number of entries."""
    entries = _trainable_entries(model)
    blob = _method_blob(model)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += bytes.fromhex(model.base.config.fingerprint())
    out += struct.pack("<I", len(blob))
    out += blob
    out += struct.pack("<I", len(entries))
    for p in entries:
        name = p.name.encode()
        arr = np.ascontiguousarray(p.data)
        out += struct.pack("<H", len(name))
        out += name
        out += struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(out)
    return len(entries)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_method(blob: dict) -> MethodConfig:
    name = blob["method"]
    if name not in _METHOD_TYPES:
        raise CheckpointError(f"unknown method tag {name!r}")
    return _METHOD_TYPES[name](**blob["params"])


def load_delta(base: Backbone, path: str, head_seed: int | None = None) -> AdaptedModel:
    """Rebuild the adapted model and apply stored values; fails closed on corruption."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 + 32 + 4:
        raise IntegrityError("checkpoint truncated")
    body, (crc_stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc_stored:
        raise IntegrityError("checksum mismatch; refusing to load")

    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a delta checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version > FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is newer than supported {FORMAT_VERSION}"
        )
    fingerprint = r.take(32).hex()
    if fingerprint != base.config.fingerprint():
        raise FingerprintMismatchError(
            f"architecture fingerprint mismatch: checkpoint {fingerprint[:12]}..., "
            f"base {base.config.fingerprint()[:12]}..."
        )
    (blob_len,) = r.unpack("<I")
    blob = json.loads(r.take(blob_len).decode())
    if blob["use_layers"] != base.use_layers:
        raise CheckpointError(
            f"checkpoint was trained with use_layers={blob['use_layers']}, base has {base.use_layers}"
        )
    cfg = _parse_method(blob)
    head = None
    if blob.get("head") is not None:
        head_cfg = HeadConfig(**blob["head"])
        head = build_head(base.config.d_model, head_cfg, head_seed if head_seed is not None else base.seed)
    model = apply_method(base, cfg, head=head)

    (n_entries,) = r.unpack("<I")
    targets = {p.name: p for p in _trainable_entries(model)}
    loaded: set[str] = set()
    for _ in range(n_entries):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        tag, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dtype = _TAG_DTYPES.get(tag)
        if dtype is None:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype.newbyteorder("<"))
        values = values.astype(dtype).reshape(shape)
        if name not in targets:
            raise CheckpointError(f"checkpoint entry {name!r} has no trainable slot in the model")
        target = targets[name]
        if target.data.shape != values.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {values.shape}, model {target.data.shape}"
            )
        target.data[...] = values
        loaded.add(name)
    missing = set(targets) - loaded
    if missing:
        raise CheckpointError(f"checkpoint is missing {len(missing)} entries, e.g. {sorted(missing)[:3]}")
    return model

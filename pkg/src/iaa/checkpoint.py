"""Binary checkpoint format.

Layout (little-endian)::

    magic      8 bytes  b"IAACKPT\\0"
    version    u32
    header     u32 length + canonical JSON (UTF-8)
    n_tensors  u32
    tensor*    u32 name length, name (UTF-8), u8 dtype tag, u8 rank,
               u32 dims[rank], raw row-major values
    trailer    32-byte SHA-256 of the header bytes
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .adaptor import Model, init_adaptor
from .backbone import BackboneConfig, build_backbone

MAGIC = b"IAACKPT\0"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(Exception):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class HashMismatchError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def build_header(model: Model, provenance: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "backbone": model.backbone.config.to_dict(),
        "adaptor": model.adaptor.metadata() if model.adaptor is not None else None,
        "provenance": dict(provenance if provenance is not None else (model.meta or {})),
    }


def save_checkpoint(model: Model, path, provenance: dict | None = None) -> Path:
    header = canonical_json(build_header(model, provenance))
    named = list(model.named_parameters())
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, struct.pack("<I", len(named))]
    for name, t in named:
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype}")
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPES[tag], copy=False).tobytes())
    chunks.append(hashlib.sha256(header).digest())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint file into (header, tensors)."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header_raw = r.take(header_len)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I")
        dt = _DTYPES[tag]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    trailer = r.take(32)
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{path}: {len(r.buf) - r.pos} unexpected trailing bytes")
    if hashlib.sha256(header_raw).digest() != trailer:
        raise HashMismatchError(f"{path}: header hash does not match trailer")
    return json.loads(header_raw), tensors


def model_from_header(header: dict) -> Model:
    backbone = build_backbone(BackboneConfig(**header["backbone"]))
    adaptor = None
    meta = header.get("adaptor")
    if meta is not None:
        adaptor = init_adaptor(
            backbone,
            meta["depths"],
            meta["variant"],
            meta["gate_mode"],
            meta["duplicate_io"],
            meta["patch_size"],
            meta["feature_width"],
            meta["encoder_seed"],
            meta["seed"],
        )
    return Model(backbone, adaptor, dict(header.get("provenance") or {}))


def load_checkpoint(path) -> Model:
    header, tensors = read_checkpoint(path)
    model = model_from_header(header)
    own = dict(model.named_parameters())
    if own.keys() != tensors.keys():
        missing, extra = own.keys() - tensors.keys(), tensors.keys() - own.keys()
        raise CheckpointFormatError(f"tensor set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, t in own.items():
        if tensors[name].shape != t.shape:
            raise CheckpointFormatError(f"{name}: stored shape {tensors[name].shape} != {t.shape}")
        t.data = tensors[name]
    model.backbone.set_trainable(False)
    if model.adaptor is not None:
        model.adaptor.set_trainable(False)
    return model

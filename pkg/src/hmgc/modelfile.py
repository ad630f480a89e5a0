"""Persisted model format.

Binary layout, all integers little-endian:

    bytes 0..3   magic "HMGC"
    uint32       format version (currently 1)
    uint32       metadata length in bytes
    bytes        metadata: UTF-8 JSON with taxonomy_digest, scaled spec,
                 branch hidden width, in_channels
    uint32       tensor count
    per tensor:  uint16 name length, name bytes (UTF-8),
                 uint8 ndim, uint32 per dimension,
                 float32 payload (prod(dims) * 4 bytes)

Tensors cover every trainable parameter plus the batch-norm running buffers,
in the model's canonical parameter order. load(save(model)) reproduces all
arrays bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import effnet
from .errors import CompatibilityError
from .taxonomy import TaxonomyTree, taxonomy_digest
from .trainer import DiagnosisModel

__all__ = ["MAGIC", "FORMAT_VERSION", "save_model", "load_model"]

MAGIC = b"HMGC"
FORMAT_VERSION = 1


def _named_arrays(model: DiagnosisModel) -> list[tuple[str, np.ndarray]]:
    arrays = [(name, t.data) for name, t in model.parameters()]
    arrays += model.buffers()
    return arrays


def save_model(path, model: DiagnosisModel, channel_divisor: int = 8) -> None:
    meta = {
        "taxonomy_digest": taxonomy_digest(model.tree),
        "spec": effnet.scaled_to_doc(model.spec, channel_divisor),
        "branch_hidden": model.head.hidden,
        "in_channels": model.backbone.in_channels,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        arrays = _named_arrays(model)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise CompatibilityError(f"model file truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_model(path, tree: TaxonomyTree) -> DiagnosisModel:
    """Rebuild a model from disk; the supplied taxonomy must match the digest
    recorded at save time."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CompatibilityError(f"bad magic {magic!r} (expected {MAGIC!r})")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CompatibilityError(
            f"unsupported model format version {version} (expected {FORMAT_VERSION})"
        )
    meta_len = r.u32("metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CompatibilityError(f"unreadable model metadata: {exc}") from exc

    digest = taxonomy_digest(tree)
    if meta.get("taxonomy_digest") != digest:
        raise CompatibilityError(
            "taxonomy digest mismatch: model was trained against a different tree"
        )
    spec = effnet.scaled_from_doc(meta["spec"])
    model = DiagnosisModel.build(
        tree,
        spec,
        branch_hidden=meta.get("branch_hidden"),
        in_channels=int(meta.get("in_channels", 1)),
    )

    count = r.u32("tensor count")
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u16("tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        ndim = r.u8(f"rank of {name}")
        shape = tuple(r.u32(f"shape of {name}") for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = r.take(size * 4, f"payload of tensor {name!r}")
        loaded[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()

    expected = _named_arrays(model)
    for name, arr in expected:
        if name not in loaded:
            raise CompatibilityError(f"model file is missing tensor {name!r}")
        if loaded[name].shape != arr.shape:
            raise CompatibilityError(
                f"tensor {name!r} has shape {loaded[name].shape}, spec expects {arr.shape}"
            )
    extra = set(loaded) - {name for name, _ in expected}
    if extra:
        raise CompatibilityError(f"model file has unexpected tensors: {sorted(extra)}")

    for name, t in model.parameters():
        t.data = loaded[name].astype(np.float32)
    for name, buf in model.buffers():
        buf[:] = loaded[name]
    return model

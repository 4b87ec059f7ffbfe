"""The ``.trms`` model artifact: keys, manifests, (de)serialization, footprints.

File layout, little-endian throughout::

    b"TRMS" | u32 version (=1) | u64 manifest_len | manifest JSON
    | zero pad to 64 | weights blob (blob_bytes) | sha256(blob) (32 bytes)

Tensor offsets inside the blob are 64-byte aligned so a mapped blob can be
viewed in place without copying.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import math
import re
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable, Sequence

from .errors import (
    BadMagic,
    ChecksumMismatch,
    CorruptManifest,
    LengthMismatch,
    UnsupportedVersion,
)

MAGIC = b"TRMS"
FORMAT_VERSION = 1
ALIGN = 64
DIGEST_BYTES = 32
_PREAMBLE = struct.Struct("<4sIQ")

_VERSION_RE = re.compile(r"\d+(\.\d+)*")


def align_up(n: int, align: int = ALIGN) -> int:
    return -(-n // align) * align


class DType(enum.Enum):
    F64 = "f64"
    F32 = "f32"
    F16 = "f16"
    I8 = "i8"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @property
    def numpy(self) -> str:
        return _NUMPY[self]


_ITEMSIZE = {DType.F64: 8, DType.F32: 4, DType.F16: 2, DType.I8: 1}
_NUMPY = {DType.F64: "<f8", DType.F32: "<f4", DType.F16: "<f2", DType.I8: "i1"}


@dataclass(frozen=True, order=True)
class ModelKey:
    namespace: str
    name: str
    version: str

    def __post_init__(self) -> None:
        for label in ("namespace", "name"):
            value = getattr(self, label)
            if not isinstance(value, str) or not value:
                raise ValueError(f"ModelKey.{label} must be a nonempty string")
            if "/" in value or "\0" in value:
                raise ValueError(f"ModelKey.{label} may not contain '/' or NUL: {value!r}")
        if not isinstance(self.version, str) or not _VERSION_RE.fullmatch(self.version):
            raise ValueError(f"ModelKey.version must be dotted numeric: {self.version!r}")

    @property
    def filename(self) -> str:
        """Canonical artifact filename, ``<namespace>__<name>__<version>.trms``."""
        return f"{self.namespace}__{self.name}__{self.version}.trms"

    @classmethod
    def from_filename(cls, filename: str) -> "ModelKey":
        stem = filename[:-5] if filename.endswith(".trms") else filename
        parts = stem.split("__")
        if len(parts) != 3:
            raise ValueError(f"not a canonical artifact filename: {filename!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return f"{self.namespace}/{self.name}@{self.version}"


@dataclass(frozen=True)
class TensorSpec:
    name: str
    dims: tuple[int, ...]
    dtype: DType
    offset: int
    nbytes: int

    @property
    def count(self) -> int:
        return math.prod(self.dims)


@dataclass(frozen=True)
class FootprintEstimate:
    weights_bytes: int
    workspace_bytes: int
    total_bytes: int


@dataclass(frozen=True)
class ModelManifest:
    key: ModelKey
    tensors: tuple[TensorSpec, ...]
    workspace_bytes: int = 0
    blob_bytes: int = 0
    checksum: bytes = field(default=b"", repr=False)

    @classmethod
    def build(
        cls,
        key: ModelKey,
        tensors: Iterable[tuple[str, Sequence[int], DType]],
        workspace_bytes: int = 0,
        checksum: bytes = b"",
    ) -> "ModelManifest":
        """Lay tensors out back to back at 64-byte aligned offsets."""
        specs = []
        offset = 0
        for name, dims, dtype in tensors:
            dims = tuple(int(d) for d in dims)
            nbytes = math.prod(dims) * dtype.itemsize
            specs.append(TensorSpec(name, dims, dtype, offset, nbytes))
            offset = align_up(offset + nbytes)
        m = cls(key, tuple(specs), workspace_bytes, offset, checksum)
        validate_manifest(m)
        return m

    @property
    def digest(self) -> bytes:
        """SHA-256 over the canonical manifest JSON (identifies layout, not data)."""
        return hashlib.sha256(_manifest_json(self)).digest()


def validate_manifest(m: ModelManifest) -> None:
    """Raise :class:`CorruptManifest` if any structural invariant is violated."""
    if m.workspace_bytes < 0:
        raise CorruptManifest("workspace_bytes must be >= 0")
    seen = set()
    end = 0
    for t in m.tensors:
        if not t.name or t.name in seen:
            raise CorruptManifest(f"tensor name empty or duplicated: {t.name!r}")
        seen.add(t.name)
        if any(d <= 0 for d in t.dims):
            raise CorruptManifest(f"{t.name}: dims must be positive, got {t.dims}")
        if t.nbytes != t.count * t.dtype.itemsize:
            raise CorruptManifest(f"{t.name}: nbytes {t.nbytes} disagrees with dims and dtype")
        if t.offset % ALIGN:
            raise CorruptManifest(f"{t.name}: offset {t.offset} not {ALIGN}-byte aligned")
        if t.offset < end:
            raise CorruptManifest(f"{t.name}: overlaps previous tensor or is out of order")
        end = t.offset + t.nbytes
    if m.blob_bytes != align_up(end):
        raise CorruptManifest(f"blob_bytes {m.blob_bytes} != {align_up(end)}")
    if m.checksum and len(m.checksum) != DIGEST_BYTES:
        raise CorruptManifest("checksum must be 32 bytes")


def estimate_footprint(manifest: ModelManifest) -> FootprintEstimate:
    weights = sum(math.prod(t.dims) * t.dtype.itemsize for t in manifest.tensors)
    return FootprintEstimate(weights, manifest.workspace_bytes, weights + manifest.workspace_bytes)


# -- serialization ------------------------------------------------------------

def _manifest_json(m: ModelManifest) -> bytes:
    doc = {
        "namespace": m.key.namespace,
        "name": m.key.name,
        "version": m.key.version,
        "workspace_bytes": m.workspace_bytes,
        "tensors": [
            {"name": t.name, "dims": list(t.dims), "dtype": t.dtype.value,
             "offset": t.offset, "nbytes": t.nbytes}
            for t in m.tensors
        ],
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True).encode()


def header_bytes(m: ModelManifest) -> bytes:
    text = _manifest_json(m)
    head = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(text)) + text
    return head + b"\0" * (align_up(len(head)) - len(head))


def blob_from_blocks(manifest: ModelManifest, tensor_data: Sequence[bytes]) -> bytearray:
    if len(tensor_data) != len(manifest.tensors):
        raise LengthMismatch(
            f"{len(tensor_data)} data blocks for {len(manifest.tensors)} tensors")
    blob = bytearray(manifest.blob_bytes)
    for spec, block in zip(manifest.tensors, tensor_data):
        view = memoryview(block).cast("B")
        if len(view) != spec.nbytes:
            raise LengthMismatch(f"{spec.name}: {len(view)} bytes, expected {spec.nbytes}")
        blob[spec.offset:spec.offset + spec.nbytes] = view
    return blob


def write_model(out: BinaryIO, manifest: ModelManifest, blob) -> ModelManifest:
    """Write an artifact for an already assembled blob; returns the manifest with its checksum."""
    validate_manifest(manifest)
    view = memoryview(blob).cast("B")
    if len(view) != manifest.blob_bytes:
        raise LengthMismatch(f"blob is {len(view)} bytes, manifest says {manifest.blob_bytes}")
    digest = hashlib.sha256(view).digest()
    if manifest.checksum and manifest.checksum != digest:
        raise ChecksumMismatch("manifest checksum does not match tensor data")
    out.write(header_bytes(manifest))
    out.write(view)
    out.write(digest)
    return replace(manifest, checksum=digest)


def serialize_model(manifest: ModelManifest, tensor_data: Sequence[bytes]) -> bytes:
    buf = io.BytesIO()
    write_model(buf, manifest, blob_from_blocks(manifest, tensor_data))
    return buf.getvalue()


def _parse_manifest(text: bytes) -> ModelManifest:
    try:
        doc = json.loads(text.decode("utf-8"))
        key = ModelKey(doc["namespace"], doc["name"], doc["version"])
        tensors = []
        for t in doc["tensors"]:
            dims = t["dims"]
            if not isinstance(dims, list) or not all(type(d) is int for d in dims):
                raise CorruptManifest(f"bad dims for tensor {t.get('name')!r}")
            for k in ("offset", "nbytes"):
                if type(t[k]) is not int:
                    raise CorruptManifest(f"bad {k} for tensor {t.get('name')!r}")
            if not isinstance(t["name"], str):
                raise CorruptManifest("tensor name must be a string")
            tensors.append(TensorSpec(t["name"], tuple(dims), DType(t["dtype"]), t["offset"], t["nbytes"]))
        workspace = doc["workspace_bytes"]
        if type(workspace) is not int:
            raise CorruptManifest("workspace_bytes must be an integer")
    except CorruptManifest:
        raise
    except (UnicodeDecodeError, ValueError, KeyError, TypeError, AttributeError) as exc:
        raise CorruptManifest(f"unreadable manifest: {exc}") from exc
    end = max((t.offset + t.nbytes for t in tensors), default=0)
    m = ModelManifest(key, tuple(tensors), workspace, align_up(end))
    validate_manifest(m)
    return m


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CorruptManifest(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


def read_header(f: BinaryIO) -> tuple[ModelManifest, int]:
    """Parse preamble and manifest; return (manifest without checksum, blob offset)."""
    pre = f.read(_PREAMBLE.size)
    if len(pre) >= 4 and pre[:4] != MAGIC:
        raise BadMagic(f"bad magic {pre[:4]!r}")
    if len(pre) != _PREAMBLE.size:
        raise CorruptManifest("truncated preamble")
    _, version, manifest_len = _PREAMBLE.unpack(pre)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {version}")
    if manifest_len > 1 << 30:
        raise CorruptManifest(f"implausible manifest length {manifest_len}")
    manifest = _parse_manifest(_read_exact(f, manifest_len, "manifest"))
    return manifest, align_up(_PREAMBLE.size + manifest_len)


def deserialize_manifest(stream, verify: bool = False) -> ModelManifest:
    """Read the manifest (and trailer checksum) from bytes or a seekable binary file.

    The blob body is only read when ``verify`` is set.
    """
    f = io.BytesIO(stream) if isinstance(stream, (bytes, bytearray, memoryview)) else stream
    manifest, blob_offset = read_header(f)
    f.seek(blob_offset + manifest.blob_bytes)
    checksum = _read_exact(f, DIGEST_BYTES, "checksum trailer")
    manifest = replace(manifest, checksum=checksum)
    if verify:
        f.seek(blob_offset)
        h = hashlib.sha256()
        remaining = manifest.blob_bytes
        while remaining:
            chunk = f.read(min(remaining, 1 << 22))
            if not chunk:
                raise CorruptManifest("truncated blob")
            h.update(chunk)
            remaining -= len(chunk)
        if h.digest() != checksum:
            raise ChecksumMismatch(f"{manifest.key}: blob checksum mismatch")
    return manifest


def read_model(stream, verify: bool = True) -> tuple[ModelManifest, bytearray]:
    """Deserialize manifest and blob. The blob is returned as one contiguous buffer."""
    f = io.BytesIO(stream) if isinstance(stream, (bytes, bytearray, memoryview)) else stream
    manifest, blob_offset = read_header(f)
    f.seek(blob_offset)
    blob = bytearray(manifest.blob_bytes)
    if f.readinto(blob) != manifest.blob_bytes:
        raise CorruptManifest("truncated blob")
    checksum = _read_exact(f, DIGEST_BYTES, "checksum trailer")
    if verify and hashlib.sha256(blob).digest() != checksum:
        raise ChecksumMismatch(f"{manifest.key}: blob checksum mismatch")
    return replace(manifest, checksum=checksum), blob


def deserialize_model(stream, verify: bool = True) -> tuple[ModelManifest, list[bytes]]:
    manifest, blob = read_model(stream, verify)
    return manifest, [bytes(blob[t.offset:t.offset + t.nbytes]) for t in manifest.tensors]

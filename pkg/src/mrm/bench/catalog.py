"""Synthetic model catalogs: sizes mirror well-known image models, contents are seeded noise."""

from __future__ import annotations

import hashlib
import os
import re
import zlib
from dataclasses import dataclass, replace

import numpy as np

from ..format import DType, ModelKey, ModelManifest, align_up, header_bytes

MB = 10**6
_CHUNK_ELEMS = 1 << 20


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    layers: int
    weights_mb: float
    workspace_mb: float


@dataclass(frozen=True)
class CatalogSpec:
    name: str
    entries: tuple[CatalogEntry, ...]
    scale: int = 1  # sizes are divided by this

    def __post_init__(self) -> None:
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f"catalog {self.name}: duplicate model names")
        for e in self.entries:
            if e.weights_mb <= 0 or e.workspace_mb < 0 or e.layers < 1:
                raise ValueError(f"catalog {self.name}: bad sizes for {e.name}")

    def scaled(self, factor: int, name: str | None = None) -> "CatalogSpec":
        return replace(self, name=name or f"{self.name}-div{factor}", scale=self.scale * factor)

    def weights_bytes(self, e: CatalogEntry) -> int:
        return round(e.weights_mb * MB / self.scale / 8) * 8

    def workspace_bytes(self, e: CatalogEntry) -> int:
        return round(e.workspace_mb * MB / self.scale)

    def key(self, e: CatalogEntry) -> ModelKey:
        return ModelKey(self.name, slug(e.name), "1")

    def keys(self) -> list[ModelKey]:
        return [self.key(e) for e in self.entries]

    def total_weights(self) -> int:
        return sum(self.weights_bytes(e) for e in self.entries)


def slug(name: str) -> str:
    return re.sub(r"[^a-z0-9.-]+", "-", name.lower()).strip("-")


# name, layers, ILS (workspace) MB, MWMF (weights) MB
_SMALL = [
    ("AlexNet", 16, 516, 238), ("GoogLeNet", 116, 111, 27), ("CaffeNet", 16, 512, 233),
    ("RCNN-ILSVRC13", 16, 479, 221), ("DPN68", 361, 122, 49), ("DPN92", 481, 340, 145),
    ("Inception-v3", 472, 257, 92), ("Inception-v4", 747, 399, 164),
    ("InceptionBN-v2", 416, 313, 129), ("InceptionBN-v3", 416, 142, 44),
    ("Inception-ResNet-v2", 1102, 493, 214), ("LocationNet", 514, 666, 285),
    ("NIN", 24, 131, 29), ("ResNet101", 526, 423, 170), ("ResNet101-v2", 522, 428, 171),
    ("ResNet152", 777, 548, 231), ("ResNet152-11k", 769, 721, 311),
    ("ResNet152-v2", 761, 340, 231), ("ResNet18-v2", 99, 154, 45),
    ("ResNet200-v2", 1009, 589, 248), ("ResNet269-v2", 1346, 889, 391),
    ("ResNet34-v2", 179, 222, 84), ("ResNet50", 268, 270, 98), ("ResNet50-v2", 259, 275, 98),
    ("ResNeXt101", 526, 375, 170), ("ResNeXt101-32x4d", 522, 378, 170),
    ("ResNeXt26-32x4d", 147, 147, 59), ("ResNeXt50", 271, 222, 96),
    ("ResNeXt50-32x4d", 267, 224, 96), ("SqueezeNet-v1.0", 52, 34, 4.8),
    ("SqueezeNet-v1.1", 52, 28, 4.8), ("VGG16", 32, 1228, 528), ("VGG16-SOD", 32, 1198, 514),
    ("VGG16-SOS", 32, 1195, 513), ("VGG19", 38, 1270, 549), ("WRN50-v2", 267, 758, 264),
    ("Xception", 236, 244, 88),
]

# Input-scaled AlexNet / VGG16 variants; no workspace figures are published for these.
_LARGE = [
    ("AlexNet-S1", 16, 238), ("AlexNet-S2", 16, 770), ("AlexNet-S3", 16, 1694),
    ("AlexNet-S4", 16, 3010), ("VGG16-S1", 32, 528), ("VGG16-S2", 32, 1704),
    ("VGG16-S3", 32, 3664), ("VGG16-S4", 32, 6408),
]

SMALL37 = CatalogSpec("small37", tuple(CatalogEntry(n, l, w, ils) for n, l, ils, w in _SMALL))
LARGE8 = CatalogSpec("large8", tuple(CatalogEntry(n, l, w, 0.0) for n, l, w in _LARGE))
TINY = SMALL37.scaled(64, "tiny")

CATALOGS = {"small37": SMALL37, "large8": LARGE8, "tiny": TINY}


def get_catalog(name: str) -> CatalogSpec:
    try:
        return CATALOGS[name]
    except KeyError:
        raise ValueError(f"unknown catalog {name!r}; choose from {sorted(CATALOGS)}") from None


def _split(total_elems: int, parts: int, rng: np.random.Generator) -> list[int]:
    """Uneven positive split whose leading parts are multiples of 8 elements (64 bytes)."""
    parts = max(1, min(parts, total_elems // 8))
    if parts == 1:
        return [total_elems]
    share = rng.uniform(0.2, 1.0, parts)
    raw = np.floor(share / share.sum() * total_elems / 8).astype(np.int64) * 8
    raw = np.maximum(raw, 8)
    sizes = [int(x) for x in raw[:-1]]
    while sum(sizes) >= total_elems:
        i = int(np.argmax(sizes))
        sizes[i] -= 8
    return sizes + [total_elems - sum(sizes)]


def model_manifest(key: ModelKey, weights_bytes: int, workspace_bytes: int,
                   layers: int, seed: int) -> ModelManifest:
    if weights_bytes <= 0 or weights_bytes % 8:
        raise ValueError("weights_bytes must be a positive multiple of 8")
    rng = np.random.default_rng([seed, zlib.crc32(str(key).encode())])
    sizes = _split(weights_bytes // 8, layers, rng)
    tensors = [(f"layer{i:04d}_weight", (n,), DType.F64) for i, n in enumerate(sizes)]
    return ModelManifest.build(key, tensors, workspace_bytes)


def write_synthetic(path: str, manifest: ModelManifest, seed: int) -> ModelManifest:
    """Stream a seeded-noise artifact to ``path`` without holding the blob in memory."""
    rng = np.random.default_rng([seed, zlib.crc32(str(manifest.key).encode()), 1])
    digest = hashlib.sha256()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header_bytes(manifest))
        pos = 0
        for t in manifest.tensors:
            if t.offset > pos:
                pad = bytes(t.offset - pos)
                f.write(pad)
                digest.update(pad)
            left = t.count
            while left:
                n = min(left, _CHUNK_ELEMS)
                chunk = (rng.standard_normal(n) * 0.05).astype("<f8").tobytes()
                f.write(chunk)
                digest.update(chunk)
                left -= n
            pos = t.offset + t.nbytes
        tail = bytes(manifest.blob_bytes - pos)
        f.write(tail)
        digest.update(tail)
        f.write(digest.digest())
    os.replace(tmp, path)
    return replace(manifest, checksum=digest.digest())


def make_model(out_dir: str, key: ModelKey, weights_bytes: int, workspace_bytes: int = 0,
               layers: int = 1, seed: int = 0) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, key.filename)
    write_synthetic(path, model_manifest(key, weights_bytes, workspace_bytes, layers, seed), seed)
    return path


def gen_catalog(spec: CatalogSpec, out_dir: str, seed: int = 0) -> list[str]:
    """Write one artifact per catalog entry; the same seed gives byte-identical files."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for e in spec.entries:
        paths.append(make_model(out_dir, spec.key(e), spec.weights_bytes(e),
                                spec.workspace_bytes(e), e.layers, seed))
    return paths


def catalog_footprints(spec: CatalogSpec) -> dict[ModelKey, tuple[int, int]]:
    """(weights, workspace) bytes per key, without touching the disk."""
    return {spec.key(e): (spec.weights_bytes(e), spec.workspace_bytes(e)) for e in spec.entries}


def blob_bytes(spec: CatalogSpec, e: CatalogEntry) -> int:
    return align_up(spec.weights_bytes(e))

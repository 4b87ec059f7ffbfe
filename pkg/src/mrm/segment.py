"""Named, write-once shared memory segments and per-granularity object layouts.

Segments are plain files under the platform's shared memory filesystem
(``/dev/shm`` on Linux) that both sides ``mmap``. The first 64 bytes hold a
small header (magic, generation, length, sealed flag) so that an attaching
process can reject segments that were never sealed or that were recreated
under the same name since its handle was issued.
"""

from __future__ import annotations

import errno
import itertools
import mmap
import os
import re
import struct
import tempfile
import threading
from dataclasses import dataclass
from typing import Union

from .errors import (
    AlreadySealed,
    NameCollision,
    NoSuchSegment,
    NotSealed,
    OutOfSharedMemory,
    StaleGeneration,
)
from .format import ALIGN, ModelManifest

PREFIX = "mrm."
MAX_TOKEN = 200
HEADER_BYTES = 64
DEFAULT_BLOCK_BYTES = 2 * 1024 * 1024

_HEADER = struct.Struct("<4sIQQB")
_SEG_MAGIC = b"MRMS"
_SEALED_AT = 4 + 4 + 8 + 8
_HINT_RE = re.compile(r"[^A-Za-z0-9_.-]+")


def default_shm_dir() -> str:
    return "/dev/shm" if os.path.isdir("/dev/shm") else tempfile.gettempdir()


# -- granularity & layout -----------------------------------------------------

@dataclass(frozen=True)
class ModelGranularity:
    tag = 0


@dataclass(frozen=True)
class LayerGranularity:
    tag = 1


@dataclass(frozen=True)
class BlockGranularity:
    block_bytes: int = DEFAULT_BLOCK_BYTES
    tag = 2

    def __post_init__(self) -> None:
        if self.block_bytes <= 0 or self.block_bytes % ALIGN:
            raise ValueError(f"block_bytes must be a positive multiple of {ALIGN}")


ShareGranularity = Union[ModelGranularity, LayerGranularity, BlockGranularity]
MODEL = ModelGranularity()
LAYER = LayerGranularity()


def parse_granularity(text: str) -> ShareGranularity:
    """``model``, ``layer``, ``block`` or ``block:<bytes>``."""
    head, _, arg = text.strip().lower().partition(":")
    if head == "model":
        return MODEL
    if head == "layer":
        return LAYER
    if head == "block":
        return BlockGranularity(int(arg)) if arg else BlockGranularity()
    raise ValueError(f"unknown granularity {text!r}")


def format_granularity(g: ShareGranularity) -> str:
    if isinstance(g, BlockGranularity):
        return f"block:{g.block_bytes}"
    return "layer" if isinstance(g, LayerGranularity) else "model"


@dataclass(frozen=True)
class LayoutObject:
    name: str
    segment_index: int
    offset: int
    length: int


ObjectLayout = tuple[LayoutObject, ...]


def layout_for(manifest: ModelManifest, g: ShareGranularity) -> ObjectLayout:
    """Split a model blob into shareable objects.

    Layer objects run from one tensor's offset to the next one's, so alignment
    padding rides along with the preceding tensor and the objects tile the blob.
    """
    blob = manifest.blob_bytes
    if isinstance(g, LayerGranularity) and manifest.tensors:
        starts = [0] + [t.offset for t in manifest.tensors[1:]]
        ends = starts[1:] + [blob]
        return tuple(LayoutObject(t.name, 0, s, e - s)
                     for t, s, e in zip(manifest.tensors, starts, ends))
    if isinstance(g, BlockGranularity) and blob:
        b = g.block_bytes
        return tuple(LayoutObject(f"block{i:06d}", 0, off, min(b, blob - off))
                     for i, off in enumerate(range(0, blob, b)))
    return (LayoutObject("model", 0, 0, blob),)


# -- segments -----------------------------------------------------------------

@dataclass(frozen=True)
class SegmentHandle:
    token: str
    length: int
    generation: int
    sealed: bool = False


class _Owned:
    __slots__ = ("handle", "fd", "map")

    def __init__(self, handle: SegmentHandle, fd: int, mapping: mmap.mmap):
        self.handle = handle
        self.fd = fd
        self.map = mapping


class SegmentManager:
    """Creator side: owns every segment it creates until :meth:`destroy`.

    Meant to be driven by a single owner (the daemon), but internally locked so
    concurrent loaders of distinct models can create segments in parallel.
    """

    def __init__(self, directory: str | None = None, pid: int | None = None):
        self.directory = directory or default_shm_dir()
        self.pid = os.getpid() if pid is None else pid
        self._counter = itertools.count()
        self._generation = itertools.count(1)
        self._owned: dict[str, _Owned] = {}
        self._lock = threading.Lock()

    def _path(self, token: str) -> str:
        return os.path.join(self.directory, token)

    def _token_for(self, hint: str) -> str:
        hint = _HINT_RE.sub("_", hint).strip("._") or "seg"
        base = f"{PREFIX}{self.pid}.{next(self._counter)}"
        return f"{base}.{hint}"[:MAX_TOKEN]

    def create(self, token_hint: str, length: int) -> SegmentHandle:
        if length <= 0:
            raise ValueError("segment length must be > 0")
        while True:
            with self._lock:
                token = self._token_for(token_hint)
            try:
                return self._open_new(token, length)
            except NameCollision:
                continue

    def create_exact(self, token: str, length: int) -> SegmentHandle:
        """Create a segment under an exact token; raises :class:`NameCollision` if taken."""
        if length <= 0:
            raise ValueError("segment length must be > 0")
        if not token.startswith(PREFIX) or len(token) > MAX_TOKEN or "/" in token:
            raise ValueError(f"invalid segment token {token!r}")
        return self._open_new(token, length)

    def recreate(self, handle: SegmentHandle, length: int | None = None) -> SegmentHandle:
        """Destroy a segment and create a fresh one under the same token."""
        self.destroy(handle)
        return self.create_exact(handle.token, handle.length if length is None else length)

    def _open_new(self, token: str, length: int) -> SegmentHandle:
        path = self._path(token)
        try:
            fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o600)
        except FileExistsError:
            raise NameCollision(token) from None
        try:
            total = HEADER_BYTES + length
            try:
                os.posix_fallocate(fd, 0, total)
            except OSError as exc:
                if exc.errno in (errno.ENOSPC, errno.ENOMEM, errno.EFBIG):
                    raise OutOfSharedMemory(f"{token}: cannot reserve {total} bytes") from exc
                raise
            mapping = mmap.mmap(fd, total)
        except BaseException:
            os.close(fd)
            os.unlink(path)
            raise
        with self._lock:
            generation = next(self._generation)
        _HEADER.pack_into(mapping, 0, _SEG_MAGIC, 1, generation, length, 0)
        handle = SegmentHandle(token, length, generation, False)
        with self._lock:
            self._owned[token] = _Owned(handle, fd, mapping)
        return handle

    def _get(self, handle: SegmentHandle) -> _Owned:
        with self._lock:
            owned = self._owned.get(handle.token)
        if owned is None or owned.handle.generation != handle.generation:
            raise NoSuchSegment(handle.token)
        return owned

    def write(self, handle: SegmentHandle, offset: int, data) -> None:
        owned = self._get(handle)
        if owned.handle.sealed:
            raise AlreadySealed(handle.token)
        view = memoryview(data).cast("B")
        if offset < 0 or offset + len(view) > owned.handle.length:
            raise ValueError("write out of segment bounds")
        start = HEADER_BYTES + offset
        owned.map[start:start + len(view)] = view

    def seal(self, handle: SegmentHandle) -> SegmentHandle:
        owned = self._get(handle)
        if owned.handle.sealed:
            raise AlreadySealed(handle.token)
        owned.map[_SEALED_AT] = 1
        sealed = SegmentHandle(handle.token, handle.length, handle.generation, True)
        owned.handle = sealed
        return sealed

    def destroy(self, handle: SegmentHandle) -> None:
        """Unlink the segment. Processes that still have it mapped keep a valid view."""
        with self._lock:
            owned = self._owned.get(handle.token)
            if owned is None or owned.handle.generation != handle.generation:
                raise NoSuchSegment(handle.token)
            del self._owned[handle.token]
        try:
            os.unlink(self._path(handle.token))
        except FileNotFoundError:
            pass
        owned.map.close()
        os.close(owned.fd)

    def owned(self) -> list[SegmentHandle]:
        with self._lock:
            return [o.handle for o in self._owned.values()]

    def destroy_all(self) -> int:
        handles = self.owned()
        for h in handles:
            try:
                self.destroy(h)
            except NoSuchSegment:
                pass
        return len(handles)


class AttachedSegment:
    """A read-only mapping of a sealed segment."""

    def __init__(self, token: str, generation: int, mapping: mmap.mmap, length: int):
        self.token = token
        self.generation = generation
        self.length = length
        self._map = mapping
        self._mv = memoryview(mapping)
        self.view = self._mv[HEADER_BYTES:HEADER_BYTES + length].toreadonly()

    @property
    def closed(self) -> bool:
        return self._map is None

    def close(self) -> None:
        if self._map is None:
            return
        self.view.release()
        self._mv.release()
        try:
            self._map.close()
        except BufferError:
            # Someone still holds a derived view (e.g. a numpy array); the
            # mapping is released once the last reference goes away.
            pass
        self._map = None

    def __enter__(self) -> "AttachedSegment":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def attach(token: str, generation: int, directory: str | None = None) -> AttachedSegment:
    if not token.startswith(PREFIX) or "/" in token or len(token) > MAX_TOKEN:
        raise NoSuchSegment(token)
    path = os.path.join(directory or default_shm_dir(), token)
    try:
        fd = os.open(path, os.O_RDONLY)
    except FileNotFoundError:
        raise NoSuchSegment(token) from None
    try:
        size = os.fstat(fd).st_size
        if size < HEADER_BYTES:
            raise NoSuchSegment(f"{token}: not a segment")
        mapping = mmap.mmap(fd, size, access=mmap.ACCESS_READ)
    finally:
        os.close(fd)
    magic, _, current, length, sealed = _HEADER.unpack_from(mapping, 0)
    try:
        if magic != _SEG_MAGIC or HEADER_BYTES + length > size:
            raise NoSuchSegment(f"{token}: not a segment")
        if current > generation:
            raise StaleGeneration(f"{token}: generation {generation} superseded by {current}")
        if current < generation:
            raise NoSuchSegment(f"{token}: generation {generation} does not exist")
        if not sealed:
            raise NotSealed(token)
    except BaseException:
        mapping.close()
        raise
    return AttachedSegment(token, generation, mapping, length)


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def cleanup_orphans(directory: str | None = None, pid: int | None = None) -> list[str]:
    """Remove ``mrm.*`` segments left behind by dead daemons (or by ``pid``)."""
    directory = directory or default_shm_dir()
    removed = []
    try:
        names = os.listdir(directory)
    except FileNotFoundError:
        return removed
    for name in names:
        if not name.startswith(PREFIX):
            continue
        try:
            owner = int(name.split(".")[1])
        except (IndexError, ValueError):
            continue
        if owner == pid or not _pid_alive(owner):
            try:
                os.unlink(os.path.join(directory, name))
                removed.append(name)
            except FileNotFoundError:
                pass
    return removed

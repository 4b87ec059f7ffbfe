"""Client SDK: open a model through the daemon, or load it privately.

Both paths return a :class:`ModelView` with the same shape, so calling code
does not care where the bytes came from::

    with Client(model_dir="models") as c:
        view = c.open(ModelKey("zoo", "alexnet", "1"))
        w = view.array("fc6_weight")
        c.close(view)
"""

from __future__ import annotations

import logging
import os
import socket
import statistics
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import wire
from .errors import (
    ConnectionLost,
    CorruptArtifact,
    DaemonUnreachable,
    MRMError,
    NoEvictableSpace,
    NotFound,
    error_from_code,
)
from .format import DType, ModelKey, ModelManifest, deserialize_manifest, read_model
from .segment import LAYER, MODEL, AttachedSegment, ShareGranularity, attach, layout_for

log = logging.getLogger("mrm.client")

DEFAULT_ENDPOINT = "/tmp/mrm.sock"


@dataclass(frozen=True)
class CostModelParams:
    q: float  # disk bandwidth, bytes/s
    o: float  # per-object export overhead, s
    s: float  # per-object attach overhead, s

    def __post_init__(self) -> None:
        if not self.q > 0:
            raise ValueError("q must be > 0")
        if self.o < 0 or self.s < 0:
            raise ValueError("o and s must be >= 0")


def share_benefit(b: float, n: int, p: CostModelParams) -> float:
    """Seconds saved by sharing ``b`` bytes split over ``n`` objects instead of reading them."""
    return b / p.q - n * (p.o + p.s)


@dataclass(frozen=True)
class Shared:
    handle_id: int
    model_id: int


@dataclass(frozen=True)
class Private:
    reason: str = ""


@dataclass(frozen=True)
class TensorView:
    name: str
    dims: tuple[int, ...]
    dtype: DType
    data: memoryview  # read-only, exactly nbytes long

    def array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=self.dtype.numpy).reshape(self.dims)


@dataclass
class ModelView:
    key: ModelKey
    tensors: list[TensorView]
    origin: Union[Shared, Private]
    granularity: ShareGranularity = MODEL
    outcome: str = "Private"
    # load_disk, init_copy, share_overhead, fetch (seconds); filled on open.
    timings: dict = field(default_factory=dict)
    _segments: list = field(default_factory=list, repr=False)
    _buffer: object = field(default=None, repr=False)
    closed: bool = False

    @property
    def shared(self) -> bool:
        return isinstance(self.origin, Shared)

    @property
    def fallback_reason(self) -> str:
        return self.origin.reason if isinstance(self.origin, Private) else ""

    def tensor(self, name: str) -> TensorView:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def array(self, name: str) -> np.ndarray:
        return self.tensor(name).array()

    def _release(self) -> None:
        for t in self.tensors:
            t.data.release()
        for seg in self._segments:
            seg.close()
        self._segments = []
        self._buffer = None
        self.closed = True


def touch(view: ModelView) -> int:
    """Stream every tensor byte; Adler-32 of the concatenation (a stand-in for compute)."""
    crc = 1
    for t in view.tensors:
        crc = zlib.adler32(t.data, crc)
    return crc


def _connect(endpoint: str, timeout: float) -> socket.socket:
    try:
        if endpoint.startswith("tcp://"):
            host, _, port = endpoint[len("tcp://"):].rpartition(":")
            sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        else:
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            sock.settimeout(timeout)
            sock.connect(endpoint)
    except OSError as exc:
        raise DaemonUnreachable(f"{endpoint}: {exc}") from None
    sock.settimeout(None)
    return sock


class Client:
    """Talks to one daemon; safe to share across threads (one connection per thread).

    ``params`` overrides the cost model the daemon publishes. When neither is
    available the client always tries to share.
    """

    def __init__(self, endpoint: Optional[str] = None, model_dir: Optional[str] = None,
                 shm_dir: Optional[str] = None, params: Optional[CostModelParams] = None,
                 connect_timeout: float = 2.0):
        self.endpoint = os.environ.get("MRM_ENDPOINT") or endpoint or DEFAULT_ENDPOINT
        self.model_dir = model_dir
        self.shm_dir = shm_dir
        self.params = params
        self.disabled = os.environ.get("MRM_DISABLE") == "1"
        self.connect_timeout = connect_timeout
        self._local = threading.local()
        self._socks: list[socket.socket] = []
        self._lock = threading.Lock()
        self._published: Optional[CostModelParams] = None
        self._published_fetched = False
        self._manifests: dict[str, tuple] = {}

    # -- connection -----------------------------------------------------------

    def _sock(self) -> socket.socket:
        sock = getattr(self._local, "sock", None)
        if sock is None:
            sock = _connect(self.endpoint, self.connect_timeout)
            self._local.sock = sock
            with self._lock:
                self._socks.append(sock)
        return sock

    def _drop_sock(self) -> None:
        sock = getattr(self._local, "sock", None)
        if sock is not None:
            self._local.sock = None
            with self._lock:
                if sock in self._socks:
                    self._socks.remove(sock)
            sock.close()

    def call(self, msg: wire.Message) -> wire.Message:
        """One request/reply; daemon ErrorMsg replies are raised as their :class:`MRMError`."""
        try:
            reply = wire.request_reply(self._sock(), msg)
        except (ConnectionLost, OSError) as exc:
            self._drop_sock()
            if isinstance(exc, DaemonUnreachable):
                raise
            raise ConnectionLost(str(exc)) from None
        if isinstance(reply, wire.ErrorMsg):
            raise error_from_code(reply.code, reply.detail)
        return reply

    def stats(self) -> wire.StatsResponse:
        return self.call(wire.StatsRequest())

    def close_connections(self) -> None:
        with self._lock:
            socks, self._socks = self._socks, []
        for s in socks:
            s.close()
        self._local = threading.local()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close_connections()

    # -- decision -------------------------------------------------------------

    def cost_params(self, override: Optional[CostModelParams] = None) -> Optional[CostModelParams]:
        if override is not None:
            return override
        if self.params is not None:
            return self.params
        if not self._published_fetched:
            self._published_fetched = True
            try:
                cal = self.stats().calibration
            except MRMError:
                cal = None
            if cal is not None:
                self._published = CostModelParams(*cal)
        return self._published

    def local_path(self, key: ModelKey) -> Optional[str]:
        if self.model_dir is None:
            return None
        path = os.path.join(self.model_dir, key.filename)
        return path if os.path.isfile(path) else None

    def _manifest(self, path: str) -> ModelManifest:
        st = os.stat(path)
        stamp = (st.st_ino, st.st_size, st.st_mtime_ns)
        hit = self._manifests.get(path)
        if hit is None or hit[0] != stamp:
            with open(path, "rb") as f:
                hit = (stamp, deserialize_manifest(f))
            self._manifests[path] = hit
        return hit[1]

    def _choose(self, manifest: Optional[ModelManifest], g: ShareGranularity,
                params: Optional[CostModelParams]) -> tuple[Optional[ShareGranularity], str]:
        """Granularity to share at, or None with the reason to load privately."""
        if manifest is None or params is None:
            return g, ""
        b = manifest.blob_bytes
        rho = share_benefit(b, len(layout_for(manifest, g)), params)
        if rho > 0:
            return g, ""
        if g == LAYER:
            rho_model = share_benefit(b, 1, params)
            if rho_model > 0:
                return MODEL, ""
        return None, f"share benefit {rho:.6f}s <= 0"

    # -- open / close ---------------------------------------------------------

    def open(self, key: ModelKey, granularity: ShareGranularity = MODEL,
             force_private: bool = False, force_shared: bool = False,
             params: Optional[CostModelParams] = None) -> ModelView:
        path = self.local_path(key)
        if force_private or self.disabled:
            return self.open_private(key, path, "disabled" if self.disabled else "forced private")
        chosen, reason = granularity, ""
        if not force_shared:
            try:
                p = self.cost_params(params)
            except (DaemonUnreachable, ConnectionLost) as exc:
                return self.open_private(key, path, f"daemon unreachable: {exc}")
            if p is not None and path is not None:
                chosen, reason = self._choose(self._manifest(path), granularity, p)
        if chosen is None:
            return self.open_private(key, path, reason)
        try:
            return self.open_shared(key, chosen)
        except (DaemonUnreachable, ConnectionLost) as exc:
            return self.open_private(key, path, f"daemon unreachable: {exc}")
        except NoEvictableSpace as exc:
            return self.open_private(key, path, f"NoEvictableSpace: {exc}")

    def open_shared(self, key: ModelKey, granularity: ShareGranularity = MODEL) -> ModelView:
        t0 = time.perf_counter()
        resp = self.call(wire.OpenRequest(key.namespace, key.name, key.version, granularity))
        t1 = time.perf_counter()
        try:
            view = self._build_shared(key, resp, granularity)
        except BaseException:
            try:
                self.call(wire.CloseRequest(resp.model_id, resp.handle_id))
            except MRMError:
                pass
            raise
        t2 = time.perf_counter()
        fetch, disk_read, copy, _export, _total = resp.timings
        view.timings = {
            "fetch": fetch,
            "load_disk": disk_read,
            "init_copy": copy,
            "share_overhead": max(0.0, (t1 - t0) - fetch - disk_read - copy) + (t2 - t1),
        }
        return view

    def _build_shared(self, key: ModelKey, resp: wire.OpenResponse, g: ShareGranularity) -> ModelView:
        segments: dict[str, AttachedSegment] = {}
        try:
            for obj in resp.objects:
                if obj.token not in segments:
                    segments[obj.token] = attach(obj.token, obj.generation, self.shm_dir)
            tensors = []
            only = next(iter(segments.values())) if len(segments) == 1 else None
            for t in resp.tensors:
                if only is not None and t.offset + t.nbytes <= only.length:
                    seg = only
                else:
                    seg = self._segment_for(t.offset, t.nbytes, resp.objects, segments)
                tensors.append(TensorView(t.name, t.dims, t.dtype, seg.view[t.offset:t.offset + t.nbytes]))
        except BaseException:
            for seg in segments.values():
                seg.close()
            raise
        return ModelView(key, tensors, Shared(resp.handle_id, resp.model_id), g, resp.outcome,
                         _segments=list(segments.values()))

    @staticmethod
    def _segment_for(offset: int, nbytes: int, objects, segments) -> AttachedSegment:
        # Objects cover tensors at their blob offsets; a tensor may span
        # several consecutive block objects of the same segment.
        end = offset + nbytes
        covering = [o for o in objects if o.offset < end and o.offset + o.length > offset] \
            or [o for o in objects if o.offset <= offset <= o.offset + o.length]
        tokens = {o.token for o in covering}
        if len(tokens) != 1:
            raise CorruptArtifact(f"tensor at {offset} is not covered by a single segment")
        seg = segments[tokens.pop()]
        if end > seg.length:
            raise CorruptArtifact(f"tensor at {offset}+{nbytes} overruns its segment")
        return seg

    def open_private(self, key: ModelKey, path: Optional[str] = None, reason: str = "") -> ModelView:
        path = path or self.local_path(key)
        if path is None:
            raise NotFound(f"{key}: no local artifact for a private load ({reason or 'no daemon'})")
        t0 = time.perf_counter()
        with open(path, "rb") as f:
            manifest, blob = read_model(f, verify=True)
        t1 = time.perf_counter()
        # The private analog of the device upload: a second, process-owned copy.
        buf = bytearray(blob)
        del blob
        t2 = time.perf_counter()
        mv = memoryview(buf).toreadonly()
        tensors = [TensorView(t.name, t.dims, t.dtype, mv[t.offset:t.offset + t.nbytes])
                   for t in manifest.tensors]
        view = ModelView(manifest.key, tensors, Private(reason), MODEL, "Private", _buffer=buf)
        view.timings = {"fetch": 0.0, "load_disk": t1 - t0, "init_copy": t2 - t1, "share_overhead": 0.0}
        return view

    def close(self, view: ModelView) -> None:
        if view.closed:
            return
        origin = view.origin
        view._release()
        if isinstance(origin, Shared):
            try:
                self.call(wire.CloseRequest(origin.model_id, origin.handle_id))
            except (ConnectionLost, DaemonUnreachable):
                # The daemon already dropped this connection's handles.
                pass


def calibrate(endpoint: Optional[str], sample_model: Union[str, ModelKey], model_dir: Optional[str] = None,
              reps: int = 32, shm_dir: Optional[str] = None) -> CostModelParams:
    """Measure q from an uncached read of the sample artifact, o and s from warm shared opens."""
    if isinstance(sample_model, ModelKey):
        if model_dir is None:
            raise ValueError("model_dir is required when sample_model is a key")
        path = os.path.join(model_dir, sample_model.filename)
    else:
        path = sample_model
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        key = deserialize_manifest(f).key
        drop_page_cache(f.fileno())
        t0 = time.perf_counter()
        while f.read(1 << 22):
            pass
        q = size / max(time.perf_counter() - t0, 1e-9)

    client = Client(endpoint, shm_dir=shm_dir)
    try:
        first = client.open_shared(key, MODEL)  # warm the cache
        client.close(first)
        export, attach_t = [], []
        for _ in range(max(reps, 32)):
            t0 = time.perf_counter()
            resp = client.call(wire.OpenRequest(key.namespace, key.name, key.version, MODEL))
            t1 = time.perf_counter()
            view = client._build_shared(key, resp, MODEL)
            t2 = time.perf_counter()
            n = max(1, len(resp.objects))
            export.append((t1 - t0) / n)
            attach_t.append((t2 - t1) / n)
            client.close(view)
    finally:
        client.close_connections()
    return CostModelParams(q, statistics.median(export), statistics.median(attach_t))


def drop_page_cache(fd: int) -> bool:
    """Ask the kernel to forget cached pages of ``fd``; False where unsupported."""
    if not hasattr(os, "posix_fadvise"):
        return False
    try:
        os.fdatasync(fd)
    except OSError:
        pass
    try:
        os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
    except OSError:
        return False
    return True

"""The model resource manager daemon (``mrmd``).

Wires the placement manager to real storage (artifact files, an optional
remote store, shared memory segments) and serves the framed protocol over a
local stream socket, optionally also over TCP.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import re
import signal
import socket
import socketserver
import sys
import threading
import time
from dataclasses import dataclass
from typing import Optional

from . import __version__, remote, wire
from .cache import CacheConfig, CacheTier, EvictionPolicy, ModelCache
from .errors import (
    ConfigError,
    ConnectionLost,
    CorruptArtifact,
    ErrorCode,
    FrameTooLarge,
    MRMError,
    NotFound,
    NotOpen,
    ProtocolError,
)
from .format import ModelKey, ModelManifest, deserialize_manifest, read_model
from .segment import (
    MODEL,
    SegmentManager,
    ShareGranularity,
    cleanup_orphans,
    default_shm_dir,
    format_granularity,
    parse_granularity,
)

log = logging.getLogger("mrm.daemon")

EXIT_OK, EXIT_CONFIG, EXIT_BIND = 0, 2, 3

_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([kmgt]i?b?|b)?\s*$", re.I)
_UNITS = {"": 1, "b": 1, "k": 10**3, "m": 10**6, "g": 10**9, "t": 10**12,
          "ki": 2**10, "mi": 2**20, "gi": 2**30, "ti": 2**40}


def parse_size(value) -> int:
    """Bytes from an int or a string like ``"512MB"`` (decimal) / ``"2GiB"`` (binary)."""
    if isinstance(value, bool):
        raise ConfigError(f"not a size: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    m = _SIZE_RE.match(str(value))
    if not m:
        raise ConfigError(f"not a size: {value!r}")
    unit = (m.group(2) or "").lower().rstrip("b")
    return int(float(m.group(1)) * _UNITS[unit])


@dataclass
class DaemonConfig:
    listen_path: str = "/tmp/mrm.sock"
    fast_capacity_bytes: int = 1 << 30
    host_capacity_bytes: int = 2 << 30
    disk_cache_dir: str = "./models"
    disk_capacity_bytes: int = 16 << 30
    remote_url: Optional[str] = None
    eviction_policy: EvictionPolicy = EvictionPolicy.LRU
    eager_reclaim: bool = False
    workspace_headroom_fraction: float = 0.25
    default_granularity: ShareGranularity = MODEL
    listen_tcp: Optional[str] = None
    shm_dir: Optional[str] = None
    verify_checksums: bool = True
    shutdown_grace_s: float = 5.0
    # Published to clients for the share-or-not decision: (q [B/s], o [s], s [s]).
    cost_model: Optional[tuple] = None

    def validate(self) -> "DaemonConfig":
        for name in ("fast_capacity_bytes", "host_capacity_bytes", "disk_capacity_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 <= self.workspace_headroom_fraction <= 1.0:
            raise ConfigError("workspace_headroom_fraction must be within [0, 1]")
        if not self.listen_path:
            raise ConfigError("listen_path is required")
        if self.shutdown_grace_s < 0:
            raise ConfigError("shutdown_grace_s must be >= 0")
        if self.cost_model is not None:
            q, o, s = self.cost_model
            if q <= 0 or o < 0 or s < 0:
                raise ConfigError("cost_model needs q > 0 and o, s >= 0")
        if self.remote_url:
            try:
                remote.backend_from_url(self.remote_url)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "DaemonConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = dict(doc)
        try:
            for name in ("fast_capacity_bytes", "host_capacity_bytes", "disk_capacity_bytes"):
                if name in kw:
                    kw[name] = parse_size(kw[name])
            if "eviction_policy" in kw:
                kw["eviction_policy"] = EvictionPolicy.parse(kw["eviction_policy"])
            if "default_granularity" in kw and isinstance(kw["default_granularity"], str):
                kw["default_granularity"] = parse_granularity(kw["default_granularity"])
            if kw.get("cost_model") is not None:
                cm = kw["cost_model"]
                kw["cost_model"] = (float(cm["q"]), float(cm["o"]), float(cm["s"])) \
                    if isinstance(cm, dict) else tuple(float(x) for x in cm)
            for name in ("workspace_headroom_fraction", "shutdown_grace_s"):
                if name in kw:
                    kw[name] = float(kw[name])
            for name in ("eager_reclaim", "verify_checksums"):
                if name in kw and not isinstance(kw[name], bool):
                    raise ConfigError(f"{name} must be true or false")
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(**kw).validate()

    @classmethod
    def load(cls, path: str) -> "DaemonConfig":
        try:
            with open(path) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["eviction_policy"] = self.eviction_policy.value
        d["default_granularity"] = format_granularity(self.default_granularity)
        if self.cost_model is not None:
            d["cost_model"] = dict(zip("qos", self.cost_model))
        return d


class DaemonStorage:
    """Real byte movement behind :class:`ModelCache`."""

    def __init__(self, config: DaemonConfig, segments: SegmentManager):
        self.config = config
        self.segments = segments
        self.disk_dir = config.disk_cache_dir
        self.remote = remote.backend_from_url(config.remote_url) if config.remote_url else None
        self.counters = {"disk_reads": 0, "remote_fetches": 0}
        self._lock = threading.Lock()

    def _bump(self, name: str) -> None:
        with self._lock:
            self.counters[name] += 1

    def path(self, key: ModelKey) -> str:
        return os.path.join(self.disk_dir, key.filename)

    def locate(self, key):
        if os.path.isfile(self.path(key)):
            return CacheTier.LOCAL_DISK
        if self.remote is not None and remote.exists(self.remote, key):
            return CacheTier.REMOTE
        return None

    def describe(self, key) -> ModelManifest:
        try:
            with open(self.path(key), "rb") as f:
                manifest = deserialize_manifest(f)
        except FileNotFoundError:
            raise NotFound(f"{key} vanished from {self.disk_dir}") from None
        if manifest.key != key:
            raise CorruptArtifact(f"{key.filename} describes {manifest.key}")
        return manifest

    def fetch(self, key):
        self._bump("remote_fetches")
        return remote.stage(remote.RemoteRef(self.remote, key), self.disk_dir)

    def admit(self, key, staged) -> str:
        return remote.commit(staged, self.disk_dir, key)

    def discard(self, key, staged) -> None:
        try:
            os.unlink(staged)
        except FileNotFoundError:
            pass

    def read(self, key, manifest, staged=None):
        self._bump("disk_reads")
        with open(staged or self.path(key), "rb") as f:
            got, blob = read_model(f, verify=self.config.verify_checksums)
        if got.tensors != manifest.tensors:
            raise CorruptArtifact(f"{key}: artifact changed on disk while loading")
        return blob

    def publish(self, key, manifest, blob) -> list:
        seg = self.segments.create(key.name, max(manifest.blob_bytes, 1))
        try:
            if manifest.blob_bytes:
                self.segments.write(seg, 0, blob)
            return [self.segments.seal(seg)]
        except BaseException:
            self.segments.destroy(seg)
            raise

    def drop_fast(self, key, segments) -> None:
        for seg in segments:
            try:
                self.segments.destroy(seg)
            except MRMError:
                log.warning("segment %s for %s already gone", seg.token, key)

    def drop_disk(self, key) -> None:
        try:
            os.unlink(self.path(key))
        except FileNotFoundError:
            pass


class BindError(OSError):
    pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        daemon: Daemon = self.server.mrm  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        handles: set[int] = set()
        daemon._track(sock, True)
        try:
            while True:
                try:
                    frame = wire.read_frame(sock)
                except FrameTooLarge as exc:
                    # Cannot resynchronize after an oversized header.
                    daemon.count_error()
                    wire.send(sock, wire.ErrorMsg(ErrorCode.PROTOCOL_ERROR, str(exc)))
                    break
                if frame is None:
                    break
                try:
                    msg = wire.decode_payload(*frame)
                except ProtocolError as exc:
                    daemon.count_error()
                    reply = wire.ErrorMsg(ErrorCode.PROTOCOL_ERROR, f"{type(exc).__name__}: {exc}")
                else:
                    reply = daemon.dispatch(msg, handles)
                wire.send(sock, reply)
        except (ConnectionLost, OSError):
            pass
        finally:
            daemon._track(sock, False)
            daemon.release(handles)


class _UnixServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True
    allow_reuse_address = False


class _TCPServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True


class Daemon:
    def __init__(self, config: DaemonConfig):
        self.config = config.validate()
        self.segments = SegmentManager(config.shm_dir)
        self.storage = DaemonStorage(config, self.segments)
        self.cache = ModelCache(
            CacheConfig(
                fast_capacity_bytes=config.fast_capacity_bytes,
                host_capacity_bytes=config.host_capacity_bytes,
                disk_capacity_bytes=config.disk_capacity_bytes,
                policy=config.eviction_policy,
                eager_reclaim=config.eager_reclaim,
                workspace_headroom_fraction=config.workspace_headroom_fraction,
            ),
            self.storage,
        )
        self._handle_ids = itertools.count(1)
        self._handles: dict[int, tuple[ModelKey, int]] = {}
        self._lock = threading.Lock()
        self.counters = {"opens": 0, "closes": 0, "errors": 0}
        self._servers: list = []
        # model_id -> (manifest, wire tensor table); rebuilt if the manifest object changes.
        self._tensor_info: dict[int, tuple] = {}
        self._threads: list[threading.Thread] = []
        self._conns: set = set()
        self.draining = False
        self.stopped = threading.Event()

    # -- request handling ---------------------------------------------------

    def dispatch(self, msg, handles: set) -> wire.Message:
        try:
            if isinstance(msg, wire.OpenRequest):
                return self._open(msg, handles)
            if isinstance(msg, wire.CloseRequest):
                return self._close(msg, handles)
            if isinstance(msg, wire.StatsRequest):
                return self.stats_message()
            raise ProtocolError(f"unexpected {type(msg).__name__} from a client")
        except MRMError as exc:
            self.count_error()
            return wire.ErrorMsg(exc.code, f"{type(exc).__name__}: {exc}")
        except Exception as exc:  # keep serving whatever one request did
            log.exception("internal error handling %s", type(msg).__name__)
            self.count_error()
            return wire.ErrorMsg(ErrorCode.INTERNAL, f"{type(exc).__name__}: {exc}")

    def count_error(self) -> None:
        with self._lock:
            self.counters["errors"] += 1

    def _open(self, req: wire.OpenRequest, handles: set) -> wire.OpenResponse:
        if self.draining:
            raise MRMError("daemon is shutting down")
        try:
            key = ModelKey(req.namespace, req.name, req.version)
        except ValueError as exc:
            raise ProtocolError(str(exc)) from None
        t0 = time.perf_counter()
        res = self.cache.open(key, req.granularity)
        with self._lock:
            hid = next(self._handle_ids)
            self._handles[hid] = (key, res.model_id)
            self.counters["opens"] += 1
        handles.add(hid)
        objects = tuple(
            wire.HandleObject(o.name, res.segments[o.segment_index].token,
                              res.segments[o.segment_index].generation, o.offset, o.length)
            for o in res.layout
        )
        cached = self._tensor_info.get(res.model_id)
        if cached is not None and cached[0] is res.manifest:
            tensors = cached[1]
        else:
            tensors = tuple(wire.TensorInfo(t.name, t.dims, t.dtype, t.offset, t.nbytes)
                            for t in res.manifest.tensors)
            self._tensor_info[res.model_id] = (res.manifest, tensors)
        tm = res.timings
        total = time.perf_counter() - t0
        return wire.OpenResponse(
            model_id=res.model_id,
            handle_id=hid,
            footprint=res.footprint,
            objects=objects,
            manifest_digest=res.manifest.checksum or bytes(32),
            outcome=res.outcome.value,
            tensors=tensors,
            timings=(tm["fetch"], tm["disk_read"], tm["host_to_fast_copy"], tm["handle_export"], total),
        )

    def _close(self, req: wire.CloseRequest, handles: set) -> wire.CloseResponse:
        with self._lock:
            entry = self._handles.get(req.handle_id)
            if entry is None or entry[1] != req.model_id:
                raise NotOpen(f"handle {req.handle_id} for model {req.model_id} is not open")
            del self._handles[req.handle_id]
            self.counters["closes"] += 1
        handles.discard(req.handle_id)
        rc = self.cache.close(entry[0])
        return wire.CloseResponse(req.model_id, req.handle_id, rc)

    def release(self, handles: set) -> None:
        """A connection went away: close whatever it still held."""
        for hid in list(handles):
            with self._lock:
                entry = self._handles.pop(hid, None)
                if entry is not None:
                    self.counters["closes"] += 1
            if entry is not None:
                try:
                    self.cache.close(entry[0])
                except MRMError:
                    pass
        handles.clear()

    def open_handles(self) -> int:
        with self._lock:
            return len(self._handles)

    def stats_message(self) -> wire.StatsResponse:
        snap = self.cache.stats()
        tiers = tuple(
            wire.TierStats(name, t["hits"], t["misses"], t["evictions"], t["used_bytes"], t["capacity_bytes"])
            for name, t in snap["tiers"].items()
        )
        models = tuple(
            wire.ModelStats(m["key"].namespace, m["key"].name, m["key"].version,
                            m["refcount"], m["use_count"], tuple(m["residency"]))
            for m in snap["models"].values()
        )
        with self._lock:
            counters = (self.storage.counters["disk_reads"], self.storage.counters["remote_fetches"],
                        self.counters["opens"], self.counters["closes"], self.counters["errors"])
        return wire.StatsResponse(tiers, models, counters, self.config.cost_model)

    def stats_text(self) -> str:
        s = self.stats_message()
        lines = [f"tier {t.tier} hits={t.hits} misses={t.misses} evictions={t.evictions} "
                 f"used_bytes={t.used_bytes} capacity_bytes={t.capacity_bytes}" for t in s.tiers]
        lines += [f"model {m.namespace}/{m.name}@{m.version} refcount={m.refcount} "
                  f"use_count={m.use_count} residency={','.join(m.residency) or '-'}" for m in s.models]
        names = ("disk_reads", "remote_fetches", "opens", "closes", "errors")
        lines.append("counters " + " ".join(f"{n}={v}" for n, v in zip(names, s.counters)))
        return "\n".join(lines) + "\n"

    # -- lifecycle ----------------------------------------------------------

    def _track(self, sock, add: bool) -> None:
        with self._lock:
            (self._conns.add if add else self._conns.discard)(sock)

    def _bind_unix(self) -> _UnixServer:
        path = self.config.listen_path
        if os.path.exists(path):
            probe = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            try:
                probe.connect(path)
            except OSError:
                os.unlink(path)  # stale socket from a dead daemon
            else:
                raise BindError(f"{path}: another daemon is listening")
            finally:
                probe.close()
        try:
            server = _UnixServer(path, _Handler)
        except OSError as exc:
            raise BindError(f"{path}: {exc}") from None
        return server

    def start(self) -> "Daemon":
        removed = cleanup_orphans(self.config.shm_dir or default_shm_dir())
        if removed:
            log.info("removed %d orphaned segments", len(removed))
        os.makedirs(self.config.disk_cache_dir, exist_ok=True)
        servers = [self._bind_unix()]
        if self.config.listen_tcp:
            host, _, port = self.config.listen_tcp.rpartition(":")
            try:
                servers.append(_TCPServer((host or "127.0.0.1", int(port)), _Handler))
            except OSError as exc:
                servers[0].server_close()
                os.unlink(self.config.listen_path)
                raise BindError(f"{self.config.listen_tcp}: {exc}") from None
        for srv in servers:
            srv.mrm = self
            t = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.05},
                                 name=f"mrm-{type(srv).__name__}", daemon=True)
            t.start()
            self._threads.append(t)
        self._servers = servers
        log.info("listening on %s", self.config.listen_path)
        return self

    @property
    def tcp_address(self) -> Optional[tuple]:
        for srv in self._servers:
            if isinstance(srv, _TCPServer):
                return srv.server_address
        return None

    def stop(self, grace: Optional[float] = None) -> None:
        """Refuse new opens, let open handles drain for up to ``grace`` seconds, then tear down."""
        if self.stopped.is_set():
            return
        self.draining = True
        deadline = time.monotonic() + (self.config.shutdown_grace_s if grace is None else grace)
        while self.open_handles() and time.monotonic() < deadline:
            time.sleep(0.02)
        for srv in self._servers:
            srv.shutdown()
            srv.server_close()
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=2)
        self.cache.drop_all()
        self.segments.destroy_all()
        try:
            os.unlink(self.config.listen_path)
        except FileNotFoundError:
            pass
        self.stopped.set()
        log.info("stopped")

    def __enter__(self) -> "Daemon":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop(grace=0)

    def serve_until_signal(self) -> int:
        stop = threading.Event()
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
        signal.signal(signal.SIGINT, lambda *_: stop.set())
        if hasattr(signal, "SIGUSR1"):
            signal.signal(signal.SIGUSR1, lambda *_: sys.stderr.write(self.stats_text()))
        while not stop.wait(0.2):
            pass
        self.stop()
        return EXIT_OK


# -- command line -------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrmd", description="Model resource manager daemon.")
    p.add_argument("--config", help="JSON config file (same fields as the flags)")
    p.add_argument("--version", action="version", version=f"mrmd {__version__}")
    p.add_argument("--check-config", action="store_true", help="validate the config and exit")
    p.add_argument("--listen-path")
    p.add_argument("--listen-tcp", help="HOST:PORT for an additional TCP listener")
    p.add_argument("--fast-capacity", dest="fast_capacity_bytes")
    p.add_argument("--host-capacity", dest="host_capacity_bytes")
    p.add_argument("--disk-cache-dir")
    p.add_argument("--disk-capacity", dest="disk_capacity_bytes")
    p.add_argument("--remote-url")
    p.add_argument("--eviction-policy", choices=["lru", "lcu"])
    p.add_argument("--eager-reclaim", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--workspace-headroom", dest="workspace_headroom_fraction", type=float)
    p.add_argument("--default-granularity")
    p.add_argument("--shm-dir")
    p.add_argument("--verify-checksums", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--shutdown-grace", dest="shutdown_grace_s", type=float)
    p.add_argument("--cost-model", help="q,o,s published to clients (bytes/s, s, s)")
    p.add_argument("--log-level", default="INFO")
    return p


_FLAG_FIELDS = ("listen_path", "listen_tcp", "fast_capacity_bytes", "host_capacity_bytes",
                "disk_cache_dir", "disk_capacity_bytes", "remote_url", "eviction_policy",
                "eager_reclaim", "workspace_headroom_fraction", "default_granularity",
                "shm_dir", "verify_checksums", "shutdown_grace_s", "cost_model")


def config_from_args(args: argparse.Namespace) -> DaemonConfig:
    doc: dict = {}
    if args.config:
        try:
            with open(args.config) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    for name in _FLAG_FIELDS:
        value = getattr(args, name)
        if value is not None:
            if name == "cost_model":
                value = [float(x) for x in value.split(",")]
            doc[name] = value
    return DaemonConfig.from_dict(doc)


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = config_from_args(args)
    except (ConfigError, ValueError) as exc:
        print(f"mrmd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.check_config:
        print(json.dumps(config.to_dict(), indent=2))
        return EXIT_OK
    daemon = Daemon(config)
    try:
        daemon.start()
    except BindError as exc:
        print(f"mrmd: bind error: {exc}", file=sys.stderr)
        return EXIT_BIND
    return daemon.serve_until_signal()


if __name__ == "__main__":
    sys.exit(main())

"""Remote model store: a plain directory or an HTTP server keyed by canonical filename."""

from __future__ import annotations

import os
import shutil
import tempfile
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from typing import Union

from .errors import ChecksumMismatch, CorruptArtifact, RemoteNotFound, TransportError
from .format import ModelKey, ModelManifest, deserialize_manifest


@dataclass(frozen=True)
class DirBackend:
    path: str


@dataclass(frozen=True)
class HttpBackend:
    base_url: str

    def url_for(self, key: ModelKey) -> str:
        return self.base_url.rstrip("/") + "/" + urllib.parse.quote(key.filename)


Backend = Union[DirBackend, HttpBackend]


@dataclass(frozen=True)
class RemoteRef:
    backend: Backend
    key: ModelKey


def backend_from_url(url: str) -> Backend:
    """``http(s)://...`` -> HTTP, ``file://...`` or a bare path -> directory."""
    parsed = urllib.parse.urlparse(url)
    if parsed.scheme in ("http", "https"):
        return HttpBackend(url)
    if parsed.scheme == "file":
        return DirBackend(urllib.request.url2pathname(parsed.path))
    if parsed.scheme:
        raise ValueError(f"unsupported remote store URL {url!r}")
    return DirBackend(url)


def exists(backend: Backend, key: ModelKey, timeout: float = 10.0) -> bool:
    if isinstance(backend, DirBackend):
        return os.path.isfile(os.path.join(backend.path, key.filename))
    req = urllib.request.Request(backend.url_for(key), method="HEAD")
    try:
        with urllib.request.urlopen(req, timeout=timeout):
            return True
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            return False
        raise TransportError(f"HEAD {req.full_url}: HTTP {exc.code}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise TransportError(f"HEAD {req.full_url}: {exc}") from None


def _verified(path: str) -> ModelManifest:
    with open(path, "rb") as f:
        return deserialize_manifest(f, verify=True)


def _download(backend: Backend, key: ModelKey, out, timeout: float) -> None:
    if isinstance(backend, DirBackend):
        src = os.path.join(backend.path, key.filename)
        try:
            with open(src, "rb") as f:
                shutil.copyfileobj(f, out, 1 << 22)
        except FileNotFoundError:
            raise RemoteNotFound(f"{key} not in {backend.path}") from None
        return
    url = backend.url_for(key)
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            shutil.copyfileobj(resp, out, 1 << 22)
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            raise RemoteNotFound(f"GET {url}: 404") from None
        raise TransportError(f"GET {url}: HTTP {exc.code}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise TransportError(f"GET {url}: {exc}") from None


def stage(ref: RemoteRef, dest_dir: str, timeout: float = 60.0) -> tuple[ModelManifest, str]:
    """Download to a temporary name in ``dest_dir`` and verify it; returns (manifest, temp path).

    The temp file is removed on any failure.
    """
    fd, tmp = tempfile.mkstemp(prefix=".fetch-", suffix=".part", dir=dest_dir)
    try:
        with os.fdopen(fd, "wb") as out:
            _download(ref.backend, ref.key, out, timeout)
        try:
            manifest = _verified(tmp)
        except ChecksumMismatch:
            raise
        except CorruptArtifact as exc:
            raise ChecksumMismatch(f"{ref.key}: downloaded artifact is unreadable: {exc}") from exc
        if manifest.key != ref.key:
            raise ChecksumMismatch(f"artifact at {ref.key.filename} describes {manifest.key}")
        return manifest, tmp
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def commit(tmp: str, dest_dir: str, key: ModelKey) -> str:
    final = os.path.join(dest_dir, key.filename)
    os.replace(tmp, final)
    return final


def fetch(ref: RemoteRef, dest_dir: str, timeout: float = 60.0) -> str:
    """Make ``dest_dir/<canonical name>`` a verified copy of the remote artifact."""
    final = os.path.join(dest_dir, ref.key.filename)
    if os.path.isfile(final):
        try:
            _verified(final)
            return final
        except CorruptArtifact:
            pass
    _, tmp = stage(ref, dest_dir, timeout)
    return commit(tmp, dest_dir, ref.key)

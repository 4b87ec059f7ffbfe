import os
import shutil
import tempfile

import numpy as np
import pytest

from mrm.daemon import Daemon, DaemonConfig
from mrm.format import DType, ModelKey, ModelManifest, serialize_model
from mrm.segment import default_shm_dir


@pytest.fixture
def shm_dir():
    """An isolated directory on the shared-memory filesystem."""
    d = tempfile.mkdtemp(prefix="mrmtest-", dir=default_shm_dir())
    yield d
    shutil.rmtree(d, ignore_errors=True)


def write_artifact(directory, key, shapes, workspace=0, seed=0):
    """Write a small artifact with seeded F64 contents; returns (path, manifest, blocks)."""
    rng = np.random.default_rng(seed)
    tensors = [(f"t{i}", dims, DType.F64) for i, dims in enumerate(shapes)]
    manifest = ModelManifest.build(key, tensors, workspace)
    blocks = [rng.standard_normal(int(np.prod(dims))).tobytes() for dims in shapes]
    path = os.path.join(directory, key.filename)
    with open(path, "wb") as f:
        f.write(serialize_model(manifest, blocks))
    return path, manifest, blocks


@pytest.fixture
def model_dir(tmp_path):
    d = tmp_path / "models"
    d.mkdir()
    return str(d)


@pytest.fixture
def make_daemon(tmp_path, shm_dir, model_dir):
    started = []

    def factory(**overrides):
        doc = dict(
            listen_path=str(tmp_path / f"mrm{len(started)}.sock"),
            disk_cache_dir=model_dir,
            fast_capacity_bytes=10**7,
            host_capacity_bytes=10**7,
            disk_capacity_bytes=10**8,
            shm_dir=shm_dir,
            shutdown_grace_s=0.0,
        )
        doc.update(overrides)
        d = Daemon(DaemonConfig.from_dict(doc)).start()
        started.append(d)
        return d

    yield factory
    for d in started:
        d.stop(grace=0)


KEY = ModelKey("test", "m", "1")


# -- acceptance verdict lines -------------------------------------------------

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    def record(n: int, ok: bool, detail: str) -> None:
        _VERDICTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_VERDICTS[n])
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])

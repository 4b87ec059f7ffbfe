import csv
import io
import json
import subprocess
import sys

import pytest

from mrm.bench.cli import LATENCY_HEADER, main
from mrm.bench.live import GRID_HEADER


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


def test_simulate_csv(capsys, tmp_path):
    matrix = tmp_path / "m.dat"
    code, out = run(capsys, "simulate", "--fractions", "0.1,0.5,1.0", "--concurrency", "1-4",
                    "--requests", "50", "--matrix", str(matrix))
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 12
    assert tuple(rows[0]) == GRID_HEADER
    assert float(rows[0]["geomean_p95_speedup"]) > 1
    assert matrix.read_text().count("\n\n") >= 2


def test_simulate_jsonl(capsys):
    code, out = run(capsys, "simulate", "--fractions", "0.2", "--concurrency", "2", "--out", "jsonl")
    assert json.loads(out)["concurrency"] == 2


def test_oracle_check(capsys):
    code, out = run(capsys, "oracle-check", "--traces", "10", "--seed", "3")
    assert code == 0 and "divergences=0" in out


@pytest.fixture(scope="module")
def tiny_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    assert main(["gen", "--catalog", "tiny", "--dir", str(d)]) == 0
    return str(d)


def test_latency(capsys, tiny_dir, shm_dir):
    code, out = run(capsys, "latency", "--dir", tiny_dir, "--models", "AlexNet,SqueezeNet-v1.1", "--reps", "2")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and tuple(rows[0]) == LATENCY_HEADER
    assert {r["mode"] for r in rows} == {"cold", "warm", "nodaemon"}
    for r in rows:
        phases = sum(float(r[k]) for k in ("load_disk", "init_copy", "share_overhead", "compute"))
        assert phases == pytest.approx(float(r["end_to_end"]), rel=0.05)
        if r["mode"] == "warm":
            assert float(r["load_disk"]) == 0 and r["outcome"] == "FastHit"
        if r["mode"] == "nodaemon":
            assert float(r["share_overhead"]) == 0


def test_grid_small(capsys, tiny_dir):
    code, out = run(capsys, "grid", "--dir", tiny_dir, "--fractions", "0.1,1.0", "--concurrency", "1,2",
                    "--requests", "10", "--warmup", "2")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 4
    assert all(r["status"] == "ok" for r in rows)


def test_unknown_model(tiny_dir):
    with pytest.raises(SystemExit):
        main(["latency", "--dir", tiny_dir, "--models", "NoSuchNet"])


def test_console_scripts():
    out = subprocess.run([sys.executable, "-m", "mrm.bench.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "0.1.0" in out.stdout

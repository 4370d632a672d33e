import json
import os
import subprocess
import sys

import pytest

from taurusdb.bench import cli, harness


def bench(*args, check=None):
    p = subprocess.run([sys.executable, "-m", "taurusdb.bench", *args],
                       capture_output=True, text=True, timeout=300)
    if check is not None:
        assert p.returncode == check, p.stderr
    return p


def test_run_then_verify(workdir):
    p = bench("run", "--dir", workdir, "--txns", "400", "--rows", "1000", "--threads", "4",
              "--logs", "2", "--no-fsync", check=0)
    report = json.loads(p.stdout)
    assert report["committed"] == 400 and report["logs"] == 2
    p = bench("verify", "--dir", workdir, check=0)
    assert json.loads(p.stdout)["pass"]


def test_truncate_then_recover(workdir):
    cli.main(["run", "--dir", workdir, "--txns", "300", "--rows", "500", "--threads", "2",
              "--logs", "2", "--no-fsync", "--logging", "taurus-data", "--cc", "occ"])
    size = os.path.getsize(harness.log_path(workdir, 1))
    out = os.path.join(workdir, "crash.json")
    assert cli.main(["--out", out, "crash", "--dir", workdir, "--mode", "truncate",
                     "--log", "1", "--offset", str(size // 2)]) == 0
    with open(out) as f:
        assert json.load(f)["truncated"]
    p = bench("recover", "--dir", workdir, "--serial", check=0)
    report = json.loads(p.stdout)
    assert report["logs"][1]["elv"] <= size // 2


def test_kill_now_then_verify(workdir):
    bench("crash", "--dir", workdir, "--mode", "kill-now", "--after", "0.3", "--rows", "1000",
          "--threads", "4", "--logs", "2", check=0)
    p = bench("verify", "--dir", workdir, "--workers", "3", check=0)
    assert json.loads(p.stdout)["checks"]["acknowledged_recovered"]


def test_verify_reports_lost_acknowledgement(workdir):
    cli.main(["run", "--dir", workdir, "--txns", "50", "--rows", "100", "--threads", "1",
              "--logs", "1", "--no-fsync"])
    with open(os.path.join(workdir, harness.LEDGER), "a") as f:
        f.write(json.dumps({"txn": 1, "log": 0, "end": 10**9, "lv": [10**9], "plv": [0]}) + "\n")
    p = bench("verify", "--dir", workdir, check=1)
    assert "not recovered" in json.loads(p.stdout)["failure"]


@pytest.mark.parametrize("args", [
    ["run", "--dir", "{d}", "--txns", "1", "--logs", "0"],
    ["run", "--dir", "{d}", "--txns", "1", "--theta", "-2"],
    ["recover", "--dir", "{d}"],
])
def test_configuration_errors_exit_2(workdir, args):
    p = bench(*[a.format(d=workdir) for a in args])
    assert p.returncode == 2 and "bench:" in p.stderr


def test_sweep_rho(workdir):
    p = bench("sweep-rho", "--dir", workdir, "--rhos", "500,none", "--txns", "300",
              "--rows", "1000", "--threads", "2", "--logs", "2", "--no-fsync", check=0)
    report = json.loads(p.stdout)
    assert [r["rho"] for r in report["rows"]] == [500, None]
    assert report["rows"][1]["anchors"] == 0


def test_interior_minimum():
    assert harness.interior_minimum([3, 1, 2]) == 1
    assert harness.interior_minimum([1, 2, 3]) is None
    assert harness.interior_minimum([1, 1]) is None

"""``bench`` command line: run, crash, recover, verify and sweep-rho.

Reports are JSON on stdout (or ``--out``).  Exit status 0 means success;
``verify`` exits 1 when any check fails and every command exits 2 on bad
arguments or configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys

from ..engine import CC_MODES, LOGGING_MODES, EngineConfig
from ..errors import ManifestMismatch, TaurusError
from . import harness
from .workload import WORKLOADS, WorkloadSpec


def _none_or_int(text: str):
    return None if text.lower() in ("none", "inf", "off") else int(float(text))


def _engine_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workload", choices=WORKLOADS, default="ycsb")
    p.add_argument("--threads", type=int, default=8)
    p.add_argument("--logs", type=int, default=4)
    p.add_argument("--workers-per-log", type=int, default=None,
                   help="defaults to ceil(threads / logs)")
    p.add_argument("--logging", choices=LOGGING_MODES, default="taurus-command")
    p.add_argument("--cc", choices=CC_MODES, default="2pl")
    p.add_argument("--theta", type=float, default=0.6)
    p.add_argument("--txn-size", type=int, default=2)
    p.add_argument("--read-fraction", type=float, default=0.5)
    p.add_argument("--rows", type=int, default=100_000)
    p.add_argument("--row-width", type=int, default=1000, help="YCSB row width in bytes")
    p.add_argument("--warehouses", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho", type=_none_or_int, default=1 << 16,
                   help="anchor spacing in log bytes; 'none' disables anchors")
    p.add_argument("--delta", type=_none_or_int, default=4 << 20,
                   help="lock-table eviction distance in log bytes; 'none' disables eviction")
    p.add_argument("--no-fsync", action="store_true")
    p.add_argument("--dir", required=True)


def _spec(a) -> WorkloadSpec:
    return WorkloadSpec(kind=a.workload, rows=a.rows, theta=a.theta, txn_size=a.txn_size,
                        read_fraction=a.read_fraction, row_width=a.row_width,
                        warehouses=a.warehouses, seed=a.seed)


def _config(a) -> EngineConfig:
    wpl, threads = harness.geometry(a.logs, a.threads, a.workers_per_log)
    return EngineConfig(logs=a.logs, workers_per_log=wpl, threads=threads, logging=a.logging,
                        cc=a.cc, rho=a.rho, delta=a.delta, fsync=not a.no_fsync)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description=__doc__.splitlines()[0])
    parser.add_argument("--out", help="write the JSON report here instead of stdout")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a workload and report throughput")
    _engine_args(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--duration", type=float)
    g.add_argument("--txns", type=int)

    p = sub.add_parser("crash", help="kill a running engine or tear a log file")
    _engine_args(p)
    p.add_argument("--mode", choices=("kill-now", "truncate"), default="kill-now")
    p.add_argument("--after", type=float, default=0.5, help="kill-now: seconds of load before SIGKILL")
    p.add_argument("--log", type=int, help="truncate: log id (random if omitted)")
    p.add_argument("--offset", type=int, help="truncate: byte offset (random if omitted)")

    p = sub.add_parser("recover", help="rebuild the database from a log directory")
    p.add_argument("--dir", required=True)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--serial", action="store_true")
    p.add_argument("--timeout", type=float, default=None)

    p = sub.add_parser("verify", help="check recovery against the independent oracle")
    p.add_argument("--dir", required=True)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--serial", action="store_true")
    p.add_argument("--timeout", type=float, default=60.0)

    p = sub.add_parser("sweep-rho", help="metadata bytes per record across anchor spacings")
    _engine_args(p)
    p.add_argument("--rhos", default="1e3,1e4,1e5,1e6,1e7,1e8,1e9",
                   help="comma-separated anchor spacings")
    p.add_argument("--txns", type=int, default=20_000)
    return parser


def _emit(report, out) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=str)
    if out:
        with open(out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


def _crash(a) -> dict:
    if a.mode == "kill-now":
        code = harness.kill_now(_spec(a), _config(a), a.dir, a.after)
        return {"mode": "kill-now", "dir": a.dir, "exitcode": code}
    m = harness.read_manifest(a.dir)
    rng = random.Random(a.seed)
    log_id = a.log if a.log is not None else rng.randrange(m["streams"])
    size = os.path.getsize(harness.log_path(a.dir, log_id))
    offset = a.offset if a.offset is not None else rng.randint(0, size)
    cut = harness.truncate(a.dir, log_id, offset)
    return {"mode": "truncate", "dir": a.dir, "log": log_id, "offset": offset,
            "size_before": size, "truncated": cut}


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if a.command == "run":
            if a.duration is None and a.txns is None:
                a.duration = 10.0
            report = harness.run(_spec(a), _config(a), a.dir, duration=a.duration, txns=a.txns)
        elif a.command == "crash":
            report = _crash(a)
        elif a.command == "recover":
            _, report = harness.recover_dir(a.dir, workers=a.workers, serial=a.serial, timeout=a.timeout)
        elif a.command == "verify":
            report = harness.verify(a.dir, workers=a.workers, serial=a.serial, timeout=a.timeout)
            _emit(report, a.out)
            return 0 if report["pass"] else 1
        else:
            rhos = [_none_or_int(x) for x in a.rhos.split(",")]
            rows = harness.sweep_rho(_spec(a), _config(a), rhos, a.dir, txns=a.txns)
            values = [r["metadata_per_record"] for r in rows]
            k = harness.interior_minimum(values)
            report = {"rows": rows, "interior_minimum": k is not None,
                      "best_rho": rows[min(range(len(rows)), key=values.__getitem__)]["rho"],
                      "best_metadata_per_record": min(values)}
    except (ValueError, ManifestMismatch, FileNotFoundError) as e:
        print(f"bench: {e}", file=sys.stderr)
        return 2
    except TaurusError as e:
        print(f"bench: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    _emit(report, a.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())

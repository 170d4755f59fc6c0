"""Command line entry point.

Exit codes: 0 success (all green), 1 build/test failures or failed
comparison, 2 usage, configuration or comparator error, 3 data directory
locked by another daemon.
"""
from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from datetime import datetime
from pathlib import Path

import yaml

from . import compare as cmp
from .daemon import Config, DataDirLock, LockHeld, Worker, run_daemon
from .executor import LibraryCache, run_plan
from .manifest import ManifestError, generate_test_plan, load_manifest
from .poller import DEFAULT_PROBE_TIMEOUT_S, ProbeError, poll_cycle, probe_revision
from .queue import JobQueue, QueueError
from .store import DataDir, load_results, matrix_from_results, save_result, write_reports

EXIT_OK, EXIT_FAILURES, EXIT_ERROR, EXIT_LOCKED = 0, 1, 2, 3

log = logging.getLogger("geoforge")


class UsageError(Exception):
    pass


def load_config(args) -> Config:
    """Defaults < config file < GEOFORGE_DATA_DIR < command-line flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            data = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {args.config} must be a mapping")
        unknown = set(data) - set(Config.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        base = Path(args.config).resolve().parent
        for key in ("manifest_path", "data_dir", "report_dir"):
            if data.get(key) is not None:
                data[key] = base / data[key]
        values.update(data)
    if os.environ.get("GEOFORGE_DATA_DIR"):
        values["data_dir"] = os.environ["GEOFORGE_DATA_DIR"]
    for flag, key in (("manifest", "manifest_path"), ("data_dir", "data_dir"),
                      ("report_dir", "report_dir"), ("parallelism", "parallelism"),
                      ("poll_interval", "poll_interval_s")):
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    try:
        return Config(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _manifest(config: Config):
    return load_manifest(config.manifest_path)


def cmd_poll(args) -> int:
    config = load_config(args)
    manifest = _manifest(config)
    data = DataDir(config.data_dir).create()
    queue = JobQueue(data.queue_path)
    ids = poll_cycle(manifest, data.poll_state_path, queue, timeout=config.probe_timeout_s)
    print(f"{len(ids)} job{'s' if len(ids) != 1 else ''} enqueued")
    for jid in ids:
        print(jid)
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args)
    manifest = _manifest(config)
    code = manifest.code(args.code)
    revision = args.revision
    if revision is None:
        try:
            revision = probe_revision(code, cwd=manifest.base_dir, timeout=DEFAULT_PROBE_TIMEOUT_S)
        except ProbeError as exc:
            raise UsageError(f"{exc}; pass --revision explicitly") from None
    data = DataDir(config.data_dir).create()
    plan = generate_test_plan(manifest, code.id, revision)
    cells = run_plan(plan, LibraryCache(data.libcache), config.parallelism, work_root=data.work)
    for cell in cells:
        save_result(data.results, cell)
    matrix = matrix_from_results(load_results(data.results), manifest=manifest,
                                 report_dir=config.reports)
    dashboard, _ = write_reports(matrix, config.reports)
    for cell in cells:
        state = "ok" if cell.green else "FAILED"
        print(f"{cell.code_id}  {cell.platform_id}  build {cell.build.status.value}  "
              f"test {cell.test.status.value}  {state}")
    print(f"dashboard: {dashboard}")
    return EXIT_OK if all(c.green for c in cells) else EXIT_FAILURES


def cmd_daemon(args) -> int:
    config = load_config(args)
    stop = threading.Event()

    def handle(signum, frame):
        log.info("signal %d: finishing the current job, then exiting", signum)
        stop.set()

    signal.signal(signal.SIGTERM, handle)
    signal.signal(signal.SIGINT, handle)
    try:
        run_daemon(config, stop, once=args.once)
    except LockHeld as exc:
        print(f"geoforge: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    return EXIT_OK


def cmd_compare(args) -> int:
    if args.tol is not None and args.threshold is not None:
        raise UsageError("give either --tol or --threshold, not both")
    value = args.tol if args.tol is not None else args.threshold
    try:
        golden = cmp.parse_timeseries(args.golden)
        candidate = cmp.parse_timeseries(args.candidate)
        result = cmp.compare_signals(golden, candidate, args.metric, value)
        if args.profile:
            cmp.write_profile(args.profile, golden, candidate)
    except (cmp.CompareError, ValueError, OSError) as exc:
        print(f"geoforge compare: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    flags = []
    if result.fallback:
        flags.append("fallback")
    if result.length_mismatch:
        flags.append("length-mismatch")
    extra = f" [{', '.join(flags)}]" if flags else ""
    print(f"{result.metric}: statistic {result.statistic!r} threshold {result.threshold!r} "
          f"-> {'PASS' if result.passed else 'FAIL'}{extra}")
    return EXIT_OK if result.passed else EXIT_FAILURES


def cmd_report(args) -> int:
    config = load_config(args)
    results_dir = Path(args.results) if args.results else DataDir(config.data_dir).results
    out = Path(args.out) if args.out else config.reports
    manifest = None
    if config.manifest_path.exists():
        manifest = _manifest(config)
    matrix = matrix_from_results(load_results(results_dir), manifest=manifest, report_dir=out)
    dashboard, summary = write_reports(matrix, out)
    print(f"wrote {dashboard} and {summary}")
    return EXIT_OK


def cmd_queue(args) -> int:
    config = load_config(args)
    data = DataDir(config.data_dir)
    if args.queue_cmd == "ls":
        if not data.queue_path.exists():
            print("queue is empty")
            return EXIT_OK
        queue = JobQueue(data.queue_path)
        records = queue.records()
        if not records:
            print("queue is empty")
        for r in records:
            created = datetime.fromtimestamp(r.job.created_at).isoformat(timespec="seconds")
            print(f"{r.job.id:>5}  {r.status.value:<8} attempts={r.attempts}  "
                  f"{r.job.code_id}@{r.job.revision}  {created}")
        return EXIT_OK
    with DataDirLock(data.lock_path):
        dropped = JobQueue(data.queue_path).compact()
    print(f"compacted: dropped {dropped} finished job(s)")
    return EXIT_OK


def cmd_cache(args) -> int:
    config = load_config(args)
    cache = LibraryCache(DataDir(config.data_dir).libcache)
    if args.cache_cmd == "ls":
        entries = cache.entries()
        if not entries:
            print("cache is empty")
        for e in entries:
            built = datetime.fromtimestamp(e.built_at).isoformat(timespec="seconds")
            print(f"{e.library_id}  {e.version}  {e.platform_id}  {built}  {e.install_dir}")
        return EXIT_OK
    n = cache.invalidate(args.library, args.platform)
    print(f"invalidated {n} cache entr{'y' if n == 1 else 'ies'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS so a flag given before the subcommand is not reset by the subparser
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--manifest", help="manifest file (default manifest.yaml)")
    common.add_argument("--data-dir", help="data directory (queue, cache, work, results)")
    common.add_argument("--report-dir", help="where dashboard.html and summary.txt go")
    common.add_argument("--parallelism", type=int, help="concurrent platform units (default 4)")
    common.add_argument("--poll-interval", type=int, help="seconds between polls (default 300)")
    common.add_argument("-v", "--verbose", action="count")

    parser = argparse.ArgumentParser(prog="geoforge", description="Build, test and verify simulation codes across platforms.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("poll", parents=[common], help="probe repositories once and enqueue changes") \
        .set_defaults(func=cmd_poll)

    p = sub.add_parser("run", parents=[common], help="build and test one code now, bypassing the queue")
    p.add_argument("code")
    p.add_argument("--revision", help="revision label (default: run the revision probe)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("daemon", parents=[common], help="poll, execute queued jobs, render reports")
    p.add_argument("--once", action="store_true", help="one poll-and-drain cycle, then exit")
    p.set_defaults(func=cmd_daemon)

    p = sub.add_parser("compare", parents=[common], help="compare a candidate output with a golden file")
    p.add_argument("golden")
    p.add_argument("candidate")
    p.add_argument("--metric", required=True, choices=cmp.METRICS)
    p.add_argument("--tol", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--profile", help="write time/abs_diff/rel_diff TSV here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", parents=[common], help="render dashboard.html and summary.txt")
    p.add_argument("--results", help="results directory (default <data>/results)")
    p.add_argument("--out", help="output directory (default <data>/report)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("queue", parents=[common], help="inspect or compact the job queue")
    p.add_argument("queue_cmd", choices=("ls", "compact"))
    p.set_defaults(func=cmd_queue)

    p = sub.add_parser("cache", parents=[common], help="inspect or invalidate the library cache")
    p.add_argument("cache_cmd", choices=("ls", "invalidate"))
    p.add_argument("--library")
    p.add_argument("--platform")
    p.set_defaults(func=cmd_cache)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ManifestError, QueueError) as exc:
        print(f"geoforge: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except LockHeld as exc:
        print(f"geoforge: {exc}", file=sys.stderr)
        return EXIT_LOCKED


if __name__ == "__main__":
    sys.exit(main())

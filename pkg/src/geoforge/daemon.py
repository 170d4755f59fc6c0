"""The poll -> queue -> execute -> report loop."""
from __future__ import annotations

import fcntl
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .executor import LibraryCache, run_plan
from .manifest import Manifest, ManifestError, generate_test_plan, load_manifest
from .poller import DEFAULT_POLL_INTERVAL_S, DEFAULT_PROBE_TIMEOUT_S, poll_cycle
from .queue import JobQueue, JobRecord, JobStatus
from .store import DataDir, load_results, matrix_from_results, save_result, write_reports

log = logging.getLogger(__name__)


class LockHeld(RuntimeError):
    pass


@dataclass
class Config:
    manifest_path: Path = Path("manifest.yaml")
    data_dir: Path = Path("geoforge-data")
    poll_interval_s: int = DEFAULT_POLL_INTERVAL_S
    parallelism: int = 4
    report_dir: Optional[Path] = None
    probe_timeout_s: float = DEFAULT_PROBE_TIMEOUT_S

    def __post_init__(self):
        self.manifest_path = Path(self.manifest_path).absolute()
        self.data_dir = Path(self.data_dir).absolute()
        if self.report_dir is not None:
            self.report_dir = Path(self.report_dir).absolute()
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.poll_interval_s <= 0:
            raise ValueError("poll_interval_s must be positive")

    @property
    def reports(self) -> Path:
        return self.report_dir if self.report_dir is not None else self.data_dir / "report"


class DataDirLock:
    """Exclusive, non-blocking lock on a data directory."""

    def __init__(self, path):
        self.path = Path(path)
        self.fd = None

    def acquire(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(fd)
            raise LockHeld(f"{self.path} is held by another daemon") from None
        os.ftruncate(fd, 0)
        os.write(fd, f"{os.getpid()}\n".encode())
        self.fd = fd
        return self

    def release(self):
        if self.fd is not None:
            fcntl.flock(self.fd, fcntl.LOCK_UN)
            os.close(self.fd)
            self.fd = None

    def __enter__(self):
        return self.acquire()

    def __exit__(self, *exc):
        self.release()


@dataclass
class Worker:
    """Executes claimed jobs and keeps the dashboard current."""

    config: Config
    manifest: Manifest
    data: DataDir
    queue: JobQueue
    cache: LibraryCache = None
    running: set = field(default_factory=set)
    _guard: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self):
        if self.cache is None:
            self.cache = LibraryCache(self.data.libcache)

    def render(self):
        with self._guard:
            running = sorted(self.running)
        busy = set(running)
        results = [r for r in load_results(self.data.results)
                   if (r.code_id, r.platform_id) not in busy]
        matrix = matrix_from_results(results, running, manifest=self.manifest,
                                     report_dir=self.config.reports)
        write_reports(matrix, self.config.reports)

    def _started(self, unit):
        with self._guard:
            self.running.add((unit.code_id, unit.platform_id))
        self.render()

    def _finished(self, cell):
        save_result(self.data.results, cell)
        with self._guard:
            self.running.discard((cell.code_id, cell.platform_id))

    def execute(self, record: JobRecord):
        job = record.job
        log.info("job %d: %s at %s (attempt %d)", job.id, job.code_id, job.revision,
                 record.attempts)
        try:
            plan = generate_test_plan(self.manifest, job.code_id, job.revision)
        except ManifestError as exc:
            log.error("job %d: %s", job.id, exc)
            self.queue.acknowledge(job.id, JobStatus.FAILED)
            return
        try:
            cells = run_plan(plan, self.cache, self.config.parallelism, work_root=self.data.work,
                             on_start=self._started, on_finish=self._finished)
        except Exception:
            log.exception("job %d: execution aborted", job.id)
            self.queue.release(job.id)
            return
        finally:
            with self._guard:
                self.running.clear()
            self.render()
        if any(c.build.infrastructure_error for c in cells):
            after = self.queue.release(job.id)
            log.warning("job %d: infrastructure error, now %s", job.id, after.status.value)
            return
        self.queue.acknowledge(job.id, JobStatus.DONE)
        green = sum(c.green for c in cells)
        log.info("job %d done: %d/%d cells green", job.id, green, len(cells))

    def drain(self, stop: Optional[threading.Event] = None) -> int:
        done = 0
        while stop is None or not stop.is_set():
            record = self.queue.claim()
            if record is None:
                break
            self.execute(record)
            done += 1
        return done


def run_daemon(config: Config, stop: Optional[threading.Event] = None, *, once: bool = False):
    """Run until ``stop`` is set.  Raises :class:`LockHeld` if another daemon owns the data dir.

    The job in flight when ``stop`` is set runs to completion.
    """
    stop = stop or threading.Event()
    data = DataDir(config.data_dir).create()
    with DataDirLock(data.lock_path):
        manifest = load_manifest(config.manifest_path)
        queue = JobQueue(data.queue_path)
        orphans = queue.recover()
        if orphans:
            log.info("recovered %d orphaned job(s)", orphans)
        worker = Worker(config, manifest, data, queue)
        worker.render()
        # orphans run before any new polling
        worker.drain(stop)
        while not stop.is_set():
            try:
                worker.manifest = load_manifest(config.manifest_path)
            except ManifestError as exc:
                log.error("keeping previous manifest: %s", exc)
            ids = poll_cycle(worker.manifest, data.poll_state_path, queue,
                             timeout=config.probe_timeout_s)
            if ids:
                log.info("enqueued job(s) %s", ", ".join(map(str, ids)))
            worker.drain(stop)
            if once:
                break
            stop.wait(config.poll_interval_s)

"""Durable FIFO job queue backed by an append-only JSON-lines log.

Every mutation appends one record (``enqueue``, ``claim``, ``ack``,
``release``, ``recover``) and fsyncs before returning, so a job that
:meth:`JobQueue.enqueue` returned an id for survives a crash.  Opening the
queue replays the log.  A torn final line left by a crash mid-append is
discarded, since the call that wrote it never returned.  Damage anywhere else
raises :class:`QueueCorruptError`.

A Claimed job whose worker died stays Claimed until :meth:`JobQueue.recover`
is called at the next process start.
"""
from __future__ import annotations

import fcntl
import json
import os
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional

MAX_ATTEMPTS = 3


class JobKind(str, Enum):
    TEST_RUN = "TestRun"


class JobStatus(str, Enum):
    PENDING = "Pending"
    CLAIMED = "Claimed"
    DONE = "Done"
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self in (JobStatus.DONE, JobStatus.FAILED)


class QueueError(Exception):
    pass


class QueueStorageError(QueueError):
    pass


class QueueCorruptError(QueueError):
    def __init__(self, path, lineno: int, record: str, reason: str):
        self.lineno = lineno
        self.record = record
        super().__init__(f"{path}:{lineno}: {reason}: {record!r}")


class UnknownJobError(QueueError, KeyError):
    def __str__(self):
        return f"unknown job id {self.args[0]}"


class JobStateError(QueueError):
    pass


@dataclass(frozen=True)
class Job:
    id: int
    kind: JobKind
    payload: dict
    created_at: float

    @property
    def code_id(self) -> str:
        return self.payload["code_id"]

    @property
    def revision(self) -> str:
        return self.payload["revision"]


@dataclass(frozen=True)
class JobRecord:
    job: Job
    status: JobStatus = JobStatus.PENDING
    attempts: int = 0
    claimed_at: Optional[float] = None


class JobQueue:
    """Queue state replayed from ``path``.

    Operations are serialized by an in-process lock and an exclusive
    ``flock`` on the log, so worker threads may claim and acknowledge
    concurrently.
    """

    def __init__(self, path, *, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.RLock()
        self._records: dict[int, JobRecord] = {}
        self._next_id = 1
        # code id -> (job id, revision) of its newest job; survives compaction
        self._latest: dict[str, tuple[int, str]] = {}
        self._size = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        with self._lock, self._file_lock():
            self._replay()

    # storage -----------------------------------------------------------

    def _file_lock(self):
        return _Flock(self.path.with_name(self.path.name + ".lock"))

    def _replay(self):
        self._records.clear()
        self._latest.clear()
        self._next_id = 1
        with open(self.path, "rb") as fh:
            data = fh.read()
        lines = data.split(b"\n")
        tail = lines.pop()  # bytes after the final newline
        if tail:
            # torn append: the writer died before the newline, nothing returned
            self._truncate(len(data) - len(tail))
        for lineno, raw in enumerate(lines, start=1):
            if not raw.strip():
                continue
            text = raw.decode("utf-8", errors="replace")
            try:
                rec = json.loads(text)
                self._apply(rec)
            except (ValueError, KeyError, TypeError) as exc:
                raise QueueCorruptError(self.path, lineno, text, str(exc) or type(exc).__name__) from None
        self._size = self.path.stat().st_size

    def _sync(self):
        # pick up appends made by another process since our last read
        try:
            size = self.path.stat().st_size
        except OSError as exc:
            raise QueueStorageError(f"cannot stat queue log {self.path}: {exc}") from exc
        if size != self._size:
            self._replay()

    def _truncate(self, size: int):
        with open(self.path, "r+b") as fh:
            fh.truncate(size)
            fh.flush()
            os.fsync(fh.fileno())

    def _append(self, rec: dict):
        line = (json.dumps(rec, sort_keys=True) + "\n").encode()
        try:
            with open(self.path, "ab") as fh:
                try:
                    fh.write(line)
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
                except OSError:
                    # leave the log as it was; the caller is told nothing happened
                    fh.truncate(self._size)
                    raise
        except OSError as exc:
            raise QueueStorageError(f"cannot write queue log {self.path}: {exc}") from exc
        self._size += len(line)

    def _apply(self, rec: dict):
        op = rec["op"]
        if op == "meta":
            self._next_id = max(self._next_id, int(rec["next_id"]))
            for code, (jid, rev) in rec.get("latest", {}).items():
                self._note_latest(code, int(jid), rev)
            return
        jid = int(rec["id"])
        if op == "enqueue":
            if jid in self._records or jid < self._next_id:
                raise ValueError(f"job id {jid} reused")
            job = Job(jid, JobKind(rec["kind"]), dict(rec["payload"]), float(rec["at"]))
            self._records[jid] = JobRecord(job)
            self._next_id = jid + 1
            self._note_latest(job.code_id, jid, job.revision)
            return
        if op == "snapshot":
            job = Job(jid, JobKind(rec["kind"]), dict(rec["payload"]), float(rec["created_at"]))
            self._records[jid] = JobRecord(job, JobStatus(rec["status"]), int(rec["attempts"]),
                                           rec.get("claimed_at"))
            self._next_id = max(self._next_id, jid + 1)
            self._note_latest(job.code_id, jid, job.revision)
            return
        current = self._records[jid]
        if op == "claim":
            self._records[jid] = replace(current, status=JobStatus.CLAIMED,
                                         attempts=current.attempts + 1, claimed_at=float(rec["at"]))
        elif op == "ack":
            self._records[jid] = replace(current, status=JobStatus(rec["outcome"]))
        elif op in ("release", "recover"):
            self._records[jid] = replace(current, status=JobStatus.PENDING, claimed_at=None)
        else:
            raise ValueError(f"unknown op {op!r}")

    def _commit(self, rec: dict):
        # durable first, then visible in memory
        self._append(rec)
        self._apply(rec)

    def _note_latest(self, code_id, jid, revision):
        if code_id not in self._latest or self._latest[code_id][0] < jid:
            self._latest[code_id] = (jid, revision)

    # operations --------------------------------------------------------

    def enqueue(self, code_id: str, revision: str, kind: JobKind = JobKind.TEST_RUN) -> int:
        with self._lock, self._file_lock():
            self._sync()
            return self._enqueue(code_id, revision, kind)

    def _enqueue(self, code_id, revision, kind=JobKind.TEST_RUN) -> int:
        jid = self._next_id
        self._commit({"op": "enqueue", "id": jid, "kind": JobKind(kind).value,
                      "payload": {"code_id": code_id, "revision": revision},
                      "at": time.time()})
        return jid

    def enqueue_new(self, code_id: str, revision: str) -> Optional[int]:
        """Enqueue unless the newest job for ``code_id`` already has ``revision``.

        Makes a repeated poll after a crash idempotent.  Returns None when
        nothing was written.
        """
        with self._lock, self._file_lock():
            self._sync()
            latest = self._latest.get(code_id)
            if latest is not None and latest[1] == revision:
                return None
            return self._enqueue(code_id, revision)

    def claim(self) -> Optional[JobRecord]:
        with self._lock, self._file_lock():
            self._sync()
            pending = [r for r in self._records.values() if r.status is JobStatus.PENDING]
            if not pending:
                return None
            oldest = min(pending, key=lambda r: r.job.id)
            self._commit({"op": "claim", "id": oldest.job.id, "at": time.time()})
            return self._records[oldest.job.id]

    def _claimed(self, job_id: int) -> JobRecord:
        if job_id not in self._records:
            raise UnknownJobError(job_id)
        rec = self._records[job_id]
        if rec.status is not JobStatus.CLAIMED:
            raise JobStateError(f"job {job_id} is {rec.status.value}, not Claimed")
        return rec

    def acknowledge(self, job_id: int, outcome) -> JobRecord:
        outcome = JobStatus(outcome)
        if not outcome.terminal:
            raise ValueError("outcome must be Done or Failed")
        with self._lock, self._file_lock():
            self._sync()
            self._claimed(job_id)
            self._commit({"op": "ack", "id": job_id, "outcome": outcome.value})
            return self._records[job_id]

    def release(self, job_id: int, max_attempts: int = MAX_ATTEMPTS) -> JobRecord:
        """Hand back a job after an infrastructure error.

        The job returns to Pending while it has attempts left and is marked
        Failed once ``max_attempts`` claims have been spent.
        """
        with self._lock, self._file_lock():
            self._sync()
            rec = self._claimed(job_id)
            if rec.attempts >= max_attempts:
                self._commit({"op": "ack", "id": job_id, "outcome": JobStatus.FAILED.value})
            else:
                self._commit({"op": "release", "id": job_id})
            return self._records[job_id]

    def recover(self) -> int:
        """Return every orphaned Claimed job to Pending; call before claiming."""
        with self._lock, self._file_lock():
            # another process may have appended since we opened
            self._replay()
            orphans = sorted(r.job.id for r in self._records.values()
                             if r.status is JobStatus.CLAIMED)
            for jid in orphans:
                self._commit({"op": "recover", "id": jid})
            return len(orphans)

    def compact(self) -> int:
        """Rewrite the log keeping only non-terminal jobs; returns records dropped."""
        with self._lock, self._file_lock():
            self._replay()
            keep = [r for r in self.records() if not r.status.terminal]
            lines = [{"op": "meta", "next_id": self._next_id,
                      "latest": {c: list(v) for c, v in sorted(self._latest.items())}}]
            for r in keep:
                lines.append({"op": "snapshot", "id": r.job.id, "kind": r.job.kind.value,
                              "payload": r.job.payload, "created_at": r.job.created_at,
                              "status": r.status.value, "attempts": r.attempts,
                              "claimed_at": r.claimed_at})
            tmp = self.path.with_name(self.path.name + ".tmp")
            with open(tmp, "w") as fh:
                for rec in lines:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.path)
            _fsync_dir(self.path.parent)
            dropped = len(self._records) - len(keep)
            self._replay()
            return dropped

    def refresh(self):
        """Re-read the log, picking up writes by other processes."""
        with self._lock, self._file_lock():
            self._replay()

    # inspection --------------------------------------------------------

    def get(self, job_id: int) -> JobRecord:
        with self._lock:
            if job_id not in self._records:
                raise UnknownJobError(job_id)
            return self._records[job_id]

    def records(self) -> list[JobRecord]:
        with self._lock:
            return [self._records[k] for k in sorted(self._records)]

    def pending(self) -> list[JobRecord]:
        return [r for r in self.records() if r.status is JobStatus.PENDING]

    def __len__(self):
        return len(self._records)


def _fsync_dir(path: Path):
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


class _Flock:
    def __init__(self, path: Path):
        self.path = path
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        except OSError:
            # read-only storage: reads still work, writes fail in _append
            return self
        fcntl.flock(self.fd, fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            fcntl.flock(self.fd, fcntl.LOCK_UN)
            os.close(self.fd)
            self.fd = None

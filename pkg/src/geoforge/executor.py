"""Matrix execution: library cache, gated build and test phases, per-cell results.

Each plan unit (one code on one platform) runs in a fresh working directory::

    <work_root>/<code>/<revision>/<platform>/
        libs/<library id>  -> symlink into the library cache
        build.log
        test.log

Build step numbers in :class:`BuildResult` are 1-based.  Step 0 means the
failure happened while preparing a library.
"""
from __future__ import annotations

import datetime as _dt
import fcntl
import json
import logging
import os
import re
import shutil
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from . import compare as _compare
from .compare import ComparisonResult, CompareError
from .manifest import LibrarySpec, PlanUnit, PlatformSpec, TestPlan, render
from .process import run_step

log = logging.getLogger(__name__)


class BuildStatus(str, Enum):
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    TIMED_OUT = "TimedOut"


class TestStatus(str, Enum):
    PASSED = "Passed"
    FAILED = "Failed"
    TIMED_OUT = "TimedOut"
    SKIPPED = "Skipped"

    __test__ = False


class LibraryBuildError(RuntimeError):
    def __init__(self, message: str, log_text: str = "", timed_out: bool = False):
        super().__init__(message)
        self.log = log_text
        self.timed_out = timed_out


@dataclass(frozen=True)
class CachedLibrary:
    library_id: str
    version: str
    platform_id: str
    install_dir: Path
    built_at: float

    @property
    def key(self):
        return (self.library_id, self.version, self.platform_id)


@dataclass
class BuildResult:
    status: BuildStatus
    log: str = ""
    duration_s: float = 0.0
    step_index_failed: Optional[int] = None
    failed_library: Optional[str] = None
    #: set when the failure came from the orchestrator rather than the code
    infrastructure_error: Optional[str] = None
    log_path: Optional[str] = None

    @property
    def succeeded(self) -> bool:
        return self.status is BuildStatus.SUCCEEDED

    def to_dict(self):
        return {"status": self.status.value, "duration_s": self.duration_s,
                "step_index_failed": self.step_index_failed,
                "failed_library": self.failed_library,
                "infrastructure_error": self.infrastructure_error,
                "log_path": self.log_path}

    @classmethod
    def from_dict(cls, d):
        return cls(BuildStatus(d["status"]), "", d["duration_s"], d.get("step_index_failed"),
                   d.get("failed_library"), d.get("infrastructure_error"), d.get("log_path"))


@dataclass
class TestOutcome:
    test_id: str
    comparison: Optional[ComparisonResult] = None
    error: Optional[str] = None
    timed_out: bool = False

    __test__ = False

    @property
    def passed(self) -> bool:
        return self.error is None and self.comparison is not None and self.comparison.passed

    def to_dict(self):
        return {"test_id": self.test_id, "error": self.error, "timed_out": self.timed_out,
                "comparison": self.comparison.to_dict() if self.comparison else None}

    @classmethod
    def from_dict(cls, d):
        comp = d.get("comparison")
        return cls(d["test_id"], ComparisonResult.from_dict(comp) if comp else None,
                   d.get("error"), d.get("timed_out", False))


@dataclass
class TestResult:
    status: TestStatus
    per_test: list = field(default_factory=list)
    log: str = ""
    duration_s: float = 0.0
    log_path: Optional[str] = None

    __test__ = False

    def to_dict(self):
        return {"status": self.status.value, "duration_s": self.duration_s,
                "per_test": [t.to_dict() for t in self.per_test], "log_path": self.log_path}

    @classmethod
    def from_dict(cls, d):
        return cls(TestStatus(d["status"]), [TestOutcome.from_dict(t) for t in d["per_test"]],
                   "", d["duration_s"], d.get("log_path"))


@dataclass
class CellResult:
    code_id: str
    platform_id: str
    revision: str
    build: BuildResult
    test: TestResult
    started_at: float
    finished_at: float

    @property
    def green(self) -> bool:
        return self.build.succeeded and self.test.status is TestStatus.PASSED

    def to_dict(self):
        return {"code_id": self.code_id, "platform_id": self.platform_id,
                "revision": self.revision, "build": self.build.to_dict(),
                "test": self.test.to_dict(), "started_at": self.started_at,
                "finished_at": self.finished_at}

    @classmethod
    def from_dict(cls, d):
        return cls(d["code_id"], d["platform_id"], d["revision"],
                   BuildResult.from_dict(d["build"]), TestResult.from_dict(d["test"]),
                   d["started_at"], d["finished_at"])


# -- library cache ----------------------------------------------------------

def _safe(component: str) -> str:
    cleaned = re.sub(r"[^A-Za-z0-9._+@-]", "_", component)
    return "_" + cleaned if cleaned in ("", ".", "..") else cleaned


class LibraryCache:
    """Precompiled libraries keyed by ``(library id, version, platform id)``.

    An entry is valid once its ``entry.json`` exists; that file is written
    only after the install marker has been verified, so failed builds are
    never cached.
    """

    def __init__(self, root):
        self.root = Path(root).absolute()
        self._locks: dict = {}
        self._locks_guard = threading.Lock()
        self.builds_executed = 0

    def entry_dir(self, library_id: str, version: str, platform_id: str) -> Path:
        return self.root / _safe(platform_id) / f"{_safe(library_id)}@{_safe(version)}"

    def _key_lock(self, key) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, library_id: str, version: str, platform_id: str) -> Optional[CachedLibrary]:
        meta = self.entry_dir(library_id, version, platform_id) / "entry.json"
        try:
            data = json.loads(meta.read_text())
        except (OSError, ValueError):
            return None
        return CachedLibrary(data["library_id"], data["version"], data["platform_id"],
                             Path(data["install_dir"]), data["built_at"])

    def entries(self) -> list[CachedLibrary]:
        out = []
        for meta in sorted(self.root.glob("*/*/entry.json")):
            try:
                data = json.loads(meta.read_text())
            except (OSError, ValueError):
                continue
            out.append(CachedLibrary(data["library_id"], data["version"], data["platform_id"],
                                     Path(data["install_dir"]), data["built_at"]))
        return out

    def invalidate(self, library_id: Optional[str] = None,
                   platform_id: Optional[str] = None) -> int:
        """Drop matching entries so the next use rebuilds them; returns the count."""
        removed = 0
        for entry in self.entries():
            if library_id is not None and entry.library_id != library_id:
                continue
            if platform_id is not None and entry.platform_id != platform_id:
                continue
            d = self.entry_dir(entry.library_id, entry.version, entry.platform_id)
            with self._key_lock(entry.key), _FileLock(d.with_name(d.name + ".lock")):
                (d / "entry.json").unlink(missing_ok=True)
                shutil.rmtree(d, ignore_errors=True)
            removed += 1
        return removed


class _FileLock:
    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        fcntl.flock(self.fd, fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        fcntl.flock(self.fd, fcntl.LOCK_UN)
        os.close(self.fd)


def _stamp() -> str:
    return _dt.datetime.now().isoformat(timespec="seconds")


def step_env(spec: PlatformSpec, **extra) -> dict:
    """Host environment, overlaid with the platform's variables and ``GEOFORGE_*`` context."""
    env = dict(os.environ)
    env.update(spec.env)
    env.update({f"GEOFORGE_{k.upper()}": str(v) for k, v in extra.items()})
    return env


def _run_logged(command: str, index: int, total: int, label: str, logf, **kw):
    logf.write(f"[{_stamp()}] {label} step {index}/{total}: {command}\n".encode())
    logf.flush()
    outcome = run_step(command, output=logf, **kw)
    if outcome.timed_out:
        logf.write(f"[{_stamp()}] step {index} timed out after {outcome.duration_s:.1f}s\n".encode())
    else:
        logf.write(f"[{_stamp()}] step {index} exited {outcome.returncode} "
                   f"({outcome.duration_s:.2f}s)\n".encode())
    logf.flush()
    return outcome


def prepare_library(lib: LibrarySpec, platform: PlatformSpec, cache: LibraryCache, *,
                    timeout: Optional[float] = None) -> CachedLibrary:
    """Return the cached build of ``lib`` for ``platform``, building it on a miss.

    Concurrent misses on the same key build once.
    """
    key = (lib.id, lib.version, platform.id)
    hit = cache.get(*key)
    if hit is not None:
        return hit
    entry = cache.entry_dir(*key)
    with cache._key_lock(key), _FileLock(entry.with_name(entry.name + ".lock")):
        hit = cache.get(*key)
        if hit is not None:
            return hit
        shutil.rmtree(entry, ignore_errors=True)
        install = entry / "install"
        scratch = entry / "build"
        install.mkdir(parents=True)
        scratch.mkdir()
        log_path = entry / "build.log"
        deadline = None if timeout is None else time.monotonic() + timeout
        env = step_env(platform, workdir=scratch, libdir=install, library=lib.id,
                       library_version=lib.version, platform=platform.id)
        with cache._locks_guard:
            cache.builds_executed += 1
        with open(log_path, "wb") as logf:
            for i, template in enumerate(lib.build_steps, 1):
                cmd = render(template, workdir=scratch, libdir=install)
                remaining = None if deadline is None else deadline - time.monotonic()
                outcome = _run_logged(cmd, i, len(lib.build_steps), f"library {lib.id}", logf,
                                      cwd=scratch, env=env, timeout=remaining)
                if not outcome.ok:
                    break
        text = log_path.read_text(errors="replace")
        if outcome.timed_out:
            raise LibraryBuildError(f"library {lib.id} {lib.version} timed out on {platform.id}",
                                    text, timed_out=True)
        if outcome.returncode != 0:
            raise LibraryBuildError(
                f"library {lib.id} {lib.version} failed on {platform.id} "
                f"(step {i} exited {outcome.returncode})", text)
        if not (install / lib.install_marker).exists():
            raise LibraryBuildError(
                f"library {lib.id} {lib.version} built but install marker "
                f"{lib.install_marker!r} is missing", text)
        built = CachedLibrary(lib.id, lib.version, platform.id, install, time.time())
        tmp = entry / "entry.json.tmp"
        tmp.write_text(json.dumps({"library_id": lib.id, "version": lib.version,
                                   "platform_id": platform.id, "install_dir": str(install),
                                   "built_at": built.built_at}))
        os.replace(tmp, entry / "entry.json")
        return built


# -- phases -----------------------------------------------------------------

def unit_workdir(work_root, unit: PlanUnit) -> Path:
    work_root = Path(work_root).absolute()
    root = Path(unit.platform.workdir_root) if unit.platform.workdir_root else work_root
    if not root.is_absolute():
        root = work_root / root
    return root / _safe(unit.code_id) / _safe(unit.revision) / _safe(unit.platform.id)


def fresh_workdir(path: Path) -> Path:
    shutil.rmtree(path, ignore_errors=True)
    path.mkdir(parents=True)
    return path


def run_build_phase(unit: PlanUnit, cache: LibraryCache, workdir) -> BuildResult:
    """Prepare libraries, then run the code's build steps in order.

    Stops at the first failing step.  ``timeout_build_s`` bounds the whole
    phase, library builds included.
    """
    workdir = Path(workdir)
    start = time.monotonic()
    deadline = start + unit.timeout_build_s
    log_path = workdir / "build.log"
    libdir = workdir / "libs"
    libdir.mkdir(exist_ok=True)

    def finish(status, step=None, library=None, infra=None):
        return BuildResult(status, log_path.read_text(errors="replace"), time.monotonic() - start,
                           step, library, infra, str(log_path))

    with open(log_path, "wb") as logf:
        for lib in unit.libraries:
            logf.write(f"[{_stamp()}] library {lib.id} {lib.version}\n".encode())
            try:
                cached = prepare_library(lib, unit.platform, cache,
                                         timeout=deadline - time.monotonic())
            except LibraryBuildError as exc:
                logf.write(exc.log.encode() + f"[{_stamp()}] {exc}\n".encode())
                logf.flush()
                status = BuildStatus.TIMED_OUT if exc.timed_out else BuildStatus.FAILED
                return finish(status, 0, lib.id)
            link = libdir / _safe(lib.id)
            if link.is_symlink() or link.exists():
                link.unlink()
            link.symlink_to(cached.install_dir, target_is_directory=True)
            logf.write(f"[{_stamp()}] using {cached.install_dir}\n".encode())
        logf.flush()

        env = step_env(unit.platform, workdir=workdir, libdir=libdir, revision=unit.revision,
                       repo_url=unit.repo_url, code=unit.code_id, platform=unit.platform.id)
        total = len(unit.build_steps)
        for i, template in enumerate(unit.build_steps, 1):
            cmd = render(template, workdir=workdir, libdir=libdir, revision=unit.revision)
            outcome = _run_logged(cmd, i, total, "build", logf, cwd=workdir, env=env,
                                  timeout=deadline - time.monotonic())
            if outcome.timed_out:
                return finish(BuildStatus.TIMED_OUT, i)
            if outcome.returncode != 0:
                return finish(BuildStatus.FAILED, i)
    return finish(BuildStatus.SUCCEEDED)


CompareEngine = Callable[[str, str, str, Optional[float]], ComparisonResult]


def run_test_phase(unit: PlanUnit, build: BuildResult, workdir,
                   compare_engine: CompareEngine = _compare.compare_files) -> TestResult:
    """Run each test and compare its output with the golden file.

    Nothing runs unless the build succeeded.  Each test gets its own
    ``timeout_test_s`` budget.
    """
    if not build.succeeded:
        return TestResult(TestStatus.SKIPPED)
    workdir = Path(workdir)
    start = time.monotonic()
    log_path = workdir / "test.log"
    libdir = workdir / "libs"
    outcomes = []
    with open(log_path, "wb") as logf:
        for test in unit.tests:
            output = workdir / test.output_path
            output.parent.mkdir(parents=True, exist_ok=True)
            env = step_env(unit.platform, workdir=workdir, libdir=libdir, revision=unit.revision,
                           output=output, test=test.id, code=unit.code_id,
                           platform=unit.platform.id)
            deadline = time.monotonic() + unit.timeout_test_s
            outcome = None
            total = len(test.run_steps)
            for i, template in enumerate(test.run_steps, 1):
                cmd = render(template, workdir=workdir, libdir=libdir, revision=unit.revision,
                             output=output)
                outcome = _run_logged(cmd, i, total, f"test {test.id}", logf, cwd=workdir,
                                      env=env, timeout=deadline - time.monotonic())
                if not outcome.ok:
                    break
            if outcome is not None and outcome.timed_out:
                outcomes.append(TestOutcome(test.id, error=f"step {i} timed out", timed_out=True))
                continue
            if outcome is not None and outcome.returncode != 0:
                outcomes.append(TestOutcome(test.id, error=f"step {i} exited {outcome.returncode}"))
                continue
            if not output.is_file():
                outcomes.append(TestOutcome(test.id, error="output missing"))
                continue
            threshold = None if test.comparator == "exact" else test.effective_threshold
            try:
                result = compare_engine(test.golden_path, str(output), test.comparator, threshold)
            except (CompareError, ValueError, OSError) as exc:
                outcomes.append(TestOutcome(test.id, error=f"comparator error: {exc}"))
                continue
            logf.write(f"[{_stamp()}] test {test.id}: {result.metric} statistic "
                       f"{result.statistic!r} threshold {result.threshold!r} -> "
                       f"{'pass' if result.passed else 'FAIL'}\n".encode())
            outcomes.append(TestOutcome(test.id, comparison=result))
    if any(o.timed_out for o in outcomes):
        status = TestStatus.TIMED_OUT
    elif all(o.passed for o in outcomes):
        status = TestStatus.PASSED
    else:
        status = TestStatus.FAILED
    return TestResult(status, outcomes, log_path.read_text(errors="replace"),
                      time.monotonic() - start, str(log_path))


def run_unit(unit: PlanUnit, cache: LibraryCache, work_root,
             compare_engine: CompareEngine = _compare.compare_files) -> CellResult:
    started = time.time()
    workdir = unit_workdir(work_root, unit)
    try:
        fresh_workdir(workdir)
        build = run_build_phase(unit, cache, workdir)
        test = run_test_phase(unit, build, workdir, compare_engine)
    except Exception as exc:  # keep the matrix complete
        log.exception("infrastructure error in %s/%s", unit.code_id, unit.platform.id)
        text = traceback.format_exc()
        log_path = workdir / "build.log"
        try:
            with open(log_path, "a") as fh:
                fh.write(text)
        except OSError:
            log_path = None
        build = BuildResult(BuildStatus.FAILED, text, 0.0, 0,
                            infrastructure_error=f"{type(exc).__name__}: {exc}",
                            log_path=str(log_path) if log_path else None)
        test = TestResult(TestStatus.SKIPPED)
    return CellResult(unit.code_id, unit.platform.id, unit.revision, build, test,
                      started, time.time())


def run_plan(plan: TestPlan, cache: LibraryCache, parallelism: int = 1, *, work_root,
             compare_engine: CompareEngine = _compare.compare_files,
             on_start: Optional[Callable[[PlanUnit], None]] = None,
             on_finish: Optional[Callable[[CellResult], None]] = None) -> list[CellResult]:
    """Run every unit, at most ``parallelism`` at a time; results follow plan order."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    results: list = [None] * len(plan.units)

    def work(index: int):
        unit = plan.units[index]
        if on_start is not None:
            on_start(unit)
        cell = run_unit(unit, cache, work_root, compare_engine)
        results[index] = cell
        if on_finish is not None:
            on_finish(cell)

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        for fut in [pool.submit(work, i) for i in range(len(plan.units))]:
            fut.result()
    return results

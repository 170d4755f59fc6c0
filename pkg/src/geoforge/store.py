"""On-disk layout of a data directory.

::

    <data>/
        queue.log             job queue (append-only)
        poll_state.json       last seen revision per code
        daemon.lock           held by the running daemon
        libcache/             precompiled libraries
        work/                 per-cell working directories and logs
        results/<code>/<platform>.json   latest CellResult per cell
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .executor import CellResult, _safe
from .report import MatrixResult, build_matrix, render_html, render_summary


class DataDir:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def queue_path(self) -> Path:
        return self.root / "queue.log"

    @property
    def poll_state_path(self) -> Path:
        return self.root / "poll_state.json"

    @property
    def lock_path(self) -> Path:
        return self.root / "daemon.lock"

    @property
    def libcache(self) -> Path:
        return self.root / "libcache"

    @property
    def work(self) -> Path:
        return self.root / "work"

    @property
    def results(self) -> Path:
        return self.root / "results"

    def create(self) -> "DataDir":
        for d in (self.root, self.libcache, self.work, self.results):
            d.mkdir(parents=True, exist_ok=True)
        return self


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_result(results_dir, cell: CellResult) -> Path:
    path = Path(results_dir) / _safe(cell.code_id) / f"{_safe(cell.platform_id)}.json"
    atomic_write(path, json.dumps(cell.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_results(results_dir) -> list[CellResult]:
    out = []
    for path in sorted(Path(results_dir).glob("*/*.json")):
        out.append(CellResult.from_dict(json.loads(path.read_text())))
    return out


def write_reports(matrix: MatrixResult, report_dir) -> tuple[Path, Path]:
    report_dir = Path(report_dir)
    dashboard = report_dir / "dashboard.html"
    summary = report_dir / "summary.txt"
    atomic_write(dashboard, render_html(matrix))
    atomic_write(summary, render_summary(matrix))
    return dashboard, summary


def matrix_from_results(results, running=(), *, manifest=None, report_dir=None,
                        generated_at=None) -> MatrixResult:
    """Build the dashboard grid in manifest order, linking logs relative to ``report_dir``."""
    codes = platforms = None
    if manifest is not None:
        codes = list(manifest.codes)
        platforms = list(manifest.platforms)

    def link(path):
        if report_dir is None:
            return path
        return os.path.relpath(path, Path(report_dir).resolve())

    return build_matrix(results, running, codes=codes, platforms=platforms,
                        generated_at=generated_at, link=link)

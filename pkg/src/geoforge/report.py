"""Dashboard model and renderers.

Colors follow the usual build-lab convention:

=========  ======================================
red        build or test failed (timeouts included)
yellow     build or test still running
green      success
grey       test not run because the build failed
=========  ======================================
"""
from __future__ import annotations

import html
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Optional, Sequence

from .executor import CellResult

BUILD_STATES = ("Succeeded", "Failed", "Running", "TimedOut")
TEST_STATES = ("Passed", "Failed", "Running", "Skipped", "TimedOut")

BUILD_COLORS = {"Succeeded": "green", "Failed": "red", "TimedOut": "red", "Running": "yellow"}
TEST_COLORS = {"Passed": "green", "Failed": "red", "TimedOut": "red", "Running": "yellow",
               "Skipped": "grey"}

#: Every (build, test) pair a cell can be in.
REACHABLE_PAIRS = (
    ("Succeeded", "Passed"),
    ("Succeeded", "Failed"),
    ("Succeeded", "TimedOut"),
    ("Succeeded", "Running"),
    ("Failed", "Skipped"),
    ("TimedOut", "Skipped"),
    ("Running", "Running"),
)


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class CellStatus:
    build: str
    test: str
    build_log: Optional[str] = None
    test_log: Optional[str] = None
    revision: Optional[str] = None

    def __post_init__(self):
        if (self.build, self.test) not in REACHABLE_PAIRS:
            raise ValueError(f"inconsistent cell state: build {self.build}, test {self.test}")

    @property
    def colors(self):
        return BUILD_COLORS[self.build], TEST_COLORS[self.test]

    @property
    def green(self) -> bool:
        return self.colors == ("green", "green")

    @property
    def failed(self) -> bool:
        return "red" in self.colors

    @property
    def running(self) -> bool:
        return "yellow" in self.colors

    @classmethod
    def from_result(cls, cell: CellResult) -> "CellStatus":
        return cls(cell.build.status.value, cell.test.status.value,
                   cell.build.log_path, cell.test.log_path, cell.revision)


@dataclass
class MatrixResult:
    codes: list
    platforms: list
    #: (code, platform) -> CellStatus, or None where the code has no result on that platform
    cells: dict
    generated_at: float = field(default_factory=time.time)

    def present(self) -> list:
        return [(c, p, self.cells[c, p]) for c in self.codes for p in self.platforms
                if self.cells[c, p] is not None]


def _ordered(declared: Optional[Sequence[str]], seen: Iterable[str]) -> list:
    out = list(declared or [])
    for item in seen:
        if item not in out:
            out.append(item)
    return out


def build_matrix(results: Sequence[CellResult], running: Iterable = (), *,
                 codes: Optional[Sequence[str]] = None,
                 platforms: Optional[Sequence[str]] = None,
                 generated_at: Optional[float] = None,
                 link: Optional[callable] = None) -> MatrixResult:
    """Aggregate finished and in-flight cells into a grid.

    Rows and columns follow ``codes`` and ``platforms`` (manifest
    declaration order).  Ids not listed there are appended in first-seen
    order.  ``running`` holds ``(code, platform)`` pairs.  ``link`` maps a
    log path to the href used in the dashboard.
    """
    link = link or (lambda p: p)
    cells = {}
    for res in results:
        key = (res.code_id, res.platform_id)
        if key in cells:
            raise AggregationError(f"duplicate cell ({key[0]}, {key[1]})")
        st = CellStatus.from_result(res)
        cells[key] = CellStatus(st.build, st.test,
                                link(st.build_log) if st.build_log else None,
                                link(st.test_log) if st.test_log else None, st.revision)
    for code, platform in running:
        key = (code, platform)
        if key in cells:
            raise AggregationError(f"duplicate cell ({code}, {platform})")
        cells[key] = CellStatus("Running", "Running")
    rows = _ordered(codes, (k[0] for k in cells))
    cols = _ordered(platforms, (k[1] for k in cells))
    grid = {(c, p): cells.get((c, p)) for c in rows for p in cols}
    return MatrixResult(rows, cols, grid, time.time() if generated_at is None else generated_at)


def _timestamp(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC")


_CSS = """\
body{font-family:sans-serif;margin:1.5em;color:#222}
table.matrix{border-collapse:collapse}
table.matrix th,table.matrix td{border:1px solid #bbb;padding:4px 6px;text-align:center}
table.matrix th.code{text-align:left}
td.cell a,td.cell span{display:inline-block;min-width:2.2em;padding:2px 4px;margin:1px;color:#000;text-decoration:none}
td.na{color:#999}
.red{background:#e0413a}
.yellow{background:#f2d03b}
.green{background:#4cb04f}
.grey{background:#a0a0a0}
p.generated{color:#666;font-size:90%}"""


def _phase(name: str, state: str, color: str, href: Optional[str]) -> str:
    label = "B" if name == "build" else "T"
    note = " (timeout)" if state == "TimedOut" else ""
    title = html.escape(f"{name}: {state}{note}", quote=True)
    text = label + (" (timeout)" if note else "")
    cls = f"{name} {color}"
    if href:
        return (f'<a class="{cls}" href="{html.escape(href, quote=True)}" '
                f'title="{title}">{text}</a>')
    return f'<span class="{cls}" title="{title}">{text}</span>'


def render_html(matrix: MatrixResult) -> str:
    """Static dashboard page; identical input gives identical bytes."""
    out = ["<!DOCTYPE html>", "<html>", "<head>", '<meta charset="utf-8">',
           "<title>Build and test dashboard</title>", f"<style>\n{_CSS}\n</style>", "</head>",
           "<body>", "<h1>Build and test dashboard</h1>",
           f'<p class="generated">Generated {_timestamp(matrix.generated_at)}</p>',
           '<table class="matrix">', "<thead>", "<tr><th>code</th>"
           + "".join(f'<th class="platform">{html.escape(p)}</th>' for p in matrix.platforms)
           + "</tr>", "</thead>", "<tbody>"]
    for code in matrix.codes:
        row = [f'<tr><th class="code">{html.escape(code)}</th>']
        for platform in matrix.platforms:
            st = matrix.cells[code, platform]
            if st is None:
                row.append('<td class="cell na">&ndash;</td>')
                continue
            bcolor, tcolor = st.colors
            rev = f' title="revision {html.escape(st.revision, quote=True)}"' if st.revision else ""
            row.append(f'<td class="cell"{rev}>' + _phase("build", st.build, bcolor, st.build_log)
                       + _phase("test", st.test, tcolor, st.test_log) + "</td>")
        out.append("".join(row) + "</tr>")
    out += ["</tbody>", "</table>",
            '<p class="legend"><span class="red">red</span> failed '
            '<span class="yellow">yellow</span> running '
            '<span class="green">green</span> success '
            '<span class="grey">grey</span> not run (build failed)</p>',
            "</body>", "</html>", ""]
    return "\n".join(out)


@dataclass(frozen=True)
class Counts:
    passed: int
    failed: int
    running: int
    skipped: int
    build: dict
    test: dict


def count(matrix: MatrixResult) -> Counts:
    build = {s: 0 for s in BUILD_STATES}
    test = {s: 0 for s in TEST_STATES}
    passed = failed = running = 0
    for _, _, st in matrix.present():
        build[st.build] += 1
        test[st.test] += 1
        if st.failed:
            failed += 1
        elif st.running:
            running += 1
        else:
            passed += 1
    return Counts(passed, failed, running, test["Skipped"], build, test)


def _detail(code: str, platform: str, st: CellStatus):
    if st.build != "Succeeded":
        phase, state, log = "build", st.build, st.build_log
    else:
        phase, state, log = "test", st.test, st.test_log
    if state == "TimedOut":
        phase += " (timeout)"
    label = "RUNNING" if state == "Running" else "FAILED"
    return f"{label:<8} {code}  {platform}  {phase}  {log or '-'}"


def render_summary(matrix: MatrixResult) -> str:
    """Plain-text report suitable for an e-mail body."""
    c = count(matrix)
    b, t = c.build, c.test
    lines = [
        f"Build and test summary, {_timestamp(matrix.generated_at)}",
        f"{c.failed} failure{'s' if c.failed != 1 else ''}",
        f"{c.passed} passed, {c.failed} failed, {c.running} running, {c.skipped} skipped",
        f"build: {b['Succeeded']} succeeded, {b['Failed'] + b['TimedOut']} failed "
        f"({b['TimedOut']} timed out), {b['Running']} running",
        f"test: {t['Passed']} passed, {t['Failed'] + t['TimedOut']} failed "
        f"({t['TimedOut']} timed out), {t['Running']} running, {t['Skipped']} skipped",
    ]
    details = [_detail(code, platform, st) for code, platform, st in matrix.present()
               if not st.green]
    if details:
        lines.append("")
        lines.extend(details)
    return "\n".join(lines) + "\n"

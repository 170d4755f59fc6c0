"""Numerical output comparison.

Outputs are single-channel time series stored as two-column ASCII files.
Two signals can be checked with an exact comparator, which is brittle across
compilers and hardware, or with a tolerance-based comparator: absolute,
relative, normalized l2, or zero-lag correlation.

The first argument of every comparator is the golden reference.  Only
``compare_l2`` is asymmetric, since it normalizes by the reference norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

METRICS = ("exact", "absolute", "relative", "l2", "correlation")

#: Thresholds used when a test omits one.  absolute/relative have no default.
DEFAULT_THRESHOLDS = {"correlation": 0.999, "l2": 1e-6}

TIME_TOLERANCE = 1e-9


class CompareError(ValueError):
    """Base class for comparator failures that produce no verdict."""


class ParseError(CompareError):
    def __init__(self, path, lineno: Optional[int], message: str):
        self.path = str(path)
        self.lineno = lineno
        where = f"{self.path}:{lineno}" if lineno is not None else self.path
        super().__init__(f"{where}: {message}")


class LengthMismatchError(CompareError):
    pass


class TimeAxisMismatchError(CompareError):
    pass


class ZeroVarianceError(CompareError):
    pass


@dataclass(frozen=True, eq=False)
class Signal:
    times: np.ndarray
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or values.ndim != 1:
            raise ValueError("times and values must be one-dimensional")
        if len(times) != len(values):
            raise ValueError(
                f"times and values differ in length ({len(times)} != {len(values)})"
            )
        if len(times) == 0:
            raise ValueError("a signal needs at least one sample")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("signal contains non-finite entries")
        if np.any(np.diff(times) <= 0):
            raise ValueError("signal times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_values(cls, values, dt: float = 1.0, label: str = "") -> "Signal":
        values = np.asarray(values, dtype=float)
        return cls(np.arange(len(values)) * dt, values, label)


@dataclass
class ComparisonResult:
    metric: str
    statistic: float
    threshold: float
    passed: bool
    abs_diff: Optional[np.ndarray] = None
    rel_diff: Optional[np.ndarray] = None
    #: l2 only: the reference norm was zero and the statistic is absolute
    fallback: bool = False
    length_mismatch: bool = False
    notes: list = field(default_factory=list)

    @property
    def profile(self):
        if self.abs_diff is None:
            return None
        return self.abs_diff, self.rel_diff

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "passed": self.passed,
            "fallback": self.fallback,
            "length_mismatch": self.length_mismatch,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ComparisonResult":
        return cls(
            metric=data["metric"],
            statistic=data["statistic"],
            threshold=data["threshold"],
            passed=data["passed"],
            fallback=data.get("fallback", False),
            length_mismatch=data.get("length_mismatch", False),
            notes=list(data.get("notes", [])),
        )


def verdict(metric: str, statistic: float, threshold: float) -> bool:
    """Pass/fail as a function of the metric, its statistic and the threshold."""
    if metric == "exact":
        return statistic == 0
    if metric == "correlation":
        return statistic >= threshold
    if metric in ("absolute", "relative", "l2"):
        return statistic <= threshold
    raise ValueError(f"unknown metric {metric!r}")


def parse_timeseries(path) -> Signal:
    """Read a ``time value`` file.  '#' lines and blank lines are skipped."""
    path = Path(path)
    times, values = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError(path, lineno, f"expected 2 columns, got {len(parts)}")
            try:
                t, v = float(parts[0]), float(parts[1])
            except ValueError:
                raise ParseError(path, lineno, f"not a number: {text!r}") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise ParseError(path, lineno, f"non-finite value: {text!r}")
            if times and t <= times[-1]:
                raise ParseError(path, lineno, f"non-increasing time {t!r} after {times[-1]!r}")
            times.append(t)
            values.append(v)
    if not times:
        raise ParseError(path, None, "no samples")
    return Signal(np.array(times), np.array(values), label=path.name)


def _check_aligned(a: Signal, b: Signal):
    if len(a) != len(b):
        raise LengthMismatchError(f"length mismatch: {len(a)} vs {len(b)} samples")
    gap = np.abs(a.times - b.times)
    if np.any(gap > TIME_TOLERANCE):
        i = int(np.argmax(gap))
        raise TimeAxisMismatchError(
            f"time axes differ at sample {i}: {float(a.times[i])!r} vs {float(b.times[i])!r}"
        )


def _relative(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.abs(x), np.abs(y))
    diff = np.abs(x - y)
    out = np.zeros_like(diff)
    nz = denom > 0
    out[nz] = diff[nz] / denom[nz]
    return out


def difference_profile(a: Signal, b: Signal):
    """Per-sample absolute and relative differences of two aligned signals."""
    if len(a) != len(b):
        raise LengthMismatchError(f"length mismatch: {len(a)} vs {len(b)} samples")
    return np.abs(a.values - b.values), _relative(a.values, b.values)


def compare_exact(a: Signal, b: Signal) -> ComparisonResult:
    if len(a) != len(b):
        return ComparisonResult(
            "exact", float(abs(len(a) - len(b))), 0.0, False,
            length_mismatch=True,
            notes=[f"length mismatch: {len(a)} vs {len(b)} samples"],
        )
    differing = (a.times != b.times) | (a.values != b.values)
    count = float(np.count_nonzero(differing))
    return ComparisonResult("exact", count, 0.0, count == 0)


def _check_tol(tol: float):
    if not (tol >= 0 and math.isfinite(tol)):
        raise ValueError(f"tolerance must be finite and >= 0, got {tol!r}")


def compare_absolute(a: Signal, b: Signal, tol: float) -> ComparisonResult:
    _check_tol(tol)
    _check_aligned(a, b)
    abs_diff, rel_diff = difference_profile(a, b)
    stat = float(abs_diff.max())
    return ComparisonResult("absolute", stat, tol, verdict("absolute", stat, tol),
                            abs_diff, rel_diff)


def compare_relative(a: Signal, b: Signal, tol: float) -> ComparisonResult:
    _check_tol(tol)
    _check_aligned(a, b)
    abs_diff, rel_diff = difference_profile(a, b)
    stat = float(rel_diff.max())
    return ComparisonResult("relative", stat, tol, verdict("relative", stat, tol),
                            abs_diff, rel_diff)


def compare_l2(a: Signal, b: Signal, tol: float) -> ComparisonResult:
    """``||a - b|| / ||a||`` with ``a`` the reference.

    A zero reference cannot normalize; the statistic is then ``||b||`` and the
    result carries ``fallback=True``.
    """
    _check_tol(tol)
    _check_aligned(a, b)
    abs_diff, rel_diff = difference_profile(a, b)
    ref = float(np.linalg.norm(a.values))
    if ref == 0.0:
        stat = float(np.linalg.norm(b.values))
        notes = ["reference norm is zero; statistic is the absolute norm of the candidate"]
        return ComparisonResult("l2", stat, tol, verdict("l2", stat, tol),
                                abs_diff, rel_diff, fallback=True, notes=notes)
    stat = float(np.linalg.norm(a.values - b.values)) / ref
    return ComparisonResult("l2", stat, tol, verdict("l2", stat, tol), abs_diff, rel_diff)


def compare_correlation(a: Signal, b: Signal, threshold: float) -> ComparisonResult:
    """Zero-lag Pearson correlation; passes when it reaches ``threshold``.

    Constant signals have no defined correlation and raise
    :class:`ZeroVarianceError`; compare those with ``compare_absolute``.
    """
    if not (-1.0 <= threshold <= 1.0):
        raise ValueError(f"correlation threshold must lie in [-1, 1], got {threshold!r}")
    _check_aligned(a, b)
    if len(a) < 2:
        raise CompareError("correlation needs at least 2 samples")
    for name, s in (("reference", a), ("candidate", b)):
        if np.all(s.values == s.values[0]):
            raise ZeroVarianceError(
                f"{name} signal is constant; correlation is undefined, "
                "use the absolute comparator instead"
            )
    da = a.values - a.values.mean()
    db = b.values - b.values.mean()
    stat = float(np.dot(da, db) / (np.sqrt(np.dot(da, da)) * np.sqrt(np.dot(db, db))))
    abs_diff, rel_diff = difference_profile(a, b)
    return ComparisonResult("correlation", stat, threshold,
                            verdict("correlation", stat, threshold), abs_diff, rel_diff)


_DISPATCH: dict[str, Callable[..., ComparisonResult]] = {
    "absolute": compare_absolute,
    "relative": compare_relative,
    "l2": compare_l2,
    "correlation": compare_correlation,
}


def compare_signals(a: Signal, b: Signal, metric: str,
                    threshold: Optional[float] = None) -> ComparisonResult:
    if metric == "exact":
        return compare_exact(a, b)
    if metric not in _DISPATCH:
        raise ValueError(f"unknown metric {metric!r}; expected one of {', '.join(METRICS)}")
    if threshold is None:
        if metric not in DEFAULT_THRESHOLDS:
            raise ValueError(f"metric {metric!r} needs an explicit tolerance")
        threshold = DEFAULT_THRESHOLDS[metric]
    return _DISPATCH[metric](a, b, threshold)


def compare_files(golden, candidate, metric: str,
                  threshold: Optional[float] = None) -> ComparisonResult:
    """Parse both files and compare them; ``golden`` is the reference."""
    a = parse_timeseries(golden)
    b = parse_timeseries(candidate)
    return compare_signals(a, b, metric, threshold)


def write_profile(path, a: Signal, b: Signal):
    """Write ``time  abs_diff  rel_diff`` as tab-separated columns."""
    abs_diff, rel_diff = difference_profile(a, b)
    with open(path, "w") as fh:
        fh.write("# time\tabs_diff\trel_diff\n")
        for t, d, r in zip(a.times, abs_diff, rel_diff):
            fh.write(f"{float(t)!r}\t{float(d)!r}\t{float(r)!r}\n")

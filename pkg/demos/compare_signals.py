"""
Comparing a simulation trace against a golden file
===================================================

Two builds of the same code rarely agree bit for bit.  Compiler
reordering, fused multiply-add and different math libraries all nudge the
last few digits.  This walk-through shows why an exact diff is useless
here and what the correlation comparator reports instead.
"""

import tempfile
from pathlib import Path

import numpy as np

from geoforge.compare import compare_files, difference_profile, parse_timeseries, write_profile

# a damped wavetrain standing in for a seismogram
t = np.linspace(0, 60, 600)
trace = np.exp(-t / 20) * np.sin(2 * np.pi * t / 7)

# the "other platform": every sample perturbed by at most one part in 10^4
rng = np.random.default_rng(0)
other = trace * (1 + rng.uniform(-1e-4, 1e-4, t.size))

work = Path(tempfile.mkdtemp())
golden, candidate = work / "golden.dat", work / "candidate.dat"
np.savetxt(golden, np.column_stack([t, trace]), fmt="%.17g")
np.savetxt(candidate, np.column_stack([t, other]), fmt="%.17g")

# exact comparison counts differing samples; almost all of them differ
exact = compare_files(golden, candidate, "exact")
print(f"exact: {exact.statistic:.0f} of {t.size} samples differ -> passed={exact.passed}")

# correlation with the default threshold of 0.999
corr = compare_files(golden, candidate, "correlation")
print(f"correlation: {corr.statistic:.9f} -> passed={corr.passed}")

# the remaining metrics need a tolerance (l2 has a default of 1e-6)
for metric, tol in (("absolute", 1e-3), ("relative", 1e-3), ("l2", 1e-3)):
    res = compare_files(golden, candidate, metric, tol)
    print(f"{metric}: {res.statistic:.3e} (tolerance {tol}) -> passed={res.passed}")

# a per-sample difference profile helps locate where two runs drift apart
a, b = parse_timeseries(golden), parse_timeseries(candidate)
abs_diff, rel_diff = difference_profile(a, b)
worst = int(np.argmax(rel_diff))
print(f"largest relative difference {rel_diff[worst]:.2e} at t={t[worst]:.2f}")
write_profile(work / "profile.tsv", a, b)
print(f"profile written to {work / 'profile.tsv'}")

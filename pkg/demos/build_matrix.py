"""
Building a code on several platforms and rendering the dashboard
=================================================================

A manifest lists codes, the libraries they link against, the platforms
to build on and the regression tests to run.  Here every command is a
tiny shell snippet, so the whole matrix runs in a couple of seconds.
"""

import tempfile
from pathlib import Path

import yaml

from geoforge import LibraryCache, generate_test_plan, load_manifest, run_plan
from geoforge.store import matrix_from_results, write_reports

root = Path(tempfile.mkdtemp())
(root / "golden").mkdir()
(root / "golden" / "trace.dat").write_text("0 0\n1 1\n2 0.5\n3 -0.25\n")

# two platforms, one library and one code; the build fails on "legacy"
manifest = {
    "platforms": [{"id": "modern", "env": {"CC": "gcc"}},
                  {"id": "legacy", "env": {"CC": "cc-old"}}],
    "libraries": [{"id": "fftw", "version": "3.3",
                   "build_steps": ["mkdir -p {libdir}/lib", "touch {libdir}/lib/libfftw3.a"],
                   "install_marker": "lib/libfftw3.a"}],
    "tests": [{"id": "trace", "run_steps": ["sh ./simulate > {output}"],
               "output_path": "out/trace.dat", "golden_path": "golden/trace.dat",
               "comparator": "correlation"}],
    "codes": [{"id": "wavesim", "repo_url": "https://example.org/wavesim.git",
               "revision_probe": "echo v1",
               "build_steps": [
                   'test "$CC" != cc-old',
                   "test -f {libdir}/fftw/lib/libfftw3.a",
                   "printf 'printf \"0 0\\\\n1 1\\\\n2 0.5\\\\n3 -0.25\\\\n\"' > simulate",
               ],
               "library_ids": ["fftw"], "platform_ids": ["modern", "legacy"],
               "tests": ["trace"]}],
}
(root / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
m = load_manifest(root / "manifest.yaml")

# one unit per platform, each with its resolved libraries and tests
plan = generate_test_plan(m, "wavesim", "v1")
print([u.platform_id for u in plan.units], "->", plan.test_executions, "test executions")

cache = LibraryCache(root / "libcache")
cells = run_plan(plan, cache, parallelism=2, work_root=root / "work")
for cell in cells:
    print(f"{cell.platform_id:<8} build {cell.build.status.value:<10} test {cell.test.status.value}")

# the test phase on "legacy" was skipped because its build failed;
# running the plan again reuses the cached library
run_plan(plan, cache, parallelism=2, work_root=root / "work")
print("library builds executed:", cache.builds_executed)

matrix = matrix_from_results(cells, manifest=m, report_dir=root / "report")
html_path, summary_path = write_reports(matrix, root / "report")
print(summary_path.read_text())
print("dashboard:", html_path)

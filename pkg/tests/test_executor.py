import threading
import time
from dataclasses import replace
from pathlib import Path

import pytest

from geoforge.executor import (
    BuildResult,
    BuildStatus,
    LibraryBuildError,
    LibraryCache,
    TestStatus,
    prepare_library,
    run_build_phase,
    run_plan,
    run_test_phase,
)
from geoforge.manifest import LibrarySpec, PlatformSpec, generate_test_plan, manifest_from_dict

GOLDEN = "0 0\n1 1\n2 0.5\n3 -0.25\n"


@pytest.fixture
def env(tmp_path):
    (tmp_path / "golden").mkdir()
    (tmp_path / "golden" / "g.dat").write_text(GOLDEN)
    (tmp_path / "counts").mkdir()
    return tmp_path


def hits(root, name):
    p = root / "counts" / name
    return len(p.read_text().splitlines()) if p.exists() else 0


def plan_for(root, *, build_steps=("true",), tests=None, platforms=("p1",), libraries=(),
             timeout_build_s=30, timeout_test_s=30, code="c"):
    if tests is None:
        tests = [{"id": "t", "run_steps": [f"printf '{GOLDEN}' > {{output}}"],
                  "output_path": "out.dat", "golden_path": "golden/g.dat",
                  "comparator": "correlation", "threshold": 0.999}]
    m = manifest_from_dict({
        "platforms": [{"id": p, "env": {"PLATFORM_TAG": p}} for p in platforms],
        "libraries": list(libraries),
        "tests": tests,
        "codes": [{"id": code, "repo_url": "/srv/c", "revision_probe": "echo r",
                   "build_steps": list(build_steps), "platform_ids": list(platforms),
                   "library_ids": [lib["id"] for lib in libraries],
                   "tests": [t["id"] for t in tests],
                   "timeout_build_s": timeout_build_s, "timeout_test_s": timeout_test_s}],
    }, base_dir=root)
    return generate_test_plan(m, code, "r1")


def lib_spec(root, marker=True, fail=False, sleep=0):
    steps = [f"echo x >> {root}/counts/lib"]
    if sleep:
        steps.append(f"sleep {sleep}")
    if fail:
        steps.append("exit 4")
    steps.append("mkdir -p {libdir}/lib" + (" && touch {libdir}/lib/libz.a" if marker else ""))
    return {"id": "zlib", "version": "1.3", "build_steps": steps, "install_marker": "lib/libz.a"}


def workdir(root, name="w"):
    d = root / name
    d.mkdir(exist_ok=True)
    return d


# -- library cache --------------------------------------------------------

def _lib(rec):
    return LibrarySpec(rec["id"], rec["version"], tuple(rec["build_steps"]), rec["install_marker"])


def test_prepare_library_cold_then_warm(env):
    cache = LibraryCache(env / "cache")
    lib, plat = _lib(lib_spec(env)), PlatformSpec("p1")
    first = prepare_library(lib, plat, cache)
    assert hits(env, "lib") == 1
    assert (first.install_dir / "lib" / "libz.a").exists()
    second = prepare_library(lib, plat, cache)
    assert hits(env, "lib") == 1  # no build command ran
    assert second == first
    assert cache.builds_executed == 1


def test_cache_key_includes_platform_and_version(env):
    cache = LibraryCache(env / "cache")
    lib = _lib(lib_spec(env))
    prepare_library(lib, PlatformSpec("p1"), cache)
    prepare_library(lib, PlatformSpec("p2"), cache)
    prepare_library(replace(lib, version="1.4"), PlatformSpec("p1"), cache)
    assert hits(env, "lib") == 3
    assert len(cache.entries()) == 3


def test_missing_install_marker_is_not_cached(env):
    cache = LibraryCache(env / "cache")
    lib = _lib(lib_spec(env, marker=False))
    with pytest.raises(LibraryBuildError, match="install marker"):
        prepare_library(lib, PlatformSpec("p1"), cache)
    assert cache.get("zlib", "1.3", "p1") is None
    with pytest.raises(LibraryBuildError):
        prepare_library(lib, PlatformSpec("p1"), cache)
    assert hits(env, "lib") == 2


def test_failed_library_build_reports_log(env):
    cache = LibraryCache(env / "cache")
    with pytest.raises(LibraryBuildError) as err:
        prepare_library(_lib(lib_spec(env, fail=True)), PlatformSpec("p1"), cache)
    assert "exited 4" in str(err.value)
    assert "exit 4" in err.value.log
    assert cache.entries() == []


def test_library_timeout(env):
    cache = LibraryCache(env / "cache")
    with pytest.raises(LibraryBuildError) as err:
        prepare_library(_lib(lib_spec(env, sleep=5)), PlatformSpec("p1"), cache, timeout=0.3)
    assert err.value.timed_out


def test_concurrent_misses_build_once(env):
    cache = LibraryCache(env / "cache")
    lib = _lib(lib_spec(env, sleep=0.3))
    errors = []

    def go():
        try:
            prepare_library(lib, PlatformSpec("p1"), cache)
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=go) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    assert hits(env, "lib") == 1


def test_invalidate_forces_one_rebuild(env):
    cache = LibraryCache(env / "cache")
    lib = _lib(lib_spec(env))
    prepare_library(lib, PlatformSpec("p1"), cache)
    prepare_library(lib, PlatformSpec("p2"), cache)
    assert cache.invalidate("zlib", "p1") == 1
    prepare_library(lib, PlatformSpec("p1"), cache)
    prepare_library(lib, PlatformSpec("p2"), cache)
    assert hits(env, "lib") == 3


# -- build phase ----------------------------------------------------------

def test_build_succeeds(env):
    plan = plan_for(env, build_steps=["true", "echo $PLATFORM_TAG > tag"])
    res = run_build_phase(plan.units[0], LibraryCache(env / "cache"), workdir(env))
    assert res.status is BuildStatus.SUCCEEDED
    assert res.step_index_failed is None
    assert (env / "w" / "tag").read_text().strip() == "p1"
    assert "build step 2/2" in res.log


def test_build_short_circuits(env):
    plan = plan_for(env, build_steps=[f"echo 1 >> {env}/counts/s1", "exit 1",
                                      f"echo 3 >> {env}/counts/s3"])
    res = run_build_phase(plan.units[0], LibraryCache(env / "cache"), workdir(env))
    assert res.status is BuildStatus.FAILED
    assert res.step_index_failed == 2
    assert hits(env, "s1") == 1 and hits(env, "s3") == 0


def test_build_timeout_kills_process_group(env):
    # the child outlives its parent shell unless the whole group is killed
    step = f"(sleep 2; touch {env}/counts/late) & sleep 10"
    plan = plan_for(env, build_steps=["true", step], timeout_build_s=1)
    t0 = time.monotonic()
    res = run_build_phase(plan.units[0], LibraryCache(env / "cache"), workdir(env))
    assert time.monotonic() - t0 < 5
    assert res.status is BuildStatus.TIMED_OUT
    assert res.step_index_failed == 2
    time.sleep(2.5)
    assert not (env / "counts" / "late").exists()


def test_library_failure_fails_build(env):
    plan = plan_for(env, libraries=[lib_spec(env, fail=True)],
                    build_steps=[f"echo b >> {env}/counts/b"])
    res = run_build_phase(plan.units[0], LibraryCache(env / "cache"), workdir(env))
    assert res.status is BuildStatus.FAILED
    assert res.step_index_failed == 0
    assert res.failed_library == "zlib"
    assert hits(env, "b") == 0


def test_libdir_substitution(env):
    plan = plan_for(env, libraries=[lib_spec(env)],
                    build_steps=["test -f {libdir}/zlib/lib/libz.a",
                                 'test "$GEOFORGE_LIBDIR" = "{libdir}"',
                                 'test "{revision}" = r1'])
    res = run_build_phase(plan.units[0], LibraryCache(env / "cache"), workdir(env))
    assert res.status is BuildStatus.SUCCEEDED, res.log


# -- test phase -----------------------------------------------------------

def test_skipped_when_build_failed(env):
    tests = [{"id": "t", "run_steps": [f"echo x >> {env}/counts/t"], "output_path": "o",
              "golden_path": "golden/g.dat", "comparator": "exact"}]
    plan = plan_for(env, tests=tests)
    res = run_test_phase(plan.units[0], BuildResult(BuildStatus.FAILED, step_index_failed=1),
                         workdir(env))
    assert res.status is TestStatus.SKIPPED
    assert res.per_test == []
    assert hits(env, "t") == 0


def test_two_tests_pass(env):
    tests = [{"id": f"t{i}", "run_steps": [f"printf '{GOLDEN}' > {{output}}"],
              "output_path": f"out/{i}.dat", "golden_path": "golden/g.dat",
              "comparator": c, "threshold": thr}
             for i, (c, thr) in enumerate([("correlation", 0.999), ("absolute", 0.0)])]
    plan = plan_for(env, tests=tests)
    res = run_test_phase(plan.units[0], BuildResult(BuildStatus.SUCCEEDED), workdir(env))
    assert res.status is TestStatus.PASSED
    assert [o.test_id for o in res.per_test] == ["t0", "t1"]
    assert all(o.passed for o in res.per_test)


def test_output_missing(env):
    tests = [{"id": "t", "run_steps": ["true"], "output_path": "never.dat",
              "golden_path": "golden/g.dat", "comparator": "correlation"}]
    res = run_test_phase(plan_for(env, tests=tests).units[0],
                         BuildResult(BuildStatus.SUCCEEDED), workdir(env))
    assert res.status is TestStatus.FAILED
    assert res.per_test[0].error == "output missing"


def test_step_failure_and_comparator_error(env):
    tests = [
        {"id": "bad", "run_steps": ["exit 7"], "output_path": "a", "golden_path": "golden/g.dat",
         "comparator": "exact"},
        {"id": "flat", "run_steps": ["printf '0 1\\n1 1\\n2 1\\n3 1\\n' > {output}"], "output_path": "b",
         "golden_path": "golden/g.dat", "comparator": "correlation"},
        {"id": "ok", "run_steps": [f"printf '{GOLDEN}' > {{output}}"], "output_path": "c",
         "golden_path": "golden/g.dat", "comparator": "exact"},
    ]
    res = run_test_phase(plan_for(env, tests=tests).units[0],
                         BuildResult(BuildStatus.SUCCEEDED), workdir(env))
    assert res.status is TestStatus.FAILED
    bad, flat, ok = res.per_test
    assert bad.error == "step 1 exited 7"
    assert flat.error.startswith("comparator error") and "constant" in flat.error
    assert ok.passed


def test_failed_comparison(env):
    tests = [{"id": "t", "run_steps": ["printf '0 0\\n1 -1\\n2 -0.5\\n3 0.25\\n' > {output}"],
              "output_path": "o", "golden_path": "golden/g.dat", "comparator": "correlation"}]
    res = run_test_phase(plan_for(env, tests=tests).units[0],
                         BuildResult(BuildStatus.SUCCEEDED), workdir(env))
    assert res.status is TestStatus.FAILED
    assert res.per_test[0].comparison.statistic == pytest.approx(-1.0)


def test_test_timeout(env):
    tests = [{"id": "t", "run_steps": ["sleep 10"], "output_path": "o",
              "golden_path": "golden/g.dat", "comparator": "exact"}]
    res = run_test_phase(plan_for(env, tests=tests, timeout_test_s=1).units[0],
                         BuildResult(BuildStatus.SUCCEEDED), workdir(env))
    assert res.status is TestStatus.TIMED_OUT
    assert res.per_test[0].timed_out


def test_custom_compare_engine(env):
    calls = []

    def engine(golden, candidate, metric, threshold):
        calls.append((Path(golden).name, metric, threshold))
        from geoforge.compare import ComparisonResult
        return ComparisonResult(metric, 0.0, threshold, True)

    res = run_test_phase(plan_for(env).units[0], BuildResult(BuildStatus.SUCCEEDED),
                         workdir(env), engine)
    assert res.status is TestStatus.PASSED
    assert calls == [("g.dat", "correlation", 0.999)]


# -- matrix ---------------------------------------------------------------

def test_run_plan_two_units(env):
    plan = plan_for(env, platforms=("p1", "p2"))
    cells = run_plan(plan, LibraryCache(env / "cache"), 2, work_root=env / "work")
    assert [c.platform_id for c in cells] == ["p1", "p2"]
    assert all(c.green for c in cells)
    assert Path(cells[0].build.log_path).parent == env / "work" / "c" / "r1" / "p1"


def test_unit_failures_are_independent(env):
    plan = plan_for(env, platforms=("a", "b"), build_steps=['test "$PLATFORM_TAG" != a'])
    a, b = run_plan(plan, LibraryCache(env / "cache"), 2, work_root=env / "work")
    assert (a.build.status, a.test.status) == (BuildStatus.FAILED, TestStatus.SKIPPED)
    assert (b.build.status, b.test.status) == (BuildStatus.SUCCEEDED, TestStatus.PASSED)


def test_parallelism_does_not_change_results(env):
    platforms = tuple(f"p{i}" for i in range(6))
    plan = plan_for(env, platforms=platforms, libraries=[lib_spec(env)],
                    build_steps=['case "$PLATFORM_TAG" in p1|p4) exit 1;; esac', "sleep 0.05"])

    def statuses(par, tag):
        cells = run_plan(plan, LibraryCache(env / f"cache{tag}"), par, work_root=env / f"w{tag}")
        return [(c.platform_id, c.build.status, c.test.status) for c in cells]

    serial = statuses(1, "s")
    parallel = statuses(4, "p")
    assert serial == parallel
    assert [s[1] for s in serial].count(BuildStatus.FAILED) == 2


def test_workdirs_are_fresh(env):
    plan = plan_for(env, build_steps=["test ! -e stale", "touch stale"])
    cache = LibraryCache(env / "cache")
    first = run_plan(plan, cache, 1, work_root=env / "work")
    second = run_plan(plan, cache, 1, work_root=env / "work")
    assert first[0].green and second[0].green


def test_same_plan_twice_builds_library_once(env):
    plan = plan_for(env, platforms=("p1", "p2", "p3"), libraries=[lib_spec(env)])
    cache = LibraryCache(env / "cache")
    run_plan(plan, cache, 3, work_root=env / "work")
    run_plan(plan, cache, 3, work_root=env / "work")
    assert hits(env, "lib") == 3  # once per platform


def test_callbacks(env):
    plan = plan_for(env, platforms=("p1", "p2"))
    started, finished = [], []
    run_plan(plan, LibraryCache(env / "cache"), 1, work_root=env / "work",
             on_start=lambda u: started.append(u.platform_id),
             on_finish=lambda c: finished.append(c.platform_id))
    assert started == finished == ["p1", "p2"]


def test_infrastructure_error_keeps_matrix_complete(env, monkeypatch):
    import geoforge.executor as ex

    def boom(*a, **k):
        raise RuntimeError("disk gone")

    monkeypatch.setattr(ex, "run_build_phase", boom)
    cells = run_plan(plan_for(env, platforms=("p1", "p2")), LibraryCache(env / "cache"), 2,
                     work_root=env / "work")
    assert len(cells) == 2
    assert all(c.build.infrastructure_error == "RuntimeError: disk gone" for c in cells)
    assert all(c.test.status is TestStatus.SKIPPED for c in cells)


def test_cell_result_serialization(env):
    from geoforge.executor import CellResult
    [cell] = run_plan(plan_for(env), LibraryCache(env / "cache"), 1, work_root=env / "work")
    again = CellResult.from_dict(cell.to_dict())
    assert again.to_dict() == cell.to_dict()
    assert again.test.per_test[0].comparison.statistic == cell.test.per_test[0].comparison.statistic


def test_parallelism_must_be_positive(env):
    with pytest.raises(ValueError):
        run_plan(plan_for(env), LibraryCache(env / "cache"), 0, work_root=env / "work")

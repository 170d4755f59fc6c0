"""Synthetic codes, libraries and platforms built from small shell commands.

Every command appends a line to a counter file under ``<root>/counts`` so
tests can check exactly which commands ran.
"""
from pathlib import Path

import yaml

GOLDEN = "0.0 0.0\n0.1 1.0\n0.2 0.5\n0.3 -0.25\n0.4 0.125\n"


def counter(root, name):
    return Path(root) / "counts" / name


def count(root, name) -> int:
    p = counter(root, name)
    return len(p.read_text().splitlines()) if p.exists() else 0


def count_prefix(root, prefix) -> int:
    d = Path(root) / "counts"
    if not d.exists():
        return 0
    return sum(len(p.read_text().splitlines()) for p in d.iterdir() if p.name.startswith(prefix))


def write_project(root, *, codes=("alpha", "beta", "gamma"),
                  platforms=("gcc", "clang", "intel"), fail=(), build_sleep=0.0,
                  with_library=True, tests_per_code=1, timeout_build_s=30,
                  timeout_test_s=30, test_mode="ok"):
    """Write a manifest plus fake repositories; returns the manifest path.

    ``fail`` holds ``(code, platform)`` pairs whose build exits 1.
    ``test_mode`` is ``ok``, ``noise`` (tiny perturbation, passes correlation),
    or ``missing`` (no output written).
    """
    root = Path(root).absolute()
    (root / "counts").mkdir(parents=True, exist_ok=True)
    (root / "golden").mkdir(exist_ok=True)
    (root / "golden" / "signal.dat").write_text(GOLDEN)
    counts = root / "counts"

    libraries = []
    if with_library:
        libraries.append({
            "id": "hdf5", "version": "1.12",
            "build_steps": [
                f'echo "$GEOFORGE_LIBRARY" >> {counts}/lib-hdf5-$GEOFORGE_PLATFORM',
                "mkdir -p {libdir}/lib && touch {libdir}/lib/libhdf5.a",
            ],
            "install_marker": "lib/libhdf5.a",
        })

    if test_mode == "ok":
        body = "printf '" + GOLDEN.replace("\n", "\\n") + "'"
    elif test_mode == "noise":
        noisy = "".join(f"{t} {v * (1 + 1e-5) + 1e-6}\n" for t, v in
                        (map(float, ln.split()) for ln in GOLDEN.splitlines()))
        body = "printf '" + noisy.replace("\n", "\\n") + "'"
    elif test_mode == "missing":
        body = "true"
    else:
        raise ValueError(test_mode)

    tests = []
    for i in range(tests_per_code):
        tests.append({
            "id": f"t{i}",
            "run_steps": [
                f"echo run >> {counts}/test-$GEOFORGE_CODE-$GEOFORGE_PLATFORM",
                "sh ./sim.sh > {output}" if test_mode != "missing" else "sh ./sim.sh",
            ],
            "output_path": f"out/t{i}.dat",
            "golden_path": "golden/signal.dat",
            "comparator": "correlation",
            "threshold": 0.999,
        })

    code_recs = []
    for code in codes:
        repo = root / "repos" / code
        repo.mkdir(parents=True, exist_ok=True)
        if not (repo / "REVISION").exists():
            (repo / "REVISION").write_text("r1\n")
        build = [
            f"echo build >> {counts}/build-$GEOFORGE_CODE-$GEOFORGE_PLATFORM",
        ]
        for c, p in fail:
            if c == code:
                build.append(f'test "$GEOFORGE_PLATFORM" != "{p}"')
        if build_sleep:
            build.append(f"touch {counts}/started-$GEOFORGE_CODE && sleep {build_sleep}")
        build.append(f"test -f {{libdir}}/hdf5/lib/libhdf5.a" if with_library else "true")
        build.append(f"printf '%s\\n' \"{body}\" > sim.sh")
        code_recs.append({
            "id": code,
            "repo_url": str(repo),
            "revision_probe": 'cat "$GEOFORGE_REPO_URL/REVISION"',
            "build_steps": build,
            "library_ids": ["hdf5"] if with_library else [],
            "platform_ids": list(platforms),
            "tests": [t["id"] for t in tests],
            "timeout_build_s": timeout_build_s,
            "timeout_test_s": timeout_test_s,
        })

    manifest = {
        "platforms": [{"id": p, "description": f"synthetic {p}", "env": {"FAKE_CC": p}}
                      for p in platforms],
        "libraries": libraries,
        "tests": tests,
        "codes": code_recs,
    }
    path = root / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=False))
    return path


def set_revision(root, code, revision):
    (Path(root) / "repos" / code / "REVISION").write_text(revision + "\n")

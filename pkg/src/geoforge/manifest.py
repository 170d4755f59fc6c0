"""The central database of codes, libraries, platforms and tests.

A manifest is a single YAML document with four top-level lists::

    platforms:
      - id: gcc
        description: GNU toolchain
        env: {CC: gcc, FC: gfortran}
    libraries:
      - id: hdf5
        version: "1.12"
        build_steps: ["./build-hdf5.sh {libdir}"]
        install_marker: lib/libhdf5.a
    tests:
      - id: plume
        run_steps: ["./citcoms input.cfg > {output}"]
        output_path: out/plume.dat
        golden_path: golden/plume.dat
        comparator: correlation
        threshold: 0.999
    codes:
      - id: citcoms
        repo_url: /srv/repos/citcoms
        revision_probe: "git -C $GEOFORGE_REPO_URL rev-parse HEAD"
        build_steps: ["./configure --with-hdf5={libdir}/hdf5", "make"]
        library_ids: [hdf5]
        platform_ids: [gcc]
        tests: [plume]
        timeout_build_s: 1800
        timeout_test_s: 600

See ``docs/manifest.md`` for the full field reference.  Command templates use
``str.format`` placeholders; a literal brace is written ``{{`` or ``}}``.
"""
from __future__ import annotations

import math
import string
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath
from typing import Optional

import yaml

from .compare import DEFAULT_THRESHOLDS, METRICS

DEFAULT_TIMEOUT_S = 3600

#: Placeholders each kind of command template may use.
TEMPLATE_VARIABLES = {
    "revision_probe": frozenset(),
    "library": frozenset({"workdir", "libdir"}),
    "build": frozenset({"workdir", "libdir", "revision"}),
    "test": frozenset({"workdir", "libdir", "revision", "output"}),
}
ALL_VARIABLES = frozenset({"workdir", "libdir", "revision", "output"})


class ManifestError(ValueError):
    pass


class ManifestParseError(ManifestError):
    def __init__(self, path, line: Optional[int], message: str):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class ManifestValidationError(ManifestError):
    pass


@dataclass(frozen=True)
class PlatformSpec:
    id: str
    description: str = ""
    env: dict = field(default_factory=dict)
    workdir_root: str = ""


@dataclass(frozen=True)
class LibrarySpec:
    id: str
    version: str
    build_steps: tuple
    install_marker: str


@dataclass(frozen=True)
class TestSpec:
    id: str
    run_steps: tuple
    output_path: str
    golden_path: str
    comparator: str
    threshold: Optional[float] = None

    __test__ = False  # not a pytest class

    @property
    def effective_threshold(self) -> float:
        if self.comparator == "exact":
            return 0.0
        if self.threshold is not None:
            return self.threshold
        return DEFAULT_THRESHOLDS[self.comparator]


@dataclass(frozen=True)
class CodeSpec:
    id: str
    repo_url: str
    revision_probe: str
    build_steps: tuple
    library_ids: tuple = ()
    platform_ids: tuple = ()
    tests: tuple = ()
    timeout_build_s: int = DEFAULT_TIMEOUT_S
    timeout_test_s: int = DEFAULT_TIMEOUT_S


@dataclass(frozen=True)
class Manifest:
    codes: dict
    libraries: dict
    platforms: dict
    tests: dict
    base_dir: Path = Path(".")

    def code(self, code_id: str) -> CodeSpec:
        try:
            return self.codes[code_id]
        except KeyError:
            raise ManifestValidationError(f"unknown code id {code_id!r}") from None

    def resolve_path(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else (self.base_dir / p)

    def __eq__(self, other):
        # base_dir is where the file happened to live, not part of its content
        if not isinstance(other, Manifest):
            return NotImplemented
        return (self.codes, self.libraries, self.platforms, self.tests) == (
            other.codes, other.libraries, other.platforms, other.tests)


@dataclass(frozen=True)
class PlanUnit:
    code_id: str
    revision: str
    repo_url: str
    platform: PlatformSpec
    libraries: tuple
    build_steps: tuple
    tests: tuple
    timeout_build_s: int
    timeout_test_s: int

    @property
    def platform_id(self) -> str:
        return self.platform.id


@dataclass(frozen=True)
class TestPlan:
    code_id: str
    revision: str
    units: tuple

    __test__ = False

    @property
    def test_executions(self) -> int:
        return sum(len(u.tests) for u in self.units)


def template_fields(template: str) -> set:
    """Names of the placeholders used by a command template."""
    names = set()
    try:
        for _, name, _, _ in string.Formatter().parse(template):
            if name is not None:
                names.add(name)
    except ValueError as exc:
        raise ManifestValidationError(f"bad command template {template!r}: {exc}") from None
    return names


def render(template: str, **values) -> str:
    return template.format(**values)


def _check_template(template, kind: str, where: str):
    if not isinstance(template, str) or not template.strip():
        raise ManifestValidationError(f"{where}: command must be a nonempty string")
    used = template_fields(template)
    unknown = sorted(used - ALL_VARIABLES)
    if unknown:
        raise ManifestValidationError(
            f"{where}: unknown template variable(s) {', '.join(unknown)} in {template!r}"
        )
    misplaced = sorted(used - TEMPLATE_VARIABLES[kind])
    if misplaced:
        raise ManifestValidationError(
            f"{where}: variable(s) {', '.join(misplaced)} not available in {kind} commands"
        )


def _require(record: dict, key: str, where: str):
    if key not in record or record[key] is None:
        raise ManifestValidationError(f"{where}: missing field {key!r}")
    return record[key]


def _str_list(value, where: str, key: str) -> tuple:
    if isinstance(value, str) or not isinstance(value, (list, tuple)):
        raise ManifestValidationError(f"{where}: {key!r} must be a list")
    for item in value:
        if not isinstance(item, str):
            raise ManifestValidationError(f"{where}: {key!r} entries must be strings")
    return tuple(value)


def _positive_int(value, where: str, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        raise ManifestValidationError(f"{where}: {key!r} must be a positive integer")
    return value


def _platform(rec: dict) -> PlatformSpec:
    pid = _require(rec, "id", "platform")
    where = f"platform {pid!r}"
    env = rec.get("env") or {}
    if not isinstance(env, dict):
        raise ManifestValidationError(f"{where}: 'env' must be a mapping")
    for name, value in env.items():
        if not isinstance(name, str) or not name or "=" in name:
            raise ManifestValidationError(f"{where}: invalid environment variable name {name!r}")
        if not isinstance(value, (str, int, float)) or isinstance(value, bool):
            raise ManifestValidationError(f"{where}: env {name} must be a scalar")
    return PlatformSpec(
        id=str(pid),
        description=str(rec.get("description", "")),
        env={k: str(v) for k, v in env.items()},
        workdir_root=str(rec.get("workdir_root") or ""),
    )


def _library(rec: dict) -> LibrarySpec:
    lid = _require(rec, "id", "library")
    where = f"library {lid!r}"
    steps = _str_list(_require(rec, "build_steps", where), where, "build_steps")
    if not steps:
        raise ManifestValidationError(f"{where}: build_steps is empty")
    for i, step in enumerate(steps, 1):
        _check_template(step, "library", f"{where} step {i}")
    marker = str(_require(rec, "install_marker", where))
    if PurePosixPath(marker).is_absolute() or ".." in PurePosixPath(marker).parts:
        raise ManifestValidationError(f"{where}: install_marker must be a relative path")
    return LibrarySpec(str(lid), str(_require(rec, "version", where)), steps, marker)


def _test(rec: dict) -> TestSpec:
    tid = _require(rec, "id", "test")
    where = f"test {tid!r}"
    steps = _str_list(rec.get("run_steps", []), where, "run_steps")
    for i, step in enumerate(steps, 1):
        _check_template(step, "test", f"{where} step {i}")
    out = str(_require(rec, "output_path", where))
    parts = PurePosixPath(out).parts
    if not out or PurePosixPath(out).is_absolute() or ".." in parts or out.startswith("~"):
        raise ManifestValidationError(
            f"{where}: output_path {out!r} must be relative without parent traversal"
        )
    comparator = _require(rec, "comparator", where)
    if comparator not in METRICS:
        raise ManifestValidationError(
            f"{where}: comparator {comparator!r} not one of {', '.join(METRICS)}"
        )
    threshold = rec.get("threshold")
    if threshold is not None:
        if isinstance(threshold, bool) or not isinstance(threshold, (int, float)):
            raise ManifestValidationError(f"{where}: threshold must be a number")
        threshold = float(threshold)
        if not math.isfinite(threshold):
            raise ManifestValidationError(f"{where}: threshold must be finite")
        if comparator == "correlation" and not -1.0 <= threshold <= 1.0:
            raise ManifestValidationError(f"{where}: correlation threshold must lie in [-1, 1]")
        if comparator in ("absolute", "relative", "l2") and threshold < 0:
            raise ManifestValidationError(f"{where}: tolerance must be >= 0")
    elif comparator in ("absolute", "relative"):
        raise ManifestValidationError(f"{where}: {comparator} comparator needs an explicit threshold")
    return TestSpec(str(tid), steps, out, str(_require(rec, "golden_path", where)),
                    comparator, threshold)


def _code(rec: dict) -> CodeSpec:
    cid = _require(rec, "id", "code")
    where = f"code {cid!r}"
    steps = _str_list(_require(rec, "build_steps", where), where, "build_steps")
    if not steps:
        raise ManifestValidationError(f"{where}: build_steps is empty")
    for i, step in enumerate(steps, 1):
        _check_template(step, "build", f"{where} step {i}")
    probe = _require(rec, "revision_probe", where)
    _check_template(probe, "revision_probe", f"{where} revision_probe")
    return CodeSpec(
        id=str(cid),
        repo_url=str(rec.get("repo_url", "")),
        revision_probe=probe,
        build_steps=steps,
        library_ids=_str_list(rec.get("library_ids", []), where, "library_ids"),
        platform_ids=_str_list(rec.get("platform_ids", []), where, "platform_ids"),
        tests=_str_list(rec.get("tests", []), where, "tests"),
        timeout_build_s=_positive_int(rec.get("timeout_build_s", DEFAULT_TIMEOUT_S),
                                      where, "timeout_build_s"),
        timeout_test_s=_positive_int(rec.get("timeout_test_s", DEFAULT_TIMEOUT_S),
                                     where, "timeout_test_s"),
    )


def _index(records, kind: str) -> dict:
    out = {}
    for rec in records:
        if not rec.id:
            raise ManifestValidationError(f"{kind} with empty id")
        if rec.id in out:
            raise ManifestValidationError(f"duplicate {kind} id {rec.id!r}")
        out[rec.id] = rec
    return out


def validate(manifest: Manifest):
    """Check cross-references; raises :class:`ManifestValidationError`."""
    for code in manifest.codes.values():
        where = f"code {code.id!r}"
        if not code.platform_ids:
            raise ManifestValidationError(f"{where}: must target at least one platform")
        for kind, ids, table in (("library", code.library_ids, manifest.libraries),
                                 ("platform", code.platform_ids, manifest.platforms),
                                 ("test", code.tests, manifest.tests)):
            if len(set(ids)) != len(ids):
                raise ManifestValidationError(f"{where}: {kind} listed twice")
            for ref in ids:
                if ref not in table:
                    raise ManifestValidationError(f"{where}: unknown {kind} {ref!r}")


def manifest_from_dict(data, base_dir=Path(".")) -> Manifest:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ManifestValidationError("manifest must be a mapping with codes/libraries/platforms/tests")
    unknown = set(data) - {"codes", "libraries", "platforms", "tests"}
    if unknown:
        raise ManifestValidationError(f"unknown top-level section(s): {', '.join(sorted(unknown))}")

    def records(section):
        items = data.get(section) or []
        if not isinstance(items, list) or not all(isinstance(r, dict) for r in items):
            raise ManifestValidationError(f"section {section!r} must be a list of mappings")
        return items

    manifest = Manifest(
        codes=_index([_code(r) for r in records("codes")], "code"),
        libraries=_index([_library(r) for r in records("libraries")], "library"),
        platforms=_index([_platform(r) for r in records("platforms")], "platform"),
        tests=_index([_test(r) for r in records("tests")], "test"),
        base_dir=Path(base_dir),
    )
    validate(manifest)
    return manifest


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc.strerror or exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ManifestParseError(path, line, f"malformed YAML: {problem}") from None
    return manifest_from_dict(data, base_dir=path.resolve().parent)


def manifest_to_dict(manifest: Manifest) -> dict:
    def test_rec(t: TestSpec):
        rec = {"id": t.id, "run_steps": list(t.run_steps), "output_path": t.output_path,
               "golden_path": t.golden_path, "comparator": t.comparator}
        if t.threshold is not None:
            rec["threshold"] = t.threshold
        return rec

    return {
        "platforms": [{"id": p.id, "description": p.description, "env": dict(p.env),
                       "workdir_root": p.workdir_root} for p in manifest.platforms.values()],
        "libraries": [{"id": lib.id, "version": lib.version, "build_steps": list(lib.build_steps),
                       "install_marker": lib.install_marker} for lib in manifest.libraries.values()],
        "tests": [test_rec(t) for t in manifest.tests.values()],
        "codes": [{"id": c.id, "repo_url": c.repo_url, "revision_probe": c.revision_probe,
                   "build_steps": list(c.build_steps), "library_ids": list(c.library_ids),
                   "platform_ids": list(c.platform_ids), "tests": list(c.tests),
                   "timeout_build_s": c.timeout_build_s, "timeout_test_s": c.timeout_test_s}
                  for c in manifest.codes.values()],
    }


def dump_manifest(manifest: Manifest) -> str:
    return yaml.safe_dump(manifest_to_dict(manifest), sort_keys=False, default_flow_style=False)


def save_manifest(manifest: Manifest, path):
    Path(path).write_text(dump_manifest(manifest))


def generate_test_plan(manifest: Manifest, code_id: str, revision: str) -> TestPlan:
    """Expand one code into a (build, tests) unit per declared platform."""
    code = manifest.code(code_id)
    if not code.platform_ids:
        raise ManifestValidationError(f"code {code_id!r}: must target at least one platform")
    try:
        libraries = tuple(manifest.libraries[i] for i in code.library_ids)
        tests = tuple(
            replace(manifest.tests[t],
                    golden_path=str(manifest.resolve_path(manifest.tests[t].golden_path)))
            for t in code.tests
        )
        platforms = [manifest.platforms[p] for p in code.platform_ids]
    except KeyError as exc:
        raise ManifestValidationError(f"code {code_id!r}: dangling reference {exc.args[0]!r}") from None
    units = tuple(
        PlanUnit(code_id=code.id, revision=revision, repo_url=code.repo_url, platform=platform,
                 libraries=libraries, build_steps=code.build_steps, tests=tests,
                 timeout_build_s=code.timeout_build_s, timeout_test_s=code.timeout_test_s)
        for platform in platforms
    )
    return TestPlan(code.id, revision, units)

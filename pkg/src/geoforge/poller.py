"""Repository polling.

A poll cycle probes each code for its current revision, enqueues one test
run per changed code and only then persists the new revisions.  If the
process dies between the enqueue and the state write, the next cycle sees
the same change again.  The job may then run twice, but it is never lost.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .manifest import CodeSpec, Manifest
from .process import capture

log = logging.getLogger(__name__)

DEFAULT_POLL_INTERVAL_S = 300
DEFAULT_PROBE_TIMEOUT_S = 60


class ProbeError(RuntimeError):
    pass


@dataclass
class PollState:
    revisions: dict = field(default_factory=dict)
    updated_at: Optional[float] = None

    @classmethod
    def load(cls, path) -> "PollState":
        path = Path(path)
        if not path.exists():
            return cls()
        data = json.loads(path.read_text())
        return cls(dict(data.get("revisions", {})), data.get("updated_at"))

    def save(self, path):
        """Write atomically: temp file in the same directory, fsync, rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps({"revisions": self.revisions, "updated_at": self.updated_at},
                             indent=2, sort_keys=True)
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(payload + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise


@dataclass(frozen=True)
class ChangeEvent:
    code_id: str
    old_revision: Optional[str]
    new_revision: str
    detected_at: float


def probe_revision(code: CodeSpec, *, cwd=None, timeout: float = DEFAULT_PROBE_TIMEOUT_S) -> str:
    env = dict(os.environ, GEOFORGE_REPO_URL=code.repo_url)
    outcome, text = capture(code.revision_probe, cwd=cwd, env=env, timeout=timeout)
    if outcome.timed_out:
        raise ProbeError(f"revision probe for {code.id!r} timed out after {timeout}s")
    if outcome.returncode != 0:
        raise ProbeError(f"revision probe for {code.id!r} exited {outcome.returncode}")
    revision = text.strip()
    if not revision:
        raise ProbeError(f"revision probe for {code.id!r} printed nothing")
    return revision


def poll_once(manifest: Manifest, state: PollState, *,
              timeout: float = DEFAULT_PROBE_TIMEOUT_S) -> list[ChangeEvent]:
    """Probe every code once and report those whose revision changed.

    ``state`` is not modified; see :func:`apply_events`.  A failing probe is
    logged and skipped.
    """
    events = []
    for code in manifest.codes.values():
        try:
            revision = probe_revision(code, cwd=manifest.base_dir, timeout=timeout)
        except (ProbeError, OSError) as exc:
            log.warning("%s", exc)
            continue
        old = state.revisions.get(code.id)
        if revision != old:
            events.append(ChangeEvent(code.id, old, revision, time.time()))
    return events


def enqueue_changes(events, queue) -> list[int]:
    """Enqueue one job per event, skipping revisions already queued.

    The skip covers a crash after enqueueing but before the poll state was
    saved: the next poll sees the same change and must not queue it twice.
    """
    ids = []
    for ev in events:
        jid = queue.enqueue_new(ev.code_id, ev.new_revision)
        if jid is not None:
            ids.append(jid)
    return ids


def apply_events(state: PollState, events) -> PollState:
    for ev in events:
        state.revisions[ev.code_id] = ev.new_revision
    if events:
        state.updated_at = time.time()
    return state


def poll_cycle(manifest: Manifest, state_path, queue, *,
               timeout: float = DEFAULT_PROBE_TIMEOUT_S) -> list[int]:
    """One poll: probe, enqueue, then persist.  Returns the new job ids."""
    state = PollState.load(state_path)
    events = poll_once(manifest, state, timeout=timeout)
    ids = enqueue_changes(events, queue)
    if events:
        apply_events(state, events).save(state_path)
    for ev in events:
        log.info("%s: %s -> %s", ev.code_id, ev.old_revision, ev.new_revision)
    return ids

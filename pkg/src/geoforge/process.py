"""Shell step execution with wall-clock timeouts.

Each step runs in its own session so a timeout can kill the whole process
group, including any children a simulation code spawns.
"""
from __future__ import annotations

import os
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass
from typing import IO, Mapping, Optional

KILL_GRACE_S = 2.0


@dataclass
class StepOutcome:
    command: str
    returncode: Optional[int]
    timed_out: bool
    duration_s: float

    @property
    def ok(self) -> bool:
        return not self.timed_out and self.returncode == 0


def _kill_group(proc: subprocess.Popen):
    try:
        os.killpg(proc.pid, signal.SIGTERM)
    except ProcessLookupError:
        return
    try:
        proc.wait(timeout=KILL_GRACE_S)
    except subprocess.TimeoutExpired:
        pass
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass
    proc.wait()


def run_step(command: str, *, cwd=None, env: Optional[Mapping[str, str]] = None,
             timeout: Optional[float] = None, output: Optional[IO[bytes]] = None,
             stderr=subprocess.STDOUT) -> StepOutcome:
    """Run ``command`` through ``/bin/sh``, interleaving stdout and stderr into ``output``.

    ``timeout`` of zero or less is treated as already expired.
    """
    start = time.monotonic()
    if timeout is not None and timeout <= 0:
        return StepOutcome(command, None, True, 0.0)
    sink = output if output is not None else subprocess.DEVNULL
    proc = subprocess.Popen(command, shell=True, cwd=cwd, env=dict(env) if env is not None else None,
                            stdin=subprocess.DEVNULL, stdout=sink, stderr=stderr,
                            start_new_session=True)
    try:
        returncode = proc.wait(timeout=timeout)
        timed_out = False
    except subprocess.TimeoutExpired:
        _kill_group(proc)
        returncode, timed_out = None, True
    except BaseException:
        _kill_group(proc)
        raise
    finally:
        if output is not None:
            output.flush()
    return StepOutcome(command, returncode, timed_out, time.monotonic() - start)


def capture(command: str, *, cwd=None, env=None, timeout: Optional[float] = None):
    """Run ``command`` and return ``(StepOutcome, stdout text)``; stderr is discarded."""
    with tempfile.TemporaryFile() as buf:
        outcome = run_step(command, cwd=cwd, env=env, timeout=timeout, output=buf,
                           stderr=subprocess.DEVNULL)
        buf.seek(0)
        text = buf.read().decode("utf-8", errors="replace")
    return outcome, text

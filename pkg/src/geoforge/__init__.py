"""Build-and-test orchestration for scientific simulation codes."""

from .compare import (
    ComparisonResult,
    Signal,
    compare_absolute,
    compare_correlation,
    compare_exact,
    compare_files,
    compare_l2,
    compare_relative,
    difference_profile,
    parse_timeseries,
)
from .executor import CellResult, LibraryCache, prepare_library, run_build_phase, run_plan, run_test_phase
from .manifest import Manifest, generate_test_plan, load_manifest
from .poller import PollState, enqueue_changes, poll_once
from .queue import JobQueue, JobStatus
from .report import build_matrix, render_html, render_summary

__version__ = "0.1.0"

"""
Surviving a crash with the durable job queue
=============================================

Jobs live in an append-only log.  A worker that dies after claiming a job
leaves it Claimed on disk; the next process returns it to Pending before
doing anything else.
"""

import tempfile
from pathlib import Path

from geoforge.queue import JobQueue

log = Path(tempfile.mkdtemp()) / "queue.log"

q = JobQueue(log)
q.enqueue("wavesim", "a1b2c3")
q.enqueue("mantleconv", "9f8e7d")
job = q.claim()
print("claimed job", job.job.id, "for", job.job.code_id)

# pretend the machine went down here: drop the handle without acknowledging
del q

# a fresh process replays the log and recovers the orphan
q = JobQueue(log)
print("orphans recovered:", q.recover())
for rec in q.records():
    print(f"  job {rec.job.id}: {rec.status.value}, attempts {rec.attempts}")

# finish everything, then compact the log down to the open jobs
while (rec := q.claim()) is not None:
    q.acknowledge(rec.job.id, "Done")
print("log lines before compaction:", len(log.read_text().splitlines()))
q.compact()
print("log lines after compaction:", len(log.read_text().splitlines()))

# a repeated poll of the same revision does not queue it twice
print("re-enqueue same revision ->", q.enqueue_new("wavesim", "a1b2c3"))
print("new revision ->", q.enqueue_new("wavesim", "d4e5f6"))

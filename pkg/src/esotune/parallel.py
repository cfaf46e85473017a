"""Ordered fan-out of deterministic work over a process pool.

Every caller splits its work into chunks whose content does not depend
on the worker count, then reassembles results in submission order, so
artifacts stay byte-identical whether one process or eight did the work.
"""

from __future__ import annotations

import multiprocessing

__all__ = ["TASK_CHUNK", "map_ordered"]

# Granularity of pooled work, in samples or grid rows per task.  Small
# enough that modest workloads still fan out, large enough that the
# vectorized simulation batches stay efficient.
TASK_CHUNK = 256


def _context():
    methods = multiprocessing.get_all_start_methods()
    return multiprocessing.get_context("fork" if "fork" in methods else "spawn")


def map_ordered(worker, tasks, jobs: int):
    """Yield ``worker(task)`` for each task, in task order.

    With ``jobs`` == 1 (or a single task) everything runs in-process;
    otherwise ``worker`` must be a module-level callable and each task
    picklable.
    """
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    tasks = list(tasks)
    if jobs == 1 or len(tasks) <= 1:
        for task in tasks:
            yield worker(task)
        return
    with _context().Pool(min(jobs, len(tasks))) as pool:
        yield from pool.imap(worker, tasks)

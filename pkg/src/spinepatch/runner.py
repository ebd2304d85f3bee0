"""Per-scan fan-out shared by the patch generators and the synthetic generator."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor

from .errors import ImageIOError

log = logging.getLogger(__name__)


def _call(args):
    fn, task = args
    try:
        return True, fn(*task)
    except (OSError, ImageIOError) as exc:
        return False, f"{type(exc).__name__}: {exc}"


def run_per_scan(fn, tasks, jobs: int = 1):
    """Apply ``fn(*task)`` to each task, in input order.

    Returns ``(results, failures)`` where ``failures`` lists
    ``(task_index, message)`` for tasks that raised an I/O or decoding error;
    those tasks contribute nothing to ``results``. Output is identical for
    any ``jobs >= 1``.
    """
    payload = [(fn, t) for t in tasks]
    if jobs <= 1 or len(tasks) <= 1:
        outcomes = [_call(p) for p in payload]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_call, payload, chunksize=max(1, len(tasks) // (4 * jobs))))
    results, failures = [], []
    for i, (ok, value) in enumerate(outcomes):
        if ok:
            results.append(value)
        else:
            log.error("task %d failed: %s", i, value)
            failures.append((i, value))
    return results, failures

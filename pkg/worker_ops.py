"""
Worker Pool
===========
Runs independent tasks (Monte Carlo chunks, scan points, fits) on a small
pool of worker threads that drain a shared task queue.

Architecture:
- Task queue: (index, callable, args) tuples; one None sentinel per worker
- Worker threads: pull tasks until they see the sentinel
- Result slots: one per task index, so callers always get results in
  submission order no matter which worker finished first

Ordered results make reductions (sums over chunks) independent of the
thread count, which keeps every output byte-identical for a fixed seed.
"""

import logging
import queue
import threading

logger = logging.getLogger("Worker")

# =============================================================================
# CONFIGURATION
# =============================================================================

DEFAULT_THREADS = 1
QUEUE_POLL_TIMEOUT = 0.1    # seconds between shutdown-flag checks


# =============================================================================
# WORKER THREAD
# =============================================================================

def _worker_loop(task_queue, results, errors, shutdown_flag):
    while not shutdown_flag.is_set():
        try:
            task = task_queue.get(timeout=QUEUE_POLL_TIMEOUT)
        except queue.Empty:
            continue

        # Sentinel value signals shutdown
        if task is None:
            task_queue.task_done()
            break

        index, fn, args = task
        try:
            results[index] = fn(*args)
        except Exception as e:
            logger.debug("[Worker] Task %d failed: %s", index, e)
            errors[index] = e
            shutdown_flag.set()
        task_queue.task_done()


# =============================================================================
# PUBLIC API
# =============================================================================

def run_ordered(fn, arg_list, threads=DEFAULT_THREADS):
    """
    Evaluates fn(*args) for every entry of arg_list and returns the results
    in the same order. The first exception raised by any task is re-raised
    after all workers have stopped.
    """
    arg_list = list(arg_list)
    if not arg_list:
        return []
    threads = max(1, min(int(threads or 1), len(arg_list)))

    # Serial path: no threads, same results
    if threads == 1:
        return [fn(*args) for args in arg_list]

    task_queue = queue.Queue()
    results = [None] * len(arg_list)
    errors = {}
    shutdown_flag = threading.Event()

    for index, args in enumerate(arg_list):
        task_queue.put((index, fn, args))
    for _ in range(threads):
        task_queue.put(None)

    workers = [
        threading.Thread(target=_worker_loop, args=(task_queue, results, errors, shutdown_flag),
                         daemon=True)
        for _ in range(threads)
    ]
    logger.debug("[Worker] %d tasks on %d threads", len(arg_list), threads)
    for w in workers:
        w.start()
    for w in workers:
        w.join()

    if errors:
        raise errors[min(errors)]
    return results

"""Order-preserving fan-out of independent tasks."""

from concurrent.futures import ProcessPoolExecutor


def ordered_map(fn, tasks, jobs=1):
    """``[fn(t) for t in tasks]``, optionally across ``jobs`` worker processes.

    Results always come back in task order, so reductions over them do not
    depend on the worker count.
    """
    tasks = list(tasks)
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))

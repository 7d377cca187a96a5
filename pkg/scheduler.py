"""
Grid-point job scheduler. Jobs run in a process pool bounded by --jobs; the
calling process is the single result writer.
"""
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Any, Callable, List, Optional, Sequence, Tuple

import psutil
from loguru import logger

from core.errors import ConfigError


def run_jobs(fn: Callable[..., Any], jobs_args: Sequence[Tuple], jobs: int = 1,
             on_result: Optional[Callable[[Any], None]] = None) -> List[Any]:
    """
    Runs fn(*args) for every entry of jobs_args. Results come back in submission
    order; `on_result` is called once per finished job, always from this process.
    """
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    cpus = psutil.cpu_count(logical=True) or 1
    if jobs > cpus:
        logger.warning(f"[Scheduler] --jobs {jobs} exceeds {cpus} logical CPUs; using {cpus}")
        jobs = cpus
    logger.info(f"[Scheduler] {len(jobs_args)} jobs, {jobs} worker(s), "
                f"ram in use {psutil.virtual_memory().percent:.0f}%")
    results: List[Any] = [None] * len(jobs_args)
    if jobs == 1 or len(jobs_args) <= 1:
        for i, args in enumerate(jobs_args):
            results[i] = fn(*args)
            if on_result is not None:
                on_result(results[i])
            logger.info(f"[Scheduler] job {i + 1}/{len(jobs_args)} done")
        return results

    with ProcessPoolExecutor(max_workers=min(jobs, len(jobs_args))) as pool:
        futures = {pool.submit(fn, *args): i for i, args in enumerate(jobs_args)}
        done = 0
        for future in as_completed(futures):
            i = futures[future]
            try:
                results[i] = future.result()
            except Exception as e:
                logger.error(f"[Scheduler] job {i} crashed: {e}")
                raise
            done += 1
            if on_result is not None:
                on_result(results[i])
            logger.info(f"[Scheduler] job {i + 1} finished ({done}/{len(jobs_args)})")
    return results

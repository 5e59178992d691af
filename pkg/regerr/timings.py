"""Phase timing for pipeline profiling.

Enabled via the REGERR_DEBUG_TIMING environment variable ("1", "true" or
"yes"); when disabled every helper is a no-op.
"""

import os
import time
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Union

TIMING_ENV = "REGERR_DEBUG_TIMING"


def timing_enabled() -> bool:
    return os.getenv(TIMING_ENV, "").lower() in ("1", "true", "yes")


# Per-run lists of (duration, label), keyed by statistic name
_timing_stats: Dict[str, List[tuple[float, str]]] = {}


@contextmanager
def log_timing(
    phase: Union[str, Callable[[], str]],
    t_start: Optional[float] = None,
) -> Iterator[None]:
    """Print the wall-clock duration of a phase.

    Args:
        phase: Phase name, or a callable evaluated at the end for dynamic names
        t_start: Optional run start time to also print the elapsed total

    Example:
        with log_timing(lambda: f"Simulate ({n} deformations)", t0):
            run()
    """
    if not timing_enabled():
        yield
        return

    t_phase_start = time.perf_counter()
    try:
        yield
    finally:
        t_now = time.perf_counter()
        phase_name = phase() if callable(phase) else phase
        line = f"[TIMING] {phase_name:40s} {t_now - t_phase_start:8.3f}s"
        if t_start is not None:
            line += f" (total: {t_now - t_start:8.3f}s)"
        print(line, flush=True)


@contextmanager
def timing_stat(name: str, label: str = "") -> Iterator[None]:
    """Record the duration of a repeated operation under ``name``."""
    if not timing_enabled():
        yield
        return

    t_start = time.perf_counter()
    try:
        yield
    finally:
        _timing_stats.setdefault(name, []).append((time.perf_counter() - t_start, label))


def report_timing_statistics(top: int = 5) -> None:
    """Print count, total, mean and slowest entries of every recorded statistic."""
    if not timing_enabled():
        return
    for name, timings in sorted(_timing_stats.items()):
        if not timings:
            continue
        total = sum(t[0] for t in timings)
        print(f"\n[TIMING] {name}:", flush=True)
        print(f"[TIMING]   Count: {len(timings)}", flush=True)
        print(f"[TIMING]   Total time: {total:.3f}s", flush=True)
        print(f"[TIMING]   Mean: {total / len(timings) * 1000:.1f}ms", flush=True)
        for duration, label in sorted(timings, key=lambda x: x[0], reverse=True)[:top]:
            print(f"[TIMING]     {label or '-'}: {duration * 1000:.1f}ms", flush=True)
    _timing_stats.clear()

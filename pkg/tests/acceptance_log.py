"""Shared record of acceptance outcomes, printed at the end of the run."""

from __future__ import annotations

import contextlib
import time

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS or FAIL for one criterion; the wrapped assertions decide."""
    t0 = time.perf_counter()
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        detail = "; ".join(notes + [type(exc).__name__ + (f": {exc}" if str(exc) else "")])
        RESULTS[number] = f"criterion {number:2d} FAIL  {title} ({detail.splitlines()[0]})"
        print(RESULTS[number])
        raise
    took = time.perf_counter() - t0
    RESULTS[number] = f"criterion {number:2d} PASS  {title} ({'; '.join(notes + [f'{took:.1f}s'])})"
    print(RESULTS[number])

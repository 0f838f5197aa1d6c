"""Deterministic process-pool mapping with a once-per-worker payload."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

_WORKER_STATE = None


def _worker_init(fn, payload):
    global _WORKER_STATE
    _WORKER_STATE = (fn, payload)


def _worker_call(item):
    fn, payload = _WORKER_STATE
    return fn(payload, item)


def payload_map(fn, payload, items, workers: int = 1) -> list:
    """Map ``fn(payload, item)`` over items; results keep input order.

    With ``workers`` <= 1 this is a plain loop. Otherwise the payload is
    shipped to each worker once at pool start, so per-item pickling stays
    small and the reduction is deterministic regardless of scheduling.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(payload, item) for item in items]
    with ProcessPoolExecutor(
        max_workers=min(workers, len(items)), initializer=_worker_init, initargs=(fn, payload)
    ) as ex:
        return list(ex.map(_worker_call, items))

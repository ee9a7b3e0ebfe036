"""In-process FIFO queue with at-least-once delivery semantics.

Consumers dequeue an item, process it, then ack. An item dequeued but not
acked within the visibility timeout is redelivered to the next consumer,
so a consumer crash between dequeue and ack never loses work. Redelivered
items take priority over fresh ones (they are older).
"""

from __future__ import annotations

import itertools
import threading
import time
from typing import Any


class DurableQueue:
    def __init__(self, visibility_timeout: float = 10.0):
        self.visibility_timeout = visibility_timeout
        self._lock = threading.Lock()
        self._ready: list[tuple[int, Any]] = []
        self._in_flight: dict[int, tuple[Any, float]] = {}
        self._ids = itertools.count(1)
        self._not_empty = threading.Condition(self._lock)

    def enqueue(self, payload: Any) -> int:
        with self._lock:
            item_id = next(self._ids)
            self._ready.append((item_id, payload))
            self._not_empty.notify()
            return item_id

    def dequeue(self) -> "tuple[int, Any] | None":
        """Non-blocking: redeliver the oldest expired in-flight item, else
        the head of the queue; None when nothing is deliverable."""
        with self._lock:
            return self._take(time.monotonic())

    def dequeue_wait(self, timeout: float) -> "tuple[int, Any] | None":
        deadline = time.monotonic() + timeout
        with self._lock:
            while True:
                item = self._take(time.monotonic())
                if item is not None:
                    return item
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                # Wake early enough to notice visibility expirations.
                self._not_empty.wait(min(remaining, 0.05))

    def _take(self, now: float) -> "tuple[int, Any] | None":
        expired = [
            (item_id, payload)
            for item_id, (payload, deadline) in self._in_flight.items()
            if deadline <= now
        ]
        if expired:
            item_id, payload = min(expired)
            self._in_flight[item_id] = (payload, now + self.visibility_timeout)
            return item_id, payload
        if self._ready:
            item_id, payload = self._ready.pop(0)
            self._in_flight[item_id] = (payload, now + self.visibility_timeout)
            return item_id, payload
        return None

    def ack(self, item_id: int) -> None:
        with self._lock:
            self._in_flight.pop(item_id, None)

    def depth(self) -> int:
        with self._lock:
            return len(self._ready) + len(self._in_flight)

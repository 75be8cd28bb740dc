"""FIFO operator streams and completion events.

Each stream owns one worker thread that drains its queue in submission order.
Nothing orders work across streams; callers chain events for that.
"""

from __future__ import annotations

import itertools
import queue
import threading
from typing import Callable

from ..errors import InvalidStreamError

PENDING = "pending"
DONE = "done"
FAILED = "failed"

_event_ids = itertools.count(1)


class CompletionEvent:
    """Awaitable marker for one enqueued operation."""

    def __init__(self):
        self.id = next(_event_ids)
        self.state = PENDING
        self.error: BaseException | None = None
        self._flag = threading.Event()
        self._lock = threading.Lock()
        self._callbacks: list[Callable[[CompletionEvent], None]] = []

    @classmethod
    def completed(cls) -> "CompletionEvent":
        ev = cls()
        ev.set_done()
        return ev

    @property
    def done(self) -> bool:
        return self._flag.is_set()

    def set_done(self) -> None:
        self._finish(DONE, None)

    def set_failed(self, error: BaseException) -> None:
        self._finish(FAILED, error)

    def _finish(self, state, error):
        with self._lock:
            if self.state != PENDING:
                raise RuntimeError(f"event {self.id} already {self.state}")
            self.state = state
            self.error = error
            callbacks, self._callbacks = self._callbacks, []
            self._flag.set()
        for cb in callbacks:
            cb(self)

    def then(self, callback: Callable[["CompletionEvent"], None]) -> "CompletionEvent":
        """Run ``callback(event)`` once the event leaves the pending state."""
        with self._lock:
            if self.state == PENDING:
                self._callbacks.append(callback)
                return self
        callback(self)
        return self

    def wait(self, timeout: float | None = None) -> "CompletionEvent":
        if not self._flag.wait(timeout):
            raise TimeoutError(f"event {self.id} still pending after {timeout}s")
        if self.state == FAILED:
            raise self.error
        return self

    def __repr__(self):
        return f"CompletionEvent(id={self.id}, state={self.state})"


_STOP = object()


class StreamQueue:
    def __init__(self, stream_id: int):
        self.stream_id = stream_id
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._lock = threading.Lock()
        self._pending = 0
        self._last: CompletionEvent = CompletionEvent.completed()
        self._destroyed = False
        self._worker = threading.Thread(
            target=self._drain, name=f"tensorforge-stream-{stream_id}", daemon=True
        )
        self._worker.start()

    @property
    def destroyed(self) -> bool:
        return self._destroyed

    @property
    def pending(self) -> int:
        return self._pending

    def submit(self, fn: Callable[[], None]) -> CompletionEvent:
        ev = CompletionEvent()
        with self._lock:
            if self._destroyed:
                raise InvalidStreamError(f"stream {self.stream_id} has been destroyed")
            self._pending += 1
            self._last = ev
            self._queue.put((fn, ev))
        return ev

    def synchronize(self) -> None:
        """Block until everything submitted so far has finished (errors are not raised)."""
        with self._lock:
            last = self._last
        last._flag.wait()

    def destroy(self) -> None:
        with self._lock:
            if self._destroyed:
                return
            self._destroyed = True
            self._queue.put((_STOP, None))
        self._worker.join()

    def _drain(self):
        while True:
            fn, ev = self._queue.get()
            if fn is _STOP:
                return
            try:
                fn()
            except BaseException as exc:  # noqa: BLE001 - errors travel through the event
                ev.set_failed(exc)
            else:
                ev.set_done()
            finally:
                with self._lock:
                    self._pending -= 1

    def __repr__(self):
        return f"StreamQueue(id={self.stream_id}, pending={self._pending})"

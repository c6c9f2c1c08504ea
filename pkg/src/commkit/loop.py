"""The hidden communication thread.

Two interchangeable implementations share one small interface
(``call_soon``, ``call_later``, ``run_sync``, ``in_thread``, ``stop``):

* :class:`QueueLoop` - a plain work queue plus timer heap; cheap cross-thread
  wakeups, used with the in-process broker.
* :class:`AsyncioLoop` - an asyncio event loop, needed by socket-driven
  transports such as the AMQP one.
"""
from __future__ import annotations

import asyncio
import collections
import concurrent.futures
import heapq
import itertools
import logging
import queue
import threading
import time
from typing import Any, Callable, Optional

__all__ = ("QueueLoop", "AsyncioLoop")

_LOGGER = logging.getLogger(__name__)


def _run_sync(loop, fn: Callable, args: tuple, timeout: Optional[float]) -> Any:
    if loop.in_thread:
        return fn(*args)
    result: concurrent.futures.Future = concurrent.futures.Future()

    def runner():
        if not result.set_running_or_notify_cancel():
            return
        try:
            result.set_result(fn(*args))
        except BaseException as exc:  # pylint: disable=broad-except
            result.set_exception(exc)

    loop.call_soon(runner)
    return result.result(timeout)


class _Timer:
    __slots__ = ("when", "fn", "args", "cancelled")

    def __init__(self, when: float, fn: Callable, args: tuple):
        self.when = when
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class QueueLoop:
    """A daemon thread draining a FIFO of callables, with one-shot timers.

    ``debug_slow_callback`` logs a warning for any callback that runs longer
    than that many seconds.
    """

    def __init__(self, name: str = "commkit-comm", debug_slow_callback: Optional[float] = None):
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._timers: list = []
        self._seq = itertools.count()
        self._slow = debug_slow_callback
        self._stopped = False
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    @property
    def in_thread(self) -> bool:
        return threading.current_thread() is self._thread

    @property
    def alive(self) -> bool:
        return self._thread.is_alive() and not self._stopped

    def call_soon(self, fn: Callable, *args: Any) -> None:
        self._queue.put((fn, args))

    def call_later(self, delay: float, fn: Callable, *args: Any) -> _Timer:
        """Must be called on the loop thread."""
        timer = _Timer(time.monotonic() + delay, fn, args)
        heapq.heappush(self._timers, (timer.when, next(self._seq), timer))
        return timer

    def run_sync(self, fn: Callable, *args: Any, timeout: Optional[float] = None) -> Any:
        return _run_sync(self, fn, args, timeout)

    def _invoke(self, fn: Callable, args: tuple) -> None:
        started = time.monotonic() if self._slow is not None else 0.0
        try:
            fn(*args)
        except Exception:  # pylint: disable=broad-except
            _LOGGER.exception("callback %r raised on the communication thread", fn)
        if self._slow is not None:
            took = time.monotonic() - started
            if took > self._slow:
                _LOGGER.warning("callback %r blocked the communication thread for %.3f s", fn, took)

    def _run(self) -> None:
        get = self._queue.get
        timers = self._timers
        while not self._stopped:
            timeout = None
            if timers:
                now = time.monotonic()
                while timers and timers[0][0] <= now:
                    timer = heapq.heappop(timers)[2]
                    if not timer.cancelled:
                        self._invoke(timer.fn, timer.args)
                if timers:
                    timeout = max(0.0, timers[0][0] - time.monotonic())
            try:
                fn, args = get() if timeout is None else get(timeout=timeout)
            except queue.Empty:
                continue
            self._invoke(fn, args)

    def _halt(self) -> None:
        self._stopped = True

    def stop(self, timeout: Optional[float] = None) -> bool:
        """Stop the loop and join the thread; False if it is stuck in a callback."""
        if self.in_thread:
            self._stopped = True
            return False
        self._queue.put((self._halt, ()))
        self._thread.join(timeout)
        if self._thread.is_alive():
            _LOGGER.warning("communication thread still busy after %s s, abandoning it", timeout)
            self._stopped = True
            return False
        return True


class AsyncioLoop:
    """An asyncio event loop running in a dedicated daemon thread."""

    def __init__(self, name: str = "commkit-comm", debug_slow_callback: Optional[float] = None):
        self.loop = asyncio.new_event_loop()
        if debug_slow_callback is not None:
            self.loop.set_debug(True)
            self.loop.slow_callback_duration = debug_slow_callback
        self._inbox: collections.deque = collections.deque()
        self._wakeup_pending = False
        self._inbox_lock = threading.Lock()
        self._started = threading.Event()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()
        self._started.wait()

    def _run(self) -> None:
        asyncio.set_event_loop(self.loop)
        self.loop.call_soon(self._started.set)
        self.loop.run_forever()

    @property
    def in_thread(self) -> bool:
        return threading.current_thread() is self._thread

    @property
    def alive(self) -> bool:
        return self._thread.is_alive() and not self.loop.is_closed()

    def call_soon(self, fn: Callable, *args: Any) -> None:
        if self.in_thread:
            self.loop.call_soon(fn, *args)
            return
        # Batch cross-thread posts: one loop wakeup drains everything queued so far.
        with self._inbox_lock:
            self._inbox.append((fn, args))
            if self._wakeup_pending:
                return
            self._wakeup_pending = True
        try:
            self.loop.call_soon_threadsafe(self._drain)
        except RuntimeError:
            _LOGGER.debug("dropping %r: loop closed", fn)

    def _drain(self) -> None:
        with self._inbox_lock:
            batch, self._inbox = self._inbox, collections.deque()
            self._wakeup_pending = False
        for fn, args in batch:
            try:
                fn(*args)
            except Exception:  # pylint: disable=broad-except
                _LOGGER.exception("callback %r raised on the communication thread", fn)

    def call_later(self, delay: float, fn: Callable, *args: Any) -> asyncio.TimerHandle:
        """Must be called on the loop thread."""
        return self.loop.call_later(delay, fn, *args)

    def run_sync(self, fn: Callable, *args: Any, timeout: Optional[float] = None) -> Any:
        return _run_sync(self, fn, args, timeout)

    def run_coro(self, coro, timeout: Optional[float] = None) -> Any:
        if self.in_thread:
            raise RuntimeError("cannot block on a coroutine from the loop thread")
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def stop(self, timeout: Optional[float] = None) -> bool:
        if self.loop.is_closed():
            return True
        if self.in_thread:
            self.loop.stop()
            return False
        try:
            self.loop.call_soon_threadsafe(self.loop.stop)
        except RuntimeError:
            pass
        self._thread.join(timeout)
        if self._thread.is_alive():
            _LOGGER.warning("communication thread still busy after %s s, abandoning it", timeout)
            return False
        self.loop.close()
        return True

"""Message matching, requests and the communicator interface shared by backends."""

from __future__ import annotations

import itertools
import pickle
import threading
import time
from collections import defaultdict, deque
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from . import tags

ANY_SOURCE = -1

# wake-up slice while blocked; bounds how long an abort goes unnoticed
_POLL = 0.05


class TransportError(RuntimeError):
    pass


class TransportTimeout(TransportError):
    """A blocking wait exceeded the communicator timeout (likely deadlock)."""


class Aborted(TransportError):
    """Another rank failed and the run was aborted."""


class Request:
    """Completion handle for a nonblocking send or receive.

    Receives complete when a matching message is delivered; eager sends
    complete immediately, synchronous sends when the receiver matches them.
    """

    def __init__(self, direction: str, peer: int, tag: int, buf=None, *, owner: "Communicator | None" = None):
        self.direction = direction
        self.peer = peer
        self.tag = tag
        self.buf = buf
        self.data: Optional[bytes] = None
        self.error: Optional[BaseException] = None
        self._owner = owner
        self._event = threading.Event()
        self._callbacks: list[Callable[["Request"], None]] = []
        self._lock = threading.Lock()

    def __repr__(self):
        state = "done" if self.done else "pending"
        return f"<Request {self.direction} peer={self.peer} tag={self.tag:#x} {state}>"

    @property
    def done(self) -> bool:
        return self._event.is_set()

    def add_done_callback(self, fn: Callable[["Request"], None]) -> None:
        with self._lock:
            if not self._event.is_set():
                self._callbacks.append(fn)
                return
        fn(self)

    def _complete(self, data: Optional[bytes] = None, error: Optional[BaseException] = None) -> None:
        with self._lock:
            if self._event.is_set():
                raise TransportError(f"{self!r} completed twice")
            if error is None and data is not None and self.buf is not None:
                try:
                    _copy_into(self.buf, data)
                except TransportError as exc:
                    error = exc
            self.data = data
            self.error = error
            self._event.set()
            callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)
        if self._owner is not None:
            self._owner.mailbox.poke()

    def test(self) -> bool:
        if self._event.is_set():
            if self.error is not None:
                raise self.error
            return True
        return False

    def wait(self, timeout: Optional[float] = None) -> None:
        owner = self._owner
        if timeout is None:
            timeout = owner.timeout if owner is not None else 30.0
        deadline = time.monotonic() + timeout
        while not self._event.is_set():
            if owner is not None and owner.abort_event.is_set():
                raise Aborted(f"run aborted while waiting on {self!r}")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportTimeout(f"timed out after {timeout:g}s waiting on {self!r}")
            self._event.wait(min(remaining, _POLL))
        if self.error is not None:
            raise self.error


def wait_all(requests: Iterable[Request], timeout: Optional[float] = None) -> None:
    deadline = None if timeout is None else time.monotonic() + timeout
    for req in requests:
        left = None if deadline is None else max(deadline - time.monotonic(), 0.0)
        req.wait(left)


def _copy_into(buf, data: bytes) -> None:
    view = memoryview(buf).cast("B")
    if view.nbytes != len(data):
        raise TransportError(f"message size mismatch: expected {view.nbytes} bytes, got {len(data)}")
    view[:] = data


def as_bytes(buf) -> bytes:
    if isinstance(buf, bytes):
        return buf
    if isinstance(buf, np.ndarray):
        return np.ascontiguousarray(buf).tobytes()
    return bytes(memoryview(buf).cast("B"))


class _Message:
    __slots__ = ("payload", "on_match")

    def __init__(self, payload: bytes, on_match: Optional[Callable[[], None]]):
        self.payload = payload
        self.on_match = on_match


class Mailbox:
    """Receive-side matching for one rank.

    Posted receives and unexpected messages are kept per ``(src, tag)`` in
    FIFO order, which gives MPI-style non-overtaking for a fixed pair and tag.
    Completion callbacks run outside the lock.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._posted: dict[tuple[int, int], deque] = defaultdict(deque)
        self._unexpected: dict[tuple[int, int], deque] = defaultdict(deque)
        self._generation = 0

    def deliver(self, src: int, tag: int, payload: bytes, on_match=None) -> None:
        key = (src, tag)
        with self._cond:
            posted = self._posted.get(key)
            if posted:
                req = posted.popleft()
                if not posted:
                    del self._posted[key]
            else:
                req = None
                self._unexpected[key].append(_Message(payload, on_match))
            self._generation += 1
            self._cond.notify_all()
        if req is not None:
            req._complete(payload)
            if on_match is not None:
                on_match()

    def post(self, src: int, tag: int, req: Request) -> None:
        key = (src, tag)
        with self._cond:
            queue = self._unexpected.get(key)
            if queue:
                msg = queue.popleft()
                if not queue:
                    del self._unexpected[key]
            else:
                msg = None
                self._posted[key].append(req)
        if msg is not None:
            req._complete(msg.payload)
            if msg.on_match is not None:
                msg.on_match()

    def probe(self, tag: int, src: int = ANY_SOURCE) -> Optional[int]:
        with self._cond:
            if src != ANY_SOURCE:
                return src if self._unexpected.get((src, tag)) else None
            found = [s for (s, t), q in self._unexpected.items() if t == tag and q]
            return min(found) if found else None

    @property
    def generation(self) -> int:
        return self._generation

    def poke(self) -> None:
        with self._cond:
            self._generation += 1
            self._cond.notify_all()

    def wait_change(self, generation: int, timeout: float) -> None:
        with self._cond:
            if self._generation == generation:
                self._cond.wait(timeout)

    def pending_summary(self) -> dict:
        with self._cond:
            return {
                "posted": sorted(k for k, q in self._posted.items() if q),
                "unexpected": sorted(k for k, q in self._unexpected.items() if q),
            }


class Communicator:
    """Point-to-point messaging plus a few collectives built on top of it.

    Backends implement :meth:`_transmit`. Every collective must be called by
    all ranks in the same order; they are sequenced by a per-communicator
    counter that feeds the tag.
    """

    backend = "abstract"

    def __init__(self, rank: int, size: int, *, timeout: float = 30.0, abort_event=None):
        if not 0 <= rank < size:
            raise ValueError(f"rank {rank} outside communicator of size {size}")
        self.rank = rank
        self.size = size
        self.timeout = timeout
        self.abort_event = abort_event if abort_event is not None else threading.Event()
        self.mailbox = Mailbox()
        self.heap = None
        self.deterministic = True
        self.debug = False
        self.rng = np.random.default_rng([0, rank])
        self._coll_seq = itertools.count()
        self._context_ids = itertools.count(1)

    def __repr__(self):
        return f"<{type(self).__name__} rank={self.rank} size={self.size}>"

    def _transmit(self, dest: int, tag: int, payload: bytes, on_match) -> None:
        raise NotImplementedError

    def _check_peer(self, peer: int) -> None:
        if not 0 <= peer < self.size:
            raise TransportError(f"peer {peer} outside communicator of size {self.size}")

    def next_context_id(self) -> int:
        """Allocate an id for a collectively created object (e.g. a star forest)."""
        return next(self._context_ids)

    # -- point to point --------------------------------------------------

    def isend(self, dest: int, tag: int, buf, *, synchronous: bool = False) -> Request:
        self._check_peer(dest)
        req = Request("send", dest, tag, owner=self)
        payload = as_bytes(buf)
        if synchronous:
            self._transmit(dest, tag, payload, req._complete)
        else:
            self._transmit(dest, tag, payload, None)
            req._complete()
        return req

    def irecv(self, src: int, tag: int, buf=None) -> Request:
        self._check_peer(src)
        req = Request("recv", src, tag, buf, owner=self)
        self.mailbox.post(src, tag, req)
        return req

    def send(self, dest: int, tag: int, buf) -> None:
        self.isend(dest, tag, buf).wait()

    def recv(self, src: int, tag: int, buf=None) -> Optional[bytes]:
        req = self.irecv(src, tag, buf)
        req.wait()
        return req.data

    def isend_obj(self, dest: int, tag: int, obj: Any, *, synchronous: bool = False) -> Request:
        return self.isend(dest, tag, pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL), synchronous=synchronous)

    def recv_obj(self, src: int, tag: int) -> Any:
        return pickle.loads(self.recv(src, tag))

    def iprobe(self, tag: int, src: int = ANY_SOURCE) -> Optional[int]:
        return self.mailbox.probe(tag, src)

    def probe(self, tag: int, src: int = ANY_SOURCE, timeout: Optional[float] = None) -> int:
        """Block until a message with ``tag`` is available; return its source."""
        timeout = self.timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        while True:
            gen = self.mailbox.generation
            found = self.mailbox.probe(tag, src)
            if found is not None:
                return found
            if self.abort_event.is_set():
                raise Aborted("run aborted during probe")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportTimeout(f"timed out after {timeout:g}s probing tag {tag:#x}")
            self.mailbox.wait_change(gen, min(remaining, _POLL))

    def wait_activity(self, generation: int, timeout: float = _POLL) -> None:
        if self.abort_event.is_set():
            raise Aborted("run aborted")
        self.mailbox.wait_change(generation, timeout)

    # -- collectives -----------------------------------------------------

    def _coll_tag(self) -> int:
        return tags.make_tag(tags.COLL, 0, next(self._coll_seq))

    def allgather_obj(self, obj: Any) -> list:
        tag = self._coll_tag()
        if self.rank == 0:
            items = [None] * self.size
            items[0] = obj
            for src in range(1, self.size):
                items[src] = self.recv_obj(src, tag)
            reqs = [self.isend_obj(dest, tag, items) for dest in range(1, self.size)]
            wait_all(reqs)
            return items
        self.isend_obj(0, tag, obj).wait()
        return self.recv_obj(0, tag)

    def bcast_obj(self, obj: Any, root: int = 0) -> Any:
        tag = self._coll_tag()
        if self.rank == root:
            wait_all([self.isend_obj(d, tag, obj) for d in range(self.size) if d != root])
            return obj
        return self.recv_obj(root, tag)

    def barrier(self) -> None:
        self.ibarrier().wait()

    def ibarrier(self) -> Request:
        """Nonblocking barrier: tokens to rank 0, release broadcast on arrival of all."""
        tag = self._coll_tag()
        if self.size == 1:
            req = Request("barrier", 0, tag, owner=self)
            req._complete()
            return req
        if self.rank != 0:
            self.isend(0, tag, b"")
            return self.irecv(0, tag)
        done = Request("barrier", 0, tag, owner=self)
        remaining = [self.size - 1]
        lock = threading.Lock()

        def arrived(r: Request) -> None:
            with lock:
                remaining[0] -= 1
                last = remaining[0] == 0
            if last:
                for dest in range(1, self.size):
                    self.isend(dest, tag, b"")
                done._complete()

        for src in range(1, self.size):
            self.irecv(src, tag).add_done_callback(arrived)
        return done

    def allreduce(self, values: Sequence[int], op: str = "sum") -> np.ndarray:
        arr = np.asarray(values, dtype=np.int64)
        parts = self.allgather_obj(arr)
        lengths = {len(p) for p in parts}
        if len(lengths) != 1:
            raise TransportError(f"allreduce length mismatch across ranks: {sorted(lengths)}")
        stacked = np.stack(parts) if parts else arr[None]
        if op == "sum":
            return stacked.sum(axis=0)
        if op == "max":
            return stacked.max(axis=0)
        if op == "min":
            return stacked.min(axis=0)
        raise ValueError(f"unsupported allreduce op {op!r}")

    def allreduce_max(self, values: Sequence[int]) -> np.ndarray:
        return self.allreduce(values, "max")

    def allreduce_sum(self, values: Sequence[int]) -> np.ndarray:
        return self.allreduce(values, "sum")

    def exscan_sum(self, value: int) -> int:
        counts = self.allgather_obj(int(value))
        return int(sum(counts[: self.rank]))

    def close(self) -> None:
        pass

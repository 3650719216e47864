"""Emulated symmetric heap with nonblocking puts, fences and signals.

Every rank owns a byte region of identical size. Objects are allocated
collectively so each one sits at the same offset on every rank, and a
remote location is addressed by ``(rank, offset)``.

Remote writes are asynchronous: ``put_nbi`` and remote ``signal_set`` are
queued on a per-(source, destination) delivery worker. Between fences the
worker may apply queued writes in any order (and, with ``put_delay``, after
random delays); a fence closes the current epoch, so everything issued
before it lands before anything issued after it. Signals are 64-bit slots
written under the destination's condition variable, which is what waiters
block on.

On top of that, :class:`OneSidedExchange` moves star-forest data with the
ok-to-put / end-of-put handshake: a sender waits for its SendSig to read 0,
raises it, puts the data, fences, and sets the receiver's RecvSig; the
receiver waits for RecvSig, copies the data out, clears RecvSig and writes 0
back into the sender's SendSig.
"""

from __future__ import annotations

import collections
import threading
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .transport import Aborted, TransportTimeout
from .transport import tags

ALIGN = 64
SIGNAL_BYTES = 8


class HeapError(RuntimeError):
    pass


class HeapExhausted(HeapError):
    pass


class SymObject(NamedTuple):
    offset: int
    nbytes: int


@dataclass
class HeapCounters:
    puts: int = 0
    signals: int = 0
    fences: int = 0


class _DeliveryWorker(threading.Thread):
    """Applies the remote writes one source issues to one destination."""

    _FENCE = object()

    def __init__(self, space: "HeapSpace", src: int, dest: int, seed: int):
        super().__init__(name=f"sf-put-{src}->{dest}", daemon=True)
        self.space = space
        self.dest = dest
        self.rng = np.random.default_rng([seed, src, dest, 7])
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._stopped = False

    def submit(self, item) -> None:
        with self._cond:
            self._items.append(item)
            self._cond.notify()

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify()

    def _next_epoch(self) -> Optional[list]:
        with self._cond:
            while not self._items and not self._stopped:
                self._cond.wait()
            if self._stopped and not self._items:
                return None
            epoch = []
            while self._items:
                item = self._items.popleft()
                if item is self._FENCE:
                    if epoch:
                        break
                    continue
                epoch.append(item)
            return epoch

    def run(self) -> None:
        space = self.space
        while True:
            epoch = self._next_epoch()
            if epoch is None:
                return
            if space.shuffle and len(epoch) > 1:
                self.rng.shuffle(epoch)
            for kind, offset, payload in epoch:
                if space.put_delay > 0:
                    time.sleep(self.rng.uniform(0.0, space.put_delay))
                if kind == "put":
                    space.regions[self.dest][offset:offset + len(payload)] = np.frombuffer(payload, np.uint8)
                else:
                    space.write_signal(self.dest, offset, payload)


class HeapSpace:
    """The shared backing store of all ranks' heaps (one per in-process run)."""

    def __init__(self, nranks: int, nbytes: int, *, put_delay: float = 0.0, shuffle: Optional[bool] = None, seed: int = 0):
        self.nranks = nranks
        self.nbytes = nbytes
        self.regions = [np.zeros(nbytes, dtype=np.uint8) for _ in range(nranks)]
        self.conds = [threading.Condition() for _ in range(nranks)]
        self.put_delay = put_delay
        self.shuffle = put_delay > 0 if shuffle is None else shuffle
        self.seed = seed
        self.counters = [HeapCounters() for _ in range(nranks)]
        self._workers: dict[tuple[int, int], _DeliveryWorker] = {}
        self._lock = threading.Lock()

    def worker(self, src: int, dest: int) -> _DeliveryWorker:
        key = (src, dest)
        w = self._workers.get(key)
        if w is None:
            with self._lock:
                w = self._workers.get(key)
                if w is None:
                    w = _DeliveryWorker(self, src, dest, self.seed)
                    w.start()
                    self._workers[key] = w
        return w

    def workers_from(self, src: int) -> list[_DeliveryWorker]:
        with self._lock:
            return [w for (s, _), w in self._workers.items() if s == src]

    def write_signal(self, rank: int, offset: int, value: int) -> None:
        with self.conds[rank]:
            self.regions[rank][offset:offset + SIGNAL_BYTES].view(np.uint64)[0] = value
            self.conds[rank].notify_all()

    def read_signal(self, rank: int, offset: int) -> int:
        return int(self.regions[rank][offset:offset + SIGNAL_BYTES].view(np.uint64)[0])

    def shutdown(self) -> None:
        with self._lock:
            workers = list(self._workers.values())
            self._workers.clear()
        for w in workers:
            w.stop()


class SymmetricHeap:
    """One rank's handle on the symmetric heap."""

    def __init__(self, space: HeapSpace, comm):
        self.space = space
        self.comm = comm
        self.rank = comm.rank
        self.cursor = 0
        self.registry: list[SymObject] = []

    @property
    def region(self) -> np.ndarray:
        return self.space.regions[self.rank]

    @property
    def counters(self) -> HeapCounters:
        return self.space.counters[self.rank]

    # -- allocation --------------------------------------------------------

    def collective_alloc(self, local_size: int) -> SymObject:
        """Allocate an object sized to the largest request over all ranks (collective)."""
        if local_size < 0:
            raise ValueError("negative allocation size")
        size = int(self.comm.allreduce_max([int(local_size)])[0])
        offset = -(-self.cursor // ALIGN) * ALIGN
        if offset + size > self.space.nbytes:
            raise HeapExhausted(f"symmetric heap exhausted: need {size} bytes at {offset}, heap is {self.space.nbytes}")
        # zero-size objects still get a distinct offset
        self.cursor = offset + max(size, SIGNAL_BYTES)
        obj = SymObject(offset, size)
        self.registry.append(obj)
        return obj

    def alloc_signals(self, local_count: int) -> SymObject:
        return self.collective_alloc(SIGNAL_BYTES * local_count)

    def view(self, obj: SymObject, dtype=np.uint8) -> np.ndarray:
        return self.region[obj.offset:obj.offset + obj.nbytes].view(dtype)

    def _check_range(self, offset: int, n: int) -> None:
        for obj in self.registry:
            if obj.offset <= offset and offset + n <= obj.offset + obj.nbytes:
                return
        raise HeapError(f"range [{offset}, {offset + n}) is not inside a symmetric object")

    # -- remote access -----------------------------------------------------

    def put_nbi(self, dest: int, offset: int, data) -> None:
        """Start copying ``data`` to ``dest``'s heap at ``offset``; returns immediately."""
        payload = np.ascontiguousarray(data).view(np.uint8).tobytes()
        self._check_range(offset, len(payload))
        self.counters.puts += 1
        if dest == self.rank:
            self.region[offset:offset + len(payload)] = np.frombuffer(payload, np.uint8)
            return
        self.space.worker(self.rank, dest).submit(("put", offset, payload))

    def fence(self, dest: Optional[int] = None) -> None:
        """Order earlier puts before later ones (to ``dest``, or to every destination)."""
        self.counters.fences += 1
        workers = self.space.workers_from(self.rank) if dest is None else [self.space.worker(self.rank, dest)]
        for w in workers:
            w.submit(_DeliveryWorker._FENCE)

    def signal_set(self, dest: int, offset: int, value: int) -> None:
        self._check_range(offset, SIGNAL_BYTES)
        self.counters.signals += 1
        if dest == self.rank:
            self.space.write_signal(self.rank, offset, value)
        else:
            self.space.worker(self.rank, dest).submit(("signal", offset, int(value)))

    def signal_read(self, offset: int) -> int:
        return self.space.read_signal(self.rank, offset)

    def wait_until_all(self, offsets: Sequence[int], cmp: str = "ne", value: int = 0, timeout: Optional[float] = None) -> None:
        """Block until every local signal at ``offsets`` is ``!= value`` (``cmp="ne"``) or ``== value``."""
        if cmp not in ("ne", "eq"):
            raise ValueError(f"unsupported comparison {cmp!r}")
        if not offsets:
            return
        space, me = self.space, self.rank
        timeout = self.comm.timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout

        def ready():
            vals = [space.read_signal(me, off) for off in offsets]
            return all((v != value) if cmp == "ne" else (v == value) for v in vals)

        cond = space.conds[me]
        with cond:
            while not ready():
                if self.comm.abort_event.is_set():
                    raise Aborted("run aborted while waiting on signals")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TransportTimeout(f"rank {me}: signals {list(offsets)} never satisfied {cmp} {value}")
                cond.wait(min(remaining, 0.05))


def attach_heaps(world, nbytes: int, *, put_delay: float = 0.0, seed: int = 0, shuffle: Optional[bool] = None) -> HeapSpace:
    space = HeapSpace(world.size, nbytes, put_delay=put_delay, shuffle=shuffle, seed=seed)
    for comm in world.comms:
        comm.heap = SymmetricHeap(space, comm)
    return space


# -- star-forest transfers over the heap -----------------------------------


@dataclass
class OffsetTables:
    """Where this rank writes on its neighbors, all in units of edges / signal slots.

    ``leaf_*`` entries follow the remote leaf-rank list (root side of the
    plan), ``root_*`` entries the remote root-rank list (leaf side).
    """

    leaf_put_offsets: list[int]
    leaf_signal_slots: list[int]
    root_put_offsets: list[int]
    root_signal_slots: list[int]


def exchange_offsets(sf) -> OffsetTables:
    """Tell every neighbor where its chunk and signal slot live in our buffers (collective)."""
    plan = sf.plan()
    comm = sf.comm
    tag_leaf = tags.make_tag(tags.PROTOCOL, sf.id, 1 << 30)
    tag_root = tags.make_tag(tags.PROTOCOL, sf.id, (1 << 30) + 1)
    reqs = []
    # my leafbuf holds one chunk per root rank; tell each root rank its chunk
    offset = 0
    for j, (peer, pat) in enumerate(plan.leaf_peers):
        reqs.append(comm.isend(peer, tag_leaf, np.array([offset, j], dtype=np.int64)))
        offset += pat.count
    offset = 0
    for i, (peer, pat) in enumerate(plan.root_peers):
        reqs.append(comm.isend(peer, tag_root, np.array([offset, i], dtype=np.int64)))
        offset += pat.count
    tables = OffsetTables([], [], [], [])
    for peer, _ in plan.root_peers:
        buf = np.empty(2, dtype=np.int64)
        comm.recv(peer, tag_leaf, buf)
        tables.leaf_put_offsets.append(int(buf[0]))
        tables.leaf_signal_slots.append(int(buf[1]))
    for peer, _ in plan.leaf_peers:
        buf = np.empty(2, dtype=np.int64)
        comm.recv(peer, tag_root, buf)
        tables.root_put_offsets.append(int(buf[0]))
        tables.root_signal_slots.append(int(buf[1]))
    for r in reqs:
        r.wait()
    return tables


@dataclass
class _OneSidedState:
    tables: OffsetTables
    root_send: SymObject
    root_recv: SymObject
    leaf_send: SymObject
    leaf_recv: SymObject
    buffers: dict = field(default_factory=dict)
    inflight: set = field(default_factory=set)


def _state(sf) -> _OneSidedState:
    # routing differs when local edges are forced through the heap
    if sf.onesided is None:
        sf.onesided = {}
    state = sf.onesided.get(sf.force_remote)
    if state is None:
        heap: SymmetricHeap = sf.comm.heap
        plan = sf.plan()
        tables = exchange_offsets(sf)
        nroot_side, nleaf_side = len(plan.root_peers), len(plan.leaf_peers)
        state = _OneSidedState(
            tables,
            root_send=heap.alloc_signals(nroot_side),
            root_recv=heap.alloc_signals(nroot_side),
            leaf_send=heap.alloc_signals(nleaf_side),
            leaf_recv=heap.alloc_signals(nleaf_side),
        )
        sf.onesided[sf.force_remote] = state
    return state


def _buffer(sf, state: _OneSidedState, role: str, nbytes: int) -> SymObject:
    key = (role, nbytes)
    obj = state.buffers.get(key)
    if obj is None:
        plan = sf.plan()
        peers = plan.leaf_peers if role == "leafbuf" else plan.root_peers
        edges = sum(p.count for _, p in peers)
        obj = sf.comm.heap.collective_alloc(edges * nbytes)
        state.buffers[key] = obj
    return obj


class OneSidedExchange:
    """The remote part of one star-forest transfer, moved with puts and signals."""

    def __init__(self, sf, direction, unit):
        from .ops import Direction

        self.sf = sf
        self.heap: SymmetricHeap = sf.comm.heap
        self.unit = unit
        self.state = _state(sf)
        self.to_leaves = direction is Direction.ROOT_TO_LEAF
        self.direction = direction
        # receive side lives in leafbuf for root->leaf, rootbuf for leaf->root
        self.leafbuf = _buffer(sf, self.state, "leafbuf", unit.nbytes)
        self.rootbuf = _buffer(sf, self.state, "rootbuf", unit.nbytes)
        if direction in self.state.inflight:
            raise HeapError("one-sided backend allows one in-flight operation per star forest and direction")
        self.state.inflight.add(direction)
        self._recvs = []

    def start(self, sends, recvs) -> None:
        st, heap, nb = self.state, self.heap, self.unit.nbytes
        t = st.tables
        if self.to_leaves:
            my_send, dest_buf, dest_sig = st.root_send, self.leafbuf, st.leaf_recv
            put_offsets, sig_slots = t.leaf_put_offsets, t.leaf_signal_slots
        else:
            my_send, dest_buf, dest_sig = st.leaf_send, self.rootbuf, st.root_recv
            put_offsets, sig_slots = t.root_put_offsets, t.root_signal_slots
        for i, (peer, buf) in enumerate(sends):
            send_sig = my_send.offset + SIGNAL_BYTES * i
            heap.wait_until_all([send_sig], "eq", 0)
            # raised before the end-of-put signal can possibly be acknowledged
            heap.signal_set(heap.rank, send_sig, 1)
            heap.put_nbi(peer, dest_buf.offset + put_offsets[i] * nb, buf)
            heap.fence(peer)
            heap.signal_set(peer, dest_sig.offset + SIGNAL_BYTES * sig_slots[i], 1)
        self._recvs = list(recvs)

    def finish(self) -> None:
        st, heap, nb = self.state, self.heap, self.unit.nbytes
        t = st.tables
        try:
            if self.to_leaves:
                my_recv, my_buf, peer_send, slots = st.leaf_recv, self.leafbuf, st.root_send, t.root_signal_slots
            else:
                my_recv, my_buf, peer_send, slots = st.root_recv, self.rootbuf, st.leaf_send, t.leaf_signal_slots
            sig_offsets = [my_recv.offset + SIGNAL_BYTES * j for j in range(len(self._recvs))]
            heap.wait_until_all(sig_offsets, "ne", 0)
            pos = 0
            for j, (peer, buf) in enumerate(self._recvs):
                n = buf.nbytes
                start = my_buf.offset + pos
                buf.view(np.uint8)[:] = heap.region[start:start + n]
                pos += n
                heap.signal_set(heap.rank, sig_offsets[j], 0)
                heap.signal_set(peer, peer_send.offset + SIGNAL_BYTES * slots[j], 0)
        finally:
            st.inflight.discard(self.direction)

"""Split-phase communication over a star forest.

Every operation is a ``*_begin`` returning an :class:`OpHandle` and an
``*_end`` taking it back::

    h = bcast_begin(sf, INT64, rootdata, leafdata, ReduceOp.REPLACE)
    ...                      # independent work; don't touch the buffers
    bcast_end(h)

``begin`` applies local (self-to-self) edges directly with ``scatter`` and
starts remote transfers; ``end`` completes transfers and unpacks. Several
handles may be in flight on one star forest as long as their destination
buffers are disjoint and all ranks begin them in the same order.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import Plan, State, StarForest, StateError, get_multi_sf
from .pack import (
    IndexPattern,
    ReduceOp,
    Unit,
    destination_view,
    fetch_and_apply,
    pack,
    scatter,
    select,
    unpack,
)
from .transport import Communicator, Request, wait_all
from .transport import tags


class OpKind(enum.Enum):
    BCAST = "bcast"
    REDUCE = "reduce"
    FETCH_AND_OP = "fetch-and-op"
    GATHER = "gather"
    SCATTER = "scatter"


class BufferSpace(enum.Enum):
    USER = "user"
    SYMMETRIC = "symmetric"


class Direction(enum.Enum):
    ROOT_TO_LEAF = "root->leaf"
    LEAF_TO_ROOT = "leaf->root"


class BufferModifiedError(RuntimeError):
    """A buffer of an in-flight operation changed between begin and end."""


@dataclass
class BufferView:
    space: BufferSpace
    length: int


class TwoSidedExchange:
    """Remote part of one transfer, over persistent-style sends and receives."""

    def __init__(self, comm: Communicator, tag: int):
        self.comm = comm
        self.tag = tag
        self.requests: list[Request] = []

    def start(self, sends, recvs) -> None:
        for peer, buf in recvs:
            self.requests.append(self.comm.irecv(peer, self.tag, buf.view(np.uint8)))
        for peer, buf in sends:
            self.requests.append(self.comm.isend(peer, self.tag, buf))

    def finish(self) -> None:
        wait_all(self.requests)


def _new_exchange(sf: StarForest, direction: Direction, unit: Unit, tag: int):
    if sf.comm.heap is not None:
        from .symheap import OneSidedExchange

        return OneSidedExchange(sf, direction, unit)
    return TwoSidedExchange(sf.comm, tag)


def _checksum(arr: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(arr).view(np.uint8))


@dataclass
class _Transfer:
    direction: Direction
    exchange: object
    # receive buffers still to be unpacked: (pattern, buffer)
    staged: list[tuple[IndexPattern, np.ndarray]] = field(default_factory=list)


class OpHandle:
    """An in-flight split-phase operation."""

    def __init__(self, sf: StarForest, kind: OpKind, unit: Unit, op: ReduceOp, root_view: BufferView, leaf_view: BufferView):
        self.sf = sf
        self.kind = kind
        self.unit = unit
        self.op = op
        self.root_view = root_view
        self.leaf_view = leaf_view
        self.pending: list[_Transfer] = []
        self.phase = "begun"
        self._checks: list[tuple[str, np.ndarray, int]] = []
        self._finish = None

    def __repr__(self):
        return f"<OpHandle {self.kind.value} op={self.op.name} phase={self.phase}>"

    def _guard(self, name: str, arr: np.ndarray) -> None:
        if self.sf.comm.debug:
            self._checks.append((name, arr, _checksum(arr)))

    def _verify(self) -> None:
        for name, arr, crc in self._checks:
            if _checksum(arr) != crc:
                raise BufferModifiedError(f"{name} was modified between {self.kind.value}_begin and end")


def _require_setup(sf: StarForest) -> None:
    if sf.state is not State.SET_UP:
        raise StateError(f"star forest must be set up before communicating (state: {sf.state.value})")


def _check_array(name: str, arr: np.ndarray, unit: Unit, nvertices: int) -> None:
    if not isinstance(arr, np.ndarray) or arr.ndim != 1:
        raise TypeError(f"{name} must be a one-dimensional numpy array")
    if arr.dtype != unit.dtype:
        raise TypeError(f"{name} has dtype {arr.dtype}, unit expects {unit.dtype}")
    if not arr.flags.c_contiguous:
        raise ValueError(f"{name} must be contiguous")
    if arr.size < nvertices * unit.blocklen:
        raise ValueError(f"{name} holds {arr.size} elements, needs {nvertices * unit.blocklen}")


def _check_space(sf: StarForest, space: BufferSpace) -> None:
    if space is BufferSpace.SYMMETRIC and sf.comm.heap is None:
        raise ValueError("symmetric buffers need the one-sided backend")


def _start_transfer(
    sf: StarForest,
    plan: Plan,
    direction: Direction,
    unit: Unit,
    op: ReduceOp,
    src: np.ndarray,
    dst: np.ndarray,
    tag: int,
) -> _Transfer:
    """Local edges are applied immediately; remote ones are put on the wire."""
    if direction is Direction.ROOT_TO_LEAF:
        send_peers, recv_peers = plan.root_peers, plan.leaf_peers
        self_src, self_dst = plan.self_root, plan.self_leaf
    else:
        send_peers, recv_peers = plan.leaf_peers, plan.root_peers
        self_src, self_dst = plan.self_leaf, plan.self_root
    stats = sf.stats
    transfer = _Transfer(direction, _new_exchange(sf, direction, unit, tag))
    recvs = []
    for peer, pat in recv_peers:
        view = destination_view(dst, pat, unit) if op is ReduceOp.REPLACE else None
        if view is not None:
            recvs.append((peer, view))
        else:
            buf = np.empty(pat.count * unit.blocklen, dtype=unit.dtype)
            recvs.append((peer, buf))
            transfer.staged.append((pat, buf))
    sends = [(peer, pack(src, pat, unit, stats)) for peer, pat in send_peers]
    if self_src is not None:
        scatter(src, self_src, dst, self_dst, unit, op, stats)
    transfer.exchange.start(sends, recvs)
    return transfer


def _finish_transfer(sf: StarForest, transfer: _Transfer, unit: Unit, op: ReduceOp, dst: np.ndarray) -> None:
    transfer.exchange.finish()
    for pat, buf in transfer.staged:
        sf.stats.unpack_copies += 1
        unpack(dst, pat, unit, op, buf, sf.stats)


def _begin(sf, kind, direction, unit, op, src, dst, root_view, leaf_view, guards):
    _require_setup(sf)
    unit = Unit.coerce(unit)
    op = ReduceOp(op)
    op.check(unit)
    handle = OpHandle(sf, kind, unit, op, root_view, leaf_view)
    for name, arr in guards:
        handle._guard(name, arr)
    transfer = _start_transfer(sf, sf.plan(), direction, unit, op, src, dst, sf.next_tag())
    handle.pending.append(transfer)
    handle._finish = lambda: _finish_transfer(sf, transfer, unit, op, dst)
    return handle


def end(handle: OpHandle, kind: Optional[OpKind] = None) -> None:
    """Complete any operation. ``*_end`` helpers add a kind check."""
    if kind is not None and handle.kind is not kind:
        raise ValueError(f"handle belongs to {handle.kind.value}, not {kind.value}")
    if handle.phase != "begun":
        raise StateError(f"{handle.kind.value} handle already ended")
    handle.phase = "ending"
    try:
        handle._verify()
        handle._finish()
    finally:
        handle.phase = "ended"


# -- bcast / reduce -------------------------------------------------------


def bcast_begin(
    sf: StarForest,
    unit,
    rootdata: np.ndarray,
    leafdata: np.ndarray,
    op=ReduceOp.REPLACE,
    *,
    rootspace: BufferSpace = BufferSpace.USER,
    leafspace: BufferSpace = BufferSpace.USER,
) -> OpHandle:
    """Start ``leafdata[leaf] (+)= rootdata[root]`` over every edge."""
    unit = Unit.coerce(unit)
    _check_array("rootdata", rootdata, unit, sf.nroots)
    _check_array("leafdata", leafdata, unit, sf.leaf_space)
    _check_space(sf, rootspace)
    _check_space(sf, leafspace)
    return _begin(
        sf, OpKind.BCAST, Direction.ROOT_TO_LEAF, unit, op, rootdata, leafdata,
        BufferView(rootspace, rootdata.size), BufferView(leafspace, leafdata.size),
        [("rootdata", rootdata)],
    )


def bcast_end(handle: OpHandle) -> None:
    end(handle, OpKind.BCAST)


def reduce_begin(
    sf: StarForest,
    unit,
    leafdata: np.ndarray,
    rootdata: np.ndarray,
    op=ReduceOp.SUM,
    *,
    leafspace: BufferSpace = BufferSpace.USER,
    rootspace: BufferSpace = BufferSpace.USER,
) -> OpHandle:
    """Start folding every leaf value into its root: ``rootdata[root] (+)= leafdata[leaf]``.

    With ``REPLACE`` and a root of degree > 1 the surviving value is one of
    the contributions (which one is unspecified); such roots are counted in
    ``sf.stats.replace_roots``.
    """
    unit = Unit.coerce(unit)
    _check_array("leafdata", leafdata, unit, sf.leaf_space)
    _check_array("rootdata", rootdata, unit, sf.nroots)
    _check_space(sf, rootspace)
    _check_space(sf, leafspace)
    if ReduceOp(op) is ReduceOp.REPLACE and sf.state is State.SET_UP:
        sf.stats.replace_roots += int(np.count_nonzero(sf.degrees() > 1))
    return _begin(
        sf, OpKind.REDUCE, Direction.LEAF_TO_ROOT, unit, op, leafdata, rootdata,
        BufferView(rootspace, rootdata.size), BufferView(leafspace, leafdata.size),
        [("leafdata", leafdata)],
    )


def reduce_end(handle: OpHandle) -> None:
    end(handle, OpKind.REDUCE)


# -- fetch and op ---------------------------------------------------------


def fetch_and_op_begin(
    sf: StarForest,
    unit,
    rootdata: np.ndarray,
    leafdata: np.ndarray,
    leafupdate: np.ndarray,
    op=ReduceOp.SUM,
) -> OpHandle:
    """Start a fetch-and-op: each leaf contribution is applied to its root one
    at a time, and the root value seen just before it lands in ``leafupdate``.

    Contributions to one root are serialized in (local rank first, then
    ascending leaf rank, then ascending leaf index) order when the
    communicator is deterministic, and in a random order otherwise.
    """
    _require_setup(sf)
    unit = Unit.coerce(unit)
    op = ReduceOp(op)
    if op is ReduceOp.REPLACE:
        raise ValueError("fetch-and-op is undefined for REPLACE")
    op.check(unit)
    _check_array("rootdata", rootdata, unit, sf.nroots)
    _check_array("leafdata", leafdata, unit, sf.leaf_space)
    _check_array("leafupdate", leafupdate, unit, sf.leaf_space)
    handle = OpHandle(
        sf, OpKind.FETCH_AND_OP, unit, op,
        BufferView(BufferSpace.USER, rootdata.size), BufferView(BufferSpace.USER, leafdata.size),
    )
    handle._guard("leafdata", leafdata)
    plan = sf.plan()
    tag_in, tag_out = sf.next_tag(tags.DATA), sf.next_tag(tags.DATA_REPLY)

    # leaf -> root: raw contributions, staged on the root side
    incoming = _new_exchange(sf, Direction.LEAF_TO_ROOT, unit, tag_in)
    in_bufs = [np.empty(pat.count * unit.blocklen, dtype=unit.dtype) for _, pat in plan.root_peers]
    incoming.start(
        [(peer, pack(leafdata, pat, unit, sf.stats)) for peer, pat in plan.leaf_peers],
        [(peer, buf) for (peer, _), buf in zip(plan.root_peers, in_bufs)],
    )
    handle.pending.append(_Transfer(Direction.LEAF_TO_ROOT, incoming))
    # created now so any collective setup happens in begin on every rank
    outgoing = _new_exchange(sf, Direction.ROOT_TO_LEAF, unit, tag_out)
    handle.pending.append(_Transfer(Direction.ROOT_TO_LEAF, outgoing))

    def finish():
        incoming.finish()
        # gather all contributions in canonical order: self, then peers
        chunks = []
        if plan.self_root is not None:
            chunks.append((plan.self_root.indices(), select(leafdata, plan.self_leaf, unit).reshape(-1)))
        for (_, pat), buf in zip(plan.root_peers, in_bufs):
            chunks.append((pat.indices(), buf))
        if chunks:
            idx = np.concatenate([c[0] for c in chunks])
            vals = np.concatenate([c[1] for c in chunks])
        else:
            idx = np.empty(0, np.int64)
            vals = np.empty(0, unit.dtype)
        if sf.comm.deterministic:
            fetched = fetch_and_apply(rootdata, idx, unit, op, vals)
        else:
            perm = sf.comm.rng.permutation(idx.size)
            bl = unit.blocklen
            shuffled = fetch_and_apply(rootdata, idx[perm], unit, op, vals.reshape(-1, bl)[perm].reshape(-1))
            fetched = np.empty_like(shuffled).reshape(-1, bl)
            fetched[perm] = shuffled.reshape(-1, bl)
            fetched = fetched.reshape(-1)
        # root -> leaf: fetched values back to their leaves
        bl = unit.blocklen
        pos = 0
        if plan.self_root is not None:
            n = plan.self_root.count
            unpack(leafupdate, plan.self_leaf, unit, ReduceOp.REPLACE, fetched[: n * bl])
            pos = n * bl
        sends = []
        for peer, pat in plan.root_peers:
            n = pat.count * bl
            sends.append((peer, fetched[pos:pos + n]))
            pos += n
        out_bufs = [np.empty(pat.count * bl, dtype=unit.dtype) for _, pat in plan.leaf_peers]
        outgoing.start(sends, [(peer, buf) for (peer, _), buf in zip(plan.leaf_peers, out_bufs)])
        outgoing.finish()
        for (_, pat), buf in zip(plan.leaf_peers, out_bufs):
            unpack(leafupdate, pat, unit, ReduceOp.REPLACE, buf)

    handle._finish = finish
    return handle


def fetch_and_op_end(handle: OpHandle) -> None:
    end(handle, OpKind.FETCH_AND_OP)


# -- gather / scatter through the multi-SF --------------------------------


def gather_begin(sf: StarForest, unit, leafdata: np.ndarray, multirootdata: np.ndarray) -> OpHandle:
    """Start collecting every leaf value at its root, one slot per leaf.

    ``multirootdata`` has ``sum(degrees)`` vertices; the slots of one root are
    consecutive, ordered local rank first, then by leaf rank and leaf index.
    """
    _require_setup(sf)
    multi = get_multi_sf(sf)
    unit = Unit.coerce(unit)
    _check_array("leafdata", leafdata, unit, sf.leaf_space)
    _check_array("multirootdata", multirootdata, unit, multi.nroots)
    handle = _begin(
        multi, OpKind.GATHER, Direction.LEAF_TO_ROOT, unit, ReduceOp.REPLACE, leafdata, multirootdata,
        BufferView(BufferSpace.USER, multirootdata.size), BufferView(BufferSpace.USER, leafdata.size),
        [("leafdata", leafdata)],
    )
    return handle


def gather_end(handle: OpHandle) -> None:
    end(handle, OpKind.GATHER)


def scatter_begin(sf: StarForest, unit, multirootdata: np.ndarray, leafdata: np.ndarray) -> OpHandle:
    """Inverse of gather: slot values back to their leaves."""
    _require_setup(sf)
    multi = get_multi_sf(sf)
    unit = Unit.coerce(unit)
    _check_array("multirootdata", multirootdata, unit, multi.nroots)
    _check_array("leafdata", leafdata, unit, sf.leaf_space)
    return _begin(
        multi, OpKind.SCATTER, Direction.ROOT_TO_LEAF, unit, ReduceOp.REPLACE, multirootdata, leafdata,
        BufferView(BufferSpace.USER, multirootdata.size), BufferView(BufferSpace.USER, leafdata.size),
        [("multirootdata", multirootdata)],
    )


def scatter_end(handle: OpHandle) -> None:
    end(handle, OpKind.SCATTER)


# -- blocking conveniences -------------------------------------------------


def bcast(sf, unit, rootdata, leafdata, op=ReduceOp.REPLACE) -> None:
    bcast_end(bcast_begin(sf, unit, rootdata, leafdata, op))


def reduce(sf, unit, leafdata, rootdata, op=ReduceOp.SUM) -> None:
    reduce_end(reduce_begin(sf, unit, leafdata, rootdata, op))


def fetch_and_op(sf, unit, rootdata, leafdata, leafupdate, op=ReduceOp.SUM) -> None:
    fetch_and_op_end(fetch_and_op_begin(sf, unit, rootdata, leafdata, leafupdate, op))


def gather(sf, unit, leafdata, multirootdata) -> None:
    gather_end(gather_begin(sf, unit, leafdata, multirootdata))


def scatter_multi(sf, unit, multirootdata, leafdata) -> None:
    scatter_end(scatter_begin(sf, unit, multirootdata, leafdata))

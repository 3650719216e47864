"""Graphs derived from existing star forests.

All routines are collective and return a new, set-up :class:`StarForest`
on the same communicator. Root identities travel as ``(rank, offset)``
pairs through ordinary bcast/reduce on the input graphs, so nothing is
gathered to a single rank.
"""

from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from . import ops
from .graph import GraphError, State, StarForest
from .pack import Unit, ReduceOp

_REF = Unit("int64", 2)
NO_ROOT = -1


def _consistent(comm, problem: Optional[str], what: str) -> None:
    """Raise the same error on every rank when any rank found a problem."""
    problems = [p for p in comm.allgather_obj(problem) if p]
    if problems:
        raise GraphError(f"{what}: " + "; ".join(problems))


def _require_set_up(*sfs: StarForest) -> None:
    for sf in sfs:
        if sf.state is not State.SET_UP:
            raise GraphError("input star forests must be set up")
    comm = sfs[0].comm
    if any(sf.comm is not comm for sf in sfs):
        raise GraphError("input star forests must live on the same communicator")


def _build(comm, nroots: int, refs: np.ndarray, leaf_space: int, algorithm: Optional[str]) -> StarForest:
    """SF whose leaf ``i`` has root ``refs[i]``, skipping rows marked NO_ROOT."""
    refs = refs.reshape(-1, 2)
    keep = np.flatnonzero(refs[:, 0] != NO_ROOT)
    out = StarForest(comm)
    out.set_graph(nroots, keep.size, keep, refs[keep] if keep.size else [], leaf_space=leaf_space)
    out.setup(algorithm)
    return out


def identity(comm, n: int, algorithm: Optional[str] = None) -> StarForest:
    """Leaf ``i`` attached to local root ``i`` for ``i < n``."""
    sf = StarForest(comm)
    sf.set_graph(n, n, None, np.stack([np.full(n, comm.rank), np.arange(n)], axis=1) if n else [])
    sf.setup(algorithm)
    return sf


def _leaf_root_refs(sf: StarForest, space: int) -> np.ndarray:
    """Per index of ``sf``'s leaf space, the ``(rank, offset)`` of its root (or NO_ROOT)."""
    refs = np.full((space, 2), NO_ROOT, dtype=np.int64)
    idx = sf.leaf_indices
    refs[idx, 0] = sf.remote_ranks
    refs[idx, 1] = sf.remote_offsets
    return refs.reshape(-1)


def compose(a: StarForest, b: StarForest, algorithm: Optional[str] = None) -> StarForest:
    """``A∘B``: roots of A, leaves of B; a B leaf hangs off the A root of its B root.

    A's leaf space must fit inside B's root space on every rank. B roots that
    are not A leaves pass nothing on, so their B leaves stay unconnected.
    """
    _require_set_up(a, b)
    problem = None
    if a.leaf_space > b.nroots:
        problem = f"rank {a.comm.rank}: A has leaf space {a.leaf_space} but B has only {b.nroots} roots"
    _consistent(a.comm, problem, "compose")
    rootrefs = _leaf_root_refs(a, b.nroots)
    leafrefs = np.full(b.leaf_space * 2, NO_ROOT, dtype=np.int64)
    ops.bcast(b, _REF, rootrefs, leafrefs, ReduceOp.REPLACE)
    return _build(a.comm, a.nroots, leafrefs, b.leaf_space, algorithm)


def compose_inverse(a: StarForest, b: StarForest, algorithm: Optional[str] = None) -> StarForest:
    """Roots of A, with B's roots as leaves, joined through the shared leaf space.

    Every connected A leaf must also be a connected B leaf, and every B root
    must have degree at most one.
    """
    _require_set_up(a, b)
    me = a.comm.rank
    problem = None
    deg = b.degrees()
    if deg.size and deg.max() > 1:
        problem = f"rank {me}: B root {int(np.argmax(deg))} has degree {int(deg.max())}; at most 1 is allowed"
    else:
        b_leaves = np.zeros(max(a.leaf_space, b.leaf_space), dtype=bool)
        b_leaves[b.leaf_indices] = True
        missing = a.leaf_indices[~b_leaves[a.leaf_indices]]
        if missing.size:
            problem = f"rank {me}: A leaf {int(missing[0])} is not a leaf of B"
    _consistent(a.comm, problem, "compose_inverse")
    leafrefs = _leaf_root_refs(a, b.leaf_space)
    rootrefs = np.full(b.nroots * 2, NO_ROOT, dtype=np.int64)
    ops.reduce(b, _REF, leafrefs, rootrefs, ReduceOp.REPLACE)
    return _build(a.comm, a.nroots, rootrefs, b.nroots, algorithm)


def _selection(comm, selected: Iterable[int], n: int, what: str) -> np.ndarray:
    sel = np.unique(np.asarray(list(selected), dtype=np.int64))
    problem = None
    if sel.size and (sel[0] < 0 or sel[-1] >= n):
        bad = int(sel[0] if sel[0] < 0 else sel[-1])
        problem = f"rank {comm.rank}: selected {what} {bad} outside [0, {n})"
    _consistent(comm, problem, f"embed {what}s")
    mask = np.zeros(n, dtype=bool)
    mask[sel] = True
    return mask


def embed_roots(sf: StarForest, selected: Iterable[int], algorithm: Optional[str] = None) -> StarForest:
    """Keep only edges into ``selected`` local roots; indices are not renumbered."""
    _require_set_up(sf)
    mask = _selection(sf.comm, selected, sf.nroots, "root")
    flags = np.zeros(sf.leaf_space, dtype=np.int64)
    ops.bcast(sf, "int64", mask.astype(np.int64), flags, ReduceOp.REPLACE)
    return _filtered(sf, flags[sf.leaf_indices] != 0, algorithm)


def embed_leaves(sf: StarForest, selected: Iterable[int], algorithm: Optional[str] = None) -> StarForest:
    """Keep only edges from ``selected`` local leaf indices; indices are not renumbered."""
    _require_set_up(sf)
    mask = _selection(sf.comm, selected, sf.leaf_space, "leaf")
    return _filtered(sf, mask[sf.leaf_indices], algorithm)


def _filtered(sf: StarForest, keep: np.ndarray, algorithm: Optional[str]) -> StarForest:
    out = StarForest(sf.comm)
    remote = np.stack([sf.remote_ranks[keep], sf.remote_offsets[keep]], axis=1) if keep.any() else []
    out.set_graph(sf.nroots, int(keep.sum()), sf.leaf_indices[keep], remote, leaf_space=sf.leaf_space)
    out.setup(algorithm)
    return out

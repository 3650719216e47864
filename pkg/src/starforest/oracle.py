"""Sequential reference semantics over a gathered global edge list.

Deliberately naive: Python loops over ``(leaf rank, leaf index, root rank,
root offset)`` tuples and Python-level arithmetic, sharing nothing with the
pattern/pack machinery it is used to check.
"""

from __future__ import annotations

import operator
from typing import Sequence

import numpy as np

from .graph import GraphSpec, StarForest
from .pack import ReduceOp

Edge = tuple[int, int, int, int]


def gather_specs(sf: StarForest) -> list[GraphSpec]:
    """Collective: every rank's :class:`GraphSpec`, in rank order."""
    return sf.comm.allgather_obj(sf.spec())


def edges(specs: Sequence[GraphSpec]) -> list[Edge]:
    out = []
    for rank, spec in enumerate(specs):
        for leaf, rr, ro in zip(spec.leaf_local.tolist(), spec.remote_ranks.tolist(), spec.remote_offsets.tolist()):
            out.append((rank, leaf, rr, ro))
    return out


def transpose(specs: Sequence[GraphSpec]) -> list[GraphSpec]:
    """Swap roots and leaves. Only valid when every root has degree <= 1."""
    nranks = len(specs)
    per_rank: list[list[tuple[int, int, int]]] = [[] for _ in range(nranks)]
    for lr, li, rr, ro in edges(specs):
        per_rank[rr].append((ro, lr, li))
    out = []
    for rank, spec in enumerate(specs):
        items = sorted(per_rank[rank])
        if len({i[0] for i in items}) != len(items):
            raise ValueError("transpose needs every root to have degree <= 1")
        arr = np.array(items, dtype=np.int64).reshape(-1, 3)
        leaf_space = spec.leaf_space if spec.leaf_space is not None else (int(spec.leaf_local.max()) + 1 if spec.nleaves else 0)
        out.append(GraphSpec(leaf_space, arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), spec.nroots))
    return out


def _py_op(op: ReduceOp):
    return {
        ReduceOp.REPLACE: lambda a, b: b,
        ReduceOp.SUM: operator.add,
        ReduceOp.PROD: operator.mul,
        ReduceOp.MAX: max,
        ReduceOp.MIN: min,
        ReduceOp.LAND: lambda a, b: int(bool(a) and bool(b)),
        ReduceOp.LOR: lambda a, b: int(bool(a) or bool(b)),
        ReduceOp.BAND: operator.and_,
        ReduceOp.BOR: operator.or_,
    }[op]


def _wrap(value, dtype):
    # emulate two's-complement overflow for integer kinds
    if not np.issubdtype(dtype, np.integer):
        return value
    bits = np.dtype(dtype).itemsize * 8
    v = int(value) % (1 << bits)
    return v - (1 << bits) if v >= 1 << (bits - 1) else v


def _lists(arrays):
    return [a.tolist() for a in arrays]


def _back(lists, like):
    return [np.array(l, dtype=a.dtype) for l, a in zip(lists, like)]


def bcast(specs, rootdata, leafdata, op: ReduceOp = ReduceOp.REPLACE, blocklen: int = 1):
    f = _py_op(op)
    roots, leaves = _lists(rootdata), _lists(leafdata)
    dtype = leafdata[0].dtype if leafdata else np.int64
    for lr, li, rr, ro in edges(specs):
        for b in range(blocklen):
            old = leaves[lr][li * blocklen + b]
            leaves[lr][li * blocklen + b] = _wrap(f(old, roots[rr][ro * blocklen + b]), dtype)
    return _back(leaves, leafdata)


def reduce(specs, leafdata, rootdata, op: ReduceOp = ReduceOp.SUM, blocklen: int = 1):
    """Contributions are applied in canonical order (see :func:`canonical_order`)."""
    f = _py_op(op)
    roots, leaves = _lists(rootdata), _lists(leafdata)
    dtype = rootdata[0].dtype if rootdata else np.int64
    for lr, li, rr, ro in canonical_order(edges(specs)):
        for b in range(blocklen):
            old = roots[rr][ro * blocklen + b]
            roots[rr][ro * blocklen + b] = _wrap(f(old, leaves[lr][li * blocklen + b]), dtype)
    return _back(roots, rootdata)


def canonical_order(es: list[Edge]) -> list[Edge]:
    """Per root: leaves on the root's own rank first, then by leaf rank, then leaf index."""
    return sorted(es, key=lambda e: (e[2], e[3], e[0] != e[2], e[0], e[1]))


def degrees(specs) -> list[list[int]]:
    deg = [[0] * s.nroots for s in specs]
    for _, _, rr, ro in edges(specs):
        deg[rr][ro] += 1
    return deg


def fetch_and_op(specs, rootdata, leafdata, leafupdate, op: ReduceOp = ReduceOp.SUM, blocklen: int = 1):
    """Deterministic fetch-and-op in canonical order; returns ``(rootdata, leafupdate)``."""
    f = _py_op(op)
    roots, leaves, update = _lists(rootdata), _lists(leafdata), _lists(leafupdate)
    dtype = rootdata[0].dtype if rootdata else np.int64
    for lr, li, rr, ro in canonical_order(edges(specs)):
        for b in range(blocklen):
            old = roots[rr][ro * blocklen + b]
            update[lr][li * blocklen + b] = old
            roots[rr][ro * blocklen + b] = _wrap(f(old, leaves[lr][li * blocklen + b]), dtype)
    return _back(roots, rootdata), _back(update, leafupdate)


def gather(specs, leafdata, blocklen: int = 1):
    """Per-rank multi-root arrays: for each root in order, its leaves' values in canonical order."""
    by_root: dict[tuple[int, int], list[Edge]] = {}
    for e in canonical_order(edges(specs)):
        by_root.setdefault((e[2], e[3]), []).append(e)
    out = []
    for rank, spec in enumerate(specs):
        vals = []
        for r in range(spec.nroots):
            for lr, li, _, _ in by_root.get((rank, r), []):
                vals.extend(leafdata[lr][li * blocklen:(li + 1) * blocklen].tolist())
        out.append(np.array(vals, dtype=leafdata[0].dtype if leafdata else np.int64))
    return out


def compose(specs_a, specs_b) -> set[Edge]:
    """Edges of A∘B: B leaf -> A root whenever the B root is an A leaf."""
    a_root_of = {(lr, li): (rr, ro) for lr, li, rr, ro in edges(specs_a)}
    out = set()
    for lr, li, rr, ro in edges(specs_b):
        hit = a_root_of.get((rr, ro))
        if hit is not None:
            out.add((lr, li, hit[0], hit[1]))
    return out


def compose_inverse(specs_a, specs_b) -> set[Edge]:
    """Edges of AB: B root (as leaf) -> A root, joined through the shared leaf space."""
    a_root_of = {(lr, li): (rr, ro) for lr, li, rr, ro in edges(specs_a)}
    out = set()
    for lr, li, rr, ro in edges(specs_b):
        hit = a_root_of.get((lr, li))
        if hit is not None:
            out.add((rr, ro, hit[0], hit[1]))
    return out

"""Column selection for extracting a submatrix from a row-split matrix.

Two star forests over the global columns of ``M`` (roots, block-split):

* ``sfA``: leaves are a rank's reduced local columns (its ``garray``),
* ``sfB``: leaves are the columns a rank owns in the submatrix, in order.

A reduce through ``sfB`` writes each selected column's new index into a
global-column array prefilled with :data:`UNSELECTED`; a bcast through
``sfA`` then brings those values to the reduced local columns.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .. import ops
from ..graph import GraphError, StarForest
from ..pack import ReduceOp

UNSELECTED = -1


def _column_sf(comm, cols: np.ndarray, col_starts: np.ndarray, algorithm: Optional[str]) -> StarForest:
    ncols = int(col_starts[-1])
    if cols.size and (cols.min() < 0 or cols.max() >= ncols):
        raise GraphError(f"column index outside [0, {ncols})")
    owners = np.searchsorted(col_starts, cols, side="right") - 1
    rank = comm.rank
    sf = StarForest(comm)
    sf.set_graph(
        int(col_starts[rank + 1] - col_starts[rank]),
        cols.size,
        None,
        np.stack([owners, cols - col_starts[owners]], axis=1) if cols.size else [],
    )
    sf.setup(algorithm)
    return sf


def build_column_sfs(
    comm,
    garray: Sequence[int],
    selected: Sequence[int],
    col_starts: np.ndarray,
    algorithm: Optional[str] = None,
) -> tuple[StarForest, StarForest]:
    """``(sfA, sfB)`` for reduced columns ``garray`` and this rank's share ``selected`` of the submatrix columns.

    A column may be selected by at most one rank, at most once.
    """
    sel = np.asarray(selected, dtype=np.int64)
    sfA = _column_sf(comm, np.asarray(garray, dtype=np.int64), col_starts, algorithm)
    sfB = _column_sf(comm, sel, col_starts, algorithm)
    dup = sfB.degrees().max(initial=0) > 1
    if comm.allreduce_max([int(dup)])[0]:
        raise GraphError("a column is selected more than once")
    return sfA, sfB


def select_submatrix_columns(sfA: StarForest, sfB: StarForest) -> np.ndarray:
    """New submatrix index of every reduced local column, or ``UNSELECTED``.

    Submatrix columns are numbered rank by rank in ``sfB`` leaf order,
    starting at 0.
    """
    comm = sfB.comm
    first = comm.exscan_sum(sfB.nleaves)
    new_index = np.arange(first, first + sfB.nleaves, dtype=np.int64)
    tagged = np.full(sfB.nroots, UNSELECTED, dtype=np.int64)
    ops.reduce(sfB, "int64", new_index, tagged, ReduceOp.REPLACE)
    out = np.full(sfA.leaf_space, UNSELECTED, dtype=np.int64)
    ops.bcast(sfA, "int64", tagged, out, ReduceOp.REPLACE)
    return out


def retained(new_indices: np.ndarray) -> list[tuple[int, int]]:
    """``(reduced local column, new index)`` for the kept columns."""
    keep = np.flatnonzero(new_indices >= 0)
    return list(zip(keep.tolist(), new_indices[keep].tolist()))

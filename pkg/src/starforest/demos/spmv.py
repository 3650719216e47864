"""Distributed sparse matrix-vector product with a ghost-exchange star forest.

Rows (and, for a square matrix, vector entries) are split into contiguous
blocks. On each rank the local rows are stored as two CSR blocks::

    y = A @ x_owned + B @ lvec

``A`` keeps the columns this rank owns (local numbering); ``B`` keeps the
rest, renumbered to ``0..len(garray)-1`` where ``garray`` lists the global
columns in ascending order. ``lvec`` holds the ghost values in that same
order, and it is filled by a bcast over a star forest whose leaves are the
``lvec`` slots and whose roots are the owned vector entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.io
import scipy.sparse as sp

from .. import ops
from ..graph import GraphError, StarForest
from ..pack import ReduceOp, Unit
from ..transport import tags


def block_starts(n: int, size: int) -> np.ndarray:
    """``size + 1`` boundaries of a contiguous block split of ``n`` items (first ranks get the extra)."""
    base, extra = divmod(n, size)
    counts = np.full(size, base, dtype=np.int64)
    counts[:extra] += 1
    return np.concatenate([[0], np.cumsum(counts)])


@dataclass
class SplitMatrix:
    A: sp.csr_matrix
    B: sp.csr_matrix
    garray: np.ndarray
    row_starts: np.ndarray
    col_starts: np.ndarray
    rank: int

    @property
    def row_range(self) -> tuple[int, int]:
        return int(self.row_starts[self.rank]), int(self.row_starts[self.rank + 1])

    @property
    def col_range(self) -> tuple[int, int]:
        return int(self.col_starts[self.rank]), int(self.col_starts[self.rank + 1])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.row_starts[-1]), int(self.col_starts[-1])

    @property
    def dtype(self) -> np.dtype:
        return self.A.dtype


@dataclass
class GhostVector:
    owned: np.ndarray
    lvec: np.ndarray


def split_rows(rows: sp.csr_matrix, col_starts: np.ndarray, rank: int) -> tuple[sp.csr_matrix, sp.csr_matrix, np.ndarray]:
    """Split local rows into the owned-column block and the compressed off-rank block."""
    rows = sp.csr_matrix(rows)
    rows.sort_indices()
    lo, hi = int(col_starts[rank]), int(col_starts[rank + 1])
    coo = rows.tocoo()
    mine = (coo.col >= lo) & (coo.col < hi)
    nrows = rows.shape[0]
    A = sp.csr_matrix((coo.data[mine], (coo.row[mine], coo.col[mine] - lo)), shape=(nrows, hi - lo), dtype=rows.dtype)
    other = ~mine
    garray = np.unique(coo.col[other]).astype(np.int64)
    reduced = np.searchsorted(garray, coo.col[other])
    B = sp.csr_matrix((coo.data[other], (coo.row[other], reduced)), shape=(nrows, garray.size), dtype=rows.dtype)
    return A, B, garray


def distribute_matrix(comm, source: Union[str, sp.spmatrix, None]) -> SplitMatrix:
    """Collective: rank 0 loads ``source`` (Matrix Market path or matrix) and ships row blocks.

    Other ranks' ``source`` is ignored.
    """
    ctx = comm.next_context_id()
    tag = tags.make_tag(tags.USER, ctx, 0)
    if comm.rank == 0:
        M = scipy.io.mmread(source) if isinstance(source, str) else source
        M = sp.csr_matrix(M)
        if M.dtype.kind in "iub":
            M = M.astype(np.int64)
        elif M.dtype != np.float64:
            M = M.astype(np.float64)
        shape = M.shape
        row_starts = block_starts(shape[0], comm.size)
        reqs = []
        for r in range(1, comm.size):
            blk = M[row_starts[r]:row_starts[r + 1]]
            reqs.append(comm.isend_obj(r, tag, (shape, blk.indptr, blk.indices, blk.data)))
        mine = M[row_starts[0]:row_starts[1]]
        for q in reqs:
            q.wait()
    else:
        shape, indptr, indices, data = comm.recv_obj(0, tag)
        row_starts = block_starts(shape[0], comm.size)
        n = int(row_starts[comm.rank + 1] - row_starts[comm.rank])
        mine = sp.csr_matrix((data, indices, indptr), shape=(n, shape[1]))
    col_starts = block_starts(shape[1], comm.size)
    A, B, garray = split_rows(mine, col_starts, comm.rank)
    return SplitMatrix(A, B, garray, row_starts, col_starts, comm.rank)


def build_ghost_sf(comm, matrix: SplitMatrix, algorithm: Optional[str] = None) -> StarForest:
    """Roots: owned vector entries. Leaves: ``lvec`` slots ``0..len(garray)-1``, in order."""
    g = matrix.garray
    ncols = matrix.shape[1]
    if g.size and (g[0] < 0 or g[-1] >= ncols):
        raise GraphError(f"global column outside [0, {ncols})")
    owners = np.searchsorted(matrix.col_starts, g, side="right") - 1
    offsets = g - matrix.col_starts[owners]
    lo, hi = matrix.col_range
    sf = StarForest(comm)
    sf.set_graph(hi - lo, g.size, None, np.stack([owners, offsets], axis=1) if g.size else [])
    sf.setup(algorithm)
    return sf


def ghost_vector(matrix: SplitMatrix, owned: np.ndarray) -> GhostVector:
    lo, hi = matrix.col_range
    if owned.shape != (hi - lo,):
        raise ValueError(f"owned segment has shape {owned.shape}, layout needs ({hi - lo},)")
    return GhostVector(np.ascontiguousarray(owned), np.zeros(matrix.garray.size, dtype=owned.dtype))


def spmv(sf: StarForest, matrix: SplitMatrix, x: GhostVector, y: np.ndarray) -> None:
    """``y = M @ x``: ghost update overlapped with the diagonal-block product."""
    lo, hi = matrix.row_range
    if y.shape != (hi - lo,) or x.owned.shape != (matrix.A.shape[1],):
        raise ValueError("vector sizes do not match the matrix layout")
    unit = Unit.coerce(x.owned.dtype)
    h = ops.bcast_begin(sf, unit, x.owned, x.lvec, ReduceOp.REPLACE)
    y[:] = matrix.A @ x.owned
    ops.bcast_end(h)
    y += matrix.B @ x.lvec


def spmv_transpose(sf: StarForest, matrix: SplitMatrix, x: np.ndarray, y: GhostVector) -> None:
    """``y = M.T @ x`` with ``x`` in row layout; off-rank contributions are summed at their owners."""
    lo, hi = matrix.row_range
    if x.shape != (hi - lo,) or y.owned.shape != (matrix.A.shape[1],):
        raise ValueError("vector sizes do not match the matrix layout")
    y.owned[:] = matrix.A.T @ x
    y.lvec[:] = matrix.B.T @ x
    ops.reduce(sf, Unit.coerce(x.dtype), y.lvec, y.owned, ReduceOp.SUM)


def laplacian_2d(n: int, dtype=np.float64) -> sp.csr_matrix:
    """Five-point Laplacian on an ``n x n`` grid (``n*n`` rows)."""
    T = sp.diags([-1, 4, -1], [-1, 0, 1], shape=(n, n))
    S = sp.diags([-1, -1], [-1, 1], shape=(n, n))
    return sp.csr_matrix(sp.kron(sp.identity(n), T) + sp.kron(S, sp.identity(n)), dtype=dtype)


def random_matrix(rng: np.random.Generator, nrows: int, ncols: int, density: float, integer: bool = False) -> sp.csr_matrix:
    M = sp.random(nrows, ncols, density=density, format="csr", random_state=rng)
    if integer:
        M.data = rng.integers(-9, 10, size=M.data.size).astype(np.int64)
        return sp.csr_matrix(M, dtype=np.int64)
    M.data = rng.standard_normal(M.data.size)
    return M


def default_x(n: int, dtype=np.float64) -> np.ndarray:
    return (1 + np.arange(n) % 7).astype(dtype)


def run(comm, source, transpose: bool = False, x: Optional[np.ndarray] = None) -> tuple[int, np.ndarray]:
    """Collective driver: ``(first global index, local part of y)`` for ``y = M @ x`` or ``M.T @ x``.

    ``x`` is the full input vector (every rank slices its own part);
    defaults to :func:`default_x`.
    """
    mat = distribute_matrix(comm, source if comm.rank == 0 else None)
    sf = build_ghost_sf(comm, mat)
    nrows, ncols = mat.shape
    rlo, rhi = mat.row_range
    clo, chi = mat.col_range
    if transpose:
        x = default_x(nrows, mat.dtype) if x is None else np.asarray(x, dtype=mat.dtype)
        y = ghost_vector(mat, np.zeros(chi - clo, dtype=mat.dtype))
        spmv_transpose(sf, mat, x[rlo:rhi].copy(), y)
        return clo, y.owned
    x = default_x(ncols, mat.dtype) if x is None else np.asarray(x, dtype=mat.dtype)
    y = np.zeros(rhi - rlo, dtype=mat.dtype)
    spmv(sf, mat, ghost_vector(mat, x[clo:chi].copy()), y)
    return rlo, y

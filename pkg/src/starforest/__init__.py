"""Star-forest graph communication.

    >>> from starforest import RunConfig, run_ranks, StarForest, bcast, INT64
    >>> import numpy as np
    >>> def body(comm):
    ...     sf = StarForest(comm)
    ...     other = 1 - comm.rank
    ...     sf.set_graph(1, 1, None, [(other, 0)])
    ...     sf.setup()
    ...     leaf = np.zeros(1, np.int64)
    ...     bcast(sf, INT64, np.array([10 + comm.rank]), leaf)
    ...     return int(leaf[0])
    >>> run_ranks(RunConfig(nranks=2), body)
    [11, 10]
"""

from .graph import (
    GraphError,
    GraphSpec,
    RootRef,
    SetupError,
    StarForest,
    State,
    StateError,
    TwoSidedInfo,
    compute_degrees,
    create,
    format_graph,
    from_spec,
    get_multi_sf,
    parse_graph,
)
from .harness import RankFailure, RunConfig, random_sf, run_ranks
from .ops import (
    BufferModifiedError,
    BufferSpace,
    OpHandle,
    OpKind,
    bcast,
    bcast_begin,
    bcast_end,
    fetch_and_op,
    fetch_and_op_begin,
    fetch_and_op_end,
    gather,
    gather_begin,
    gather_end,
    reduce,
    reduce_begin,
    reduce_end,
    scatter_begin,
    scatter_end,
    scatter_multi,
)
from .pack import FLOAT64, INT32, INT64, PackStats, ReduceOp, Unit
from .transform import compose, compose_inverse, embed_leaves, embed_roots, identity

__all__ = [name for name in dir() if not name.startswith("_")]

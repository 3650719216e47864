from .base import (
    ANY_SOURCE,
    Aborted,
    Communicator,
    Request,
    TransportError,
    TransportTimeout,
    wait_all,
)
from .discovery import (
    CONSENSUS_THRESHOLD,
    discover,
    discover_consensus,
    discover_dense,
    discover_leaf_ranks_consensus,
    discover_leaf_ranks_dense,
)
from .threads import ThreadComm, ThreadWorld

__all__ = [
    "ANY_SOURCE",
    "Aborted",
    "Communicator",
    "CONSENSUS_THRESHOLD",
    "Request",
    "ThreadComm",
    "ThreadWorld",
    "TransportError",
    "TransportTimeout",
    "discover",
    "discover_consensus",
    "discover_dense",
    "discover_leaf_ranks_consensus",
    "discover_leaf_ranks_dense",
    "wait_all",
]

"""Reverse-edge discovery: each rank names the ranks it targets, and learns
which ranks target it together with the payload they attached.

Two algorithms with identical results:

* ``dense`` sums a size-``P`` indicator vector over all ranks so every rank
  knows how many messages to expect, then receives that many. Simple, but
  the allreduce is O(P) per rank.
* ``consensus`` is the nonblocking-consensus pattern (NBX): synchronous
  sends to targets, a probe/receive loop, and a nonblocking barrier entered
  once all local sends have been matched. The loop ends when the barrier
  completes, at which point every message in the system has been received.
"""

from __future__ import annotations

from typing import Any, Iterable, Mapping, Union

import numpy as np

from .base import Communicator, wait_all

Targets = Union[Mapping[int, Any], Iterable[int]]

# communicator size above which setup defaults to the consensus algorithm
CONSENSUS_THRESHOLD = 64


def _normalize(comm: Communicator, targets: Targets) -> dict[int, Any]:
    if isinstance(targets, Mapping):
        messages = dict(targets)
    else:
        messages = {int(r): None for r in targets}
    for r in messages:
        comm._check_peer(r)
    return messages


def discover_dense(comm: Communicator, targets: Targets, tag: int) -> dict[int, Any]:
    """Return ``{source rank: payload}`` for every rank that listed this one."""
    messages = _normalize(comm, targets)
    indicator = np.zeros(comm.size, dtype=np.int64)
    indicator[list(messages)] = 1
    counts = comm.allreduce_sum(indicator)
    received = {}
    if comm.rank in messages:
        received[comm.rank] = messages[comm.rank]
    reqs = [comm.isend_obj(dest, tag, payload) for dest, payload in messages.items() if dest != comm.rank]
    expected = int(counts[comm.rank]) - len(received)
    for _ in range(expected):
        src = comm.probe(tag)
        received[src] = comm.recv_obj(src, tag)
    wait_all(reqs)
    return dict(sorted(received.items()))


def discover_consensus(comm: Communicator, targets: Targets, tag: int) -> dict[int, Any]:
    """Same contract as :func:`discover_dense`, computed with NBX."""
    messages = _normalize(comm, targets)
    received = {}
    if comm.rank in messages:
        received[comm.rank] = messages[comm.rank]
    sends = [
        comm.isend_obj(dest, tag, payload, synchronous=True)
        for dest, payload in messages.items()
        if dest != comm.rank
    ]
    barrier = None
    while True:
        gen = comm.mailbox.generation
        src = comm.iprobe(tag)
        if src is not None:
            received[src] = comm.recv_obj(src, tag)
            continue
        if barrier is None:
            if all(s.test() for s in sends):
                barrier = comm.ibarrier()
                continue
        elif barrier.test():
            break
        comm.wait_activity(gen)
    return dict(sorted(received.items()))


def discover_leaf_ranks_dense(comm: Communicator, root_ranks: Iterable[int], tag: int) -> list[int]:
    return list(discover_dense(comm, root_ranks, tag))


def discover_leaf_ranks_consensus(comm: Communicator, root_ranks: Targets, tag: int) -> list[tuple[int, Any]]:
    return list(discover_consensus(comm, root_ranks, tag).items())


def discover(comm: Communicator, targets: Targets, tag: int, algorithm: str | None = None) -> dict[int, Any]:
    if algorithm is None:
        algorithm = "consensus" if comm.size > CONSENSUS_THRESHOLD else "dense"
    if algorithm == "dense":
        return discover_dense(comm, targets, tag)
    if algorithm == "consensus":
        return discover_consensus(comm, targets, tag)
    raise ValueError(f"unknown discovery algorithm {algorithm!r}")

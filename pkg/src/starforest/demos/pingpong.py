"""Ping-pong latency over a two-rank star forest.

``n`` roots on rank 0, ``n`` leaves on rank 1, leaf ``i`` attached to root
``i``. One round trip is a bcast (Replace) followed by a reduce (Replace)
that bounces the message back; the reported latency is half of it.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import ops
from ..graph import StarForest
from ..pack import ReduceOp, Unit

BYTES = Unit("bytes", 1)
CSV_COLUMNS = ("bytes", "backend", "iters", "median_us", "min_us")
DEFAULT_SIZES = tuple(1024 * 4**k for k in range(7))  # 1K .. 4M


class IntegrityError(AssertionError):
    pass


@dataclass
class LatencyRow:
    nbytes: int
    backend: str
    iters: int
    median_us: float
    min_us: float

    def as_tuple(self):
        return (self.nbytes, self.backend, self.iters, f"{self.median_us:.3f}", f"{self.min_us:.3f}")


def sizes_between(min_bytes: int, max_bytes: int, factor: int = 4) -> list[int]:
    if min_bytes < 1 or max_bytes < min_bytes:
        raise ValueError("need 1 <= min_bytes <= max_bytes")
    out, n = [], min_bytes
    while n <= max_bytes:
        out.append(n)
        n *= factor
    return out


def pingpong_sf(comm, n: int) -> StarForest:
    if comm.size != 2:
        raise ValueError(f"ping-pong needs exactly 2 ranks, got {comm.size}")
    sf = StarForest(comm)
    if comm.rank == 0:
        sf.set_graph(n, 0, None, [])
    else:
        sf.set_graph(0, n, None, np.stack([np.zeros(n, np.int64), np.arange(n)], axis=1))
    sf.setup()
    return sf


def base_pattern(n: int) -> np.ndarray:
    return ((np.arange(n, dtype=np.int64) * 7) % 251).astype(np.uint8)


def stamp(base: np.ndarray, iteration: int, side: int, out=None) -> np.ndarray:
    """The payload of one iteration and direction (wrapping uint8 arithmetic)."""
    return np.add(base, np.uint8((iteration * 13 + side * 101) % 256), out=out)


def run(comm, sizes: Sequence[int] = DEFAULT_SIZES, iters: int = 20, warmup: int = 3, backend: str = "") -> list[LatencyRow]:
    """Collective over 2 ranks. Rank 0 returns the latency rows, rank 1 an empty list."""
    rows = []
    for n in sizes:
        sf = pingpong_sf(comm, n)
        roots = np.zeros(sf.nroots, np.uint8)
        leaves = np.zeros(sf.leaf_space, np.uint8)
        base = base_pattern(n)
        expect = np.empty(n, np.uint8)
        samples = []
        for it in range(warmup + iters):
            if comm.rank == 0:
                stamp(base, it, 0, out=roots)
            t0 = time.perf_counter()
            ops.bcast(sf, BYTES, roots, leaves, ReduceOp.REPLACE)
            if comm.rank == 1:
                if not np.array_equal(leaves, stamp(base, it, 0, out=expect)):
                    raise IntegrityError(f"{n} bytes, iteration {it}: corrupted ping payload")
                stamp(base, it, 1, out=leaves)
            ops.reduce(sf, BYTES, leaves, roots, ReduceOp.REPLACE)
            dt = time.perf_counter() - t0
            if comm.rank == 0:
                if not np.array_equal(roots, stamp(base, it, 1, out=expect)):
                    raise IntegrityError(f"{n} bytes, iteration {it}: corrupted pong payload")
                if it >= warmup:
                    samples.append(dt / 2 * 1e6)
        if comm.rank == 0:
            rows.append(LatencyRow(n, backend, iters, statistics.median(samples), min(samples)))
    return rows


def to_csv(rows: Sequence[LatencyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.as_tuple())
    return buf.getvalue()

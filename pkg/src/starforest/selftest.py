"""Oracle suites for the library, runnable on any backend.

Each suite is a module-level ``body(comm, seed, trials, ...)`` returning the
list of mismatches seen on that rank, so it can be shipped to spawned
processes as well as threads. :func:`run_suites` drives them through the
harness and is what ``sf selftest`` calls.
"""

from __future__ import annotations

import time
from importlib import resources
from typing import Optional

import numpy as np

from . import graph, oracle, ops
from .harness import RunConfig, random_sf, rank_rng, replace_config, run_ranks
from .pack import ReduceOp, Unit
from .transport import discover_consensus, discover_dense, tags

SUM_LIKE = (ReduceOp.SUM, ReduceOp.PROD, ReduceOp.MAX, ReduceOp.MIN, ReduceOp.LAND, ReduceOp.LOR, ReduceOp.BAND, ReduceOp.BOR)


def load_corpus(name: str) -> list[graph.GraphSpec]:
    text = resources.files("starforest").joinpath("corpus", name).read_text()
    return graph.parse_graph(text)


def _shared_rng(comm, seed: int, trial: int) -> np.random.Generator:
    # identical on every rank, for choices that must agree
    return np.random.default_rng([seed, trial, 0xC0FFEE])


def _values(rng, n: int) -> np.ndarray:
    return rng.integers(-50, 50, size=n).astype(np.int64)


def _compare(label: str, got: np.ndarray, want: np.ndarray, failures: list) -> None:
    if not np.array_equal(got, want):
        failures.append(f"{label}: got {got.tolist()} expected {want.tolist()}")


def oracle_suite(comm, seed: int, trials: int, max_vertices: int = 64) -> list[str]:
    """Random star forests; every operation bit-matches the edge-list oracle."""
    rng = rank_rng(seed, comm.rank)
    failures: list[str] = []
    me = comm.rank
    for trial in range(trials):
        shared = _shared_rng(comm, seed, trial)
        bl = int(shared.choice([1, 1, 2, 3]))
        unit = Unit("int64", bl)
        sf = random_sf(comm, rng, max_vertices)
        sf.force_remote = bool(shared.random() < 0.2)
        sf.setup(str(shared.choice(["dense", "consensus"])))
        specs = oracle.gather_specs(sf)
        label = f"trial {trial}"

        roots = _values(rng, sf.nroots * bl)
        leaves = _values(rng, sf.leaf_space * bl)
        all_roots, all_leaves = comm.allgather_obj(roots), comm.allgather_obj(leaves)

        bop = ReduceOp.REPLACE if shared.random() < 0.5 else ReduceOp.SUM
        got = leaves.copy()
        ops.bcast(sf, unit, roots, got, bop)
        _compare(f"{label} bcast {bop.name}", got, oracle.bcast(specs, all_roots, all_leaves, bop, bl)[me], failures)

        rop = SUM_LIKE[int(shared.integers(len(SUM_LIKE)))]
        got = roots.copy()
        ops.reduce(sf, unit, leaves, got, rop)
        _compare(f"{label} reduce {rop.name}", got, oracle.reduce(specs, all_leaves, all_roots, rop, bl)[me], failures)

        got_roots, update = roots.copy(), np.zeros_like(leaves)
        ops.fetch_and_op(sf, unit, got_roots, leaves, update, ReduceOp.SUM)
        want_roots, want_update = oracle.fetch_and_op(specs, all_roots, all_leaves, comm.allgather_obj(update), ReduceOp.SUM, bl)
        _compare(f"{label} fetch-and-op roots", got_roots, want_roots[me], failures)
        _compare(f"{label} fetch-and-op leafupdate", update, want_update[me], failures)

        multi = graph.get_multi_sf(sf)
        gathered = np.zeros(multi.nroots * bl, dtype=np.int64)
        ops.gather(sf, unit, leaves, gathered)
        _compare(f"{label} gather", gathered, oracle.gather(specs, all_leaves, bl)[me], failures)
        back = np.zeros_like(leaves)
        ops.scatter_multi(sf, unit, gathered, back)
        connected = np.zeros(sf.leaf_space, dtype=bool)
        connected[sf.leaf_indices] = True
        mask = np.repeat(connected, bl)
        _compare(f"{label} scatter round trip", back[mask], leaves[mask], failures)
        mdeg = multi.degrees()
        if mdeg.size and mdeg.max() > 1:
            failures.append(f"{label}: multi-SF root with degree {int(mdeg.max())}")
    return failures


def duality_suite(comm, seed: int, trials: int, max_vertices: int = 64) -> list[str]:
    """reduce(SUM) equals the oracle's bcast(SUM) on the transposed graph (roots of degree <= 1)."""
    rng = rank_rng(seed + 1, comm.rank)
    failures: list[str] = []
    me = comm.rank
    for trial in range(trials):
        sf = random_sf(comm, rng, max_vertices, max_degree_one=True)
        sf.setup()
        tspecs = oracle.transpose(oracle.gather_specs(sf))
        leaves = _values(rng, sf.leaf_space)
        roots = _values(rng, sf.nroots)
        got = roots.copy()
        ops.reduce(sf, "int64", leaves, got, ReduceOp.SUM)
        want = oracle.bcast(tspecs, comm.allgather_obj(leaves), comm.allgather_obj(roots), ReduceOp.SUM)[me]
        _compare(f"trial {trial} duality", got, want, failures)
    return failures


def discovery_suite(comm, seed: int, trials: int) -> list[str]:
    """Dense and consensus discovery agree with the transpose of the relation."""
    failures: list[str] = []
    size, me = comm.size, comm.rank
    for trial in range(trials):
        shared = _shared_rng(comm, seed + 2, trial)
        kind = trial % 4
        if kind == 0:
            rel = np.zeros((size, size), dtype=bool)
        elif kind == 1:
            rel = np.zeros((size, size), dtype=bool)
            rel[:, int(shared.integers(size))] = True
        else:
            rel = shared.random((size, size)) < shared.random()
        targets = {int(t): np.array([me, t], dtype=np.int64) for t in np.flatnonzero(rel[me])}
        want = [int(s) for s in np.flatnonzero(rel[:, me])]
        for name, fn in (("dense", discover_dense), ("consensus", discover_consensus)):
            tag = tags.make_tag(tags.SETUP, comm.next_context_id(), 0)
            got = fn(comm, targets, tag)
            if sorted(got) != want or any(np.asarray(v).tolist() != [s, me] for s, v in got.items()):
                failures.append(f"trial {trial} {name}: got {sorted(got)} expected {want}")
    return failures


SAMPLE_ROOTS = [[11, 12, 13], [21, 22, 23, 24], [31, 32]]
SAMPLE_LEAVES = [[110, 120, 130, 140], [210, 220, 230, 240], [310, 320, 330]]
SAMPLE_BCAST = [[23, 21, 21, 13], [31, 11, 230, 32], [11, 21, 24]]
SAMPLE_REDUCE = [[541, 12, 153], [591, 22, 133, 354], [241, 272]]
SAMPLE_DEGREES = [[2, 0, 1], [3, 0, 1, 1], [1, 1]]


def sample_suite(comm, seed: int = 0, trials: int = 1) -> list[str]:
    """The three-rank example graph from the corpus, with hand-derived values."""
    if comm.size != 3:
        return [f"sample needs 3 ranks, got {comm.size}"]
    me = comm.rank
    failures: list[str] = []
    sf = graph.from_spec(comm, load_corpus("sample.sf")[me])
    _compare("sample degrees", sf.degrees(), np.array(SAMPLE_DEGREES[me]), failures)
    leaves = np.array(SAMPLE_LEAVES[me], dtype=np.int64)
    ops.bcast(sf, "int64", np.array(SAMPLE_ROOTS[me], dtype=np.int64), leaves)
    _compare("sample bcast", leaves, np.array(SAMPLE_BCAST[me]), failures)
    roots = np.array(SAMPLE_ROOTS[me], dtype=np.int64)
    ops.reduce(sf, "int64", np.array(SAMPLE_LEAVES[me], dtype=np.int64), roots, ReduceOp.SUM)
    _compare("sample reduce", roots, np.array(SAMPLE_REDUCE[me]), failures)
    return failures


SUITES = {
    "oracle": oracle_suite,
    "duality": duality_suite,
    "discovery": discovery_suite,
    "sample": sample_suite,
}


def run_suites(config: RunConfig, seed: int, trials: int, names: Optional[list[str]] = None) -> list[tuple[str, int, float, list[str]]]:
    """``(suite, nranks, seconds, failures)`` per suite run; sample always uses 3 ranks."""
    out = []
    for name in names or list(SUITES):
        cfg = replace_config(config, nranks=3) if name == "sample" else config
        t0 = time.perf_counter()
        per_rank = run_ranks(cfg, SUITES[name], seed, trials)
        failures = [f"rank {r}: {msg}" for r, msgs in enumerate(per_rank) for msg in msgs]
        out.append((name, cfg.nranks, time.perf_counter() - t0, failures))
    return out

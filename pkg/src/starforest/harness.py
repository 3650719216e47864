"""Run a per-rank body on N ranks and collect the results.

    >>> def body(comm):
    ...     return comm.rank
    >>> run_ranks(RunConfig(nranks=2), body)
    [0, 1]

Backends: ``threads`` (default, in-process), ``onesided`` (threads plus an
emulated symmetric heap; star-forest data moves through put/signal), and
``sockets`` (one spawned process per rank over local TCP; ``body`` must be
picklable, i.e. a module-level function).
"""

from __future__ import annotations

import dataclasses
import multiprocessing
import os
import queue as queue_mod
import tempfile
import threading
import time
import traceback
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from .transport import Aborted, Communicator, ThreadWorld, TransportTimeout

BACKENDS = ("threads", "onesided", "sockets")


@dataclass
class RunConfig:
    nranks: int = 2
    backend: str = "threads"
    timeout: float = 30.0
    seed: int = 0
    deterministic: bool = True
    debug: bool = False
    # one-sided emulation only
    put_delay: float = 0.0
    heap_bytes: int = 256 << 20

    def __post_init__(self):
        if self.nranks < 1:
            raise ValueError("nranks must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")

    @classmethod
    def from_env(cls, **overrides) -> "RunConfig":
        """Defaults <- SF_* environment variables <- explicit overrides (CLI flags)."""
        env = os.environ
        values: dict[str, Any] = {}
        if "SF_NRANKS" in env:
            values["nranks"] = int(env["SF_NRANKS"])
        if "SF_TRANSPORT" in env:
            values["backend"] = env["SF_TRANSPORT"]
        if "SF_SEED" in env:
            values["seed"] = int(env["SF_SEED"])
        if "SF_TIMEOUT_S" in env:
            values["timeout"] = float(env["SF_TIMEOUT_S"])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class RankFailure(RuntimeError):
    """Some ranks raised or stalled. ``failed`` maps rank -> formatted traceback."""

    def __init__(self, failed: dict[int, str], stalled: list[int], results: list):
        self.failed = failed
        self.stalled = stalled
        self.results = results
        parts = []
        if stalled:
            parts.append(f"stalled/timed out ranks: {stalled}")
        if failed:
            parts.append("failed ranks: " + ", ".join(str(r) for r in sorted(failed)))
            first = min(failed)
            parts.append(f"--- rank {first} ---\n{failed[first]}")
        super().__init__("\n".join(parts))


def rank_rng(seed: int, rank: int) -> np.random.Generator:
    # SeedSequence hashes the (seed, rank) pair
    return np.random.default_rng([seed, rank])


def _configure(comm: Communicator, config: RunConfig) -> None:
    comm.rng = rank_rng(config.seed, comm.rank)
    comm.deterministic = config.deterministic
    comm.debug = config.debug


def run_ranks(config: RunConfig, body: Callable[..., Any], *args) -> list:
    """Run ``body(comm, *args)`` on every rank; return the per-rank results.

    Raises :class:`RankFailure` naming the ranks that raised or stalled.
    """
    if config.backend == "sockets":
        return _run_processes(config, body, args)
    return _run_threads(config, body, args)


def _run_threads(config: RunConfig, body, args) -> list:
    world = ThreadWorld(config.nranks, timeout=config.timeout)
    if config.backend == "onesided":
        from .symheap import attach_heaps

        attach_heaps(world, config.heap_bytes, put_delay=config.put_delay, seed=config.seed)
    results: list = [None] * config.nranks
    failed: dict[int, str] = {}
    timed_out: set[int] = set()
    aborted: set[int] = set()
    lock = threading.Lock()

    def runner(comm):
        _configure(comm, config)
        try:
            value = body(comm, *args)
        except TransportTimeout:
            with lock:
                timed_out.add(comm.rank)
                failed[comm.rank] = traceback.format_exc()
            world.abort()
        except Aborted:
            with lock:
                aborted.add(comm.rank)
        except BaseException:
            with lock:
                failed[comm.rank] = traceback.format_exc()
            world.abort()
        else:
            results[comm.rank] = value

    threads = [
        threading.Thread(target=runner, args=(c,), name=f"sf-rank-{c.rank}", daemon=True) for c in world.comms
    ]
    for t in threads:
        t.start()
    deadline = time.monotonic() + config.timeout + 1.0
    for t in threads:
        t.join(max(deadline - time.monotonic(), 0.0))
    alive = [r for r, t in enumerate(threads) if t.is_alive()]
    if alive:
        world.abort()
        for t in threads:
            t.join(1.0)
    if world.comms[0].heap is not None:
        world.comms[0].heap.space.shutdown()
    stalled = sorted(set(alive) | timed_out)
    failed = {r: tb for r, tb in failed.items() if r not in timed_out}
    if stalled or failed:
        raise RankFailure(failed, stalled, results)
    # aborted-only means another rank failed first; covered above
    return results


def _socket_child(rank, addresses, config, body, args, out):
    from .transport.sockets import SocketComm

    comm = SocketComm(rank, addresses, timeout=config.timeout)
    _configure(comm, config)
    try:
        value = body(comm, *args)
        comm.barrier()
        out.put((rank, "ok", value))
    except TransportTimeout:
        out.put((rank, "timeout", traceback.format_exc()))
    except BaseException:
        out.put((rank, "error", traceback.format_exc()))
    finally:
        comm.close()


def _run_processes(config: RunConfig, body, args) -> list:
    from .transport.sockets import free_ports, write_manifest

    ctx = multiprocessing.get_context("spawn")
    host = "127.0.0.1"
    addresses = [(host, p) for p in free_ports(config.nranks, host)]
    with tempfile.TemporaryDirectory() as tmp:
        write_manifest(os.path.join(tmp, "manifest.json"), addresses)
        out = ctx.Queue()
        procs = [
            ctx.Process(target=_socket_child, args=(r, addresses, config, body, args, out), daemon=True)
            for r in range(config.nranks)
        ]
        for p in procs:
            p.start()
        results: list = [None] * config.nranks
        failed: dict[int, str] = {}
        stalled: list[int] = []
        pending = set(range(config.nranks))
        # allow for interpreter start-up on top of the protocol timeout
        deadline = time.monotonic() + config.timeout + 15.0
        while pending:
            try:
                rank, status, value = out.get(timeout=max(deadline - time.monotonic(), 0.01))
            except queue_mod.Empty:
                break
            pending.discard(rank)
            if status == "ok":
                results[rank] = value
            elif status == "timeout":
                stalled.append(rank)
            else:
                failed[rank] = value
        stalled = sorted(set(stalled) | pending)
        for p in procs:
            p.join(1.0 if not pending else 0.1)
            if p.is_alive():
                p.terminate()
    if stalled or failed:
        raise RankFailure(failed, stalled, results)
    return results


def random_sf(
    comm: Communicator,
    rng: np.random.Generator,
    max_vertices: int,
    *,
    contiguous_prob: float = 0.25,
    nroots: Optional[int] = None,
    leaf_space: Optional[int] = None,
    max_degree_one: bool = False,
):
    """Collectively build a random star forest (graph set, not set up).

    Each rank draws its own sizes and edges from ``rng``; root counts are
    allgathered first so every remote reference is valid. Self edges,
    isolated leaves and zero-degree roots all occur with positive probability.
    ``nroots``/``leaf_space`` pin the local sizes instead of drawing them;
    ``max_degree_one`` gives every root at most one leaf.
    """
    from .graph import StarForest

    if nroots is None:
        nroots = int(rng.integers(0, max_vertices + 1))
    all_nroots = comm.allgather_obj(nroots)
    owners = np.array([r for r, n in enumerate(all_nroots) if n > 0], dtype=np.int64)
    if leaf_space is None:
        leaf_space = int(rng.integers(0, max_vertices + 1))
    sf = StarForest(comm)
    if max_degree_one:
        # collective on every rank, even those without leaves
        nleaves = int(rng.integers(0, leaf_space + 1)) if owners.size else 0
        return _injective_sf(comm, rng, sf, nroots, all_nroots, leaf_space, nleaves)
    if owners.size == 0 or leaf_space == 0:
        sf.set_graph(nroots, 0, None, [], leaf_space=leaf_space)
        return sf
    nleaves = int(rng.integers(0, leaf_space + 1))
    if nleaves == leaf_space and rng.random() < contiguous_prob:
        local = None
    else:
        local = rng.choice(leaf_space, size=nleaves, replace=False)
    ranks = owners[rng.integers(0, owners.size, size=nleaves)]
    offsets = np.array([rng.integers(0, all_nroots[r]) for r in ranks], dtype=np.int64)
    sf.set_graph(nroots, nleaves, local, np.stack([ranks, offsets], axis=1) if nleaves else [], leaf_space=leaf_space)
    return sf


def _injective_sf(comm, rng, sf, nroots, all_nroots, leaf_space, nleaves):
    # one shared permutation of all roots, dealt out in rank order
    counts = comm.allgather_obj(nleaves)
    total = sum(all_nroots)
    if sum(counts) > total:
        nleaves = nleaves * total // sum(counts)
        counts = comm.allgather_obj(nleaves)
    perm_seed = comm.bcast_obj(int(rng.integers(1 << 31)))
    perm = np.random.default_rng(perm_seed).permutation(total)
    starts = np.concatenate([[0], np.cumsum(all_nroots)])
    mine = perm[sum(counts[: comm.rank]): sum(counts[: comm.rank + 1])]
    ranks = np.searchsorted(starts, mine, side="right") - 1
    local = rng.choice(leaf_space, size=nleaves, replace=False)
    sf.set_graph(nroots, nleaves, local, np.stack([ranks, mine - starts[ranks]], axis=1) if nleaves else [], leaf_space=leaf_space)
    return sf


def replace_config(config: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(config, **changes)

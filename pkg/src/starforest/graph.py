"""Star-forest graphs.

A star forest is a set of stars, each one root connected to zero or more
leaves. It is partitioned across the ranks of a communicator and specified
one-sidedly: each rank lists its *connected* leaves and, for each, the
``(rank, offset)`` address of its root. :meth:`StarForest.setup` inverts
that relation so every rank also knows which remote leaves hang off its
roots, which is what message coalescing needs.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .pack import IndexPattern, PackStats, analyze
from .transport import Communicator, discover, wait_all
from .transport import tags


class State(enum.Enum):
    CREATED = "created"
    GRAPH_SET = "graph-set"
    SET_UP = "set-up"


class RootRef(NamedTuple):
    rank: int
    offset: int


class GraphError(ValueError):
    """Invalid graph description."""


class SetupError(RuntimeError):
    """Setup found an inconsistency that is only detectable collectively."""


class StateError(RuntimeError):
    """Operation called in the wrong lifecycle state."""


@dataclass
class GraphSpec:
    """Plain per-rank description of a star forest (what ``set_graph`` receives)."""

    nroots: int
    leaf_local: np.ndarray
    remote_ranks: np.ndarray
    remote_offsets: np.ndarray
    leaf_space: Optional[int] = None

    @property
    def nleaves(self) -> int:
        return int(self.leaf_local.size)

    def edges(self, rank: int) -> list[tuple[int, int, int, int]]:
        """``(leaf rank, leaf index, root rank, root offset)`` for every local leaf."""
        return [
            (rank, int(l), int(r), int(o))
            for l, r, o in zip(self.leaf_local, self.remote_ranks, self.remote_offsets)
        ]


@dataclass(eq=False)
class TwoSidedInfo:
    """Neighbor lists derived at setup.

    ``root_ranks``: ranks owning roots of local leaves, each with the local
    leaf indices connected to it (ascending). ``leaf_ranks``: ranks owning
    leaves of local roots, each with the local root index of every such edge,
    ordered by ascending leaf index on the leaf rank. Both lists are sorted by
    rank with the local rank moved to the head when present.
    """

    root_ranks: list[tuple[int, np.ndarray]]
    leaf_ranks: list[tuple[int, np.ndarray]]
    self_first: bool
    # root offsets for each leaf in root_ranks, aligned entry by entry
    root_offsets: list[np.ndarray] = field(default_factory=list, repr=False)

    def __eq__(self, other):
        if not isinstance(other, TwoSidedInfo):
            return NotImplemented
        return (
            self.self_first == other.self_first
            and _same_lists(self.root_ranks, other.root_ranks)
            and _same_lists(self.leaf_ranks, other.leaf_ranks)
        )

    def as_lists(self) -> dict:
        return {
            "root_ranks": [(r, a.tolist()) for r, a in self.root_ranks],
            "leaf_ranks": [(r, a.tolist()) for r, a in self.leaf_ranks],
            "self_first": self.self_first,
        }


def _same_lists(a, b) -> bool:
    return len(a) == len(b) and all(ra == rb and np.array_equal(xa, xb) for (ra, xa), (rb, xb) in zip(a, b))


def _self_to_head(entries: list, me: int) -> tuple[list, bool]:
    entries = sorted(entries, key=lambda e: e[0])
    for i, entry in enumerate(entries):
        if entry[0] == me:
            return [entry] + entries[:i] + entries[i + 1:], True
    return entries, False


@dataclass
class Plan:
    """Per-operation routing derived from :class:`TwoSidedInfo`.

    ``root_peers``/``leaf_peers`` are the remote neighbor lists with their
    index patterns; the local edges, if routed locally, are described by
    ``self_root``/``self_leaf``.
    """

    root_peers: list[tuple[int, IndexPattern]]
    leaf_peers: list[tuple[int, IndexPattern]]
    self_root: Optional[IndexPattern] = None
    self_leaf: Optional[IndexPattern] = None


class StarForest:
    """A distributed star forest living on ``comm``.

    Lifecycle: ``created -> graph-set -> set-up``. Construction, setup and
    every derived-graph routine are collective.
    """

    def __init__(self, comm: Communicator):
        self.comm = comm
        self.id = comm.next_context_id()
        self.state = State.CREATED
        self.nroots = 0
        self.nleaves = 0
        self.leaf_local: Optional[np.ndarray] = None
        self.remote_ranks = np.empty(0, dtype=np.int64)
        self.remote_offsets = np.empty(0, dtype=np.int64)
        self.leaf_space = 0
        self.leaf_contiguous = True
        self.info: Optional[TwoSidedInfo] = None
        self.stats = PackStats()
        self.extents: Optional[tuple[int, int]] = None
        self.force_remote = False
        self._op_seq = itertools.count()
        self._plans: dict[bool, Plan] = {}
        self._degrees: Optional[np.ndarray] = None
        self._multi: Optional["StarForest"] = None
        self.onesided = None  # lazily created one-sided transfer state

    def __repr__(self):
        return (
            f"<StarForest id={self.id} rank={self.comm.rank} nroots={self.nroots} "
            f"nleaves={self.nleaves} state={self.state.value}>"
        )

    # -- graph description ----------------------------------------------

    def set_graph(
        self,
        nroots: int,
        nleaves: int,
        leaf_local: Optional[Sequence[int]] = None,
        leaf_remote: Iterable = (),
        *,
        leaf_space: Optional[int] = None,
    ) -> None:
        """Describe the local part of the graph.

        ``leaf_local`` lists the local indices of the ``nleaves`` connected
        leaves (``None``: leaves ``0..nleaves-1``); ``leaf_remote`` gives each
        one's root as a ``(rank, offset)`` pair or an ``(nleaves, 2)`` array.
        """
        if self.state is State.SET_UP:
            raise StateError("graph cannot change after setup; build a new star forest")
        if nroots < 0 or nleaves < 0:
            raise GraphError("nroots and nleaves must be nonnegative")
        remote = np.asarray(list(leaf_remote) if not isinstance(leaf_remote, np.ndarray) else leaf_remote, dtype=np.int64)
        if remote.size == 0:
            remote = remote.reshape(0, 2)
        if remote.ndim != 2 or remote.shape[1] != 2:
            raise GraphError("leaf_remote must be a sequence of (rank, offset) pairs")
        if remote.shape[0] != nleaves:
            raise GraphError(f"leaf_remote has {remote.shape[0]} entries for {nleaves} leaves")
        ranks, offsets = remote[:, 0].copy(), remote[:, 1].copy()
        if nleaves and (ranks.min() < 0 or ranks.max() >= self.comm.size):
            raise GraphError(f"root rank out of range for communicator of size {self.comm.size}")
        if nleaves and offsets.min() < 0:
            raise GraphError("negative root offset")
        if leaf_local is not None:
            local = np.asarray(leaf_local, dtype=np.int64).reshape(-1)
            if local.size != nleaves:
                raise GraphError(f"leaf_local has {local.size} entries for {nleaves} leaves")
            if nleaves and local.min() < 0:
                raise GraphError("negative leaf index")
            if np.unique(local).size != local.size:
                raise GraphError("duplicate leaf index: a leaf can have only one root")
            contiguous = nleaves == 0 or bool(np.array_equal(local, np.arange(local[0], local[0] + nleaves)))
            extent = int(local.max()) + 1 if nleaves else 0
        else:
            local = None
            contiguous = True
            extent = nleaves
        if leaf_space is not None:
            if leaf_space < extent:
                raise GraphError(f"leaf_space {leaf_space} smaller than the largest leaf index + 1 ({extent})")
            extent = leaf_space
        self.nroots = int(nroots)
        self.nleaves = int(nleaves)
        self.leaf_local = local
        self.remote_ranks, self.remote_offsets = ranks, offsets
        self.leaf_space = extent
        self.leaf_contiguous = contiguous
        self.state = State.GRAPH_SET

    @property
    def leaf_indices(self) -> np.ndarray:
        if self.leaf_local is None:
            return np.arange(self.nleaves, dtype=np.int64)
        return self.leaf_local

    def spec(self) -> GraphSpec:
        return GraphSpec(
            self.nroots,
            self.leaf_indices.copy(),
            self.remote_ranks.copy(),
            self.remote_offsets.copy(),
            self.leaf_space,
        )

    def _require(self, *states: State) -> None:
        if self.state not in states:
            wanted = " or ".join(s.value for s in states)
            raise StateError(f"star forest is {self.state.value}; this needs {wanted}")

    # -- setup -----------------------------------------------------------

    def setup(self, algorithm: Optional[str] = None, *, extents: Optional[tuple[int, int]] = None) -> None:
        """Build the two-sided neighbor lists (collective).

        ``algorithm`` is ``"dense"`` or ``"consensus"``; the default picks
        consensus on communicators larger than the configured threshold.
        ``extents = (X, XY)`` enables strided-box detection of index lists.
        """
        if self.state is State.SET_UP:
            return
        self._require(State.GRAPH_SET)
        comm = self.comm
        self.extents = extents
        leaf_idx = self.leaf_indices
        order = np.lexsort((leaf_idx, self.remote_ranks))
        ranks_sorted = self.remote_ranks[order]
        leaves_sorted = leaf_idx[order]
        offs_sorted = self.remote_offsets[order]
        peers, starts = np.unique(ranks_sorted, return_index=True)
        bounds = list(starts) + [ranks_sorted.size]
        root_entries = []
        messages = {}
        for i, peer in enumerate(peers.tolist()):
            lo, hi = bounds[i], bounds[i + 1]
            root_entries.append((peer, leaves_sorted[lo:hi].copy(), offs_sorted[lo:hi].copy()))
            messages[peer] = offs_sorted[lo:hi].copy()

        received = discover(comm, messages, tags.make_tag(tags.SETUP, self.id, 0), algorithm)

        problems = []
        leaf_entries = []
        for src, offsets in received.items():
            offsets = np.asarray(offsets, dtype=np.int64)
            if offsets.size and offsets.max() >= self.nroots:
                problems.append(
                    f"rank {src} references root offset {int(offsets.max())} but rank {comm.rank} has {self.nroots} roots"
                )
            leaf_entries.append((src, offsets))
        if comm.allreduce_max([1 if problems else 0])[0]:
            raise SetupError("; ".join(problems) or "invalid root offset detected on another rank")

        root_entries, self_a = _self_to_head(root_entries, comm.rank)
        leaf_entries, self_b = _self_to_head(leaf_entries, comm.rank)
        self.info = TwoSidedInfo(
            root_ranks=[(r, l) for r, l, _ in root_entries],
            leaf_ranks=leaf_entries,
            self_first=self_a or self_b,
            root_offsets=[o for _, _, o in root_entries],
        )
        self.state = State.SET_UP

    def plan(self, force_remote: Optional[bool] = None) -> Plan:
        """Routing for data operations; local edges go through scatter unless forced remote."""
        self._require(State.SET_UP)
        force = self.force_remote if force_remote is None else force_remote
        cached = self._plans.get(force)
        if cached is not None:
            return cached
        me = self.comm.rank
        plan = Plan(root_peers=[], leaf_peers=[])
        for rank, roots in self.info.leaf_ranks:
            pat = analyze(roots, extents=self.extents)
            if rank == me and not force:
                plan.self_root = pat
            else:
                plan.root_peers.append((rank, pat))
        for rank, leaves in self.info.root_ranks:
            pat = analyze(leaves, extents=self.extents)
            if rank == me and not force:
                plan.self_leaf = pat
            else:
                plan.leaf_peers.append((rank, pat))
        self._plans[force] = plan
        return plan

    def next_tag(self, phase: int = tags.DATA) -> int:
        return tags.make_tag(phase, self.id, next(self._op_seq))

    # -- derived quantities ----------------------------------------------

    def degrees(self) -> np.ndarray:
        """Number of leaves (on any rank) attached to each local root."""
        self._require(State.SET_UP)
        if self._degrees is None:
            deg = np.zeros(self.nroots, dtype=np.int64)
            for _, roots in self.info.leaf_ranks:
                deg += np.bincount(roots, minlength=self.nroots)
            self._degrees = deg
        return self._degrees

    def local_edges(self) -> list[tuple[int, int, int]]:
        return [(int(l), int(r), int(o)) for l, r, o in zip(self.leaf_indices, self.remote_ranks, self.remote_offsets)]


def create(comm: Communicator) -> StarForest:
    return StarForest(comm)


def from_spec(comm: Communicator, spec: GraphSpec, algorithm: Optional[str] = None, setup: bool = True) -> StarForest:
    sf = StarForest(comm)
    remote = np.stack([spec.remote_ranks, spec.remote_offsets], axis=1) if spec.nleaves else []
    sf.set_graph(spec.nroots, spec.nleaves, spec.leaf_local, remote, leaf_space=spec.leaf_space)
    if setup:
        sf.setup(algorithm)
    return sf


def compute_degrees(sf: StarForest) -> np.ndarray:
    return sf.degrees()


def exchange_edge_values(
    sf: StarForest, values: list[np.ndarray], tag: int, *, reverse: bool = False
) -> list[np.ndarray]:
    """Ship one value per edge across the graph over plain two-sided messages.

    Forward: ``values`` is aligned with ``info.leaf_ranks`` (root side) and the
    result with ``info.root_ranks`` (leaf side). ``reverse=True`` swaps the
    roles. Used by setup-time routines that must not depend on data backends.
    """
    info = sf.info
    send_side, recv_side = (info.root_ranks, info.leaf_ranks) if reverse else (info.leaf_ranks, info.root_ranks)
    comm = sf.comm
    me = comm.rank
    mine = None
    reqs = []
    for (peer, _), vals in zip(send_side, values):
        vals = np.ascontiguousarray(vals, dtype=np.int64)
        if peer == me:
            mine = vals
        else:
            reqs.append(comm.isend(peer, tag, vals))
    out = []
    for peer, idx in recv_side:
        if peer == me:
            out.append(mine)
        else:
            buf = np.empty(len(idx), dtype=np.int64)
            comm.recv(peer, tag, buf)
            out.append(buf)
    wait_all(reqs)
    return out


def _occurrence(idx: np.ndarray) -> np.ndarray:
    """For each position, how many earlier positions hold the same value."""
    order = np.argsort(idx, kind="stable")
    s = idx[order]
    first = np.r_[True, s[1:] != s[:-1]] if s.size else np.empty(0, dtype=bool)
    start = np.maximum.accumulate(np.where(first, np.arange(s.size), 0)) if s.size else s
    occ = np.empty(idx.size, dtype=np.int64)
    occ[order] = np.arange(idx.size) - start
    return occ


def get_multi_sf(sf: StarForest) -> StarForest:
    """The multi-SF: every root of degree ``d`` split into ``d`` degree-one roots.

    New roots of one old root are consecutive and ordered by leaf rank
    (local rank first, then ascending) and then by leaf index on that rank.
    Zero-degree roots vanish. Collective; cached on ``sf``.
    """
    sf._require(State.SET_UP)
    if sf._multi is not None:
        return sf._multi
    deg = sf.degrees()
    counter = np.concatenate([[0], np.cumsum(deg)[:-1]]).astype(np.int64) if deg.size else deg.copy()
    slots = []
    for _, roots in sf.info.leaf_ranks:
        slots.append(counter[roots] + _occurrence(roots))
        counter += np.bincount(roots, minlength=sf.nroots)
    received = exchange_edge_values(sf, slots, tags.make_tag(tags.SETUP, sf.id, 1))
    leaf_idx = np.concatenate([l for _, l in sf.info.root_ranks]) if sf.info.root_ranks else np.empty(0, np.int64)
    ranks = np.concatenate([np.full(len(l), r) for r, l in sf.info.root_ranks]) if sf.info.root_ranks else leaf_idx
    offs = np.concatenate(received) if received else leaf_idx
    multi = StarForest(sf.comm)
    order = np.argsort(leaf_idx, kind="stable")
    remote = np.stack([ranks[order], offs[order]], axis=1) if leaf_idx.size else []
    multi.set_graph(int(deg.sum()), int(leaf_idx.size), leaf_idx[order], remote, leaf_space=sf.leaf_space)
    multi.setup("dense")
    sf._multi = multi
    return multi


# -- text format ----------------------------------------------------------

TEXT_GRAMMAR = """\
file    := { line }
line    := blank | comment | graph
comment := '#' any-text
graph   := nroots ' ' nleaves { ' ' leaf }      (one graph line per rank, rank order)
leaf    := local ':' rank '.' offset             (all nonnegative decimal integers)
"""


def format_graph(specs: Sequence[GraphSpec]) -> str:
    lines = []
    for spec in specs:
        parts = [str(spec.nroots), str(spec.nleaves)]
        parts += [f"{l}:{r}.{o}" for l, r, o in zip(spec.leaf_local, spec.remote_ranks, spec.remote_offsets)]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> list[GraphSpec]:
    specs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        try:
            nroots, nleaves = int(fields[0]), int(fields[1])
            leaves = []
            for tok in fields[2:]:
                local, rest = tok.split(":")
                rank, offset = rest.split(".")
                leaves.append((int(local), int(rank), int(offset)))
        except (ValueError, IndexError) as exc:
            raise GraphError(f"line {lineno}: cannot parse {raw!r}") from exc
        if len(leaves) != nleaves:
            raise GraphError(f"line {lineno}: declares {nleaves} leaves but lists {len(leaves)}")
        arr = np.array(leaves, dtype=np.int64).reshape(-1, 3)
        specs.append(GraphSpec(nroots, arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy()))
    return specs

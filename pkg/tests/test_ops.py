import itertools

import numpy as np
import pytest

from starforest import (
    INT64,
    BufferModifiedError,
    BufferSpace,
    ReduceOp,
    StarForest,
    StateError,
    Unit,
    bcast,
    bcast_begin,
    bcast_end,
    fetch_and_op,
    gather,
    get_multi_sf,
    reduce,
    reduce_begin,
    reduce_end,
    scatter_multi,
)
from starforest import oracle
from starforest.harness import rank_rng, random_sf
from util import sample_sf, i64, run

ROOTS = [[11, 12, 13], [21, 22, 23, 24], [31, 32]]
LEAVES = [[110, 120, 130, 140], [210, 220, 230, 240], [310, 320, 330]]


@pytest.mark.parametrize("backend", ["threads", "onesided"])
def test_sample_bcast_replace_and_sum(backend):
    def body(comm):
        sf = sample_sf(comm)
        leaves = i64(LEAVES[comm.rank])
        bcast(sf, INT64, i64(ROOTS[comm.rank]), leaves, ReduceOp.REPLACE)
        summed = np.full(sf.leaf_space, 100, np.int64)
        bcast(sf, INT64, i64(ROOTS[comm.rank]), summed, ReduceOp.SUM)
        return leaves.tolist(), summed.tolist()

    out = run(3, body, backend=backend)
    assert [o[0] for o in out] == [[23, 21, 21, 13], [31, 11, 230, 32], [11, 21, 24]]
    assert out[2][1][0] == 111


@pytest.mark.parametrize("backend", ["threads", "onesided"])
def test_sample_reduce_into_zeroed_roots(backend):
    def body(comm):
        sf = sample_sf(comm)
        roots = np.zeros(sf.nroots, np.int64)
        reduce(sf, INT64, i64(LEAVES[comm.rank]), roots, ReduceOp.SUM)
        return roots.tolist()

    assert run(3, body, backend=backend) == [[530, 0, 140], [570, 0, 110, 330], [210, 240]]


def test_sample_gather_slots():
    def body(comm):
        sf = sample_sf(comm)
        m = np.zeros(get_multi_sf(sf).nroots, np.int64)
        gather(sf, INT64, i64(LEAVES[comm.rank]), m)
        back = np.zeros(sf.leaf_space, np.int64)
        scatter_multi(sf, INT64, m, back)
        return m.tolist(), back.tolist()

    out = run(3, body)
    assert out[0][0] == [220, 310, 140]
    assert out[1][1] == [210, 220, 0, 240]  # isolated leaf untouched


def test_reduce_trivia():
    def body(comm):
        sf = StarForest(comm)
        sf.set_graph(1, 1, None, [(0, 0)] if comm.rank == 0 else [(0, 0)])
        sf.setup()
        roots = i64([5])
        reduce(sf, INT64, i64([3]), roots, ReduceOp.MAX)
        zeros = i64([7])
        reduce(sf, INT64, i64([0]), zeros, ReduceOp.SUM)
        return roots.tolist(), zeros.tolist()

    out = run(2, body)
    assert out[0] == ([5], [7])


def test_zero_edge_sf_leaves_data_alone():
    def body(comm):
        sf = StarForest(comm)
        sf.set_graph(2, 0, None, [], leaf_space=3)
        sf.setup()
        leaves = i64([1, 2, 3])
        bcast(sf, INT64, i64([9, 9]), leaves)
        return leaves.tolist()

    assert run(2, body) == [[1, 2, 3]] * 2


def test_fetch_and_op_hand_serialized():
    # one root (init 10) with two leaves on rank 1: [5, 7]
    def body(comm):
        sf = StarForest(comm)
        if comm.rank == 0:
            sf.set_graph(1, 0)
        else:
            sf.set_graph(0, 2, None, [(0, 0), (0, 0)])
        sf.setup()
        roots = i64([10] if comm.rank == 0 else [])
        leaves = i64([] if comm.rank == 0 else [5, 7])
        update = np.zeros_like(leaves)
        fetch_and_op(sf, INT64, roots, leaves, update, ReduceOp.SUM)
        return roots.tolist(), update.tolist()

    out = run(2, body)
    assert out[0][0] == [22]
    assert out[1][1] == [10, 15]


def test_fetch_and_op_free_order_is_some_serialization():
    def body(comm, seed):
        rng = rank_rng(seed, comm.rank)
        ok = []
        for _ in range(10):
            sf = random_sf(comm, rng, 6)
            sf.setup()
            specs = oracle.gather_specs(sf)
            roots = rng.integers(0, 5, sf.nroots).astype(np.int64)
            leaves = rng.integers(1, 9, sf.leaf_space).astype(np.int64)
            init = comm.allgather_obj(roots.copy())
            update = np.zeros_like(leaves)
            fetch_and_op(sf, INT64, roots, leaves, update, ReduceOp.SUM)
            all_leaves, all_update, final = comm.allgather_obj(leaves), comm.allgather_obj(update), comm.allgather_obj(roots)
            by_root = {}
            for lr, li, rr, ro in oracle.edges(specs):
                by_root.setdefault((rr, ro), []).append((int(all_leaves[lr][li]), int(all_update[lr][li])))
            for (rr, ro), pairs in by_root.items():
                start = int(init[rr][ro])
                valid = False
                for perm in itertools.permutations(pairs):
                    acc, good = start, True
                    for contrib, fetched in perm:
                        good &= fetched == acc
                        acc += contrib
                    valid |= good and acc == final[rr][ro]
                ok.append(valid)
        return all(ok)

    assert all(run(3, body, 4, deterministic=False))


def test_fetch_and_op_rejects_replace():
    def body(comm):
        sf = sample_sf(comm)
        with pytest.raises(ValueError):
            fetch_and_op(sf, INT64, i64(ROOTS[comm.rank]), i64(LEAVES[comm.rank]), i64(LEAVES[comm.rank]), ReduceOp.REPLACE)
        return True

    assert all(run(3, body))


def test_two_handles_in_flight_on_one_sf():
    def body(comm):
        sf = sample_sf(comm)
        a = np.zeros(sf.leaf_space, np.int64)
        b = np.zeros(sf.leaf_space, np.float64)
        r = np.zeros(sf.nroots, np.int64)
        h1 = bcast_begin(sf, INT64, i64(ROOTS[comm.rank]), a)
        h2 = bcast_begin(sf, "float64", np.array(ROOTS[comm.rank], np.float64) * 0.5, b)
        h3 = reduce_begin(sf, INT64, i64(LEAVES[comm.rank]), r)
        reduce_end(h3)
        bcast_end(h2)
        bcast_end(h1)
        return a.tolist(), b.tolist(), r.tolist()

    out = run(3, body)
    assert out[0][0] == [23, 21, 21, 13]
    assert out[0][1] == [11.5, 10.5, 10.5, 6.5]
    assert out[1][2] == [570, 0, 110, 330]


def test_force_remote_matches_local_path():
    def body(comm, seed):
        rng = rank_rng(seed, comm.rank)
        same = []
        for _ in range(10):
            sf = random_sf(comm, rng, 12)
            spec = sf.spec()
            sf.setup()
            forced = StarForest(comm)
            forced.set_graph(spec.nroots, spec.nleaves, spec.leaf_local, np.stack([spec.remote_ranks, spec.remote_offsets], 1), leaf_space=spec.leaf_space)
            forced.force_remote = True
            forced.setup()
            roots = rng.integers(-9, 9, sf.nroots).astype(np.int64)
            leaves = rng.integers(-9, 9, sf.leaf_space).astype(np.int64)
            x, y = roots.copy(), roots.copy()
            reduce(sf, INT64, leaves, x, ReduceOp.SUM)
            reduce(forced, INT64, leaves, y, ReduceOp.SUM)
            same.append(np.array_equal(x, y))
        return all(same)

    assert all(run(4, body, 9))
    assert all(run(4, body, 9, backend="onesided"))


def test_debug_mode_detects_buffer_mutation():
    def body(comm):
        sf = sample_sf(comm)
        roots = i64(ROOTS[comm.rank])
        h = bcast_begin(sf, INT64, roots, np.zeros(sf.leaf_space, np.int64))
        roots[0] += 1
        try:
            bcast_end(h)
        except BufferModifiedError:
            return "detected"
        return "missed"

    assert run(3, body, debug=True) == ["detected"] * 3


def test_handle_misuse():
    def body(comm):
        sf = sample_sf(comm)
        h = bcast_begin(sf, INT64, i64(ROOTS[comm.rank]), np.zeros(sf.leaf_space, np.int64))
        with pytest.raises(ValueError, match="belongs to"):
            reduce_end(h)
        bcast_end(h)
        with pytest.raises(StateError):
            bcast_end(h)
        return True

    assert all(run(3, body))


def test_argument_errors():
    def body(comm):
        sf = StarForest(comm)
        sf.set_graph(2, 1, None, [(0, 1)])
        with pytest.raises(StateError):
            bcast(sf, INT64, i64([1, 2]), i64([0]))
        sf.setup()
        with pytest.raises(TypeError):
            bcast(sf, INT64, np.zeros(2, np.float64), i64([0]))
        with pytest.raises(ValueError):
            bcast(sf, INT64, i64([1]), i64([0]))
        with pytest.raises(TypeError):
            reduce(sf, "float64", np.zeros(1), np.zeros(2), ReduceOp.BOR)
        with pytest.raises(ValueError, match="one-sided"):
            bcast_begin(sf, INT64, i64([1, 2]), i64([0]), leafspace=BufferSpace.SYMMETRIC)
        return True

    assert run(1, body) == [True]


def test_replace_reduce_on_shared_root_is_counted():
    def body(comm):
        sf = StarForest(comm)
        sf.set_graph(1, 1, None, [(0, 0)])
        sf.setup()
        roots = i64([0])
        reduce(sf, INT64, i64([comm.rank + 1]), roots, ReduceOp.REPLACE)
        return roots.tolist(), sf.stats.replace_roots

    out = run(3, body)
    assert out[0][0][0] in (1, 2, 3)
    assert out[0][1] == 1 and out[1][1] == 0


def test_blocklen_and_float_units():
    def body(comm):
        sf = sample_sf(comm)
        unit = Unit("float64", 2)
        roots = np.repeat(np.array(ROOTS[comm.rank], np.float64), 2) * np.tile([1.0, -1.0], len(ROOTS[comm.rank]))
        leaves = np.zeros(sf.leaf_space * 2)
        bcast(sf, unit, roots, leaves)
        return leaves.tolist()

    assert run(3, body)[0] == [23, -23, 21, -21, 21, -21, 13, -13]

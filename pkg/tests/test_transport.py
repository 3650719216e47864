import threading
import time

import numpy as np
import pytest

from starforest.harness import RankFailure
from starforest.transport import (
    ANY_SOURCE,
    ThreadWorld,
    TransportTimeout,
    discover,
    discover_consensus,
    discover_dense,
    discover_leaf_ranks_consensus,
    discover_leaf_ranks_dense,
    tags,
)
from starforest.transport.sockets import free_ports, load_manifest, write_manifest
from util import run


def test_tag_layout_round_trip():
    t = tags.make_tag(tags.DATA_REPLY, 0xABCDE, 77)
    assert tags.split_tag(t) == (tags.DATA_REPLY, 0xABCDE, 77)
    assert t < tags.CONTROL_BIT
    assert tags.make_tag(tags.USER, 0, 5) == 5
    with pytest.raises(ValueError):
        tags.make_tag(128)


def test_messages_between_a_pair_do_not_overtake():
    def body(comm):
        if comm.rank == 0:
            reqs = [comm.isend(1, 9, np.array([i], np.int64)) for i in range(50)]
            for r in reqs:
                r.wait()
            return None
        return [int(np.frombuffer(comm.recv(0, 9), np.int64)[0]) for _ in range(50)]

    assert run(2, body)[1] == list(range(50))


def test_receive_posted_before_send_and_into_buffer():
    def body(comm):
        if comm.rank == 1:
            buf = np.zeros(3, np.float64)
            req = comm.irecv(0, 4, buf)
            comm.barrier()
            req.wait()
            return buf.tolist()
        comm.barrier()
        comm.send(1, 4, np.array([1.5, 2.5, 3.5]))

    assert run(2, body)[1] == [1.5, 2.5, 3.5]


def test_size_mismatch_is_an_error():
    def body(comm):
        if comm.rank == 0:
            comm.send(1, 1, np.zeros(4, np.int64))
        else:
            comm.recv(0, 1, np.zeros(3, np.int64))

    with pytest.raises(RankFailure, match="rank 1|ranks: 1"):
        run(2, body, timeout=5)


def test_any_source_and_probe():
    def body(comm):
        if comm.rank == 0:
            seen = set()
            for _ in range(comm.size - 1):
                src = comm.probe(3)
                comm.recv(src, 3)
                seen.add(src)
            return sorted(seen)
        comm.send(0, 3, np.array([comm.rank], np.int64))

    assert run(4, body)[0] == [1, 2, 3]


def test_iprobe_returns_none_when_nothing_pending():
    def body(comm):
        return comm.iprobe(12345, ANY_SOURCE)

    assert run(2, body) == [None, None]


def test_synchronous_send_completes_only_after_match():
    def body(comm):
        if comm.rank == 0:
            req = comm.isend(1, 2, np.zeros(1, np.int64), synchronous=True)
            time.sleep(0.2)
            early = req.test()
            comm.barrier()
            req.wait()
            return early
        comm.barrier()
        comm.recv(0, 2)

    assert run(2, body)[0] is False


def test_collectives():
    def body(comm):
        g = comm.allgather_obj(comm.rank * 10)
        b = comm.bcast_obj("hello" if comm.rank == 2 else None, root=2)
        s = comm.allreduce_sum([comm.rank, 1]).tolist()
        m = comm.allreduce_max([comm.rank]).tolist()
        x = comm.exscan_sum(comm.rank + 1)
        comm.ibarrier().wait()
        return g, b, s, m, x

    out = run(4, body)
    for r, (g, b, s, m, x) in enumerate(out):
        assert g == [0, 10, 20, 30]
        assert b == "hello"
        assert s == [6, 4] and m == [3]
        assert x == sum(range(1, r + 1))


def test_ibarrier_completes_only_when_everyone_arrived():
    def body(comm):
        if comm.rank == 0:
            time.sleep(0.3)
        t0 = time.perf_counter()
        comm.ibarrier().wait()
        return time.perf_counter() - t0

    waits = run(3, body)
    assert min(waits[1:]) > 0.2


def test_receive_timeout_is_reported():
    world = ThreadWorld(1, timeout=0.2)
    with pytest.raises(TransportTimeout):
        world.comms[0].recv(0, 99)


def test_self_send():
    world = ThreadWorld(1)
    comm = world.comms[0]
    comm.send(0, 5, np.arange(3, dtype=np.int64))
    assert np.frombuffer(comm.recv(0, 5), np.int64).tolist() == [0, 1, 2]


def _transpose_relation(comm, rel, fn):
    me = comm.rank
    targets = {t: np.array([me, t], np.int64) for t in range(comm.size) if rel[me][t]}
    got = fn(comm, targets, tags.make_tag(tags.SETUP, comm.next_context_id(), 0))
    return {s: np.asarray(v).tolist() for s, v in got.items()}


@pytest.mark.parametrize("fn", [discover_dense, discover_consensus])
@pytest.mark.parametrize("shape", ["empty", "all-to-one", "full", "random"])
def test_discovery_transposes_the_relation(fn, shape):
    n = 6
    rng = np.random.default_rng(3)
    rel = {
        "empty": np.zeros((n, n), bool),
        "all-to-one": np.eye(n, dtype=bool)[[2] * n],
        "full": np.ones((n, n), bool),
        "random": rng.random((n, n)) < 0.3,
    }[shape]
    out = run(n, _transpose_relation, rel.tolist(), fn)
    for me, got in enumerate(out):
        want = {s: [s, me] for s in range(n) if rel[s][me]}
        assert got == want
        assert list(got) == sorted(got)


def test_discovery_default_and_rank_lists():
    def body(comm):
        me = comm.rank
        t1 = tags.make_tag(tags.SETUP, comm.next_context_id(), 0)
        t2 = tags.make_tag(tags.SETUP, comm.next_context_id(), 0)
        t3 = tags.make_tag(tags.SETUP, comm.next_context_id(), 0)
        targets = [(me + 1) % comm.size]
        dense = discover_leaf_ranks_dense(comm, targets, t1)
        cons = discover_leaf_ranks_consensus(comm, {t: me for t in targets}, t2)
        auto = discover(comm, {t: me for t in targets}, t3)
        return dense, cons, auto

    for me, (dense, cons, auto) in enumerate(run(3, body)):
        src = (me - 1) % 3
        assert dense == [src]
        assert [r for r, _ in cons] == [src] and cons[0][1] == src
        assert auto == {src: src}


def test_manifest_round_trip(tmp_path):
    ports = free_ports(3)
    assert len(set(ports)) == 3
    addrs = [("127.0.0.1", p) for p in ports]
    path = tmp_path / "m.json"
    write_manifest(path, addrs)
    assert load_manifest(path) == addrs


def _socket_body(comm):
    me = comm.rank
    peer = 1 - me
    req = comm.isend(peer, 7, np.full(1000, me, np.int64), synchronous=True)
    data = np.frombuffer(comm.recv(peer, 7), np.int64)
    req.wait()
    return int(data.sum()), comm.allgather_obj(me), comm.backend


def test_sockets_backend_exchanges_messages():
    out = run(2, _socket_body, backend="sockets")
    assert out[0][0] == 1000 and out[1][0] == 0
    assert out[0][1] == [0, 1]
    assert out[0][2] == "sockets"

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from starforest.pack import (
    INT64,
    Contiguous,
    Indexed,
    PackStats,
    ReduceOp,
    Strided3D,
    Unit,
    analyze,
    destination_view,
    fetch_and_apply,
    pack,
    scatter,
    unpack,
)

PY_OPS = {
    ReduceOp.REPLACE: lambda a, b: b,
    ReduceOp.SUM: lambda a, b: a + b,
    ReduceOp.PROD: lambda a, b: a * b,
    ReduceOp.MAX: max,
    ReduceOp.MIN: min,
    ReduceOp.LAND: lambda a, b: int(bool(a) and bool(b)),
    ReduceOp.LOR: lambda a, b: int(bool(a) or bool(b)),
    ReduceOp.BAND: lambda a, b: a & b,
    ReduceOp.BOR: lambda a, b: a | b,
}


def test_analyze_examples():
    assert analyze([3, 4, 5, 6]) == Contiguous(3, 4)
    assert analyze(None, n=5) == Contiguous(0, 5)
    assert analyze([]) == Contiguous(0, 0)
    assert analyze([7]) == Contiguous(7, 1)
    p = analyze([0, 2, 2, 5])
    assert isinstance(p, Indexed) and p.has_duplicates
    assert analyze([5, 1, 3]) == Indexed(np.array([5, 1, 3]))
    with pytest.raises(IndexError):
        analyze([1, -1])


def test_analyze_finds_strided_box():
    # 2x3x2 box starting at 5 inside a 10 x 10 x 10 domain
    box = Strided3D(5, 2, 3, 2, 10, 100)
    idx = box.indices()
    assert analyze(idx, extents=(10, 100)) == box
    # without extents the box shape is not recoverable
    assert isinstance(analyze(idx), Indexed)
    # a near-box with one index moved stays Indexed
    idx2 = idx.copy()
    idx2[-1] += 1
    assert isinstance(analyze(idx2, extents=(10, 100)), Indexed)


index_lists = st.lists(st.integers(0, 30), min_size=0, max_size=25)


@settings(max_examples=200, deadline=None)
@given(idx=index_lists, bl=st.integers(1, 3), data=st.data())
def test_pack_matches_selection_loop(idx, bl, data):
    n = 31
    src = np.arange(n * bl, dtype=np.int64) * 3 + 1
    unit = Unit("int64", bl)
    pat = analyze(idx) if idx else Contiguous(0, 0)
    got = pack(src, pat, unit, PackStats())
    want = [src[i * bl + b] for i in pat.indices().tolist() for b in range(bl)]
    assert got.tolist() == want


@settings(max_examples=300, deadline=None)
@given(
    idx=st.lists(st.integers(0, 12), min_size=1, max_size=20),
    op=st.sampled_from(list(ReduceOp)),
    seed=st.integers(0, 10_000),
)
def test_unpack_folds_in_buffer_order(idx, op, seed):
    rng = np.random.default_rng(seed)
    dst = rng.integers(-5, 6, size=13).astype(np.int64)
    buf = rng.integers(-5, 6, size=len(idx)).astype(np.int64)
    want = dst.tolist()
    for i, v in zip(idx, buf.tolist()):
        want[i] = PY_OPS[op](want[i], v)
    stats = PackStats()
    pat = analyze(idx)
    unpack(dst, pat, INT64, op, buf, stats)
    assert dst.tolist() == want
    dup = len(set(idx)) != len(idx)
    assert stats.replace_conflicts == (1 if dup and op is ReduceOp.REPLACE else 0)


@settings(max_examples=150, deadline=None)
@given(
    perm_seed=st.integers(0, 1000),
    k=st.integers(0, 10),
    op=st.sampled_from([ReduceOp.REPLACE, ReduceOp.SUM, ReduceOp.MAX]),
)
def test_scatter_equals_pack_then_unpack(perm_seed, k, op):
    rng = np.random.default_rng(perm_seed)
    src = rng.integers(0, 100, 16).astype(np.int64)
    sidx = rng.choice(16, size=k, replace=False)
    didx = rng.choice(16, size=k, replace=False)
    sp_, dp = analyze(sidx) if k else Contiguous(0, 0), analyze(didx) if k else Contiguous(0, 0)
    a = rng.integers(0, 100, 16).astype(np.int64)
    b = a.copy()
    scatter(src, sp_, a, dp, INT64, op)
    unpack(b, dp, INT64, op, pack(src, sp_, INT64))
    assert a.tolist() == b.tolist()


def test_scatter_size_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        scatter(np.zeros(4, np.int64), Contiguous(0, 2), np.zeros(4, np.int64), Contiguous(0, 3), INT64, ReduceOp.SUM)


def test_contiguous_elision_counters():
    stats = PackStats()
    src = np.arange(10, dtype=np.int64)
    buf = pack(src, Contiguous(2, 5), INT64, stats)
    assert np.shares_memory(buf, src) and stats.pack_copies == 0
    pack(src, Indexed(np.array([3, 1])), INT64, stats)
    assert stats.pack_copies == 1
    view = destination_view(src, Contiguous(4, 3), INT64)
    view[:] = -1
    assert src[4:7].tolist() == [-1, -1, -1]
    assert destination_view(src, Indexed(np.array([1, 2])), INT64) is None


def test_strided_pack_and_unpack():
    box = Strided3D(1, 2, 2, 2, 4, 16)
    src = np.arange(32, dtype=np.int64)
    stats = PackStats()
    got = pack(src, box, INT64, stats)
    assert got.tolist() == [1, 2, 5, 6, 17, 18, 21, 22]
    dst = np.zeros(32, np.int64)
    unpack(dst, box, INT64, ReduceOp.SUM, got)
    assert np.flatnonzero(dst).tolist() == [1, 2, 5, 6, 17, 18, 21, 22]


def test_bounds_and_type_errors():
    with pytest.raises(IndexError):
        pack(np.zeros(3, np.int64), Contiguous(2, 2), INT64)
    with pytest.raises(ValueError, match="multiple of blocklen"):
        pack(np.zeros(5, np.int64), Contiguous(0, 1), Unit("int64", 2))
    with pytest.raises(TypeError):
        ReduceOp.BAND.check(Unit("float64"))
    with pytest.raises(TypeError):
        ReduceOp.SUM.check(Unit("bytes"))
    ReduceOp.REPLACE.check(Unit("bytes"))
    with pytest.raises(ValueError):
        Unit("complex")
    with pytest.raises(ValueError):
        Unit("int64", 0)
    assert Unit.coerce(np.float64) == Unit("float64")


@settings(max_examples=200, deadline=None)
@given(idx=st.lists(st.integers(0, 5), min_size=0, max_size=15), seed=st.integers(0, 999))
def test_fetch_and_apply_is_sequential(idx, seed):
    rng = np.random.default_rng(seed)
    dst = rng.integers(-9, 9, 6).astype(np.int64)
    vals = rng.integers(-9, 9, len(idx)).astype(np.int64)
    ref = dst.tolist()
    want_fetch = []
    for i, v in zip(idx, vals.tolist()):
        want_fetch.append(ref[i])
        ref[i] += v
    got = fetch_and_apply(dst, np.array(idx, np.int64), INT64, ReduceOp.SUM, vals)
    assert got.tolist() == want_fetch
    assert dst.tolist() == ref


def test_fetch_and_apply_rejects_replace():
    with pytest.raises(ValueError):
        fetch_and_apply(np.zeros(2, np.int64), np.array([0]), INT64, ReduceOp.REPLACE, np.array([1]))

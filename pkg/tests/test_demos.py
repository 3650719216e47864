import csv
import io

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from starforest import cli
from starforest.demos import pingpong, spmv, submatrix
from starforest.harness import RankFailure
from starforest.pack import Contiguous, analyze
from util import run


def _global_spmv(comm, M, transpose=False, algorithm=None):
    return spmv.run(comm, M, transpose)


def _assemble(parts):
    return np.concatenate([p[1] for p in parts])


@pytest.mark.parametrize("nranks", [1, 3, 4])
def test_identity(nranks):
    M = sp.identity(8, format="csr")
    y = _assemble(run(nranks, _global_spmv, M))
    assert np.array_equal(y, spmv.default_x(8))


def _ghost(comm, M):
    mat = spmv.distribute_matrix(comm, M)
    sf = spmv.build_ghost_sf(comm, mat)
    return mat.garray.tolist(), sf.nroots, sf.leaf_indices.tolist(), list(zip(sf.remote_ranks.tolist(), sf.remote_offsets.tolist()))


def test_ghost_sf_layout_arithmetic():
    M = sp.csr_matrix(np.array([[1, 0, 0, 2], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]))
    (g0, n0, l0, r0), (g1, n1, l1, r1) = run(2, _ghost, M)
    assert (g0, n0, l0, r0) == ([3], 2, [0], [(1, 1)])
    assert (g1, n1, l1, r1) == ([], 2, [], [])


def test_ghost_sf_with_empty_off_diagonal():
    M = sp.csr_matrix(np.diag(np.arange(1, 7)))
    for garray, nroots, leaves, _ in run(3, _ghost, M):
        assert garray == [] and leaves == [] and nroots == 2


def _ghost_contiguous(comm, M):
    mat = spmv.distribute_matrix(comm, M)
    sf = spmv.build_ghost_sf(comm, mat)
    return isinstance(analyze(None if sf.leaf_indices.size == sf.leaf_space else sf.leaf_indices, sf.leaf_space), Contiguous) and sf.nleaves == sf.leaf_space


def test_ghost_sf_leaves_are_contiguous():
    M = spmv.random_matrix(np.random.default_rng(3), 40, 40, 0.2)
    assert all(run(4, _ghost_contiguous, M))


def test_laplacian_four_ranks():
    M = spmv.laplacian_2d(16)
    y = _assemble(run(4, _global_spmv, M))
    ref = M @ spmv.default_x(256)
    assert np.linalg.norm(y - ref) / np.linalg.norm(ref) <= 1e-12


def test_transpose_random_64():
    M = spmv.random_matrix(np.random.default_rng(11), 64, 64, 0.1)
    y = _assemble(run(4, _global_spmv, M, True))
    ref = M.T @ spmv.default_x(64)
    assert np.linalg.norm(y - ref) / np.linalg.norm(ref) <= 1e-12


def test_rectangular_integer_on_onesided():
    M = spmv.random_matrix(np.random.default_rng(5), 30, 17, 0.3, integer=True)
    for transpose in (False, True):
        y = _assemble(run(3, _global_spmv, M, transpose, backend="onesided"))
        x = spmv.default_x(30 if transpose else 17, np.int64)
        assert y.dtype == np.int64
        assert np.array_equal(y, (M.T if transpose else M) @ x)


def _bad_y(comm, M):
    mat = spmv.distribute_matrix(comm, M)
    sf = spmv.build_ghost_sf(comm, mat)
    x = spmv.ghost_vector(mat, np.ones(mat.A.shape[1]))
    with pytest.raises(ValueError):
        spmv.spmv(sf, mat, x, np.zeros(99))
    return True


def test_dimension_mismatch():
    assert all(run(2, _bad_y, sp.identity(4, format="csr")))


def test_matrix_market_ingest(tmp_path):
    M = spmv.laplacian_2d(3)
    path = tmp_path / "lap.mtx"
    scipy.io.mmwrite(str(path), M)
    y = _assemble(run(2, spmv.run, str(path)))
    assert np.allclose(y, M @ spmv.default_x(9))


# -- submatrix column selection ---------------------------------------------


def _select(comm, ncols, garrays, selections):
    starts = spmv.block_starts(ncols, comm.size)
    sfA, sfB = submatrix.build_column_sfs(comm, garrays[comm.rank], selections[comm.rank], starts)
    return submatrix.select_submatrix_columns(sfA, sfB).tolist()


def _set_oracle(garrays, selections):
    order = [c for sel in selections for c in sel]
    new = {c: i for i, c in enumerate(order)}
    return [[new.get(c, -1) for c in g] for g in garrays]


def _random_problem(rng, nranks, ncols):
    garrays = [sorted(rng.choice(ncols, size=rng.integers(0, ncols + 1), replace=False).tolist()) for _ in range(nranks)]
    chosen = rng.permutation(ncols)[: rng.integers(0, ncols + 1)]
    owner = rng.integers(0, nranks, size=chosen.size)
    selections = [chosen[owner == r].tolist() for r in range(nranks)]
    return garrays, selections


def test_select_all_and_none():
    garrays = [[1, 3, 5], [0, 2], [], [4, 5]]
    everything = [[0, 1], [2], [3, 4, 5], []]
    out = run(4, _select, 6, garrays, everything)
    assert out == _set_oracle(garrays, everything)
    assert sorted(v for o in out for v in o) == sorted([1, 3, 5, 0, 2, 4, 5])
    out = run(4, _select, 6, garrays, [[], [], [], []])
    assert all(v == submatrix.UNSELECTED for o in out for v in o)


def test_random_selection_matches_oracle():
    rng = np.random.default_rng(8)
    for _ in range(10):
        ncols = int(rng.integers(1, 25))
        garrays, selections = _random_problem(rng, 4, ncols)
        assert run(4, _select, ncols, garrays, selections) == _set_oracle(garrays, selections)


def test_selection_same_across_backends_and_rank_counts():
    garrays = [[0, 4, 7], [1, 2, 3, 9]]
    selections = [[9, 0], [4]]
    want = _set_oracle(garrays, selections)
    assert run(2, _select, 10, garrays, selections, backend="onesided") == want
    flat = [[9, 0, 4], []]
    assert run(2, _select, 10, garrays, flat) == _set_oracle(garrays, flat)


def test_duplicate_selection_rejected():
    with pytest.raises(RankFailure, match="more than once"):
        run(2, _select, 4, [[0], [1]], [[2], [2]])


def test_out_of_range_column():
    with pytest.raises(RankFailure, match="outside"):
        run(2, _select, 4, [[0, 9], [1]], [[], []])


def test_retained():
    assert submatrix.retained(np.array([-1, 3, -1, 0])) == [(1, 3), (3, 0)]


# -- ping-pong --------------------------------------------------------------


def test_pingpong_csv():
    rows = run(2, pingpong.run, [1024, 4096], 3, 1, "threads")[0]
    text = pingpong.to_csv(rows)
    table = list(csv.reader(io.StringIO(text)))
    assert tuple(table[0]) == pingpong.CSV_COLUMNS
    assert [int(r[0]) for r in table[1:]] == [1024, 4096]
    for r in table[1:]:
        assert r[1] == "threads" and int(r[2]) == 3
        assert 0 < float(r[4]) <= float(r[3])


def test_pingpong_needs_two_ranks():
    with pytest.raises(RankFailure, match="exactly 2 ranks"):
        run(3, pingpong.run, [1024], 1, 0)


def test_default_sizes_and_stamp():
    assert pingpong.DEFAULT_SIZES == tuple(pingpong.sizes_between(1024, 4 << 20))
    assert pingpong.DEFAULT_SIZES[0] == 1024 and pingpong.DEFAULT_SIZES[-1] == 4 << 20
    base = pingpong.base_pattern(300)
    assert not np.array_equal(pingpong.stamp(base, 1, 0), pingpong.stamp(base, 1, 1))
    with pytest.raises(ValueError):
        pingpong.sizes_between(10, 5)


# -- command line -----------------------------------------------------------


def test_cli_pingpong(tmp_path):
    out = tmp_path / "pp.csv"
    assert cli.main(["pingpong", "--max-bytes", "4096", "--iters", "2", "--backend", "onesided", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(pingpong.CSV_COLUMNS) and len(lines) == 3


def test_cli_spmv(tmp_path, capsys):
    path = tmp_path / "m.mtx"
    scipy.io.mmwrite(str(path), spmv.laplacian_2d(4))
    out = tmp_path / "y.csv"
    assert cli.main(["spmv", "--matrix", str(path), "--ranks", "3", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["index", "value"] and len(rows) == 17
    assert "relative error" in capsys.readouterr().err
    assert cli.main(["spmv", "--matrix", str(path), "--ranks", "2", "--transpose", "--out", str(out)]) == 0


def test_cli_selftest(capsys):
    assert cli.main(["selftest", "--trials", "2", "--ranks", "3", "--suite", "oracle", "--suite", "sample"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split()[:2] for line in out] == [["PASS", "oracle"], ["PASS", "sample"]]


def test_cli_reports_rank_failure(tmp_path, capsys):
    missing = str(tmp_path / "nope.mtx")
    assert cli.main(["spmv", "--matrix", missing, "--ranks", "2", "--timeout", "2"]) == 2
    assert "rank 0" in capsys.readouterr().err

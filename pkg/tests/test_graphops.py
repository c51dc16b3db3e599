from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from castnet import diffcore as dc
from castnet.exceptions import ContractError, ShapeError
from castnet.graphops import (
    STATS_COLUMNS,
    GraphBundle,
    adaptive_graph,
    asymmetric_operator,
    graph_stats,
    laplacian_operator,
    powers,
    write_stats_csv,
)


def test_laplacian_small_cases():
    np.testing.assert_array_equal(laplacian_operator(np.zeros((3, 3))), np.eye(3))
    np.testing.assert_array_equal(laplacian_operator(np.array([[0, 1], [1, 0.0]])), [[1, -1], [-1, 1]])


def test_laplacian_path_graph_entrywise_oracle():
    A = np.array([[0, 2.0, 0], [2.0, 0, 3.0], [0, 3.0, 0]])
    d = A.sum(axis=1)
    expected = np.eye(3)
    for i in range(3):
        for j in range(3):
            if A[i, j]:
                expected[i, j] -= A[i, j] / np.sqrt(d[i] * d[j])
    np.testing.assert_allclose(laplacian_operator(A), expected, rtol=0, atol=1e-15)


def test_laplacian_rejects_negative_weights_and_loops():
    with pytest.raises(ContractError):
        laplacian_operator(np.array([[0, -1.0], [-1.0, 0]]))
    with pytest.raises(ContractError):
        laplacian_operator(np.eye(2))


def test_asymmetric_operator_cases():
    np.testing.assert_array_equal(asymmetric_operator(np.array([[0, 2.0], [0, 0]])), [[0, 1], [0, 0]])
    np.testing.assert_array_equal(asymmetric_operator(np.eye(3) * 0.7), np.eye(3))
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5))
    out = asymmetric_operator(a)
    for i in range(5):
        d = np.abs(a[i]).sum()
        for j in range(5):
            assert out[i, j] == a[i, j] / d


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_asymmetric_rows_sum_to_one_or_zero(n, seed):
    rng = np.random.default_rng(seed)
    a = np.abs(rng.normal(size=(n, n))) * (rng.random((n, n)) < 0.4)
    sums = asymmetric_operator(a).sum(axis=1)
    for s, row in zip(sums, a):
        assert abs(s - (1.0 if row.any() else 0.0)) < 1e-12


def test_adaptive_graph_properties():
    z = np.zeros((4, 3))
    np.testing.assert_allclose(adaptive_graph(z, z).data, np.full((4, 4), 0.25))
    one = adaptive_graph(np.ones((1, 2)), np.ones((1, 2))).data
    np.testing.assert_array_equal(one, [[1.0]])
    rng = np.random.default_rng(1)
    g = adaptive_graph(rng.normal(size=(6, 3)), rng.normal(size=(6, 3))).data
    assert np.all(g >= 0)
    np.testing.assert_allclose(g.sum(axis=1), 1.0)


def test_adaptive_graph_errors():
    with pytest.raises(ContractError):
        adaptive_graph(np.zeros((3, 0)), np.zeros((3, 0)))
    with pytest.raises(ShapeError):
        adaptive_graph(np.zeros((3, 2)), np.zeros((4, 2)))


def test_adaptive_graph_gradient():
    rng = np.random.default_rng(2)
    e1 = dc.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    e2 = dc.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w = rng.normal(size=(5, 5))
    err = dc.gradcheck(lambda: dc.sum(dc.mul(adaptive_graph(e1, e2), w)), [e1, e2])
    assert err < 1e-4


def test_powers():
    assert len(powers(np.eye(3) * 2, 0)) == 1
    for p in powers(np.eye(3), 4):
        np.testing.assert_array_equal(p, np.eye(3))
    rng = np.random.default_rng(3)
    op = rng.normal(size=(4, 4))
    got = powers(op, 3)
    np.testing.assert_allclose(got[3], op @ op @ op, rtol=1e-12)
    t = powers(dc.Tensor(op), 2)
    np.testing.assert_allclose(t[2].data, op @ op, rtol=1e-12)
    with pytest.raises(ContractError):
        powers(op, -1)


def test_bundle_caches_and_sums_lag_operators():
    rng = np.random.default_rng(4)
    A = np.array([[0, 1.0, 0], [1.0, 0, 1.0], [0, 1.0, 0]])
    L1, L2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    b = GraphBundle(A=A, A_lag=[L1, L2], C=np.triu(rng.normal(size=(3, 3)), 1), K=2)
    np.testing.assert_allclose(b.operator("lag"), asymmetric_operator(L1) + asymmetric_operator(L2))
    p = b.operator_powers("adjacency")
    assert p is b.operator_powers("adjacency")
    np.testing.assert_array_equal(p[0], np.eye(3))
    b.invalidate()
    assert p is not b.operator_powers("adjacency")
    with pytest.raises(ContractError):
        b.operator("adaptive")
    with pytest.raises(ShapeError):
        GraphBundle(A=A, C=np.zeros((2, 2)))


def bfs_stats(support, directed):
    n = support.shape[0]
    adj = support & ~np.eye(n, dtype=bool)
    if not directed:
        adj = adj | adj.T
    lengths = []
    unreachable = 0
    for s in range(n):
        dist = {s: 0}
        q = deque([s])
        while q:
            u = q.popleft()
            for v in np.nonzero(adj[u])[0]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        for t in range(n):
            if t != s:
                if t in dist:
                    lengths.append(dist[t])
                else:
                    unreachable += 1
    return max(lengths, default=0), (np.mean(lengths) if lengths else 0.0), unreachable


def test_stats_complete_and_path():
    k3 = graph_stats(np.ones((3, 3)) - np.eye(3))
    assert (k3.diameter, k3.avg_degree, k3.avg_shortest_path) == (1, 2.0, 1.0)
    p3 = graph_stats(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]]))
    assert p3.diameter == 2 and p3.n_edges == 2


@pytest.mark.parametrize("seed", range(5))
def test_stats_random_dag_vs_bfs(seed):
    rng = np.random.default_rng(seed)
    C = np.triu(rng.random((10, 10)) < 0.25, 1).astype(float)
    perm = rng.permutation(10)
    C = C[np.ix_(perm, perm)]
    s = graph_stats(C, directed=True)
    diam, avg, unreach = bfs_stats(C != 0, True)
    assert s.diameter == diam and s.unreachable_pairs == unreach
    assert s.avg_shortest_path == pytest.approx(avg)
    assert s.avg_degree == pytest.approx(C.sum() / 10)


def test_stats_self_loops_count_as_edges_only():
    A = np.diag([0.5, 0.5, 0.0])
    A[0, 1] = 0.3
    s = graph_stats(A, directed=True)
    assert s.n_edges == 3 and s.diameter == 1


def test_stats_csv_header(tmp_path):
    write_stats_csv([("Adjacency", graph_stats(np.ones((3, 3)) - np.eye(3)))], tmp_path / "s.csv")
    header = (tmp_path / "s.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == STATS_COLUMNS

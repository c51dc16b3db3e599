import numpy as np
import pytest

from castnet import dataio
from castnet.dynotears import is_dag
from castnet.exceptions import ContractError, IngestionError


def grid(n):
    return dataio.DEFAULT_START + np.arange(n) * dataio.STEP


def small_spec(**kw):
    base = dict(n_nodes=6, n_steps=300, seed=3)
    base.update(kw)
    return dataio.SyntheticSpec(**base)


def test_generator_ground_truth_is_stationary_dag():
    table, truth, A = dataio.generate_svar(dataio.SyntheticSpec(n_steps=500))
    assert table.values.shape == (500, 30)
    assert is_dag(truth.C)
    assert dataio.companion_radius(truth.C, truth.A_lag) < 0.95
    np.testing.assert_array_equal(A, A.T)
    assert np.all(np.diag(A) == 0)
    # the physical adjacency contains the contemporaneous support
    assert np.all((truth.C != 0) <= (A != 0))


def test_generator_is_deterministic():
    a, _, _ = dataio.generate_svar(small_spec())
    b, _, _ = dataio.generate_svar(small_spec())
    np.testing.assert_array_equal(a.values, b.values)


def test_zero_weights_give_white_noise():
    spec = small_spec(density=0.0, self_lag=0.0, daily_amplitude=0.0, level=0.0, n_steps=4000, noise=0.5)
    table, truth, _ = dataio.generate_svar(spec)
    assert truth.n_edges() == (0, 0)
    bound = 3 * 0.5 / np.sqrt(4000)
    assert np.all(np.abs(table.values.mean(axis=0)) < bound)


def test_lag_one_autocorrelation():
    rng = np.random.default_rng(0)
    A = np.zeros((3, 3))
    A[0, 0] = 0.5
    X = dataio.simulate_svar(np.zeros((3, 3)), [A], 5000, 1.0, rng)
    r = np.corrcoef(X[1:, 0], X[:-1, 0])[0, 1]
    assert abs(r - 0.5) < 0.05


def test_cyclic_ground_truth_rejected():
    C = np.array([[0, 0.5], [0.5, 0.0]])
    with pytest.raises(ContractError):
        dataio.simulate_svar(C, [np.zeros((2, 2))], 10, 1.0, np.random.default_rng(0))


def test_time_features_monday_0835():
    f = dataio.time_features(np.array(["2024-01-01T08:35"], dtype="datetime64[m]"))[0]
    assert f.shape == (43,) and f.sum() == 3
    assert f[7] == 1 and f[12 + 8] == 1 and f[36 + 0] == 1


def test_csv_round_trip(tmp_path):
    table, _, A = dataio.generate_svar(small_spec())
    dataio.save_csv(table, tmp_path / "s.csv")
    dataio.save_edge_list(A, tmp_path / "a.txt")
    back, A2 = dataio.load_csv(tmp_path / "s.csv", tmp_path / "a.txt")
    np.testing.assert_array_equal(back.values, table.values)
    np.testing.assert_array_equal(back.timestamps, table.timestamps)
    np.testing.assert_array_equal(A2, A)
    assert back.node_ids == table.node_ids


def write_rows(path, stamps, values):
    lines = ["timestamp,node_0,node_1"]
    for t, row in zip(stamps, values):
        lines.append(",".join([t] + ["" if v is None else str(v) for v in row]))
    path.write_text("\n".join(lines) + "\n")


def test_gap_is_reported_with_its_line(tmp_path):
    stamps = ["2024-01-01T00:00", "2024-01-01T00:05", "2024-01-01T00:15", "2024-01-01T00:20"]
    write_rows(tmp_path / "g.csv", stamps, [[1, 2]] * 4)
    with pytest.raises(IngestionError, match="line 4"):
        dataio.load_csv(tmp_path / "g.csv")


def test_forward_fill_single_and_long_gaps(tmp_path):
    stamps = [f"2024-01-01T00:{5 * i:02d}" for i in range(8)]
    vals = [[1, 10], [2, None], [3, None], [4, None], [5, None], [None, 15], [7, 16], [8, 17]]
    write_rows(tmp_path / "f.csv", stamps, vals)
    table, _ = dataio.load_csv(tmp_path / "f.csv")
    assert table.values[5, 0] == 5.0 and not table.missing[5, 0]
    # a run of four missing cells exceeds the fill limit and stays flagged
    assert table.missing[1:5, 1].all()
    # only the window over rows 5..7 avoids the flagged run
    assert len(dataio.make_windows(table, 2, 1)) == 1


def test_split_ratios():
    t = dataio.SeriesTable(grid(100), np.zeros((100, 2)))
    assert [p.n_steps for p in dataio.split(t)] == [60, 20, 20]
    assert [p.n_steps for p in dataio.split(t, (0.7, 0.1, 0.2))] == [70, 10, 20]
    with pytest.raises(ContractError):
        dataio.split(t, (0.7, 0.1, 0.2), min_length=24)


def test_window_counts_and_alignment():
    T, M, H = 40, 5, 3
    vals = np.arange(T * 2, dtype=float).reshape(T, 2)
    t = dataio.SeriesTable(grid(T), vals)
    assert len(dataio.make_windows(dataio.SeriesTable(t.timestamps[:M + H], vals[:M + H]), M, H)) == 1
    assert len(dataio.make_windows(dataio.SeriesTable(t.timestamps[:M + H + 1], vals[:M + H + 1]), M, H)) == 2
    b = dataio.make_windows(t, M, H)
    listed = list(dataio.iter_windows(t, M, H))
    assert len(b) == len(listed) == T - M - H + 1
    for k, w in enumerate(listed):
        np.testing.assert_array_equal(b.x[k], w.x)
        np.testing.assert_array_equal(b.y[k], w.y)
        np.testing.assert_array_equal(b.x[k], vals[k:k + M].T)
    with pytest.raises(ContractError):
        dataio.make_windows(dataio.SeriesTable(t.timestamps[:4], vals[:4]), M, H)


def test_windows_never_cross_split_boundaries():
    table, _, _ = dataio.generate_svar(small_spec(n_steps=200))
    train, val, test = dataio.split(table)
    last = dataio.make_windows(train, 12, 12)
    # the last training target ends exactly at the boundary
    assert last.starts[-1] + 24 == train.n_steps
    for part in (train, val, test):
        b = dataio.make_windows(part, 12, 12)
        assert b.starts.max() + 24 <= part.n_steps


def test_scaler_round_trip():
    rng = np.random.default_rng(0)
    x = rng.normal(3, 2, size=(50, 4))
    s = dataio.NodeScaler().fit(x)
    w = rng.normal(size=(7, 4, 12))
    np.testing.assert_allclose(s.inverse_nodes(s.transform_nodes(w, axis=1), axis=1), w, atol=1e-12)


def test_spec_round_trip(tmp_path):
    spec = small_spec(noise=0.25)
    dataio.save_spec(spec, tmp_path / "spec.json")
    assert dataio.load_spec(tmp_path / "spec.json") == spec

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from castnet import conformal as cf
from castnet.exceptions import ConfigError, ContractError


def enumerate_quantile(scores, level):
    """Smallest candidate whose empirical CDF reaches the level, by brute force."""
    n = len(scores)
    for c in sorted(set(scores)):
        if sum(s <= c for s in scores) / n >= level:
            return c
    return max(scores)


def test_quantile_examples():
    assert cf.empirical_quantile(np.arange(1, 11), 0.9) == 9
    assert cf.empirical_quantile(np.arange(1, 11), 1.0) == 10
    assert cf.empirical_quantile(np.full(7, 2.5), 0.33) == 2.5
    with pytest.raises(ContractError):
        cf.empirical_quantile([], 0.5)
    with pytest.raises(ContractError):
        cf.empirical_quantile([1.0], 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=1, max_size=100), st.floats(0.01, 1.0))
def test_quantile_matches_enumeration(scores, level):
    assert cf.empirical_quantile(scores, level) == enumerate_quantile(scores, level)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=60), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_quantile_monotone_in_level(scores, a, b):
    lo, hi = sorted((a, b))
    assert cf.empirical_quantile(scores, lo) <= cf.empirical_quantile(scores, hi)


def test_weighted_quantile_with_equal_weights_and_array_levels():
    rng = np.random.default_rng(0)
    s = rng.normal(size=50)
    levels = np.array([0.1, 0.5, 0.9])
    np.testing.assert_array_equal(cf.empirical_quantile(s, levels, np.full(50, 0.3)), cf.empirical_quantile(s, levels))
    # all weight on one score pins every quantile to it
    w = np.zeros(50)
    w[7] = 1.0
    assert cf.empirical_quantile(s, 0.5, w) == s[7]


def test_scp_examples():
    reg = cf.scp_region(np.array([3.0, 4.0]), np.zeros(10), 0.1)
    np.testing.assert_array_equal(reg.width, 0.0)
    reg = cf.scp_region(100.0, np.arange(1, 11), 0.1)
    assert (float(reg.lower), float(reg.upper)) == (91.0, 109.0)
    with pytest.raises(ConfigError):
        cf.scp_region(0.0, [1.0], 1.0)


def test_scp_coverage_on_exchangeable_noise():
    rng = np.random.default_rng(1)
    calib = rng.normal(size=2000)
    test = rng.normal(size=5000)
    reg = cf.scp_region(np.zeros(5000), calib, 0.1)
    assert 0.88 <= reg.covers(test).mean() <= 0.92


def test_bonferroni_reduces_to_scp_and_spends_alpha_per_step():
    rng = np.random.default_rng(2)
    res = rng.normal(size=(300, 1))
    a = cf.bonferroni_region(np.zeros((5, 1)), res, 0.1)
    b = cf.scp_region(np.zeros((5, 1)), res, 0.1)
    np.testing.assert_array_equal(a.upper, b.upper)
    res12 = rng.normal(size=(500, 12))
    reg = cf.bonferroni_region(np.zeros(12), res12, 0.1)
    expected = [cf.empirical_quantile(np.abs(res12[:, h]), 1 - 0.1 / 12) for h in range(12)]
    np.testing.assert_array_equal(reg.v_hat, expected)


def test_bonferroni_warns_when_level_unattainable():
    with pytest.warns(RuntimeWarning, match="1/\\(n\\+1\\)"):
        cf.bonferroni_region(np.zeros(12), np.ones((50, 12)), 0.1)


def test_bonferroni_joint_horizon_coverage():
    rng = np.random.default_rng(3)
    calib = rng.normal(size=(20000, 12))
    test = rng.normal(size=(20000, 12))
    reg = cf.bonferroni_region(np.zeros((20000, 12)), calib, 0.1)
    assert reg.covers(test).all(axis=1).mean() >= 0.9


def test_weighted_score_degenerate_and_zero():
    rng = np.random.default_rng(4)
    r = np.abs(rng.normal(size=(6, 4)))
    nb = cf.neighbour_lists(np.ones((4, 4)))
    np.testing.assert_allclose(cf.weighted_score(r, nb, eta=1.0, zeta=0.0, beta=1.0), r.mean(axis=0))
    np.testing.assert_array_equal(cf.weighted_score(np.zeros((3, 4)), nb), 0.0)


def test_weighted_score_line_graph_explicit_sum():
    # nodes 0 - 1 - 2, two time steps, oldest first
    A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0.0]])
    y = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]])
    yhat = np.array([[0.0, 2.5, 1.0], [1.0, 1.0, 2.5]])
    eta, zeta, beta, T_c = 0.95, 0.05, 0.9, 2
    nbrs = {0: [1], 1: [0, 2], 2: [1]}
    for i in range(3):
        total = 0.0
        for tp in range(1, T_c + 1):
            term = eta / T_c * abs(y[tp - 1, i] - yhat[tp - 1, i])
            for k in nbrs[i]:
                term += zeta / T_c * abs(y[tp - 1, k] - yhat[tp - 1, k])
            total += term * beta ** (T_c - tp)
        got = cf.weighted_score(np.abs(y - yhat), cf.neighbour_lists(A), eta, zeta, beta, node=i)
        assert got == pytest.approx(total, rel=1e-14)


def test_rank_quantile_examples():
    assert np.all(cf.rank_quantile(np.full(5, 2.0)) == 5 / 6)
    e = np.arange(9.0)
    assert cf.rank_quantile(e, node=0) == pytest.approx(0.1)
    assert cf.rank_quantile(e, node=8) == pytest.approx(0.9)
    r = cf.rank_quantile(np.random.default_rng(5).normal(size=20))
    assert np.all((r > 0) & (r < 1))


def test_rank_quantile_monotone_in_own_score():
    others = np.random.default_rng(6).normal(size=7)
    ranks = [cf.rank_quantile(np.r_[v, others], node=0) for v in np.linspace(-3, 3, 25)]
    assert all(b >= a for a, b in zip(ranks, ranks[1:]))


def test_adjust_examples():
    assert cf.adjust(0.9, 0.1, 2.0) == pytest.approx((0.0, 0.1))
    delta, ah = cf.adjust(1.0, 0.1, 2.0)
    assert delta == pytest.approx(0.1) and ah == pytest.approx(0.0, abs=1e-15)
    # below the target the constant multiplies the gap
    assert cf.adjust(0.5, 0.1, -2.0)[0] == pytest.approx(0.8)
    _, clamped = cf.adjust(1.0, 0.1, 2.0, n_calib=9)
    assert clamped == pytest.approx(0.1)
    _, clamped = cf.adjust(0.1, 0.1, 4.0, n_calib=9)
    assert clamped == pytest.approx(0.9)


def window_with(res, adjacency=None, **kw):
    T, N = res.shape
    w = cf.CalibrationWindow(N, T, adjacency, **kw)
    w.extend(res, np.zeros_like(res))
    return w


def test_cpst_zero_history_gives_degenerate_region():
    w = window_with(np.zeros((5, 4)))
    reg = cf.cpst_step(np.arange(4.0), w)
    np.testing.assert_array_equal(reg.width, 0.0)


def test_cpst_collapses_to_split_conformal():
    rng = np.random.default_rng(7)
    res = rng.normal(size=(40, 9))
    w = window_with(res, np.ones((9, 9)), eta=1.0, zeta=0.0, beta=1.0, c_adj=0.0, alpha=0.1)
    reg = cf.cpst_step(np.zeros(9), w)
    ref = cf.scp_region(np.zeros(9), np.abs(res), 0.1)
    np.testing.assert_array_equal(reg.upper, ref.upper)
    np.testing.assert_array_equal(reg.lower, ref.lower)


def test_cpst_region_invariants():
    rng = np.random.default_rng(8)
    res = rng.normal(size=(30, 12)) * np.linspace(0.5, 2.0, 12)
    A = (rng.random((12, 12)) < 0.3).astype(float)
    w = window_with(res, A + A.T, c_adj=2.0)
    reg = cf.cpst_step(np.zeros(12), w)
    assert np.all(reg.lower <= reg.upper)
    np.testing.assert_allclose(reg.upper - reg.lower, 2 * reg.v_hat)
    inside = (reg.alpha_hat > 1 / 31) & (reg.alpha_hat < 30 / 31)
    np.testing.assert_allclose(reg.alpha_hat[inside], 0.1 - reg.delta[inside])
    # with a nonnegative constant, noisier nodes rank higher and get wider regions
    assert reg.v_hat[-1] >= reg.v_hat[0]


def test_cold_window_falls_back_with_warning():
    w = cf.CalibrationWindow(3, 5)
    with pytest.warns(RuntimeWarning, match="cold"):
        reg = cf.cpst_step(np.zeros(3), w, fallback_residuals=np.arange(1, 11))
    assert reg.fallback and reg.upper[0] == 9
    with pytest.raises(ContractError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cf.cpst_step(np.zeros(3), w)


def test_window_eviction_keeps_newest_rows_in_order():
    w = cf.CalibrationWindow(2, 3)
    for t in range(7):
        w.push([t, -t], [0, 0])
        assert w.size() == min(t + 1, 3)
    np.testing.assert_array_equal(w.residuals(), [[4, 4], [5, 5], [6, 6]])


def test_window_parameter_checks():
    with pytest.raises(ConfigError):
        cf.CalibrationWindow(2, 3, eta=0.9, zeta=0.2)
    with pytest.raises(ConfigError):
        cf.CalibrationWindow(2, 3, beta=0.0)
    with pytest.raises(ConfigError):
        cf.CalibrationWindow(2, 0)


def test_stream_never_sees_unrevealed_truths():
    rng = np.random.default_rng(9)
    y = rng.normal(size=(30, 4, 3))
    yhat = np.zeros_like(y)
    est = cf.CPST(n_calib=10).fit(rng.normal(size=(10, 4, 3)), np.zeros((10, 4, 3)))
    base = [a.copy() for a in cf.CPST(n_calib=10).fit(est.fallback_, np.zeros((10, 4, 3))).stream(y, yhat)]
    t0 = 12
    y2 = y.copy()
    y2[t0] += 50.0
    lo, hi = cf.CPST(n_calib=10).fit(est.fallback_, np.zeros((10, 4, 3))).stream(y2, yhat)
    for h in range(3):
        # the step-(h+1) truth of row t0 is revealed at row t0 + h + 1
        np.testing.assert_array_equal(hi[:t0 + h + 1, :, h], base[1][:t0 + h + 1, :, h])
        assert not np.array_equal(hi[t0 + h + 1:, :, h], base[1][t0 + h + 1:, :, h])


def test_split_conformal_estimator_matches_function():
    rng = np.random.default_rng(10)
    y = rng.normal(size=(100, 3, 2))
    est = cf.SplitConformal(alpha=0.2).fit(y, np.zeros_like(y))
    lo, hi = est.predict(np.zeros((4, 3, 2)))
    for h in range(2):
        assert hi[0, 0, h] == cf.scp_region(0.0, y[..., h], 0.2).upper


def test_drift_stream_ramp():
    y, yhat = cf.residual_stream(1000, 3, np.random.default_rng(11), phi=0.0, sigma=1.0, drift=5.0, drift_start=500)
    assert abs(y[:500].mean()) < 0.2
    assert y[-50:].mean() > 4.0
    np.testing.assert_array_equal(yhat, 0.0)


def test_regions_csv_round_trip(tmp_path):
    T, N, H = 2, 2, 3
    yhat = np.zeros((T, N, H))
    y = np.ones((T, N, H))
    lower, upper = yhat - 2.0, yhat + 0.5
    cf.write_regions_csv(tmp_path / "r.csv", ["t0", "t1"], ["a", "b"], yhat, lower, upper, y, np.float64(0.05), "scp")
    alpha, method, rows = cf.read_regions_csv(tmp_path / "r.csv")
    assert alpha == 0.05 and method == "scp"
    assert len(rows) == T * N * H
    assert tuple(rows[0]) == cf.REGION_COLUMNS
    assert all(r["covered"] == "0" for r in rows)


def test_select_c_adj_picks_a_valid_value():
    rng = np.random.default_rng(12)
    y, yhat = cf.residual_stream(600, 6, rng, node_scale=np.linspace(0.5, 2, 6))
    best, table = cf.select_c_adj(y, yhat, 200, np.ones((6, 6)), alpha=0.1)
    assert best in cf.C_ADJ_GRID and set(table) == set(cf.C_ADJ_GRID)
    valid = [c for c, (cov, _) in table.items() if cov >= 0.9]
    if valid:
        assert table[best][1] == min(table[c][1] for c in valid)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plexuskit import perf_model as pm
from plexuskit.grid import enumerate_configs
from plexuskit.layout import X, Y, Z

PRODUCTS = pm.DatasetStats(2_449_029, 126_167_053, [100, 128, 128, 47])
TRUE_C = (7.8e-4, 7.8e-10, -2.6e-10)


def synthetic_samples(n, noise, seed):
    rng = np.random.default_rng(seed)
    feats = []
    for _ in range(n):
        N = int(rng.integers(10_000, 3_000_000))
        stats = pm.DatasetStats(N, int(N * rng.uniform(5, 60)), [int(rng.choice([64, 100, 128, 602]))]
                                + [128, 128, int(rng.integers(2, 200))])
        g = int(rng.choice([4, 8, 16, 32, 64]))
        cfgs = enumerate_configs(g)
        feats.append(pm.comp_features(stats, cfgs[rng.integers(len(cfgs))]))
    X_ = np.array(feats)
    y = X_ @ np.array(TRUE_C)
    return X_, y * (1 + noise * rng.normal(size=n))


def test_flops_cost_products():
    assert pm.flops_cost(PRODUCTS) == 12_616_705_300
    assert pm.flops_cost(PRODUCTS) == pytest.approx(1.26167053e10, rel=1e-12)


def test_fwd_penalty_example():
    one = pm.DatasetStats(2_449_029, 126_167_053, [100, 47])
    f = pm.comp_features(one, (64, 1, 1))
    root = np.sqrt(126_167_053 * 100)
    assert f[1] / root == pytest.approx(2449029 / 64 / 100, rel=1e-12)
    assert round(f[1] / root, 2) == 382.66


def test_unit_grid_penalties():
    s = pm.DatasetStats(1000, 5000, [10, 20])
    f = pm.comp_features(s, (1, 1, 1))
    root = np.sqrt(5000 * 10)
    np.testing.assert_allclose(f, [root, root * 100, root * 100])


def test_features_reject_zero_dims():
    with pytest.raises(ValueError):
        pm.comp_features(PRODUCTS, (0, 1, 1))
    with pytest.raises(ValueError):
        pm.DatasetStats(0, 1, [1, 1])
    with pytest.raises(ValueError):
        pm.DatasetStats(10, 1, [4])


def test_sqrt_scaling_with_nnz():
    a = pm.comp_features(pm.DatasetStats(100, 400, [8, 4]), (2, 2, 1))
    b = pm.comp_features(pm.DatasetStats(100, 800, [8, 4]), (2, 2, 1))
    assert b[0] / a[0] == pytest.approx(np.sqrt(2), rel=1e-14)


def test_spmm_prediction_zero_and_clamp():
    assert pm.predict_spmm_time(np.zeros(3), pm.PerfCoefficients()) == (0.0, False)
    t, clamped = pm.predict_spmm_time(np.array([0.0, 0.0, 1e12]), pm.PerfCoefficients())
    assert t == 0.0 and clamped


def test_tall_skinny_slower_than_common_dim_split():
    one = pm.DatasetStats(2_449_029, 126_167_053, [100, 47])
    co = pm.PerfCoefficients()
    u = pm.predict_spmm_time(pm.comp_features(one, (64, 1, 1)), co)[0]
    v = pm.predict_spmm_time(pm.comp_features(one, (1, 64, 1)), co)[0]
    assert v > u


def test_eq_consistency_elements_times_flops():
    """(N/Gz)(D/Gy) elements times 2 NNZ/(N Gx) flops each is 2 NNZ D / G."""
    N, NNZ, D = 2_449_029, 126_167_053, 100
    for gx, gy, gz in enumerate_configs(64):
        per_elem = 2 * NNZ / (N * gx)
        elems = (N / gz) * (D / gy)
        assert elems * per_elem == pytest.approx(2 * NNZ * D / 64, rel=1e-12)


def test_effective_bandwidth_cases():
    m = pm.MachineParams(g_node=4, beta_intra=200e9, beta_inter=25e9)
    for cfg in ((1, 1, 4), (2, 2, 1), (1, 4, 1), (4, 1, 1), (1, 1, 1)):
        assert all(pm.effective_bandwidth(ax, cfg, m) == 200e9 for ax in (X, Y, Z))
    assert pm.effective_bandwidth(Z, (2, 2, 4), m) == 25e9 / 4
    assert pm.effective_bandwidth(Z, (1, 4, 4), m) == 25e9 / 4
    assert pm.effective_bandwidth(X, (2, 2, 4), m) == 200e9
    assert pm.effective_bandwidth(X, (4, 2, 1), m) == 25e9 / 2
    one = pm.MachineParams(g_node=1)
    for cfg in ((2, 2, 2), (1, 8, 1), (4, 1, 2)):
        for ax in (X, Y, Z):
            if cfg[ax] > 1:
                assert pm.effective_bandwidth(ax, cfg, one) == one.beta_inter


def test_allreduce_worked_example():
    assert pm.collective_time("all_reduce", 1e8, 4, 25e9) == pytest.approx(6e-3, rel=0, abs=1e-12)
    assert pm.collective_time("all_gather", 1e8, 4, 25e9) == pytest.approx(3e-3, abs=1e-12)
    assert pm.collective_time("all_reduce", 1e8, 1, 25e9) == 0.0


@given(st.floats(1, 1e12), st.integers(1, 1024), st.floats(1e6, 1e12))
def test_collective_time_linear_in_bytes(M, g, beta):
    t1 = pm.collective_time("all_reduce", M, g, beta)
    t2 = pm.collective_time("all_reduce", 2 * M, g, beta)
    assert abs(t2 - 2 * t1) <= 1e-12 * max(1.0, t2)


def test_serial_grid_has_no_comm():
    comm = pm.predict_comm_time((1, 1, 1), PRODUCTS, pm.MachineParams())
    assert sum(comm.values()) == 0.0
    assert pm.predict((1, 1, 1), PRODUCTS, pm.MachineParams(), pm.PerfCoefficients()).comm_total == 0


@given(st.sampled_from(enumerate_configs(16)), st.floats(1.01, 100))
def test_comm_monotone_in_bandwidth(cfg, factor):
    slow = pm.MachineParams(beta_intra=100e9, beta_inter=10e9)
    fast = pm.MachineParams(beta_intra=100e9 * factor, beta_inter=10e9 * factor)
    a = sum(pm.predict_comm_time(cfg, PRODUCTS, slow).values())
    b = sum(pm.predict_comm_time(cfg, PRODUCTS, fast).values())
    assert b <= a


@given(st.floats(0.01, 100))
def test_rank_order_invariant_to_bandwidth_scaling(k):
    zero = pm.PerfCoefficients((0.0, 0.0, 0.0))
    m1 = pm.MachineParams()
    m2 = pm.MachineParams(beta_intra=m1.beta_intra * k, beta_inter=m1.beta_inter * k)
    a = [p.config for p in pm.rank_configs(16, PRODUCTS, m1, zero)]
    b = [p.config for p in pm.rank_configs(16, PRODUCTS, m2, zero)]
    assert a == b


def test_rank_configs_basic():
    m, co = pm.MachineParams(), pm.PerfCoefficients()
    assert [p.config for p in pm.rank_configs(1, PRODUCTS, m, co)] == [(1, 1, 1)]
    r8 = pm.rank_configs(8, PRODUCTS, m, co)
    assert len(r8) == 10
    totals = [p.total for p in r8]
    assert totals == sorted(totals)
    for p in r8:
        assert p.total == pytest.approx(p.spmm + sum(p.comm.values()))
        assert p.total >= 0


def test_rank_configs_tie_break(monkeypatch):
    # flops-only coefficients and no communication: every config ties
    monkeypatch.setattr(pm, "predict_comm_time", lambda *a: {})
    s = pm.DatasetStats(64, 64, [8, 8])
    flat = pm.PerfCoefficients((1.0, 0.0, 0.0))
    order = [p.config for p in pm.rank_configs(4, s, pm.MachineParams(), flat)]
    assert order == sorted(enumerate_configs(4), key=lambda c: (c[2], c[0], c[1]))


def test_3d_beats_1d_extremes_on_products():
    ranked = pm.rank_configs(64, PRODUCTS, pm.MachineParams(beta_intra=200e9, beta_inter=25e9),
                             pm.PerfCoefficients())
    pos = {p.config: i for i, p in enumerate(ranked)}
    cube = pos[(4, 4, 4)]
    assert cube < pos[(1, 64, 1)] and cube < pos[(64, 1, 1)]
    assert min(pos[c] for c in ranked_3d(ranked)) < pos[(64, 1, 1)]


def ranked_3d(ranked):
    return [p.config for p in ranked if min(p.config) > 1]


def test_fit_recovers_noiseless_coefficients():
    X_, y = synthetic_samples(67, 0.0, 1)
    co = pm.fit_regression(X_, y)
    np.testing.assert_allclose(co.c, TRUE_C, rtol=1e-9)
    assert co.r2 == pytest.approx(1.0, abs=1e-12)
    assert co.n_samples == 67


def test_fit_with_noise_and_holdout():
    X_, y = synthetic_samples(67, 0.05, 2)
    co = pm.fit_regression(X_, y)
    assert co.r2 >= 0.85
    rep = pm.holdout_evaluate(X_, y, iterations=200, seed=0)
    assert rep.train_r2 >= 0.85 and rep.test_r2 >= 0.7


def test_fit_errors():
    X_, y = synthetic_samples(5, 0.0, 3)
    with pytest.raises(pm.RankDeficientError):
        pm.fit_regression(X_[:2], y[:2])
    with pytest.raises(pm.RankDeficientError, match="diverse"):
        pm.fit_regression(np.tile(X_[:1], (6, 1)), np.ones(6))
    with pytest.raises(ValueError):
        pm.fit_regression(X_[:, :2], y)


@given(st.integers(0, 2**31))
def test_fit_invariant_to_ordering(seed):
    X_, y = synthetic_samples(20, 0.05, 7)
    perm = np.random.default_rng(seed).permutation(20)
    a, b = pm.fit_regression(X_, y), pm.fit_regression(X_[perm], y[perm])
    np.testing.assert_allclose(a.c, b.c, rtol=1e-9)


def test_machine_and_coefficient_files(tmp_path):
    m = pm.MachineParams(8, 300e9, 50e9, 8)
    m.save(tmp_path / "m.json")
    assert pm.MachineParams.load(tmp_path / "m.json") == m
    co = pm.PerfCoefficients((1.0, 2.0, 3.0), 0.9, 0.1, 10)
    co.save(tmp_path / "c.json")
    assert pm.PerfCoefficients.load(tmp_path / "c.json").c == (1.0, 2.0, 3.0)
    with pytest.raises(ValueError):
        pm.MachineParams(g_node=0)


def test_samples_csv_both_forms(tmp_path):
    (tmp_path / "f.csv").write_text("f1,f2,f3,seconds\n1,2,3,0.5\n4,5,6,0.7\n")
    X_, y = pm.load_samples_csv(tmp_path / "f.csv")
    assert X_.shape == (2, 3) and y.tolist() == [0.5, 0.7]
    (tmp_path / "r.csv").write_text("num_nodes,nnz,dims,gx,gy,gz,seconds\n100,500,8;4;2,2,1,1,0.1\n")
    X_, y = pm.load_samples_csv(tmp_path / "r.csv")
    np.testing.assert_allclose(X_[0], pm.comp_features(pm.DatasetStats(100, 500, [8, 4, 2]), (2, 1, 1)))


def test_harness_cost_uses_slowest_rank():
    from plexuskit.grid import CommStats
    a, b = CommStats(), CommStats()
    a.add_flops("spmm", 10)
    b.add_flops("spmm", 30)
    b.record(X, "all_reduce", 200)
    m = pm.MachineParams(g_node=1, beta_inter=100.0, beta_intra=1000.0)
    assert pm.harness_cost({0: a, 1: b}, (2, 1, 1), m, flop_rate=10.0) == pytest.approx(3 + 2)

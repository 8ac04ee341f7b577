import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mhc_gnn import autodiff as ad
from mhc_gnn.analysis import (
    DecayFit,
    SmoothingTrace,
    complexity_bench,
    expressiveness_experiment,
    fit_decay,
    gin_graph_embedding,
    diversity_bound_holds,
    measure_smoothing,
    op_count,
    random_graph,
    spectral_gap,
    uniform_maps_config,
    write_bench,
    write_report,
)
from mhc_gnn.gnn import ConfigError, GraphContext, ModelConfig, init_params, layer_params, mhc_layer_forward
from mhc_gnn.graphs import (DisconnectedGraphError, Graph, make_cycle, make_rook_4x4, make_sbm,
                            make_shrikhande, normalize_adjacency)
from mhc_gnn.linalg import Rng
from mhc_gnn.sinkhorn import stream_variance

PLAIN = ModelConfig(mode="baseline", streams=1, hidden=8, layers=30, baseline_residual=False)


def lambda2(g):
    return np.sort(np.linalg.eigvalsh(normalize_adjacency(g).dense()))[-2]


# --------------------------------------------------------------------------- fits


def test_fit_recovers_geometric_sequence():
    seq = 3.0 * 0.7 ** np.arange(20)
    f = fit_decay(seq)
    assert f.rho == pytest.approx(0.7, rel=1e-12)
    assert f.r2 == pytest.approx(1.0, abs=1e-12)
    assert f.window == (1, 19)


def test_flat_trace_has_unit_rate():
    f = fit_decay(np.full(10, 2.5))
    assert f.rho == pytest.approx(1.0) and f.r2 == 1.0


def test_fit_window_rules():
    seq = 0.5 ** np.arange(12)
    with pytest.raises(ValueError):
        fit_decay(seq, window=(0, 8))
    with pytest.raises(ValueError):
        fit_decay(seq, window=(2, 4))
    with pytest.raises(FloatingPointError):
        fit_decay(np.r_[1.0, 1.0, 1e-320, 1.0, 1.0, 1.0])
    assert fit_decay(seq, window=(3, 9)).rho == pytest.approx(0.5)


def test_rates_and_bound():
    f = DecayFit("pairwise_dist", (1, 9), 0.9, 0.0, 1.0, gamma=0.19, streams=4, eps_mean=0.01)
    assert f.baseline_rate == pytest.approx(0.81)
    assert f.stream_rate == pytest.approx(0.81 ** 0.25)
    assert f.bound(8) == pytest.approx(0.81 ** 2 * 1.01 ** 8)
    assert DecayFit("x", (1, 4), 1, 0, 1).bound(3) is None


# --------------------------------------------------------------------------- smoothing


def test_cycle8_linear_rate_matches_lambda2():
    g = make_cycle(8)
    lam = lambda2(g)
    assert spectral_gap(g) == pytest.approx(1 - lam, abs=1e-7)
    f = fit_decay(measure_smoothing(g, PLAIN, "identity", seed=0), window=(5, 30))
    assert abs(f.rho - lam) / lam < 0.05
    assert f.r2 > 0.99


def test_sbm_linear_rate_matches_lambda2():
    g = make_sbm([20, 20], 0.5, 0.05, Rng(0))
    lam = lambda2(g)
    f = fit_decay(measure_smoothing(g, PLAIN, "identity", seed=1), window=(5, 30))
    assert abs(f.rho - lam) / lam < 0.05


def test_uniform_streams_contract_more_slowly_at_every_layer():
    g = make_cycle(8)
    one = measure_smoothing(g, uniform_maps_config(1, hidden=8, layers=20), "identity").pairwise_dist
    four = measure_smoothing(g, uniform_maps_config(4, hidden=8, layers=20), "identity").pairwise_dist
    assert np.all(four[1:] / four[:-1] >= one[1:] / one[:-1] - 1e-12)
    # with pre = post = 1/n and res = I one layer is h + A h / n, so rho -> (n + lambda_2) / (n + 1)
    # the norm division makes the early layers a transient, so fit deep in the trace
    long = measure_smoothing(g, uniform_maps_config(4, hidden=16, layers=48), "identity")
    lam = lambda2(g)
    assert fit_decay(long, window=(24, 48)).rho == pytest.approx((4 + lam) / 5, rel=0.01)


@pytest.mark.parametrize("mode", ["identity", "random_orthogonal"])
@pytest.mark.parametrize("streams", [1, 3])
def test_constant_features_stay_collapsed(mode, streams):
    g = make_cycle(8)
    cfg = (ModelConfig(mode="baseline", streams=1, hidden=4, layers=5) if streams == 1
           else ModelConfig(streams=streams, hidden=4, layers=5))
    t = measure_smoothing(g, cfg, mode, features=np.ones((8, 4)))
    for name in ("pairwise_dist", "dirichlet", "stream_var"):
        assert np.all(np.abs(t.metric(name)) < 1e-20)


@given(st.integers(0, 2**16))
@settings(max_examples=20)
def test_dirichlet_energy_non_increasing_for_linear_diffusion(seed):
    r = Rng(seed)
    g = make_sbm([int(r.integers(3, 8)), int(r.integers(3, 8))], 0.7, 0.2, r, retries=50)
    if not g.is_connected():
        return
    t = measure_smoothing(g, PLAIN, "identity", L_max=15, seed=seed)
    assert np.all(np.diff(t.dirichlet) <= 1e-12 * t.dirichlet[0])
    assert np.all(t.pairwise_dist >= 0)


def test_disconnected_graph_rejected():
    g = Graph(4, np.array([[0, 1], [2, 3]]))
    with pytest.raises(DisconnectedGraphError):
        measure_smoothing(g, PLAIN, "identity")
    with pytest.raises(ConfigError):
        measure_smoothing(make_cycle(5), PLAIN, "learned")


def test_trace_csv(tmp_path):
    t = measure_smoothing(make_cycle(6), ModelConfig(streams=2, hidden=4, layers=3), "identity")
    lines = t.to_csv(tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "layer,pairwise_dist,dirichlet,stream_var,epsilon"
    assert len(lines) == 1 + 4 + 1
    assert t.epsilon[0] == 0.0 and np.all(t.epsilon[1:] > 0)


def test_diversity_bound_on_model_layers():
    g = make_sbm([6, 6], 0.6, 0.2, Rng(1))
    cfg = ModelConfig(hidden=6, streams=4, layers=5, alpha_init=0.01)
    p = init_params(cfg, 6, 2, Rng(0))
    for k in p:
        if k.endswith("B_res"):
            p[k] = 0.5 * np.eye(4) + Rng(3).normal((4, 4), 0.02)  # near-identity maps
    tape = ad.Tape()
    pv = {k: tape.const(v) for k, v in p.items()}
    x = tape.const(Rng(2).normal((12, 4, 6)))
    for k in range(cfg.layers):
        y, maps = mhc_layer_forward(x, GraphContext(g), layer_params(pv, k), cfg)
        assert np.all(maps.epsilon() <= 0.1)
        assert diversity_bound_holds(maps.res.value, x.value)
        x = y


def test_diversity_bound_bound_is_tight_for_two_streams():
    # H = [[1-a, a], [a, 1-a]]: eps = 2a and Var(Hx) = (1 - eps)^2 Var(x)
    a = 0.03
    h = np.array([[1 - a, a], [a, 1 - a]])
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])
    eps = 2 * a
    assert stream_variance(h @ x) == pytest.approx((1 - eps) ** 2 * stream_variance(x))
    assert diversity_bound_holds(h, x, slack=0.0)


# --------------------------------------------------------------------------- expressiveness


def test_gin_constant_features_cannot_separate_regular_pair():
    es, er = gin_graph_embedding(make_shrikhande()), gin_graph_embedding(make_rook_4x4())
    assert np.max(np.abs(es - er)) <= 1e-8


def test_expressiveness_report(tmp_path):
    rep = expressiveness_experiment(seeds=(0,), epochs=60)
    assert rep["srg_parameters"]["shrikhande"] == (16, 6, 2, 2)
    assert rep["isomorphic"] is False and rep["wl_distinguishes"] is False
    assert rep["gin_constant_max_diff"] <= 1e-8
    assert rep["cycle4"]["separates"] is False
    assert rep["cycle4"]["shrikhande"] == [12] == rep["cycle4"]["rook4"]
    assert rep["neighborhood_profiles"]["separates"] is True
    acc = rep["trained_separation"]["runs"][0]["train_accuracy"]
    assert 0.0 <= acc <= 1.0
    data = json.loads(write_report(tmp_path / "r.json", rep).read_text())
    assert data["wl_distinguishes"] is False


# --------------------------------------------------------------------------- complexity


def test_extra_operation_count():
    for N in (1, 100, 5000):
        c = op_count(N, 4 * N, d=128, n=4, T=10)
        assert c.extra == 672 * N
        assert c.stream == 512 * N and c.sinkhorn == 160 * N


def test_doubling_T_doubles_sinkhorn_term():
    a, b = op_count(50, 200, 16, 3, 10), op_count(50, 200, 16, 3, 20)
    assert b.sinkhorn == 2 * a.sinkhorn
    assert (b.message, b.dense, b.stream) == (a.message, a.dense, a.stream)


def test_random_graph_density():
    g = random_graph(2000, 4.0, Rng(0))
    assert abs(g.num_edges - 4000) < 40


def test_bench_outputs(tmp_path):
    rows = complexity_bench([300], d=16, n_list=[1, 2], T=3, repeats=2)
    assert [r.n for r in rows] == [1, 2]
    assert all(r.baseline_ms > 0 and r.mhc_ms > 0 for r in rows)
    ops, timing = write_bench(tmp_path, rows, {"k": 1})
    assert ops.read_text().splitlines()[0].startswith("N,E,d,n,T")
    assert timing.name != ops.name


@pytest.mark.slow
def test_reduction_mode_costs_nothing_extra():
    row = complexity_bench([5000], d=128, n_list=[1], repeats=15)[0]
    assert row.overhead < 0.02

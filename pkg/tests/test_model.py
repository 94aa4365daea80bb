import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from camera.errors import ConfigError, DataError, FormatError
from camera.graph import build_graph
from camera.model import (
    GatingMode,
    MoeMode,
    compute_context,
    expert_global,
    expert_graph,
    expert_semantic,
    gating_forward,
    gcn_propagate,
    init_model,
    load_model,
    model_forward,
    moe_layer_forward,
    save_model,
)

from conftest import dense_gcn_norm, random_instance


def _zero_layer(layer):
    for arr in layer.tensors().values():
        arr[...] = 0


# --- oracles -----------------------------------------------------------------


def semantic_oracle(layer, row):
    d, h = layer.sem_enc_w.shape
    hidden = [max(0.0, sum(row[a] * layer.sem_enc_w[a, j] for a in range(d)) + layer.sem_enc_b[j]) for j in range(h)]
    recon = [sum(hidden[j] * layer.sem_dec_w[j, c] for j in range(h)) + layer.sem_dec_b[c] for c in range(d)]
    return [row[c] - recon[c] for c in range(d)]


def layer_oracle(layer, graph, H, mode="ego-decoupled", mask=(True, True, True)):
    """Per-node loop evaluation of one MoE layer."""
    n, d = H.shape
    a_hat = dense_gcn_norm(graph)
    mu = [sum(H[j, c] for j in range(n)) / n for c in range(d)]
    proto = [sum(mu[a] * layer.glob_w[a, c] for a in range(d)) + layer.glob_b[c] for c in range(d)]
    out = np.zeros((n, d))
    for i in range(n):
        agg = [sum(a_hat[i, j] * H[j, c] for j in range(n)) for c in range(d)]
        e_graph = [H[i, c] - sum(agg[a] * layer.graph_w[a, c] for a in range(d)) for c in range(d)]
        e_sem = semantic_oracle(layer, H[i])
        e_glob = [H[i, c] - proto[c] for c in range(d)]
        nb = graph.neighbors(i)
        ctx = [sum(H[j, c] for j in nb) / len(nb) if len(nb) else 0.0 for c in range(d)]
        x = list(H[i]) + ctx
        logits = [sum(x[a] * layer.gate_w[a, k] for a in range(2 * d)) + layer.gate_b[k] for k in range(3)]
        ex = [math.exp(z) if mask[k] else 0.0 for k, z in enumerate(logits)]
        g = [v / sum(ex) for v in ex]
        experts = [e_graph, e_sem, e_glob]
        for c in range(d):
            base = H[i, c] if mode == "ego-decoupled" else 0.0
            out[i, c] = base + sum(g[k] * experts[k][c] for k in range(3) if mask[k])
    return out


# --- gcn / graph expert ------------------------------------------------------


def cycle(n):
    return build_graph([(i, (i + 1) % n) for i in range(n)], n)


@pytest.mark.parametrize("graph", [cycle(5), build_graph([(0, 1), (0, 2), (1, 2)], 3), build_graph([], 4)])
def test_gcn_preserves_constants_on_regular_graphs(graph):
    H = np.tile([1.5, -2.0], (graph.num_nodes, 1))
    np.testing.assert_allclose(gcn_propagate(graph, H, np.eye(2)), H, rtol=0, atol=1e-12)


def test_gcn_fixed_vector_is_sqrt_degree():
    # symmetric normalization fixes sqrt(deg + 1), which is constant only on regular graphs
    g = build_graph([(0, 1), (1, 2), (2, 3), (0, 2)], 5)
    v = np.sqrt(g.degrees + 1.0)[:, None]
    np.testing.assert_allclose(gcn_propagate(g, v, np.eye(1)), v, atol=1e-12)


def test_gcn_isolated_node_keeps_row():
    g = build_graph([(0, 1)], 3)
    H = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(gcn_propagate(g, H, np.eye(2))[2], H[2])


def test_gcn_path_example():
    g = build_graph([(0, 1), (1, 2)], 3)
    out = gcn_propagate(g, np.array([[1.0], [0.0], [0.0]]), np.array([[1.0]]))
    assert out[1, 0] == pytest.approx(1 / math.sqrt(6), abs=1e-12)
    assert out[1, 0] == pytest.approx(0.4082, abs=1e-4)


def test_gcn_dimension_mismatch(triangle):
    with pytest.raises(DataError):
        gcn_propagate(triangle, np.zeros((2, 2)), np.eye(2))
    with pytest.raises(DataError):
        gcn_propagate(triangle, np.zeros((3, 2)), np.eye(3))


def test_expert_graph_special_cases():
    g = cycle(4)
    m = init_model(2, 1, 1, dtype=np.float64)
    layer = m.layers[0]
    layer.graph_w[...] = np.eye(2)
    np.testing.assert_allclose(expert_graph(layer, g, np.ones((4, 2))), 0, atol=1e-12)
    layer.graph_w[...] = 0
    H = np.random.default_rng(0).normal(size=(4, 2))
    np.testing.assert_array_equal(expert_graph(layer, g, H), H)


@pytest.mark.parametrize("seed", range(40))
def test_expert_graph_dense_oracle(seed):
    graph, H, model = random_instance(seed)
    layer = model.layers[0]
    expected = H - dense_gcn_norm(graph) @ H @ layer.graph_w
    np.testing.assert_allclose(expert_graph(layer, graph, H), expected, rtol=0, atol=1e-12)


# --- semantic / global ---------------------------------------------------------


def test_semantic_special_cases():
    m = init_model(3, 3, 1, dtype=np.float64, allow_overcomplete=True)
    layer = m.layers[0]
    H = np.abs(np.random.default_rng(1).normal(size=(4, 3))) + 0.1
    _zero_layer(layer)
    np.testing.assert_array_equal(expert_semantic(layer, H), H)
    layer.sem_enc_w[...] = np.eye(3)
    layer.sem_dec_w[...] = np.eye(3)
    np.testing.assert_allclose(expert_semantic(layer, H), 0, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_semantic_scalar_oracle(seed):
    _, H, model = random_instance(seed)
    layer = model.layers[0]
    got = expert_semantic(layer, H[:1])
    np.testing.assert_allclose(got[0], semantic_oracle(layer, H[0]), atol=1e-12)


def test_global_examples():
    m = init_model(1, 1, 1, dtype=np.float64, allow_overcomplete=True)
    layer = m.layers[0]
    layer.glob_w[...] = 1.0
    layer.glob_b[...] = 0.0
    np.testing.assert_allclose(expert_global(layer, np.array([[2.0], [0.0]])), [[1.0], [-1.0]])
    np.testing.assert_allclose(expert_global(layer, np.full((4, 1), 3.0)), 0)
    layer.glob_w[...] = 0.0
    H = np.array([[2.0], [5.0]])
    np.testing.assert_array_equal(expert_global(layer, H), H)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5))
def test_global_translation_invariance(seed, t0, t1):
    rng = np.random.default_rng(seed)
    m = init_model(2, 1, 1, dtype=np.float64)
    layer = m.layers[0]
    layer.glob_w[...] = np.eye(2)
    layer.glob_b[...] = 0
    H = rng.normal(size=(6, 2))
    np.testing.assert_allclose(expert_global(layer, H + [t0, t1]), expert_global(layer, H), atol=1e-9)


# --- context and gating --------------------------------------------------------


def test_context_examples(triangle):
    star = build_graph([(0, 1), (0, 2)], 4)
    H = np.array([[9.0, 9.0], [1.0, 0.0], [0.0, 1.0], [7.0, 7.0]])
    C = compute_context(star, H)
    np.testing.assert_allclose(C[0], [0.5, 0.5])
    np.testing.assert_array_equal(C[3], [0.0, 0.0])
    np.testing.assert_allclose(compute_context(triangle, np.eye(3))[0], [0.0, 0.5, 0.5])


def test_gating_examples():
    m = init_model(2, 1, 1, dtype=np.float64)
    layer = m.layers[0]
    H = np.random.default_rng(0).normal(size=(5, 2))
    C = np.zeros_like(H)
    _zero_layer(layer)
    np.testing.assert_allclose(gating_forward(layer, H, C), 1 / 3)
    layer.gate_b[...] = [10.0, 0.0, 0.0]
    g = gating_forward(layer, H, C)
    z = math.exp(10) + 2
    np.testing.assert_allclose(g, np.tile([math.exp(10) / z, 1 / z, 1 / z], (5, 1)), rtol=1e-12)
    assert g[0, 0] == pytest.approx(0.9999, abs=1e-4)
    assert g[0, 1] == pytest.approx(4.54e-5, rel=1e-2)
    layer.gate_b[...] = 0
    np.testing.assert_allclose(gating_forward(layer, H, C, expert_mask=(True, False, True)), np.tile([0.5, 0, 0.5], (5, 1)))


def test_gating_modes():
    m = init_model(2, 1, 1, seed=4, dtype=np.float64)
    layer = m.layers[0]
    rng = np.random.default_rng(0)
    H, C = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    ego = gating_forward(layer, H, C, GatingMode.EGO)
    np.testing.assert_allclose(ego, gating_forward(layer, H, np.zeros_like(H), GatingMode.CONTEXT))
    uni = gating_forward(layer, H, C, GatingMode.UNIFORM, (False, True, True))
    np.testing.assert_allclose(uni, np.tile([0, 0.5, 0.5], (4, 1)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.floats(1, 50))
def test_gating_simplex(seed, scale):
    graph, H, model = random_instance(seed % 500)
    rng = np.random.default_rng(seed)
    for p in model.parameters().values():
        p *= scale
    mask = tuple(rng.random(3) < 0.7)
    if not any(mask):
        mask = (True, False, False)
    model.expert_mask = mask
    trace = model_forward(model, graph, H * scale)
    for g in trace.gates:
        assert np.all(g >= 0)
        np.testing.assert_allclose(g.sum(axis=1), 1, atol=1e-6)
        assert np.all(g[:, ~np.array(mask)] == 0)


# --- layer and stack -----------------------------------------------------------


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("mode", ["ego-decoupled", "standard"])
def test_layer_matches_loop_oracle(seed, mode):
    graph, H, model = random_instance(seed)
    mask = [(True, True, True), (True, False, True), (False, True, False)][seed % 3]
    out, _ = moe_layer_forward(model.layers[0], graph, H, mode, GatingMode.CONTEXT, mask)
    np.testing.assert_allclose(out, layer_oracle(model.layers[0], graph, H, mode, mask), atol=1e-10)


def test_zero_experts_skip_connection():
    graph = cycle(6)
    _, H, model = random_instance(3, n=6, layers=1)
    layer = model.layers[0]
    d = H.shape[1]
    Hc = np.tile(H[0], (6, 1))
    layer.graph_w[...] = np.eye(d)
    layer.sem_enc_w[...] = 0
    layer.sem_enc_b[...] = 0
    layer.sem_dec_w[...] = 0
    layer.sem_dec_b[...] = Hc[0]
    layer.glob_w[...] = np.eye(d)
    layer.glob_b[...] = 0
    out, lt = moe_layer_forward(layer, graph, Hc)
    for e in lt.residuals:
        np.testing.assert_allclose(e, 0, atol=1e-12)
    np.testing.assert_allclose(out, Hc, atol=1e-12)


def make_exact_autoencoder(layer, d):
    """relu(x) - relu(-x) == x: an over-complete autoencoder with zero residual."""
    layer.sem_enc_w[...] = np.concatenate([np.eye(d), -np.eye(d)], axis=1)
    layer.sem_enc_b[...] = 0
    layer.sem_dec_w[...] = np.concatenate([np.eye(d), -np.eye(d)], axis=0)
    layer.sem_dec_b[...] = 0


def test_single_expert_uniform_gating():
    graph, H, model = random_instance(5, layers=1, gating_mode="uniform", expert_mask=(False, True, False))
    out, lt = moe_layer_forward(model.layers[0], graph, H, "ego-decoupled", "uniform", (False, True, False))
    np.testing.assert_allclose(out, H + expert_semantic(model.layers[0], H))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_zero_residual_model_is_identity(seed, layers):
    graph, H, _ = random_instance(seed % 300)
    d = H.shape[1]
    m = init_model(d, 2 * d, layers, seed=seed, dtype=np.float64, allow_overcomplete=True,
                   expert_mask=(False, True, False))
    for layer in m.layers:
        make_exact_autoencoder(layer, d)
    trace = model_forward(m, graph, H)
    for lt in trace.layers:
        np.testing.assert_allclose(lt.residuals[1], 0, atol=1e-12)
    np.testing.assert_allclose(trace.output, H, atol=1e-12)
    # graph + global experts: constant rows on a regular graph
    m.expert_mask = (True, False, True)
    for layer in m.layers:
        layer.graph_w[...] = np.eye(d)
        layer.glob_w[...] = np.eye(d)
        layer.glob_b[...] = 0
    ring = cycle(7)
    Hc = np.tile(H[0], (7, 1))
    np.testing.assert_allclose(model_forward(m, ring, Hc).output, Hc, atol=1e-12)


def test_l1_equals_layer_forward():
    graph, H, model = random_instance(7, layers=1)
    out, _ = moe_layer_forward(model.layers[0], graph, H)
    np.testing.assert_array_equal(model_forward(model, graph, H).output, out)


def test_second_layer_with_zero_experts_passes_through():
    graph, H, model = random_instance(8, layers=2, hidden=2 * 5, allow_overcomplete=True,
                                      expert_mask=(False, True, False), d=5)
    make_exact_autoencoder(model.layers[1], 5)
    trace = model_forward(model, graph, H)
    assert not np.allclose(trace.layers[0].output, H)
    np.testing.assert_allclose(trace.output, trace.layers[0].output, atol=1e-12)


def test_determinism():
    graph, H, model = random_instance(9)
    a = model_forward(model, graph, H)
    b = model_forward(model, graph, H)
    for la, lb in zip(a.layers, b.layers):
        assert la.output.tobytes() == lb.output.tobytes()
        assert la.gates.tobytes() == lb.gates.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_permutation_equivariance(seed):
    graph, H, model = random_instance(seed)
    n = graph.num_nodes
    perm = np.random.default_rng(seed).permutation(n)
    inv = np.argsort(perm)
    g2 = build_graph(inv[graph.edge_dump()], n) if graph.num_edges else graph
    H2 = H[perm]
    t1 = model_forward(model, graph, H)
    t2 = model_forward(model, g2, H2)
    for l1, l2 in zip(t1.layers, t2.layers):
        np.testing.assert_allclose(l2.output, l1.output[perm], atol=1e-10)
        np.testing.assert_allclose(l2.gates, l1.gates[perm], atol=1e-12)
        np.testing.assert_allclose(l2.context, l1.context[perm], atol=1e-12)
        for e1, e2 in zip(l1.residuals, l2.residuals):
            np.testing.assert_allclose(e2, e1[perm], atol=1e-10)


# --- init and checkpoints ------------------------------------------------------


def test_init_determinism_and_count():
    a = init_model(4, 2, 2, seed=11)
    b = init_model(4, 2, 2, seed=11)
    c = init_model(4, 2, 2, seed=12)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()
    assert a.num_parameters() == 170
    for name, p in a.parameters().items():
        if name.endswith("_b"):
            assert not p.any()
        else:
            bound = 1 / math.sqrt(p.shape[0])
            assert np.all(np.abs(p) <= bound)


def test_init_validation():
    with pytest.raises(ConfigError):
        init_model(4, 4)
    init_model(4, 8, allow_overcomplete=True)
    with pytest.raises(ConfigError):
        init_model(4, 2, 0)
    with pytest.raises(ConfigError):
        init_model(4, 2, expert_mask=(False, False, False))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    m = init_model(6, 3, 3, seed=2, dtype=dtype, mode="standard", gating_mode="ego", expert_mask=(True, False, True))
    path = tmp_path / "m.ckpt"
    save_model(m, path)
    back = load_model(path)
    assert back.checksum() == m.checksum()
    assert back.dtype == np.dtype(dtype)
    assert (back.mode, back.gating_mode, back.expert_mask) == (MoeMode.STANDARD, GatingMode.EGO, (True, False, True))
    save_model(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(init_model(4, 2, 1), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_model(path)
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError):
        load_model(path)

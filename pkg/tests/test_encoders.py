import numpy as np
import pytest

from convrec import autodiff as ad
from convrec.encoders import (
    NORM_CONSTANT,
    NORM_IN_DEGREE,
    encode_items,
    gcn_forward,
    init_gcn_params,
    init_rgcn_params,
    rgcn_forward,
    uniform_init,
)
from convrec.errors import ConfigurationError
from convrec.graphs import InteractionGraph, TypedGraph, build_word_graph, normalize_adjacency
from convrec.optim import ParamStore

from oracles import dense_gcn, dense_rgcn


def random_typed_graph(rng, n_nodes, relations, n_edges):
    edges = [
        (int(rng.integers(n_nodes)), int(rng.integers(len(relations))), int(rng.integers(n_nodes)))
        for _ in range(n_edges)
    ]
    return TypedGraph(n_nodes, relations, edges)


def rel_edge_dict(graph):
    """Undirected edge pairs per relation name, as the dense oracle wants them."""
    out = {}
    for rel_idx, rel_name in enumerate(graph.relations):
        pairs = set()
        for u, r, v in graph.edges:
            if r == rel_idx:
                pairs.add((u, v))
        out[rel_name] = sorted(pairs)
    return out


def weight_arrays(params):
    rel = [{name: w.values for name, w in layer.items()} for layer in params.rel_weights]
    self_w = [w.values for w in params.self_weights]
    return rel, self_w


# ---------------------------------------------------------------------------
# initialization


def test_uniform_init_bounds_and_determinism():
    a = uniform_init(np.random.default_rng(3), (50, 16), 16)
    b = uniform_init(np.random.default_rng(3), (50, 16), 16)
    np.testing.assert_array_equal(a, b)
    bound = 1.0 / 4.0
    assert np.abs(a).max() <= bound
    assert a.shape == (50, 16)
    assert a.std() > 0


def test_init_rgcn_registers_all_params():
    store = ParamStore()
    params = init_rgcn_params(store, "kg", 5, ("a", "b"), 4, np.random.default_rng(0))
    assert params.n_layers == 2
    names = set(store.names())
    assert "kg.emb" in names
    assert "kg.l0.rel.a" in names and "kg.l1.rel.b" in names
    assert "kg.l0.self" in names and "kg.l1.self" in names
    assert len(names) == 1 + 2 * (2 + 1)
    assert params.embedding.shape == (5, 4)


def test_init_rgcn_rejects_bad_config():
    store = ParamStore()
    with pytest.raises(ConfigurationError, match="normalization"):
        init_rgcn_params(store, "x", 3, ("r",), 4, np.random.default_rng(0),
                         normalization="bogus")
    with pytest.raises(ConfigurationError, match="positive"):
        init_rgcn_params(ParamStore(), "x", 3, ("r",), 4, np.random.default_rng(0), z=0.0)


# ---------------------------------------------------------------------------
# relational message passing vs dense oracle


@pytest.mark.parametrize("z", [1.0, 2.5])
def test_rgcn_matches_dense_oracle_constant(z):
    rng = np.random.default_rng(11)
    graph = random_typed_graph(rng, 7, ("like", "dislike"), 12)
    store = ParamStore()
    params = init_rgcn_params(store, "g", 7, graph.relations, 5, rng, z=z)
    got = rgcn_forward(graph, params).values
    rel_w, self_w = weight_arrays(params)
    want = dense_rgcn(7, rel_edge_dict(graph), params.embedding.values, rel_w, self_w, z=z)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_rgcn_matches_dense_oracle_in_degree():
    rng = np.random.default_rng(4)
    graph = random_typed_graph(rng, 6, ("r",), 9)
    store = ParamStore()
    params = init_rgcn_params(store, "g", 6, graph.relations, 4, rng,
                              normalization=NORM_IN_DEGREE)
    got = rgcn_forward(graph, params).values
    rel_w, self_w = weight_arrays(params)
    want = dense_rgcn(6, rel_edge_dict(graph), params.embedding.values, rel_w, self_w,
                      in_degree=True)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_rgcn_isolated_nodes_self_transform_only():
    graph = TypedGraph(3, ("r",), [(0, 0, 1)])
    store = ParamStore()
    params = init_rgcn_params(store, "g", 3, ("r",), 4, np.random.default_rng(0), layers=1)
    out = rgcn_forward(graph, params).values
    expected_row2 = np.maximum(params.embedding.values[2] @ params.self_weights[0].values, 0.0)
    np.testing.assert_allclose(out[2], expected_row2, atol=1e-12)


def test_rgcn_config_errors():
    graph = TypedGraph(3, ("r",), [(0, 0, 1)])
    store = ParamStore()
    params = init_rgcn_params(store, "g", 3, ("other",), 4, np.random.default_rng(0))
    with pytest.raises(ConfigurationError, match="relations"):
        rgcn_forward(graph, params)
    params2 = init_rgcn_params(ParamStore(), "g", 5, ("r",), 4, np.random.default_rng(0))
    with pytest.raises(ConfigurationError, match="rows"):
        rgcn_forward(graph, params2)


def test_rgcn_gradients_flow():
    rng = np.random.default_rng(7)
    graph = random_typed_graph(rng, 5, ("a", "b"), 8)
    store = ParamStore()
    params = init_rgcn_params(store, "g", 5, graph.relations, 3, np.random.default_rng(7))

    def objective(_):
        return ad.sum_all(rgcn_forward(graph, params))

    worst = ad.finite_diff_check(objective, store, samples_per_param=3, seed=1)
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# word-graph convolution vs dense oracle


def test_gcn_matches_dense_oracle():
    rng = np.random.default_rng(2)
    pairs = [(int(a), int(b)) for a, b in rng.integers(0, 6, size=(10, 2))]
    wg = build_word_graph(pairs)
    n = wg.graph.n_nodes
    store = ParamStore()
    params = init_gcn_params(store, "w", n, 4, rng)
    got = gcn_forward(wg.adjacency, params).values
    undirected = [(u, v) for u, _, v in wg.graph.edges]
    want = dense_gcn(n, undirected, params.embedding.values, [w.values for w in params.weights])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_gcn_single_node():
    adjacency = normalize_adjacency(1, [])
    store = ParamStore()
    params = init_gcn_params(store, "w", 1, 3, np.random.default_rng(0))
    out = gcn_forward(adjacency, params).values
    h = params.embedding.values
    for w in params.weights:
        h = np.maximum(h @ w.values, 0.0)
    np.testing.assert_allclose(out, h, atol=1e-12)


def test_gcn_gradients_flow():
    adjacency = normalize_adjacency(4, [(0, 1), (1, 2), (2, 3)])
    store = ParamStore()
    params = init_gcn_params(store, "w", 4, 3, np.random.default_rng(5))

    def objective(_):
        return ad.sum_all(gcn_forward(adjacency, params))

    worst = ad.finite_diff_check(objective, store, samples_per_param=3, seed=2)
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# popularity augmentation


@pytest.fixture()
def aug_setup():
    rng = np.random.default_rng(9)
    kg = TypedGraph(6, ("genre",), [(0, 0, 4), (1, 0, 4), (2, 0, 5)])
    # items 0..3 are graph entities; interaction graph covers items 0 and 2
    interaction = InteractionGraph(["u0", "u1"], [0, 2],
                                   [(0, 0, 0), (1, 0, 0), (1, 1, 1)])
    store = ParamStore()
    kg_params = init_rgcn_params(store, "kg", 6, ("genre",), 4, rng)
    ig_params = init_rgcn_params(store, "ig", interaction.as_typed().n_nodes,
                                 ("like", "dislike"), 4, rng)
    return kg, interaction, kg_params, ig_params


def test_encode_items_adds_interaction_rows(aug_setup):
    kg, interaction, kg_params, ig_params = aug_setup
    base = rgcn_forward(kg, kg_params).values
    ig_out = rgcn_forward(interaction.as_typed(), ig_params).values
    full = encode_items(kg, interaction, kg_params, ig_params).values
    assert full.shape == base.shape
    np.testing.assert_allclose(full[0], base[0] + ig_out[0], atol=1e-12)
    np.testing.assert_allclose(full[2], base[2] + ig_out[1], atol=1e-12)
    # entities without interaction evidence keep the plain KG encoding
    for e in (1, 3, 4, 5):
        np.testing.assert_allclose(full[e], base[e], atol=1e-12)


def test_encode_items_without_ig(aug_setup):
    kg, interaction, kg_params, ig_params = aug_setup
    out = encode_items(kg, interaction, kg_params, ig_params, without_ig=True).values
    np.testing.assert_allclose(out, rgcn_forward(kg, kg_params).values, atol=1e-12)


def test_encode_items_without_db(aug_setup):
    kg, interaction, kg_params, ig_params = aug_setup
    out = encode_items(kg, interaction, kg_params, ig_params, without_db=True).values
    ig_out = rgcn_forward(interaction.as_typed(), ig_params).values
    want = kg_params.embedding.values.copy()
    want[0] += ig_out[0]
    want[2] += ig_out[1]
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_encode_items_no_interaction_graph(aug_setup):
    kg, _, kg_params, _ = aug_setup
    out = encode_items(kg, None, kg_params, None).values
    np.testing.assert_allclose(out, rgcn_forward(kg, kg_params).values, atol=1e-12)


def test_encode_items_config_errors(aug_setup):
    kg, interaction, kg_params, _ = aug_setup
    with pytest.raises(ConfigurationError, match="no interaction parameters"):
        encode_items(kg, interaction, kg_params, None)
    small = init_rgcn_params(ParamStore(), "ig", interaction.as_typed().n_nodes,
                             ("like", "dislike"), 2, np.random.default_rng(0))
    with pytest.raises(ConfigurationError, match="dims differ"):
        encode_items(kg, interaction, kg_params, small)


def test_encode_items_gradients_flow(aug_setup):
    kg, interaction, _, _ = aug_setup
    store = ParamStore()
    rng = np.random.default_rng(3)
    kg_p = init_rgcn_params(store, "kg", 6, ("genre",), 3, rng)
    ig_p = init_rgcn_params(store, "ig", interaction.as_typed().n_nodes,
                            ("like", "dislike"), 3, rng)

    def objective(_):
        return ad.sum_all(encode_items(kg, interaction, kg_p, ig_p))

    worst = ad.finite_diff_check(objective, store, samples_per_param=2, seed=4)
    assert worst < 1e-4

import numpy as np
import pytest

from convrec import autodiff as ad
from convrec.corpus import RecExample, Split
from convrec.errors import ShapeError
from convrec.optim import ParamStore
from convrec.preference import (
    GATE_ELEMENTWISE,
    GATE_SCALAR,
    attention_pool,
    build_user_representation,
    gather_context,
    gate_fuse,
    init_attention_params,
)
from convrec.retrieval import RetrievalResult


def example(entities=(), words=(), gold=frozenset({0})):
    return RecExample(conversation_id="c", user_id="u", split=Split.TRAIN,
                      turn_index=1, context_entities=tuple(entities),
                      context_words=tuple(words), gold_items=frozenset(gold))


def make_params(dim=4, gate_mode=GATE_ELEMENTWISE, seed=0):
    store = ParamStore()
    params = init_attention_params(store, "att", dim, np.random.default_rng(seed),
                                   gate_mode=gate_mode)
    return store, params


def pool_oracle(rows, w, b):
    scores = np.tanh(rows @ w) @ b
    alpha = np.exp(scores - scores.max())
    alpha /= alpha.sum()
    return alpha @ rows


# ---------------------------------------------------------------------------
# attention pooling


def test_attention_pool_matches_formula():
    rng = np.random.default_rng(1)
    rows = ad.constant(rng.normal(size=(5, 4)))
    _, params = make_params()
    got = attention_pool(rows, params.w_entity, params.b_entity).values
    want = pool_oracle(rows.values, params.w_entity.values, params.b_entity.values)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_attention_pool_single_row_is_identity():
    rng = np.random.default_rng(2)
    row = rng.normal(size=(1, 4))
    _, params = make_params()
    got = attention_pool(ad.constant(row), params.w_entity, params.b_entity).values
    np.testing.assert_allclose(got, row[0], atol=1e-12)


def test_attention_pool_output_in_convex_hull():
    rng = np.random.default_rng(3)
    rows = rng.normal(size=(6, 4))
    _, params = make_params()
    got = attention_pool(ad.constant(rows), params.w_entity, params.b_entity).values
    assert (got <= rows.max(axis=0) + 1e-12).all()
    assert (got >= rows.min(axis=0) - 1e-12).all()


def test_attention_pool_rejects_empty():
    _, params = make_params()
    with pytest.raises(ShapeError, match="at least one row"):
        attention_pool(ad.constant(np.zeros((0, 4))), params.w_entity, params.b_entity)
    with pytest.raises(ShapeError):
        attention_pool(ad.constant(np.zeros(4)), params.w_entity, params.b_entity)


def test_attention_pool_gradcheck():
    rng = np.random.default_rng(4)
    store, params = make_params()
    rows_values = rng.normal(size=(4, 4))

    def objective(_):
        return ad.sum_all(attention_pool(ad.constant(rows_values),
                                         params.w_entity, params.b_entity))

    worst = ad.finite_diff_check(objective, store, samples_per_param=4, seed=0)
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# gate fusion


def test_gate_fuse_elementwise_oracle():
    rng = np.random.default_rng(5)
    _, params = make_params()
    ve, vw = rng.normal(size=4), rng.normal(size=4)
    fused, gamma = gate_fuse(ad.constant(ve), ad.constant(vw), params)
    g = 1.0 / (1.0 + np.exp(-(params.w_gate.values @ np.concatenate([ve, vw]))))
    np.testing.assert_allclose(gamma.values, g, atol=1e-12)
    np.testing.assert_allclose(fused.values, g * ve + (1 - g) * vw, atol=1e-12)
    assert gamma.shape == (4,)


def test_gate_fuse_scalar_oracle():
    rng = np.random.default_rng(6)
    _, params = make_params(gate_mode=GATE_SCALAR)
    assert params.w_gate.shape == (1, 8)
    ve, vw = rng.normal(size=4), rng.normal(size=4)
    fused, gamma = gate_fuse(ad.constant(ve), ad.constant(vw), params)
    g = 1.0 / (1.0 + np.exp(-(params.w_gate.values @ np.concatenate([ve, vw]))[0]))
    assert gamma.values.shape == ()
    assert gamma.item() == pytest.approx(g, abs=1e-12)
    np.testing.assert_allclose(fused.values, g * ve + (1 - g) * vw, atol=1e-12)


def test_gate_stays_in_unit_interval():
    rng = np.random.default_rng(7)
    _, params = make_params()
    for _ in range(10):
        ve, vw = rng.normal(size=4) * 50, rng.normal(size=4) * 50
        _, gamma = gate_fuse(ad.constant(ve), ad.constant(vw), params)
        # saturates to the closed interval in float64, never outside it
        assert (gamma.values >= 0).all() and (gamma.values <= 1).all()
        assert np.isfinite(gamma.values).all()


def test_init_attention_rejects_unknown_gate_mode():
    with pytest.raises(ValueError, match="gate mode"):
        init_attention_params(ParamStore(), "a", 4, np.random.default_rng(0),
                              gate_mode="diagonal")


def test_gate_fuse_gradcheck_both_modes():
    rng = np.random.default_rng(8)
    ve, vw = rng.normal(size=4), rng.normal(size=4)
    for mode in (GATE_ELEMENTWISE, GATE_SCALAR):
        store, params = make_params(gate_mode=mode)

        def objective(_):
            fused, _ = gate_fuse(ad.constant(ve), ad.constant(vw), params)
            return ad.sum_all(fused)

        worst = ad.finite_diff_check(objective, store, samples_per_param=4, seed=1)
        assert worst < 1e-4


# ---------------------------------------------------------------------------
# context gathering


@pytest.fixture()
def matrices():
    rng = np.random.default_rng(9)
    item_matrix = ad.constant(rng.normal(size=(8, 4)))
    word_matrix = ad.constant(rng.normal(size=(3, 4)))
    word_rows = {10: 0, 11: 1, 12: 2}
    return item_matrix, word_matrix, word_rows


def test_gather_context_rows(matrices):
    item_matrix, word_matrix, word_rows = matrices
    retrieval = RetrievalResult(ranked=(("c9", 1.0),), entities=(5, 6))
    ctx = gather_context(example([2, 4], [10, 12, 10]), item_matrix, word_matrix,
                         retrieval, word_rows)
    np.testing.assert_allclose(ctx.mentioned.values, item_matrix.values[[2, 4]])
    np.testing.assert_allclose(ctx.retrieved.values, item_matrix.values[[5, 6]])
    # word sequence keeps duplicates
    np.testing.assert_allclose(ctx.words.values, word_matrix.values[[0, 2, 0]])
    assert ctx.missing_words == 0


def test_gather_context_counts_missing_words(matrices):
    item_matrix, word_matrix, word_rows = matrices
    ctx = gather_context(example([], [10, 99, 98]), item_matrix, word_matrix,
                         None, word_rows)
    assert ctx.mentioned is None and ctx.retrieved is None
    assert ctx.missing_words == 2
    assert ctx.words.shape == (1, 4)


def test_gather_context_no_word_graph(matrices):
    item_matrix, _, _ = matrices
    ctx = gather_context(example([1], [10, 11]), item_matrix, None, None, None)
    assert ctx.words is None
    assert ctx.missing_words == 2


# ---------------------------------------------------------------------------
# full user representation


def test_user_representation_cold_start(matrices):
    item_matrix, word_matrix, word_rows = matrices
    _, params = make_params()
    rep = build_user_representation(example(), item_matrix, word_matrix, None,
                                    params, word_rows)
    assert rep.cold_start
    np.testing.assert_array_equal(rep.vector.values, np.zeros(4))
    assert rep.n_entity_rows == 0 and rep.n_word_rows == 0


def test_user_representation_entity_only(matrices):
    item_matrix, word_matrix, word_rows = matrices
    _, params = make_params()
    rep = build_user_representation(example([3]), item_matrix, word_matrix, None,
                                    params, word_rows)
    assert not rep.cold_start
    assert rep.n_entity_rows == 1 and rep.n_word_rows == 0
    # v_word is zero, so the fused vector is gamma * item row
    g = rep.gamma.values
    np.testing.assert_allclose(rep.vector.values, g * item_matrix.values[3], atol=1e-12)


def test_user_representation_combines_retrieved(matrices):
    item_matrix, word_matrix, word_rows = matrices
    _, params = make_params()
    retrieval = RetrievalResult(ranked=(("cX", 2.0),), entities=(6, 7))
    rep = build_user_representation(example([1]), item_matrix, word_matrix,
                                    retrieval, params, word_rows)
    assert rep.n_entity_rows == 3
    expected_pool = pool_oracle(item_matrix.values[[1, 6, 7]],
                                params.w_entity.values, params.b_entity.values)
    g = rep.gamma.values
    np.testing.assert_allclose(rep.vector.values, g * expected_pool, atol=1e-12)


def test_user_representation_without_rt(matrices):
    item_matrix, word_matrix, word_rows = matrices
    _, params = make_params()
    retrieval = RetrievalResult(ranked=(("cX", 2.0),), entities=(6, 7))
    with_rt = build_user_representation(example([1]), item_matrix, word_matrix,
                                        retrieval, params, word_rows)
    wo_rt = build_user_representation(example([1]), item_matrix, word_matrix,
                                      retrieval, params, word_rows, without_rt=True)
    none_rt = build_user_representation(example([1]), item_matrix, word_matrix,
                                        None, params, word_rows)
    assert wo_rt.n_entity_rows == 1
    np.testing.assert_array_equal(wo_rt.vector.values, none_rt.vector.values)
    assert not np.allclose(with_rt.vector.values, wo_rt.vector.values)


def test_user_representation_without_cn(matrices):
    item_matrix, word_matrix, word_rows = matrices
    _, params = make_params()
    wo_cn = build_user_representation(example([1], [10, 11]), item_matrix, word_matrix,
                                      None, params, word_rows, without_cn=True)
    assert wo_cn.n_word_rows == 0
    assert wo_cn.missing_words == 2
    no_words = build_user_representation(example([1]), item_matrix, word_matrix,
                                         None, params, word_rows)
    np.testing.assert_array_equal(wo_cn.vector.values, no_words.vector.values)


def test_user_representation_duplicate_entity_rows(matrices):
    # retrieval may resurface a mentioned entity; both rows take part in pooling
    item_matrix, word_matrix, word_rows = matrices
    _, params = make_params()
    retrieval = RetrievalResult(ranked=(("cX", 1.0),), entities=(1,))
    rep = build_user_representation(example([1]), item_matrix, word_matrix,
                                    retrieval, params, word_rows)
    assert rep.n_entity_rows == 2
    # pooling duplicate rows of the same vector returns that vector
    g = rep.gamma.values
    np.testing.assert_allclose(rep.vector.values, g * item_matrix.values[1], atol=1e-12)


def test_user_representation_gradcheck(matrices):
    item_matrix, word_matrix, word_rows = matrices
    store, params = make_params()
    retrieval = RetrievalResult(ranked=(("cX", 1.0),), entities=(5,))
    ex = example([2, 4], [10, 11, 12])

    def objective(_):
        rep = build_user_representation(ex, item_matrix, word_matrix, retrieval,
                                        params, word_rows)
        return ad.sum_all(rep.vector)

    worst = ad.finite_diff_check(objective, store, samples_per_param=4, seed=2)
    assert worst < 1e-4

import numpy as np
import pytest

from seqcount import autodiff as ad
from seqcount.autodiff import Graph, Tensor
from seqcount.decoder import (DecoderDims, DecoderState, FeatureContext, attention_prototypes,
                              attention_step, decode_infer, decode_train, decoder_step, init_decoder,
                              initial_state, pad_matrix, pool_attention)
from seqcount.prototypes import PrototypeBank, build_prototypes

D, GRID = 6, (4, 5)
DIMS = DecoderDims(feature_dim=D, attn_dim=5, hidden=7, input_dim=6, embed_dim=4, max_ways=10)


@pytest.fixture
def params():
    return init_decoder(np.random.default_rng(5), DIMS)


@pytest.fixture
def fmap(rng):
    return Tensor(rng.normal(size=GRID + (D,)))


def orthonormal_bank(n_cls, e=4):
    emb = np.eye(n_cls + 1, e)
    return PrototypeBank(Tensor(np.zeros((n_cls + 1, D))), Tensor(emb))


def random_state(rng, params, n_cls=2):
    st = initial_state(params, n_cls)
    return DecoderState(Tensor(rng.normal(size=7)), Tensor(rng.normal(size=7)), st.prev_scores)


def test_initial_state(params):
    st = initial_state(params, 3)
    assert not np.any(st.h.value) and not np.any(st.cell.value)
    expect = np.zeros(11)
    expect[[0, 1, 2, 10]] = 0.25
    np.testing.assert_array_equal(st.prev_scores.value, expect)


def test_zero_v_gives_uniform_attention(params, fmap, rng):
    params["attn.v"].value = np.zeros(5)
    alpha = attention_step(fmap, random_state(rng, params), params).value
    np.testing.assert_allclose(alpha, np.full(GRID, 1 / 20), atol=1e-15)


def test_attention_is_probability_grid(params, fmap, rng):
    for _ in range(20):
        alpha = attention_step(fmap, random_state(rng, params), params).value
        assert alpha.shape == GRID and np.all(alpha >= 0)
        assert abs(alpha.sum() - 1) <= 1e-12


def test_identical_cells_get_equal_attention(params, fmap):
    f = fmap.value.copy()
    f[1, 2] = f[3, 4]
    alpha = attention_step(Tensor(f), initial_state(params, 2), params).value
    assert alpha[1, 2] == alpha[3, 4]


def test_pool_attention(fmap):
    one_hot = np.zeros(GRID)
    one_hot[2, 3] = 1
    np.testing.assert_array_equal(pool_attention(fmap, one_hot).value, fmap.value[2, 3])
    np.testing.assert_allclose(pool_attention(fmap, np.full(GRID, 1 / 20)).value,
                               fmap.value.mean(axis=(0, 1)), atol=1e-14)
    two = np.zeros(GRID)
    two[0, 0], two[1, 1] = 0.25, 0.75
    np.testing.assert_allclose(pool_attention(fmap, two).value,
                               0.25 * fmap.value[0, 0] + 0.75 * fmap.value[1, 1], atol=1e-15)
    with pytest.raises(ValueError, match="probability"):
        pool_attention(fmap, two * 2)


def test_scores_have_c_plus_one_entries(params, fmap, rng):
    bank = PrototypeBank(Tensor(rng.normal(size=(4, D))), Tensor(rng.normal(size=(4, 4))))
    res = decoder_step(fmap, initial_state(params, 3), bank, params)
    assert res.scores.shape == (4,)
    assert abs(res.scores.value.sum() - 1) <= 1e-12
    padded = res.state.prev_scores.value
    assert padded.shape == (11,)
    np.testing.assert_array_equal(padded[[0, 1, 2]], res.scores.value[:3])
    assert padded[10] == res.scores.value[3]
    assert not np.any(padded[3:10])


def test_query_matching_prototype_wins(params, fmap):
    bank = orthonormal_bank(3)
    for j in range(4):
        params["embed.query.w"].value = np.zeros((7, 4))
        params["embed.query.b"].value = np.eye(4)[j]
        res = decoder_step(fmap, initial_state(params, 3), bank, params)
        assert int(np.argmax(res.scores.value)) == j


def test_logit_shift_invariance(rng):
    logits = rng.normal(size=5)
    a = ad.softmax(Tensor(logits)).value
    b = ad.softmax(Tensor(logits + 123.4)).value
    assert np.max(np.abs(a - b)) <= 1e-12
    assert np.argmax(a) == np.argmax(b)


def test_decoder_step_is_deterministic(params, fmap, rng):
    bank = PrototypeBank(Tensor(rng.normal(size=(3, D))), Tensor(rng.normal(size=(3, 4))))
    st = random_state(rng, params)
    a = decoder_step(fmap, st, bank, params)
    b = decoder_step(fmap, st, bank, params)
    np.testing.assert_array_equal(a.scores.value, b.scores.value)
    np.testing.assert_array_equal(a.alpha.value, b.alpha.value)


def test_empty_bank_rejected(params, fmap):
    with pytest.raises(ValueError, match="empty"):
        decoder_step(fmap, initial_state(params, 0), None, params)


def test_decode_train_threads_state(params, fmap, rng):
    bank = PrototypeBank(Tensor(rng.normal(size=(3, D))), Tensor(rng.normal(size=(3, 4))))
    one = decode_train(fmap, bank, params, 1)
    first = decoder_step(fmap, initial_state(params, 2), bank, params)
    assert len(one) == 1
    np.testing.assert_array_equal(one[0].scores.value, first.scores.value)
    two = decode_train(fmap, bank, params, 2)
    assert len(two) == 2
    second = decoder_step(fmap, two[0].state, bank, params)
    np.testing.assert_array_equal(two[1].scores.value, second.scores.value)
    np.testing.assert_array_equal(two[1].alpha.value, second.alpha.value)
    assert len(decode_train(fmap, bank, params, 5)) == 5
    with pytest.raises(ValueError):
        decode_train(fmap, bank, params, 0)


def test_gradients_reach_every_decoder_weight(params, rng):
    f = Tensor(rng.normal(size=GRID + (D,)), requires_grad=True)
    with Graph() as g:
        bank = build_prototypes([(f, [(2, 3, 0), (10, 14, 1)])], 4.0, 2, params)
        steps = decode_train(f, bank, params, 3)
        loss = sum((-s.log_scores[t % 3] + ad.sum(s.alpha * s.alpha)) for t, s in enumerate(steps))
        g.backward(loss)
    for name, p in params.items():
        assert p.grad is not None and np.any(p.grad), name
    assert np.any(f.grad)


def test_decoder_loss_gradcheck(params, rng):
    f = Tensor(rng.normal(size=GRID + (D,)))
    params = {k: p for k, p in params.items()}

    def loss():
        bank = build_prototypes([(f, [(2, 3, 0), (10, 14, 1)])], 4.0, 2, params)
        steps = decode_train(f, bank, params, 2)
        return -steps[0].log_scores[1] - steps[1].log_scores[0] + ad.sum(steps[1].log_alpha) * 0.01

    rep = ad.grad_check(loss, params, step=1e-5, tol=1e-3)
    assert rep.passed, rep.per_param


def test_decode_infer_stops_on_background(params, fmap):
    bank = orthonormal_bank(2)
    params["embed.query.w"].value = np.zeros((7, 4))
    params["embed.query.b"].value = np.eye(4)[2]
    assert decode_infer(fmap, bank, params, t_max=10) == []


def test_decode_infer_respects_t_max(params, fmap):
    bank = orthonormal_bank(2)
    params["embed.query.w"].value = np.zeros((7, 4))
    params["embed.query.b"].value = np.eye(4)[1]
    preds = decode_infer(fmap, bank, params, t_max=3)
    assert len(preds) == 3
    for (y, x), c in preds:
        assert c == 1 and y % 4 == 0 and x % 4 == 0 and 0 <= y < 16 and 0 <= x < 20
    with pytest.raises(ValueError):
        decode_infer(fmap, bank, params, t_max=0)


def test_attention_prototypes(params, rng):
    maps = [Tensor(rng.normal(size=GRID + (D,))) for _ in range(2)]
    labels = [[(0, 0, 0), (8, 8, 1)], [(4, 12, 1), (12, 4, 0)]]
    bank = attention_prototypes(list(zip(maps, labels)), 2, params)
    assert bank.raw.shape == (3, D) and bank.embedded.shape == (3, 4)
    with pytest.raises(ValueError, match="class 2"):
        attention_prototypes(list(zip(maps, labels)), 3, params)


def test_pad_matrix_capacity():
    with pytest.raises(ValueError, match="capacity"):
        pad_matrix(11, 11)
    assert pad_matrix(10, 11).sum() == 11


def test_feature_context_shape_check(params):
    with pytest.raises(ad.ShapeError, match="attn.W_f"):
        FeatureContext.build(Tensor(np.zeros((4, 4, D + 1))), params)

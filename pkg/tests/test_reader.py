import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cawreader import autodiff as ad
from cawreader.config import TrainConfig
from cawreader.data import ClozeExample, make_batch
from cawreader.reader import CAWReader, aggregate, gated_attention_layer, nll, predict, select_rows
from cawreader.vocab import build_char_vocab, build_vocab
from helpers import assert_grad_close, central_difference


def brute_force_pointer_sum(r, tokens, candidates):
    mass = {}
    for c in candidates:
        mass[c] = 0.0
        for i, t in enumerate(tokens):
            if t == c:
                mass[c] += r[i]
    total = sum(mass.values())
    return [mass[c] / total for c in candidates]


class TestGatedAttention:
    def test_hand_computed_two_by_two(self):
        gp = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        gq = np.array([[[1.0, 2.0], [0.0, 1.0]]])
        x = gated_attention_layer(ad.constant(gp), ad.constant(gq), np.ones((1, 2), bool)).value[0]
        e = math.exp(1.0)
        # both rows attend with logits differing by exactly 1
        b0, b1 = e / (e + 1), (2 * e + 1) / (e + 1)
        np.testing.assert_allclose(x, [[b0, 0.0], [0.0, b1]], rtol=0, atol=1e-10)

    def test_single_query_token(self):
        rng = np.random.default_rng(0)
        gp, gq = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 1, 4))
        x = gated_attention_layer(ad.constant(gp), ad.constant(gq), np.ones((1, 1), bool)).value
        np.testing.assert_allclose(x, gp * gq, rtol=0, atol=1e-15)

    def test_all_ones_summary_is_identity(self):
        gp = np.random.default_rng(1).normal(size=(1, 3, 2))
        gq = np.ones((1, 2, 2))
        x = gated_attention_layer(ad.constant(gp), ad.constant(gq), np.ones((1, 2), bool)).value
        np.testing.assert_allclose(x, gp, rtol=0, atol=1e-15)

    def test_masked_query_tokens_are_ignored(self):
        rng = np.random.default_rng(2)
        gp, gq = rng.normal(size=(1, 3, 2)), rng.normal(size=(1, 3, 2))
        masked = gated_attention_layer(ad.constant(gp), ad.constant(gq), np.array([[True, True, False]])).value
        trimmed = gated_attention_layer(ad.constant(gp), ad.constant(gq[:, :2]), np.ones((1, 2), bool)).value
        np.testing.assert_allclose(masked, trimmed, rtol=0, atol=1e-15)

    def test_all_masked_query(self):
        with pytest.raises(ad.MaskError):
            gated_attention_layer(ad.constant(np.ones((1, 2, 2))), ad.constant(np.ones((1, 2, 2))), np.zeros((1, 2), bool))


class TestPredict:
    def test_equal_products_give_uniform(self):
        r = predict(ad.constant(np.ones((1, 2))), ad.constant(np.ones((1, 4, 2))), np.ones((1, 4), bool)).value
        np.testing.assert_allclose(r, [[0.25] * 4], rtol=0, atol=1e-15)

    def test_saturation(self):
        gp = np.zeros((1, 3, 1))
        gp[0, 1, 0] = 1000.0
        r = predict(ad.constant(np.ones((1, 1))), ad.constant(gp), np.ones((1, 3), bool)).value
        np.testing.assert_allclose(r, [[0.0, 1.0, 0.0]], atol=1e-300)

    def test_four_positions_against_softmax_oracle(self):
        rng = np.random.default_rng(7)
        q, gp = rng.normal(size=(1, 3)), rng.normal(size=(1, 4, 3))
        r = predict(ad.constant(q), ad.constant(gp), np.ones((1, 4), bool)).value[0]
        logits = [sum(q[0, j] * gp[0, i, j] for j in range(3)) for i in range(4)]
        z = sum(math.exp(v) for v in logits)
        np.testing.assert_allclose(r, [math.exp(v) / z for v in logits], rtol=0, atol=1e-14)

    def test_padding_gets_zero(self):
        rng = np.random.default_rng(8)
        r = predict(ad.constant(rng.normal(size=(1, 2))), ad.constant(rng.normal(size=(1, 3, 2))), np.array([[1, 1, 0]], bool)).value
        assert r[0, 2] == 0.0 and abs(r.sum() - 1) < 1e-15

    def test_select_rows(self):
        seq = np.arange(24, dtype=float).reshape(2, 3, 4)
        np.testing.assert_array_equal(select_rows(ad.constant(seq), np.array([2, 0])).value, [seq[0, 2], seq[1, 0]])


class TestAggregate:
    def test_direct_sum(self):
        d = aggregate([0.2, 0.3, 0.5], ["a", "b", "a"], ["a", "b"])
        np.testing.assert_allclose(d.probs, [0.7, 0.3], rtol=0, atol=1e-15)
        assert d.prediction == "a"

    def test_absent_candidate_gets_zero(self):
        d = aggregate([0.5, 0.5], ["a", "b"], ["a", "b", "c"])
        assert d.prob("c") == 0.0 and abs(d.probs.sum() - 1) < 1e-15

    def test_renormalises_over_candidates(self):
        d = aggregate([0.1, 0.2, 0.7], ["a", "b", "."], ["a", "b"])
        np.testing.assert_allclose(d.probs, [1 / 3, 2 / 3], rtol=0, atol=1e-15)

    def test_tie_goes_to_lexicographically_first(self):
        assert aggregate([0.5, 0.5], ["zed", "amy"], ["zed", "amy"]).prediction == "amy"

    def test_unanswerable(self):
        d = aggregate([1.0], ["a"], ["x", "y"])
        assert d.prediction is None and not d.answerable and np.all(d.probs == 0)

    def test_twelve_tokens_five_candidates_against_brute_force(self):
        rng = np.random.default_rng(11)
        words = ["ann", "bob", "cat", "dan", "eve", "the", "."]
        tokens = [words[i] for i in rng.integers(len(words), size=12)]
        tokens[:5] = words[:5]  # every candidate occurs
        r = rng.dirichlet(np.ones(12))
        cands = words[:5]
        np.testing.assert_allclose(aggregate(r, tokens, cands).probs, brute_force_pointer_sum(r, tokens, cands), rtol=0, atol=1e-12)

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_position_order_does_not_matter(self, seed):
        rng = np.random.default_rng(seed)
        tokens = [str(t) for t in rng.integers(4, size=9)]
        r = rng.dirichlet(np.ones(9))
        perm = rng.permutation(9)
        a = aggregate(r, tokens, ["0", "1", "2", "3"])
        b = aggregate(r[perm], [tokens[i] for i in perm], ["0", "1", "2", "3"])
        if a.answerable:
            np.testing.assert_allclose(a.probs, b.probs, rtol=0, atol=1e-15)

    def test_empty_candidates(self):
        with pytest.raises(ValueError):
            aggregate([1.0], ["a"], [])


def test_nll_values():
    assert nll(1.0) == 0.0
    assert abs(nll(0.5) - 0.693147) < 1e-6


def toy_model(strategy="mul", layers=2, seed=0):
    train = [
        ClozeExample(["ann", "met", "bob", "at", "the", "lake", "."], ["XXXXX", "met", "bob"], "ann", ["ann", "bob", "lake"]),
        ClozeExample(["bob", "saw", "the", "cat", "."], ["bob", "saw", "XXXXX"], "cat"),
        ClozeExample(["cat", "ran", "."], ["XXXXX", "ran"], "cat"),
    ]
    vocab = build_vocab([e.passage + e.query for e in train])
    chars = build_char_vocab(vocab.id_to_word[1:])
    cfg = TrainConfig(strategy=strategy, gamma=0.8, d_word=4, char_dim=3, char_hidden=3, hidden=3, layers=layers, seed=seed)
    return CAWReader(cfg, vocab, chars), train


class TestModel:
    @pytest.mark.parametrize("strategy", ["word_only", "concat", "sum", "mul"])
    def test_probabilities_conserve_and_padding_is_zero(self, strategy):
        model, train = toy_model(strategy)
        b = make_batch(train)
        r, mass = model.forward(b, model.nodes(requires_grad=False))
        np.testing.assert_allclose(r.value.sum(1), 1.0, rtol=0, atol=1e-12)
        assert np.all(r.value[~b.passage_mask] == 0.0)
        for d in model.distributions(b):
            assert abs(d.probs.sum() - 1) < 1e-12

    def test_loss_matches_distribution(self):
        model, train = toy_model()
        b = make_batch(train)
        loss, n = model.loss(b, model.nodes(requires_grad=False))
        expected = np.mean([-math.log(d.prob(ex.answer)) for d, ex in zip(model.distributions(b), train)])
        assert n == 3 and abs(float(loss.value) - expected) < 1e-12

    def test_unscorable_batch(self):
        model, _ = toy_model()
        ex = ClozeExample(["ann", "ran", "."], ["XXXXX", "ran"], "bob", ["bob", "cat"])
        loss, n = model.loss(make_batch([ex]), model.nodes())
        assert loss is None and n == 0
        assert model.distributions(make_batch([ex]))[0].prediction is None

    def test_layer_count_changes_output(self):
        m1, train = toy_model(layers=1)
        m3, _ = toy_model(layers=3)
        b = make_batch(train)
        assert set(m3.params) > set(m1.params)
        r1, _ = m1.forward(b, m1.nodes(False))
        r3, _ = m3.forward(b, m3.nodes(False))
        assert not np.allclose(r1.value, r3.value)

    @pytest.mark.parametrize("strategy", ["concat", "mul"])
    def test_gradients_match_finite_differences(self, strategy):
        model, train = toy_model(strategy)
        b = make_batch(train)
        nodes = model.nodes()
        loss, _ = model.loss(b, nodes)
        ad.backward(loss)
        for k, arr in model.params.items():
            f = lambda: float(model.loss(b, model.nodes(False))[0].value)  # noqa: E731
            assert_grad_close(nodes[k].grad, central_difference(f, arr), name=k)

import numpy as np
import pytest

from cawreader import autodiff as ad
from cawreader.charenc import (
    CharEncoderConfig,
    bigru,
    encode_cnn,
    encode_rnn,
    encode_words,
    gru,
    init_bigru,
    init_char_encoder,
    pad_char_ids,
    window_mask,
)
from cawreader.vocab import PAD_CHAR, VocabError
from helpers import assert_grad_close, central_difference, scalar_gru


def consts(params):
    return {k: ad.constant(v) for k, v in params.items()}


def gru_weights(params, prefix):
    W = {g: params[f"{prefix}.W_{g}"].tolist() for g in "zrn"}
    U = {g: params[f"{prefix}.U_{g}"].tolist() for g in "zrn"}
    b = {g: params[f"{prefix}.b_{g}"].tolist() for g in "zrn"}
    return W, U, b


def random_encoder(kind, seed=0, n_chars=8, **kw):
    cfg = CharEncoderConfig(kind=kind, **kw)
    rng = np.random.default_rng(seed)
    p = init_char_encoder(rng, cfg, n_chars)
    # non-zero biases so every term of the recurrence is exercised
    for k in p:
        if ".b" in k:
            p[k] = rng.uniform(-0.5, 0.5, p[k].shape)
    return cfg, p


class TestGru:
    def test_matches_scalar_recurrence_with_padding(self):
        rng = np.random.default_rng(3)
        p = init_bigru(rng, "g", 3, 2)
        for k in p:
            p[k] = rng.normal(size=p[k].shape)
        x = rng.normal(size=(2, 4, 3))
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
        out, final = bigru(consts(p), "g", ad.constant(x), mask)
        for b, length in enumerate([4, 2]):
            seq = x[b, :length].tolist()
            fwd = scalar_gru(seq, *gru_weights(p, "g.fwd"))
            bwd = scalar_gru(seq[::-1], *gru_weights(p, "g.bwd"))
            np.testing.assert_allclose(final.value[b], fwd + bwd, rtol=0, atol=1e-12)
            # per-step forward states are prefix runs of the scalar GRU
            for t in range(length):
                np.testing.assert_allclose(out.value[b, t, :2], scalar_gru(seq[: t + 1], *gru_weights(p, "g.fwd")), atol=1e-12)

    def test_reverse_direction_starts_at_last_real_token(self):
        rng = np.random.default_rng(4)
        p = init_bigru(rng, "g", 2, 3)
        x = rng.normal(size=(1, 5, 2))
        short, _ = gru(consts(p), "g.bwd", ad.constant(x[:, :3]), np.ones((1, 3), bool), reverse=True)
        padded, _ = gru(consts(p), "g.bwd", ad.constant(x), np.array([[1, 1, 1, 0, 0]], bool), reverse=True)
        np.testing.assert_allclose(padded.value[:, :3], short.value, rtol=0, atol=1e-15)

    def test_gradients(self):
        rng = np.random.default_rng(5)
        p = init_bigru(rng, "g", 2, 2)
        x = rng.normal(size=(2, 3, 2))
        mask = np.array([[1, 1, 1], [1, 0, 0]], bool)
        w = rng.normal(size=(2, 3, 4))

        def f():
            out, _ = bigru(consts(p), "g", ad.constant(x), mask)
            return float((out.value * w).sum())

        nodes = {k: ad.parameter(v) for k, v in p.items()}
        out, _ = bigru(nodes, "g", ad.constant(x), mask)
        ad.backward(ad.sum(ad.mul(out, ad.constant(w))))
        for k in p:
            assert_grad_close(nodes[k].grad, central_difference(f, p[k]), name=k)


class TestEncodeRnn:
    def test_scalar_oracle_three_chars(self):
        cfg, p = random_encoder("rnn", char_dim=3, hidden=2, out_dim=2)
        ids = [4, 2, 6]
        got = encode_rnn(consts(p), np.array([ids]), np.ones((1, 3), bool)).value[0]
        seq = [p["char.emb"][i].tolist() for i in ids]
        h = scalar_gru(seq, *gru_weights(p, "char.rnn.fwd")) + scalar_gru(seq[::-1], *gru_weights(p, "char.rnn.bwd"))
        W, b = p["char.proj.W"], p["char.proj.b"]
        expected = [b[j] + sum(h[i] * W[i][j] for i in range(4)) for j in range(2)]
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)

    def test_zero_weights_give_the_bias(self):
        cfg, p = random_encoder("rnn", char_dim=3, hidden=2, out_dim=4)
        for k in p:
            if k != "char.emb":
                p[k] = np.zeros_like(p[k])
        beta = np.array([0.5, -1.0, 2.0, 0.0])
        p["char.proj.b"] = beta
        out = encode_words(consts(p), cfg, [[2], [3, 4, 5], [7, 7]])
        np.testing.assert_array_equal(out.value, np.tile(beta, (3, 1)))

    def test_single_character_shape(self):
        cfg, p = random_encoder("rnn", char_dim=3, hidden=2, out_dim=5)
        assert encode_words(consts(p), cfg, [[3]]).shape == (1, 5)

    def test_permutation_sensitive(self):
        cfg, p = random_encoder("rnn", char_dim=4, hidden=3, out_dim=3)
        out = encode_words(consts(p), cfg, [[2, 3], [3, 2]]).value
        assert not np.allclose(out[0], out[1])

    def test_batch_padding_does_not_change_codes(self):
        cfg, p = random_encoder("rnn", char_dim=4, hidden=3, out_dim=3)
        alone = encode_words(consts(p), cfg, [[2, 3]]).value
        batched = encode_words(consts(p), cfg, [[2, 3], [4, 5, 6, 7, 2]]).value
        np.testing.assert_allclose(batched[0], alone[0], rtol=0, atol=1e-15)

    def test_empty_sequence(self):
        cfg, p = random_encoder("rnn", char_dim=3, hidden=2, out_dim=2)
        with pytest.raises(VocabError):
            encode_words(consts(p), cfg, [[2], []])

    def test_deterministic(self):
        cfg, p = random_encoder("rnn", char_dim=3, hidden=2, out_dim=2)
        a = encode_words(consts(p), cfg, [[2, 5, 3]]).value
        b = encode_words(consts(p), cfg, [[2, 5, 3]]).value
        np.testing.assert_array_equal(a, b)


class TestEncodeCnn:
    def one_hot_encoder(self, n_chars, widths=(1,)):
        cfg = CharEncoderConfig(kind="cnn", char_dim=n_chars, out_dim=n_chars * len(widths), widths=widths, filters=n_chars)
        p = init_char_encoder(np.random.default_rng(0), cfg, n_chars)
        p["char.emb"] = np.eye(n_chars)
        for w in widths:
            W = np.zeros((w * n_chars, n_chars))
            W[:n_chars] = np.eye(n_chars)  # reads the first character of each window
            p[f"char.cnn.W{w}"] = W
        p["char.proj.W"] = np.eye(n_chars * len(widths))
        p["char.proj.b"] = np.zeros(n_chars * len(widths))
        return cfg, p

    def test_one_hot_identity_filter_gives_tanh_one(self):
        cfg, p = self.one_hot_encoder(6)
        out = encode_words(consts(p), cfg, [[2, 4, 4]]).value[0]
        expected = np.zeros(6)
        expected[[2, 4]] = np.tanh(1.0)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)

    def test_constant_sequence_max_equals_single_window(self):
        cfg, p = random_encoder("cnn", char_dim=3, filters=4, widths=(2,), out_dim=4)
        n = consts(p)
        ids, mask = pad_char_ids([[3, 3, 3, 3, 3]], min_len=2)
        emb = p["char.emb"][3]
        window = np.tanh(np.concatenate([emb, emb]) @ p["char.cnn.W2"] + p["char.cnn.b2"])
        out = encode_cnn(n, ids, mask, (2,)).value[0]
        np.testing.assert_allclose(out, window @ p["char.proj.W"] + p["char.proj.b"], rtol=0, atol=1e-14)

    def test_pre_projection_width(self):
        cfg = CharEncoderConfig(kind="cnn", char_dim=3, out_dim=5, widths=(2, 3), filters=2)
        p = init_char_encoder(np.random.default_rng(0), cfg, 6)
        assert p["char.proj.W"].shape == (4, 5)
        assert encode_words(consts(p), cfg, [[2, 3, 4]]).shape == (1, 5)

    def test_extra_padding_is_neutral(self):
        cfg, p = random_encoder("cnn", char_dim=4, filters=3, widths=(1, 2, 3), out_dim=3)
        n = consts(p)
        ids, mask = pad_char_ids([[2, 3, 4], [5, 6]], min_len=3)
        base = encode_cnn(n, ids, mask, (1, 2, 3)).value
        extra = np.full((2, 4), PAD_CHAR)
        wide = encode_cnn(n, np.concatenate([ids, extra], 1), np.concatenate([mask, extra == 0], 1), (1, 2, 3)).value
        # equal up to summation order inside the batched matmul
        np.testing.assert_allclose(wide, base, rtol=0, atol=1e-15)

    def test_word_shorter_than_widest_filter_uses_first_window(self):
        vm = window_mask(np.array([1, 4]), 4, 3)
        np.testing.assert_array_equal(vm, [[True, False], [True, True]])

    def test_gradients(self):
        cfg, p = random_encoder("cnn", char_dim=3, filters=2, widths=(1, 2), out_dim=2, n_chars=6)
        seqs = [[2, 3, 4], [5]]
        w = np.random.default_rng(1).normal(size=(2, 2))

        def f():
            return float((encode_words(consts(p), cfg, seqs).value * w).sum())

        nodes = {k: ad.parameter(v) for k, v in p.items()}
        ad.backward(ad.sum(ad.mul(encode_words(nodes, cfg, seqs), ad.constant(w))))
        for k in p:
            assert_grad_close(nodes[k].grad, central_difference(f, p[k]), name=k)


def test_unknown_encoder_kind():
    with pytest.raises(ValueError):
        CharEncoderConfig(kind="lstm")


def test_pad_char_ids():
    ids, mask = pad_char_ids([[5], [2, 3, 4]])
    np.testing.assert_array_equal(ids, [[5, PAD_CHAR, PAD_CHAR], [2, 3, 4]])
    np.testing.assert_array_equal(mask, [[1, 0, 0], [1, 1, 1]])

"""Multi-hop gated-attention reader with pointer-sum answer aggregation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MaskError, Node
from .charenc import Params, bigru, init_bigru, init_char_encoder
from .config import TrainConfig
from .data import Batch
from .embed import embed_words, init_word_table
from .vocab import CharVocabulary, ShortList, Vocabulary, apply_filter

logger = logging.getLogger(__name__)


def gated_attention_layer(gp: Node, gq: Node, query_mask: np.ndarray) -> Node:
    """``x_i = p_i * (G_q softmax(G_q^T p_i))`` for every passage position.

    ``gp`` is ``[B, Tp, D]``, ``gq`` is ``[B, Tq, D]``, ``query_mask`` is
    ``[B, Tq]``.
    """
    B, Tp, _ = gp.shape
    if gq.shape[1] == 0 or Tp == 0:
        raise ValueError("gated attention needs non-empty passage and query")
    mask = np.broadcast_to(np.asarray(query_mask, dtype=bool)[:, None, :], (B, Tp, gq.shape[1]))
    if not mask.any(axis=-1).all():
        raise MaskError("gated attention: a query has every position masked")
    alpha = ad.softmax(ad.matmul(gp, ad.transpose(gq)), mask)
    beta = ad.matmul(alpha, gq)
    return ad.mul(gp, beta)


def select_rows(seq: Node, positions: np.ndarray) -> Node:
    """``seq[b, positions[b]]`` for ``seq [B, T, D]`` -> ``[B, D]``."""
    B, T, D = seq.shape
    return ad.gather(ad.reshape(seq, (B * T, D)), np.arange(B) * T + np.asarray(positions))


def predict(q: Node, gp: Node, passage_mask: np.ndarray) -> Node:
    """Masked softmax over per-position inner products ``<q_b, G_P[b, i]>``."""
    B, Tp, D = gp.shape
    if Tp == 0:
        raise ValueError("cannot predict over an empty passage")
    logits = ad.reshape(ad.matmul(gp, ad.reshape(q, (B, D, 1))), (B, Tp))
    return ad.softmax(logits, np.asarray(passage_mask, dtype=bool))


@dataclass
class AnswerDistribution:
    candidates: list[str]
    probs: np.ndarray
    prediction: str | None

    @property
    def answerable(self) -> bool:
        return self.prediction is not None

    def prob(self, word: str) -> float:
        return float(self.probs[self.candidates.index(word)])


def aggregate(r: Sequence[float], tokens: Sequence[str], candidates: Sequence[str]) -> AnswerDistribution:
    """Sum position probabilities per candidate word, renormalised over the candidates.

    Ties in the argmax go to the lexicographically first surface form.  When
    no candidate occurs in the passage the distribution is all zeros and the
    prediction is ``None``.
    """
    if not candidates:
        raise ValueError("candidate set is empty")
    r = np.asarray(r, dtype=np.float64)
    if len(tokens) > len(r):
        raise ValueError("more tokens than position probabilities")
    cands = list(candidates)
    col = {c: j for j, c in enumerate(cands)}
    pos = np.array([i for i, t in enumerate(tokens) if t in col], dtype=np.int64)
    mass = np.zeros(len(cands))
    if pos.size:
        np.add.at(mass, [col[tokens[i]] for i in pos], r[pos])
    total = mass.sum()
    if total <= 0.0:
        return AnswerDistribution(cands, mass, None)
    probs = mass / total
    best = probs.max()
    prediction = min(c for c, p in zip(cands, probs) if p == best)
    return AnswerDistribution(cands, probs, prediction)


def nll(p_answer: float) -> float:
    return float(-np.log(p_answer))


class CAWReader:
    """Character-augmented word embeddings feeding a K-hop gated-attention reader."""

    def __init__(
        self,
        config: TrainConfig,
        vocab: Vocabulary,
        chars: CharVocabulary,
        params: Params | None = None,
    ):
        self.config = config
        self.vocab = vocab
        self.chars = chars
        self.shortlist: ShortList = apply_filter(vocab, config.gamma)
        self.char_cfg = config.char_config()
        self.params: Params = params if params is not None else self.init_params(np.random.default_rng(config.seed))

    def init_params(self, rng: np.random.Generator) -> Params:
        cfg = self.config
        params: Params = {}
        params.update(init_word_table(rng, self.vocab.size, cfg.d_word, cfg.word_init))
        if cfg.strategy != "word_only":
            params.update(init_char_encoder(rng, self.char_cfg, self.chars.size))
            if cfg.strategy == "mul":
                # start the character gate at identity: JE(w) ~= e_w
                params["char.proj.b"][:] = 1.0
        d_in = cfg.embed_dim
        for k in range(1, cfg.layers + 1):
            params.update(init_bigru(rng, f"layer{k}.p", d_in if k == 1 else 2 * cfg.hidden, cfg.hidden))
            params.update(init_bigru(rng, f"layer{k}.q", d_in, cfg.hidden))
        return params

    def nodes(self, requires_grad: bool = True) -> dict[str, Node]:
        make = ad.parameter if requires_grad else ad.constant
        return {k: make(v) for k, v in self.params.items()}

    # -- forward ---------------------------------------------------------

    def forward(self, batch: Batch, p: Mapping[str, Node]) -> tuple[Node, Node]:
        """Returns position probabilities ``r [B, Tp]`` and candidate mass ``[B, C]``."""
        cfg = self.config
        emb = embed_words(p, batch.words, self.vocab, self.shortlist, self.chars, cfg.strategy, self.char_cfg)
        passage = ad.gather(emb, batch.passage)
        query = ad.gather(emb, batch.query)
        x = passage
        gq = None
        for k in range(1, cfg.layers + 1):
            gp, _ = bigru(p, f"layer{k}.p", x, batch.passage_mask)
            gq, _ = bigru(p, f"layer{k}.q", query, batch.query_mask)
            x = gated_attention_layer(gp, gq, batch.query_mask)
        q = select_rows(gq, batch.placeholder)
        r = predict(q, x, batch.passage_mask)
        B, Tp = r.shape
        C = batch.cand_index.shape[2]
        mass = ad.reshape(ad.matmul(ad.reshape(r, (B, 1, Tp)), ad.constant(batch.cand_index)), (B, C))
        return r, mass

    def loss(self, batch: Batch, p: Mapping[str, Node]) -> tuple[Node | None, int]:
        """Mean ``-log P(A|p,q)`` over scorable examples, and their count.

        Returns ``(None, 0)`` when no example in the batch is scorable.
        """
        loss, n, _ = self.loss_and_mass(batch, p)
        return loss, n

    def loss_and_mass(self, batch: Batch, p: Mapping[str, Node]) -> tuple[Node | None, int, Node]:
        _, mass = self.forward(batch, p)
        ok = np.flatnonzero(batch.answer >= 0)
        if ok.size == 0:
            return None, 0, mass
        B, C = mass.shape
        picked = ad.gather(ad.reshape(mass, (B * C, 1)), ok * C + batch.answer[ok])
        total = ad.gather(ad.reshape(ad.sum(mass, axis=1), (B, 1)), ok)
        per = ad.sub(ad.log(total), ad.log(picked))
        return ad.mul(ad.sum(per), ad.constant(np.array(1.0 / ok.size))), int(ok.size), mass

    @staticmethod
    def correct_count(batch: Batch, mass: np.ndarray) -> int:
        """Argmax hits from candidate mass, ties to the lexicographically first word."""
        hits = 0
        for b, ex in enumerate(batch.examples):
            cands = batch.candidates[b]
            m = mass[b, : len(cands)]
            if m.sum() <= 0:
                continue
            best = m.max()
            hits += min(c for c, v in zip(cands, m) if v == best) == ex.answer
        return hits

    def distributions(self, batch: Batch) -> list[AnswerDistribution]:
        r, _ = self.forward(batch, self.nodes(requires_grad=False))
        return [
            aggregate(r.value[b, : len(ex.passage)], ex.passage, batch.candidates[b])
            for b, ex in enumerate(batch.examples)
        ]

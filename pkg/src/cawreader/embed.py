"""Joint word/character embeddings with short-list UNK substitution.

For a token w the word path looks up its own row when w is in the short list
and the shared UNK row otherwise; the character path always encodes the
original surface form.  The two are joined by concatenation, element-wise sum
or element-wise product (or the word path alone, ``word_only``).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .charenc import CharEncoderConfig, NodeParams, Params, encode_words
from .vocab import CharVocabulary, ShortList, Vocabulary, word_id_for_embedding

logger = logging.getLogger(__name__)


def init_word_table(rng: np.random.Generator, vocab_size: int, d_word: int, init_range: float = 1.0) -> Params:
    """Uniform ``[-init_range, init_range]``; row 0 is the trainable UNK vector."""
    return {"word.emb": rng.uniform(-init_range, init_range, (vocab_size, d_word))}


def load_pretrained(path: str | Path, vocab: Vocabulary, table: np.ndarray) -> int:
    """Overwrite rows of ``table`` from a ``<word> <v1> ... <vd>`` text file.

    Words missing from the vocabulary are skipped; vocabulary words missing
    from the file keep their current values.  Returns the number of rows set.
    """
    d = table.shape[1]
    loaded = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            word, vals = parts[0], parts[1:]
            i = vocab.word_to_id.get(word)
            if i is None:
                continue
            if len(vals) != d:
                raise ValueError(f"{path}:{lineno}: expected {d} values for {word!r}, got {len(vals)}")
            table[i] = np.asarray(vals, dtype=np.float64)
            loaded += 1
    logger.info("loaded %d pretrained vectors from %s", loaded, path)
    return loaded


def join(e_w: Node, e_c: Node | None, strategy: str) -> Node:
    if strategy == "word_only":
        return e_w
    if strategy == "concat":
        return ad.concat([e_w, e_c], axis=-1)
    if strategy == "sum":
        return ad.add(e_w, e_c)
    if strategy == "mul":
        return ad.mul(e_w, e_c)
    raise ValueError(f"unknown join strategy {strategy!r}")


def embed_words(
    p: NodeParams,
    words: Sequence[str],
    vocab: Vocabulary,
    shortlist: ShortList,
    chars: CharVocabulary,
    strategy: str,
    char_cfg: CharEncoderConfig,
) -> Node:
    """Joint embeddings ``[len(words), dim]`` for a list of surface forms."""
    ids = np.array([word_id_for_embedding(w, vocab, shortlist) for w in words], dtype=np.int64)
    e_w = ad.gather(p["word.emb"], ids)
    if strategy == "word_only":
        return e_w
    e_c = encode_words(p, char_cfg, [chars.char_ids(w) for w in words])
    return join(e_w, e_c, strategy)


def joint_embed(
    p: NodeParams,
    word: str,
    vocab: Vocabulary,
    shortlist: ShortList,
    chars: CharVocabulary,
    strategy: str,
    char_cfg: CharEncoderConfig,
) -> np.ndarray:
    """JE(w) for a single token, as a plain vector."""
    return embed_words(p, [word], vocab, shortlist, chars, strategy, char_cfg).value[0]

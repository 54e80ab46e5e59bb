"""Frequency-ranked vocabulary, short-list filter and character inventory."""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK = "<unk>"
UNK_ID = 0
UNK_CHAR = 0
PAD_CHAR = 1


class VocabError(ValueError):
    pass


@dataclass
class Vocabulary:
    """Word <-> id map with ids in descending frequency order; id 0 is UNK."""

    id_to_word: list[str]
    freq: list[int]
    word_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.id_to_word or self.id_to_word[UNK_ID] != UNK:
            raise VocabError("vocabulary must reserve id 0 for UNK")
        if len(self.freq) != len(self.id_to_word):
            raise VocabError("freq and id_to_word lengths differ")
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise VocabError("duplicate word in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_word)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    def to_text(self) -> str:
        return "".join(f"{i}\t{w}\t{f}\n" for i, (w, f) in enumerate(zip(self.id_to_word, self.freq)))

    @classmethod
    def from_text(cls, text: str) -> Vocabulary:
        words, freqs = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or int(parts[0]) != len(words):
                raise VocabError(f"line {lineno}: expected '<id>\\t<word>\\t<freq>' with contiguous ids")
            words.append(parts[1])
            freqs.append(int(parts[2]))
        return cls(words, freqs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def build_vocab(corpus: Iterable[Sequence[str]], lowercase: bool = False) -> Vocabulary:
    """Count tokens and rank them by frequency, ties by first occurrence.

    ``Counter`` preserves insertion order and ``sorted`` is stable, so the
    tie-break falls out of a single stable sort on descending count.
    """
    counts: Counter[str] = Counter()
    for tokens in corpus:
        counts.update(t.lower() if lowercase else t for t in tokens)
    counts.pop(UNK, None)
    if not counts:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])
    return Vocabulary([UNK] + [w for w, _ in ranked], [0] + [c for _, c in ranked])


def shortlist_size(n_words: int, gamma: float) -> int:
    # round first so that e.g. 0.3 * 10 == 3.0000000000000004 still gives 3
    return math.ceil(round(gamma * n_words, 9))


@dataclass(frozen=True)
class ShortList:
    """Membership mask over word ids for filter ratio ``gamma``."""

    gamma: float
    member: np.ndarray

    @property
    def size(self) -> int:
        return int(self.member.sum())

    def __contains__(self, word_id: int) -> bool:
        return bool(self.member[word_id])


def apply_filter(vocab: Vocabulary, gamma: float) -> ShortList:
    """Keep the ``ceil(gamma * (s - 1))`` most frequent non-UNK words."""
    if not 0.0 < gamma <= 1.0:
        raise VocabError(f"gamma must lie in (0, 1], got {gamma}")
    member = np.zeros(vocab.size, dtype=bool)
    member[1 : 1 + shortlist_size(vocab.size - 1, gamma)] = True
    return ShortList(gamma, member)


def word_id_for_embedding(word: str, vocab: Vocabulary, shortlist: ShortList) -> int:
    i = vocab.word_to_id.get(word, UNK_ID)
    return i if shortlist.member[i] else UNK_ID


@dataclass
class CharVocabulary:
    """Character ids; 0 is reserved for unseen characters and 1 for padding."""

    id_to_char: list[str]
    char_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.char_to_id = {c: i for i, c in enumerate(self.id_to_char) if i > PAD_CHAR}

    @property
    def size(self) -> int:
        return len(self.id_to_char)

    def __len__(self) -> int:
        return self.size

    def char_ids(self, word: str) -> list[int]:
        if not word:
            raise VocabError("cannot encode an empty word")
        return [self.char_to_id.get(c, UNK_CHAR) for c in word]

    def to_text(self) -> str:
        # specials are stored by position only
        return "\n".join(self.id_to_char[PAD_CHAR + 1 :])

    @classmethod
    def from_text(cls, text: str) -> CharVocabulary:
        chars = text.split("\n") if text else []
        return cls(["<unk>", "<pad>"] + chars)


def build_char_vocab(words: Iterable[str]) -> CharVocabulary:
    """Characters (Unicode code points) in first-seen order."""
    seen: dict[str, None] = {}
    for w in words:
        for c in w:
            seen.setdefault(c, None)
    seen.pop("\n", None)
    return CharVocabulary(["<unk>", "<pad>"] + list(seen))

"""Cloze examples: CBT-format I/O, a synthetic generator, statistics and batching."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PLACEHOLDER = "XXXXX"
DEFAULT_PUNCTUATION = (".", ",", "!", "?", ";", ":", "'", '"', "``", "''", "-", "--", "(", ")")


class DataError(ValueError):
    pass


@dataclass
class ClozeExample:
    passage: list[str]
    query: list[str]
    answer: str
    candidates: list[str] | None = None
    # token count per passage line; only used when writing CBT files
    sentence_lengths: list[int] | None = field(default=None)

    def __post_init__(self):
        n = self.query.count(PLACEHOLDER)
        if n != 1:
            raise DataError(f"query must contain exactly one {PLACEHOLDER}, found {n}")
        if self.candidates is not None and self.answer not in self.candidates:
            raise DataError(f"answer {self.answer!r} is not among the candidates")
        if self.sentence_lengths is not None and sum(self.sentence_lengths) != len(self.passage):
            raise DataError("sentence_lengths do not add up to the passage length")

    @property
    def placeholder_index(self) -> int:
        return self.query.index(PLACEHOLDER)

    @property
    def answerable(self) -> bool:
        return self.answer in self.passage

    def candidate_set(self, punctuation: Sequence[str] = DEFAULT_PUNCTUATION) -> list[str]:
        """Supplied candidates, or every distinct non-punctuation passage word."""
        if self.candidates is not None:
            return list(dict.fromkeys(self.candidates))
        punct = set(punctuation)
        return [w for w in dict.fromkeys(self.passage) if w not in punct]

    def to_record(self) -> dict:
        return {
            "passage": self.passage,
            "query": self.query,
            "answer": self.answer,
            "candidates": self.candidates,
        }


# ---------------------------------------------------------------------------
# CBT format
# ---------------------------------------------------------------------------


def _split_numbered(line: str, lineno: int, source: str) -> tuple[int, str]:
    num, _, rest = line.partition(" ")
    if not num.isdigit():
        raise DataError(f"{source}:{lineno}: expected a line number, got {line[:20]!r}")
    return int(num), rest


def parse_cbt(text: str, context_lines: int | None = None, source: str = "<string>") -> list[ClozeExample]:
    """Parse CBT-style blocks.

    A block is numbered context lines ``1 ... n`` followed by line ``n+1``
    holding ``query<TAB>answer<TAB><TAB>cand1|cand2|...``; blocks are separated
    by blank lines.  ``context_lines`` optionally pins ``n`` (20 in the
    original distribution).
    """
    examples: list[ClozeExample] = []
    block: list[tuple[int, str]] = []

    def flush():
        if not block:
            return
        *ctx, (qline, last) = block
        start = ctx[0][0] if ctx else qline
        if "\t" not in last:
            raise DataError(f"{source}:{qline}: block ends without a query line")
        if context_lines is not None and len(ctx) != context_lines:
            raise DataError(f"{source}:{start}: expected {context_lines} context lines, got {len(ctx)}")
        if not ctx:
            raise DataError(f"{source}:{qline}: block has no context lines")
        sentences = []
        for k, (lineno, line) in enumerate(ctx, 1):
            num, rest = _split_numbered(line, lineno, source)
            if num != k:
                raise DataError(f"{source}:{lineno}: expected line number {k}, got {num}")
            if "\t" in rest:
                raise DataError(f"{source}:{lineno}: context line contains a tab")
            sentences.append(rest.split())
        num, rest = _split_numbered(last, qline, source)
        if num != len(ctx) + 1:
            raise DataError(f"{source}:{qline}: expected line number {len(ctx) + 1}, got {num}")
        parts = rest.split("\t")
        if len(parts) < 3 or not parts[-1].strip():
            raise DataError(f"{source}:{qline}: query line is missing the candidate field")
        query, answer, cands = parts[0].split(), parts[1].strip(), parts[-1].split("|")
        try:
            examples.append(
                ClozeExample(
                    passage=[t for s in sentences for t in s],
                    query=query,
                    answer=answer,
                    candidates=[c.strip() for c in cands],
                    sentence_lengths=[len(s) for s in sentences],
                )
            )
        except DataError as exc:
            raise DataError(f"{source}:{qline}: {exc}") from None
        block.clear()

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r")
        if not line.strip():
            flush()
            continue
        block.append((lineno, line))
        if "\t" in line:
            flush()
    if block:
        flush()
    return examples


def load_cbt(path: str | Path, context_lines: int | None = None) -> list[ClozeExample]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return parse_cbt(text, context_lines, source=str(path))


def serialize_cbt(examples: Iterable[ClozeExample]) -> str:
    blocks = []
    for ex in examples:
        lengths = ex.sentence_lengths or [len(ex.passage)]
        lines, pos = [], 0
        for k, n in enumerate(lengths, 1):
            lines.append(f"{k} " + " ".join(ex.passage[pos : pos + n]))
            pos += n
        cands = ex.candidates if ex.candidates is not None else ex.candidate_set()
        lines.append(f"{len(lengths) + 1} " + " ".join(ex.query) + f"\t{ex.answer}\t\t" + "|".join(cands))
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def save_cbt(examples: Iterable[ClozeExample], path: str | Path) -> None:
    Path(path).write_text(serialize_cbt(examples), encoding="utf-8")


def save_jsonl(examples: Iterable[ClozeExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def load_jsonl(path: str | Path) -> list[ClozeExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(ClozeExample(rec["passage"], rec["query"], rec["answer"], rec.get("candidates")))
            except (KeyError, json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def load_split(path: str | Path) -> list[ClozeExample]:
    path = Path(path)
    if path.suffix == ".jsonl":
        return load_jsonl(path)
    return load_cbt(path)


def load_dataset_dir(path: str | Path) -> dict[str, list[ClozeExample]]:
    """Read ``train``/``valid``/``test`` splits (``.txt`` CBT or ``.jsonl``) from a directory."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"dataset directory {path} does not exist")
    splits = {}
    for name in ("train", "valid", "test"):
        for suffix in (".txt", ".jsonl"):
            f = path / f"{name}{suffix}"
            if f.exists():
                splits[name] = load_split(f)
                break
    if "train" not in splits:
        raise DataError(f"{path} has no train.txt or train.jsonl")
    return splits


def lowercased(examples: Iterable[ClozeExample]) -> list[ClozeExample]:
    def low(ts):
        return [t if t == PLACEHOLDER else t.lower() for t in ts]

    return [
        dataclasses.replace(
            ex,
            passage=low(ex.passage),
            query=low(ex.query),
            answer=ex.answer.lower(),
            candidates=None if ex.candidates is None else low(ex.candidates),
        )
        for ex in examples
    ]


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    queries: int
    avg_passage_len: float
    avg_query_len: float
    vocab_size: int

    def as_row(self) -> dict:
        return dataclasses.asdict(self)


def stats(dataset: Sequence[ClozeExample]) -> DatasetStats:
    if not dataset:
        raise DataError("empty dataset")
    words = set()
    for ex in dataset:
        words.update(ex.passage)
        words.update(ex.query)
    n = len(dataset)
    return DatasetStats(
        queries=n,
        avg_passage_len=sum(len(ex.passage) for ex in dataset) / n,
        avg_query_len=sum(len(ex.query) for ex in dataset) / n,
        vocab_size=len(words),
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded index arrays for a group of examples.

    ``passage``/``query`` index into ``words`` (the batch's distinct surface
    forms); ``cand_index[b, i, c]`` is 1 when passage token ``i`` is candidate
    ``c``; ``answer[b]`` is the answer's candidate column, or -1 when the
    example cannot be scored.
    """

    examples: list[ClozeExample]
    words: list[str]
    passage: np.ndarray
    passage_mask: np.ndarray
    query: np.ndarray
    query_mask: np.ndarray
    placeholder: np.ndarray
    candidates: list[list[str]]
    cand_index: np.ndarray
    cand_mask: np.ndarray
    answer: np.ndarray

    def __len__(self) -> int:
        return len(self.examples)


def _pad(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(r) for r in rows)
    ids = np.zeros((len(rows), T), dtype=np.int64)
    mask = np.zeros((len(rows), T), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


def make_batch(examples: Sequence[ClozeExample], punctuation: Sequence[str] = DEFAULT_PUNCTUATION) -> Batch:
    if not examples:
        raise DataError("cannot batch zero examples")
    for ex in examples:
        if not ex.passage:
            raise DataError("example has an empty passage")
    index: dict[str, int] = {}
    for ex in examples:
        for t in ex.passage + ex.query:
            index.setdefault(t, len(index))
    passage, pmask = _pad([[index[t] for t in ex.passage] for ex in examples])
    query, qmask = _pad([[index[t] for t in ex.query] for ex in examples])
    cands = [ex.candidate_set(punctuation) for ex in examples]
    B, Tp = passage.shape
    C = max(1, max(len(c) for c in cands))
    cand_index = np.zeros((B, Tp, C))
    cand_mask = np.zeros((B, C), dtype=bool)
    answer = np.full(B, -1, dtype=np.int64)
    for b, (ex, cs) in enumerate(zip(examples, cands)):
        col = {c: j for j, c in enumerate(cs)}
        cand_mask[b, : len(cs)] = True
        for i, t in enumerate(ex.passage):
            j = col.get(t)
            if j is not None:
                cand_index[b, i, j] = 1.0
        j = col.get(ex.answer)
        if j is not None and cand_index[b, :, j].any():
            answer[b] = j
    return Batch(
        examples=list(examples),
        words=list(index),
        passage=passage,
        passage_mask=pmask,
        query=query,
        query_mask=qmask,
        placeholder=np.array([ex.placeholder_index for ex in examples], dtype=np.int64),
        candidates=cands,
        cand_index=cand_index,
        cand_mask=cand_mask,
        answer=answer,
    )


def batch(
    dataset: Sequence[ClozeExample], size: int = 64, punctuation: Sequence[str] = DEFAULT_PUNCTUATION
) -> list[Batch]:
    """Consecutive batches in dataset order; the last one may be short."""
    if size < 1:
        raise DataError("batch size must be positive")
    return [make_batch(dataset[i : i + size], punctuation) for i in range(0, len(dataset), size)]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
# letters absent from stems, so the class marker is unambiguous
_SUFFIXES = ("yx", "qo", "wu", "jy", "xe", "qi", "wo", "jx")
_RELATIONS = (
    "sang", "danced", "swam", "flew", "barked", "painted", "cooked", "climbed",
    "wrote", "rode", "sailed", "juggled", "knitted", "fished", "hunted", "skated",
)  # fmt: skip
_NEUTRAL_VERBS = ("saw", "found", "took", "liked", "held", "moved", "made", "kept")
_OBJECTS = ("ball", "tree", "house", "river", "box", "book", "cake", "door", "hill", "lamp", "road", "boat")
_ADJECTIVES = ("red", "big", "old", "small", "warm", "new", "dark", "soft")


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic entity-class cloze task.

    Every entity name is a random stem plus a class suffix.  A query names a
    relation word tied to one class, and the passage holds exactly one entity
    of that class, so the answer follows from the class marker.  Frequent
    entities come from a fixed pool per class; rare ones are fresh stems used
    once, and valid/test rare names never occur in training.

    ``train_rare_rate`` (default: ``rare_rate``) sets the rare share of the
    training split alone.  Under a filter ratio only the least frequent
    training names map to UNK, so the amount of UNK-plus-characters training
    signal grows with the number of rare training examples.
    """

    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 400
    n_types: int = 4
    frequent_per_type: int = 8
    entities_per_passage: int = 4
    filler_sentences: int = 2
    stem_syllables: int = 3
    rare_rate: float = 0.5
    train_rare_rate: float | None = None
    candidates: str = "list"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_types <= len(_SUFFIXES):
            raise DataError(f"n_types must lie in [1, {len(_SUFFIXES)}]")
        if not 1 <= self.entities_per_passage <= self.n_types:
            raise DataError("entities_per_passage must lie in [1, n_types]")
        if not 0.0 <= self.rare_rate <= 1.0:
            raise DataError("rare_rate must lie in [0, 1]")
        if self.train_rare_rate is not None and not 0.0 <= self.train_rare_rate <= 1.0:
            raise DataError("train_rare_rate must lie in [0, 1]")
        if self.candidates not in ("list", "passage"):
            raise DataError("candidates must be 'list' or 'passage'")
        if min(self.n_train, self.frequent_per_type, self.stem_syllables) < 1 or min(self.n_valid, self.n_test) < 0:
            raise DataError("sizes must be positive")
        if self.filler_sentences < 0:
            raise DataError("filler_sentences must be non-negative")
        n_stems = (len(_CONSONANTS) * len(_VOWELS)) ** self.stem_syllables
        needed = self.n_types * self.frequent_per_type + (self.n_train + self.n_valid + self.n_test) * self.entities_per_passage
        if needed > n_stems // 2:
            raise DataError(f"stem space ({n_stems}) too small for {needed} entity names; raise stem_syllables")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            t = types[k]
            try:
                if t == "float | None":
                    kw[k] = None if str(v).strip().lower() in ("", "none") else float(v)
                else:
                    kw[k] = int(v) if t == "int" else float(v) if t == "float" else str(v)
            except ValueError:
                raise DataError(f"bad value for {k}: {v!r}") from None
        return cls(**kw)

    def relations(self, t: int) -> tuple[str, ...]:
        per = len(_RELATIONS) // self.n_types
        return _RELATIONS[t * per : (t + 1) * per]


SYNTHETIC_PRESETS = {
    "tiny": SyntheticSpec(n_train=96, n_valid=32, n_test=32, frequent_per_type=4),
    "small": SyntheticSpec(n_train=512, n_valid=64, n_test=128),
    "ablation": SyntheticSpec(n_train=12000, n_valid=256, n_test=400, filler_sentences=0, train_rare_rate=0.8),
}


class _Names:
    def __init__(self, rng: np.random.Generator, syllables: int):
        self.rng = rng
        self.syllables = syllables
        self.used: set[str] = set()

    def fresh(self, suffix: str) -> str:
        while True:
            stem = "".join(
                _CONSONANTS[self.rng.integers(len(_CONSONANTS))] + _VOWELS[self.rng.integers(len(_VOWELS))]
                for _ in range(self.syllables)
            )
            if stem not in self.used:
                self.used.add(stem)
                return stem + suffix


def _example(rng: np.random.Generator, spec: SyntheticSpec, entities: list[str], types: list[int]) -> ClozeExample:
    sentences = [[e, _NEUTRAL_VERBS[rng.integers(len(_NEUTRAL_VERBS))], "the", _OBJECTS[rng.integers(len(_OBJECTS))], "."] for e in entities]
    for _ in range(spec.filler_sentences):
        sentences.append(["the", _OBJECTS[rng.integers(len(_OBJECTS))], "was", _ADJECTIVES[rng.integers(len(_ADJECTIVES))], "."])
    order = rng.permutation(len(sentences))
    sentences = [sentences[i] for i in order]
    k = int(rng.integers(len(entities)))
    rels = spec.relations(types[k])
    query = [PLACEHOLDER, rels[rng.integers(len(rels))], "near", "the", _OBJECTS[rng.integers(len(_OBJECTS))], "."]
    cands = None
    if spec.candidates == "list":
        cands = [entities[i] for i in rng.permutation(len(entities))]
    return ClozeExample(
        passage=[t for s in sentences for t in s],
        query=query,
        answer=entities[k],
        candidates=cands,
        sentence_lengths=[len(s) for s in sentences],
    )


def generate_synthetic(spec: SyntheticSpec) -> dict[str, list[ClozeExample]]:
    """Seed-deterministic ``train``/``valid``/``test`` splits.

    Exactly ``round(rate * n)`` examples per split use rare entities;
    in those every passage entity is a fresh name, so identity-only features
    cannot single out the answer.
    """
    rng = np.random.default_rng(spec.seed)
    names = _Names(rng, spec.stem_syllables)
    suffixes = _SUFFIXES[: spec.n_types]
    pools = [[names.fresh(s) for _ in range(spec.frequent_per_type)] for s in suffixes]
    splits = {}
    for split, n in (("train", spec.n_train), ("valid", spec.n_valid), ("test", spec.n_test)):
        rate = spec.rare_rate if split != "train" or spec.train_rare_rate is None else spec.train_rare_rate
        n_rare = int(round(rate * n))
        rare_flags = np.zeros(n, dtype=bool)
        rare_flags[rng.permutation(n)[:n_rare]] = True
        out = []
        for rare in rare_flags:
            types = sorted(rng.choice(spec.n_types, spec.entities_per_passage, replace=False).tolist())
            if rare:
                ents = [names.fresh(suffixes[t]) for t in types]
            else:
                ents = [pools[t][rng.integers(spec.frequent_per_type)] for t in types]
            out.append(_example(rng, spec, ents, types))
        splits[split] = out
    return splits


def synthetic_oracle(example: ClozeExample, spec: SyntheticSpec) -> str | None:
    """Answer by matching the query's relation word to its entity class marker."""
    for t in range(spec.n_types):
        if any(r in example.query for r in spec.relations(t)):
            hits = [w for w in dict.fromkeys(example.passage) if w.endswith(_SUFFIXES[t])]
            return hits[0] if len(hits) == 1 else None
    return None


def resolve_synthetic(name_or_path: str, **overrides) -> SyntheticSpec:
    """A preset name or a ``key = value`` file, with keyword overrides applied."""
    from .config import read_kv_file

    if name_or_path in SYNTHETIC_PRESETS:
        spec = SYNTHETIC_PRESETS[name_or_path]
    else:
        path = Path(name_or_path)
        if not path.is_file():
            raise DataError(f"unknown synthetic preset or missing spec file: {name_or_path}")
        spec = SyntheticSpec.from_dict(read_kv_file(path))
    return dataclasses.replace(spec, **overrides) if overrides else spec

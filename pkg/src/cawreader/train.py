"""Adam training loop, learning-rate schedule, clipping, evaluation and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .charenc import Params
from .config import TrainConfig
from .data import Batch, ClozeExample, DataError, batch as make_batches
from .embed import load_pretrained
from .reader import CAWReader
from .vocab import CharVocabulary, Vocabulary, build_char_vocab, build_vocab

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "split", "loss", "accuracy", "lr")


class CheckpointError(RuntimeError):
    pass


def lr_at(epoch: int, lr0: float = 0.001) -> float:
    """Constant for epochs 1-2, then halved every epoch (epochs are 1-based)."""
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    return lr0 / 2 ** max(0, epoch - 2)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip(grads: Mapping[str, np.ndarray], threshold: float = 10.0) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``threshold``; also returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Params,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Params:
    """Bias-corrected Adam, updating ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def compute_gradients(model: CAWReader, batch: Batch) -> tuple[float | None, dict[str, np.ndarray]]:
    loss, grads, _ = _gradients(model, batch)
    return loss, grads


def _gradients(model: CAWReader, batch: Batch) -> tuple[float | None, dict[str, np.ndarray], int]:
    nodes = model.nodes()
    loss, _, mass = model.loss_and_mass(batch, nodes)
    correct = model.correct_count(batch, mass.value)
    if loss is None:
        return None, {}, correct
    ad.backward(loss)
    grads = {k: (node.grad if node.grad is not None else np.zeros_like(node.value)) for k, node in nodes.items()}
    return float(loss.value), grads, correct


@dataclass
class StepResult:
    loss: float | None
    correct: int
    grad_norm: float


def train_step(model: CAWReader, batch: Batch, state: AdamState, lr: float) -> StepResult:
    """One forward/backward/clip/Adam step.

    ``loss`` and ``correct`` describe the batch before the update.
    """
    cfg = model.config
    loss, grads, correct = _gradients(model, batch)
    if loss is None:
        return StepResult(None, correct, 0.0)
    grads, norm = clip(grads, cfg.clip_norm)
    adam_step(model.params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return StepResult(loss, correct, norm)


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    n: int
    correct: int
    unanswerable: int
    predictions: list[str | None] = field(default_factory=list, repr=False)


def evaluate(model: CAWReader, dataset: Sequence[ClozeExample], batch_size: int | None = None) -> EvalResult:
    """Accuracy = correct argmax predictions / all examples (unanswerable count as wrong)."""
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")
    size = batch_size or model.config.batch
    correct = unanswerable = 0
    nll, scored = 0.0, 0
    preds: list[str | None] = []
    for b in make_batches(dataset, size, model.config.punctuation):
        for ex, dist in zip(b.examples, model.distributions(b)):
            preds.append(dist.prediction)
            if dist.prediction is None:
                unanswerable += 1
                continue
            correct += dist.prediction == ex.answer
            if ex.answer in dist.candidates and dist.prob(ex.answer) > 0:
                nll -= math.log(dist.prob(ex.answer))
                scored += 1
    return EvalResult(correct / len(dataset), nll / scored if scored else float("nan"), len(dataset), correct, unanswerable, preds)


def build_pipeline(config: TrainConfig, train_set: Sequence[ClozeExample]) -> tuple[Vocabulary, CharVocabulary]:
    """Vocabulary and character inventory from the training split only."""
    if not train_set:
        raise DataError("empty training set")
    vocab = build_vocab((ex.passage + ex.query for ex in train_set), lowercase=config.lowercase)
    chars = build_char_vocab(vocab.id_to_word[1:])
    return vocab, chars


@dataclass
class TrainResult:
    model: CAWReader
    history: list[dict]
    best_epoch: int
    best_valid: float | None
    skipped: int


def _shuffled(dataset: Sequence[ClozeExample], seed: int, epoch: int) -> list[ClozeExample]:
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    return [dataset[i] for i in order]


def train(
    config: TrainConfig,
    train_set: Sequence[ClozeExample],
    valid_set: Sequence[ClozeExample] | None = None,
    out_dir: str | Path | None = None,
    pretrained: str | Path | None = None,
) -> TrainResult:
    """Train for ``config.epochs`` epochs, keeping the best-on-validation parameters.

    With ``out_dir`` the best checkpoint goes to ``best.ckpt.npz`` and the
    per-epoch log to ``metrics.csv``.
    """
    if not train_set:
        raise DataError("empty training set")
    vocab, chars = build_pipeline(config, train_set)
    model = CAWReader(config, vocab, chars)
    if pretrained is not None:
        load_pretrained(pretrained, vocab, model.params["word.emb"])
    usable = [ex for ex in train_set if ex.answerable]
    skipped = len(train_set) - len(usable)
    if skipped:
        logger.warning("dropped %d training examples whose answer is not in the passage", skipped)
    if not usable:
        raise DataError("no training example has its answer in the passage")

    state = AdamState()
    history: list[dict] = []
    best: tuple[float, int, Params] | None = None
    for epoch in range(1, config.epochs + 1):
        lr = lr_at(epoch, config.lr0)
        loss_sum, correct = 0.0, 0
        for b in make_batches(_shuffled(usable, config.seed, epoch), config.batch, config.punctuation):
            step = train_step(model, b, state, lr)
            correct += step.correct
            if step.loss is not None:
                loss_sum += step.loss * int((b.answer >= 0).sum())
        # running figures: each batch is scored just before its own update
        train_acc = correct / len(usable)
        history.append(dict(epoch=epoch, split="train", loss=loss_sum / len(usable), accuracy=train_acc, lr=lr))
        score = train_acc
        if valid_set:
            ve = evaluate(model, valid_set, config.batch)
            history.append(dict(epoch=epoch, split="valid", loss=ve.loss, accuracy=ve.accuracy, lr=lr))
            score = ve.accuracy
        logger.info("epoch %d lr %.6g train loss %.4f acc %.4f | select %.4f", epoch, lr, loss_sum / len(usable), train_acc, score)
        if best is None or score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in model.params.items()})
    assert best is not None
    model.params = best[2]
    result = TrainResult(model, history, best[1], best[0] if valid_set else None, skipped)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "best.ckpt.npz")
        write_metrics(history, out / "metrics.csv", config)
    return result


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def provenance_lines(config: TrainConfig, extra: Mapping | None = None) -> list[str]:
    lines = [f"# cawreader {__version__}", f"# seed: {config.seed}", f"# config: {config.to_json()}"]
    if extra:
        lines.append(f"# run: {json.dumps(dict(extra), sort_keys=True, ensure_ascii=False)}")
    return lines


def write_csv(rows: Sequence[Mapping], columns: Sequence[str], path: str | Path, header: Sequence[str] = ()) -> None:
    buf = io.StringIO()
    for line in header:
        buf.write(line + "\n")
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: str | Path) -> list[dict[str, str]]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_metrics(history: Sequence[Mapping], path: str | Path, config: TrainConfig, extra: Mapping | None = None) -> None:
    write_csv(history, METRIC_COLUMNS, path, provenance_lines(config, extra))


def save_checkpoint(model: CAWReader, path: str | Path) -> None:
    meta = {"version": __version__, "vocab_hash": model.vocab.digest(), "seed": model.config.seed}
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays["__config__"] = np.array(model.config.to_json())
    arrays["__vocab__"] = np.array(model.vocab.to_text())
    arrays["__chars__"] = np.array(model.chars.to_text())
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> CAWReader:
    try:
        with np.load(path, allow_pickle=False) as z:
            config = TrainConfig.from_dict(json.loads(str(z["__config__"])))
            vocab = Vocabulary.from_text(str(z["__vocab__"]))
            chars = CharVocabulary.from_text(str(z["__chars__"]))
            meta = json.loads(str(z["__meta__"]))
            params = {k[len("param/") :]: z[k].astype(np.float64) for k in z.files if k.startswith("param/")}
    except Exception as exc:  # zip, key, json and value errors all mean the same thing here
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if meta.get("vocab_hash") != vocab.digest():
        raise CheckpointError(f"checkpoint {path} is corrupted: stored vocabulary hash does not match its vocabulary")
    model = CAWReader(config, vocab, chars, params=params)
    expected = model.init_params(np.random.default_rng(0))
    for k, v in expected.items():
        if k not in params or params[k].shape != v.shape:
            raise CheckpointError(f"checkpoint {path} has a missing or misshapen parameter {k}")
    return model


def checkpoint_vocab_hash(path: str | Path) -> str:
    try:
        with np.load(path, allow_pickle=False) as z:
            return json.loads(str(z["__meta__"]))["vocab_hash"]
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc

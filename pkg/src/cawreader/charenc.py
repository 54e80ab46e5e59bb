"""Character-level word encoders (BiGRU or CNN) and the shared GRU machinery.

Parameters live in a flat ``dict[str, np.ndarray]``; forward functions take
the matching ``dict[str, Node]`` so the same code serves training, inference
and finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .vocab import PAD_CHAR, VocabError

Params = dict[str, np.ndarray]
NodeParams = Mapping[str, Node]

_GATES = ("z", "r", "n")


def init_gru(rng: np.random.Generator, prefix: str, d_in: int, hidden: int) -> Params:
    """GRU weights with the usual ``U(-1/sqrt(h), 1/sqrt(h))`` initialisation."""
    k = 1.0 / np.sqrt(hidden)
    out: Params = {}
    for g in _GATES:
        out[f"{prefix}.W_{g}"] = rng.uniform(-k, k, (d_in, hidden))
        out[f"{prefix}.U_{g}"] = rng.uniform(-k, k, (hidden, hidden))
        out[f"{prefix}.b_{g}"] = np.zeros(hidden)
    return out


def init_bigru(rng: np.random.Generator, prefix: str, d_in: int, hidden: int) -> Params:
    return {**init_gru(rng, f"{prefix}.fwd", d_in, hidden), **init_gru(rng, f"{prefix}.bwd", d_in, hidden)}


def gru(p: NodeParams, prefix: str, x: Node, mask: np.ndarray, reverse: bool = False) -> tuple[Node, Node]:
    """Run a GRU over ``x [B, T, d]``.

    z = sigmoid(x W_z + h U_z + b_z),  r = sigmoid(x W_r + h U_r + b_r),
    n = tanh(x W_n + (r * h) U_n + b_n),  h' = z * h + (1 - z) * n.

    Masked steps (``mask[b, t] == False``) carry the previous state through
    unchanged, so with right padding the forward final state is the state at
    the last real token and the reverse direction starts at it.  Returns the
    per-step states ``[B, T, h]`` and the final state ``[B, h]``.
    """
    B, T, _ = x.shape
    hidden = p[f"{prefix}.W_z"].shape[1]
    proj = [ad.add_bias(ad.matmul(x, p[f"{prefix}.W_{g}"]), p[f"{prefix}.b_{g}"]) for g in _GATES]
    U = [p[f"{prefix}.U_{g}"] for g in _GATES]
    steps = range(T - 1, -1, -1) if reverse else range(T)
    outs: list[Node | None] = [None] * T
    h = ad.constant(np.zeros((B, hidden)))
    for t in steps:
        h = ad.gru_cell(proj, t, h, U, keep=mask[:, t])
        outs[t] = h
    return ad.stack(outs, axis=1), h


def bigru(p: NodeParams, prefix: str, x: Node, mask: np.ndarray) -> tuple[Node, Node]:
    """Bidirectional GRU: per-step ``[B, T, 2h]`` outputs and ``[B, 2h]`` final states."""
    fo, fh = gru(p, f"{prefix}.fwd", x, mask)
    bo, bh = gru(p, f"{prefix}.bwd", x, mask, reverse=True)
    return ad.concat([fo, bo], axis=-1), ad.concat([fh, bh], axis=-1)


@dataclass(frozen=True)
class CharEncoderConfig:
    kind: str = "rnn"
    char_dim: int = 100
    hidden: int = 128
    out_dim: int = 200
    widths: tuple[int, ...] = (1, 2, 3, 4, 5)
    filters: int = 50

    def __post_init__(self):
        if self.kind not in ("rnn", "cnn"):
            raise ValueError(f"unknown character encoder {self.kind!r}")


def init_char_encoder(rng: np.random.Generator, cfg: CharEncoderConfig, n_chars: int) -> Params:
    out: Params = {"char.emb": rng.uniform(-0.05, 0.05, (n_chars, cfg.char_dim))}
    if cfg.kind == "rnn":
        out.update(init_bigru(rng, "char.rnn", cfg.char_dim, cfg.hidden))
        pre = 2 * cfg.hidden
    else:
        for w in cfg.widths:
            k = 1.0 / np.sqrt(w * cfg.char_dim)
            out[f"char.cnn.W{w}"] = rng.uniform(-k, k, (w * cfg.char_dim, cfg.filters))
            out[f"char.cnn.b{w}"] = np.zeros(cfg.filters)
        pre = cfg.filters * len(cfg.widths)
    k = 1.0 / np.sqrt(pre)
    out["char.proj.W"] = rng.uniform(-k, k, (pre, cfg.out_dim))
    out["char.proj.b"] = np.zeros(cfg.out_dim)
    return out


def pad_char_ids(seqs: Sequence[Sequence[int]], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with PAD_CHAR; returns ``(ids [U, L], mask [U, L])``."""
    if any(len(s) == 0 for s in seqs):
        raise VocabError("cannot encode an empty character sequence")
    L = max(min_len, max(len(s) for s in seqs))
    ids = np.full((len(seqs), L), PAD_CHAR, dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def encode_rnn(p: NodeParams, ids: np.ndarray, mask: np.ndarray) -> Node:
    """Final forward and backward GRU states, concatenated and projected."""
    emb = ad.gather(p["char.emb"], ids)
    _, final = bigru(p, "char.rnn", emb, mask)
    return ad.add_bias(ad.matmul(final, p["char.proj.W"]), p["char.proj.b"])


def window_mask(lengths: np.ndarray, padded_len: int, width: int) -> np.ndarray:
    """Valid convolution windows: fully inside the word, plus window 0 always.

    Window 0 keeps words shorter than ``width`` encodable (their only window
    spans PAD_CHAR); every other window touching padding is excluded, so extra
    padding never changes the pooled result.
    """
    n_win = padded_len - width + 1
    starts = np.arange(n_win)[None, :]
    valid = starts + width <= lengths[:, None]
    valid[:, 0] = True
    return valid


def encode_cnn(p: NodeParams, ids: np.ndarray, mask: np.ndarray, widths: Sequence[int]) -> Node:
    """tanh convolutions per width, masked max over time, concatenation, projection."""
    U, L = ids.shape
    if L < max(widths):
        pad = np.full((U, max(widths) - L), PAD_CHAR, dtype=np.int64)
        ids = np.concatenate([ids, pad], axis=1)
        mask = np.concatenate([mask, np.zeros(pad.shape, dtype=bool)], axis=1)
        L = ids.shape[1]
    emb = ad.gather(p["char.emb"], ids)
    d = emb.shape[-1]
    flat = ad.reshape(emb, (U * L, d))
    lengths = mask.sum(axis=1)
    pooled = []
    for w in widths:
        n_win = L - w + 1
        pos = np.arange(n_win)[:, None] + np.arange(w)[None, :]
        rows = np.arange(U)[:, None, None] * L + pos[None, :, :]
        windows = ad.reshape(ad.gather(flat, rows), (U, n_win, w * d))
        conv = ad.tanh(ad.add_bias(ad.matmul(windows, p[f"char.cnn.W{w}"]), p[f"char.cnn.b{w}"]))
        pooled.append(ad.max_over_time(conv, window_mask(lengths, L, w)))
    feats = ad.concat(pooled, axis=-1) if len(pooled) > 1 else pooled[0]
    return ad.add_bias(ad.matmul(feats, p["char.proj.W"]), p["char.proj.b"])


def encode_words(p: NodeParams, cfg: CharEncoderConfig, char_seqs: Sequence[Sequence[int]]) -> Node:
    """Encode a list of words (as char-id lists) into ``[U, out_dim]``."""
    if cfg.kind == "rnn":
        ids, mask = pad_char_ids(char_seqs)
        return encode_rnn(p, ids, mask)
    ids, mask = pad_char_ids(char_seqs, min_len=max(cfg.widths))
    return encode_cnn(p, ids, mask, cfg.widths)

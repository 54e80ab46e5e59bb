"""Run configuration shared by the model, trainer and command line."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .charenc import CharEncoderConfig

STRATEGIES = ("word_only", "concat", "sum", "mul")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # model
    strategy: str = "mul"
    gamma: float = 0.9
    d_word: int = 200
    word_init: float = 1.0
    char_encoder: str = "rnn"
    char_dim: int = 100
    char_hidden: int = 128
    char_out: int | None = None
    char_widths: tuple[int, ...] = (1, 2, 3, 4, 5)
    char_filters: int = 50
    hidden: int = 128
    layers: int = 3
    lowercase: bool = False
    punctuation: tuple[str, ...] = (".", ",", "!", "?", ";", ":", "'", '"', "``", "''", "-", "--", "(", ")")
    # optimisation
    lr0: float = 0.001
    batch: int = 64
    clip_norm: float = 10.0
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 1234
    extra: dict[str, Any] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.char_encoder not in ("rnn", "cnn"):
            raise ConfigError(f"char_encoder must be rnn or cnn, got {self.char_encoder!r}")
        for name in ("d_word", "char_dim", "char_hidden", "char_filters", "hidden", "layers", "batch", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.char_out is not None and self.char_out < 1:
            raise ConfigError("char_out must be positive")
        if self.strategy in ("sum", "mul") and self.char_out not in (None, self.d_word):
            raise ConfigError(f"strategy {self.strategy} needs char_out == d_word ({self.d_word})")
        if not self.char_widths or min(self.char_widths) < 1:
            raise ConfigError("char_widths must be positive integers")
        for name in ("lr0", "clip_norm", "eps", "word_init"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")

    @property
    def char_out_dim(self) -> int:
        """Character encoding size: word dim for sum/mul, char dim for concat."""
        if self.char_out is not None:
            return self.char_out
        return self.char_dim if self.strategy == "concat" else self.d_word

    @property
    def embed_dim(self) -> int:
        if self.strategy == "concat":
            return self.d_word + self.char_out_dim
        return self.d_word

    def char_config(self) -> CharEncoderConfig:
        return CharEncoderConfig(
            kind=self.char_encoder,
            char_dim=self.char_dim,
            hidden=self.char_hidden,
            out_dim=self.char_out_dim,
            widths=tuple(self.char_widths),
            filters=self.char_filters,
        )

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d.pop("extra")
        d["char_widths"] = list(self.char_widths)
        d["punctuation"] = list(self.punctuation)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)} - {"extra"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: coerce(k, v) for k, v in d.items()}
        return cls(**kw)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def coerce(key: str, value: Any) -> Any:
    """Convert a string (config file, env var, flag) to the field's type."""
    kind = _FIELD_TYPES.get(key, "str")
    if not isinstance(value, str):
        if kind.startswith("tuple") and isinstance(value, list):
            return tuple(value)
        return value
    v = value.strip()
    try:
        if kind == "int":
            return int(v)
        if kind == "float":
            return float(v)
        if kind == "int | None":
            return None if v.lower() in ("", "none") else int(v)
        if kind == "bool":
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if kind == "tuple[int, ...]":
            return tuple(int(x) for x in v.replace(",", " ").split())
        if kind == "tuple[str, ...]":
            return tuple(v.split())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return v


def read_kv_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out

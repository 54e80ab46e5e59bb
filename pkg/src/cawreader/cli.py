"""Command-line entry point: train, eval, ablate, sweep and stats.

Configuration is layered: built-in defaults, then ``--config`` file, then
``CAW_<KEY>`` environment variables, then command-line flags.  Every
TrainConfig field has a matching ``--kebab-case`` flag.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from . import __version__
from .config import STRATEGIES, ConfigError, TrainConfig, coerce, read_kv_file
from .data import ClozeExample, DataError, generate_synthetic, load_dataset_dir, load_split, lowercased, resolve_synthetic, stats
from .train import (
    CheckpointError,
    build_pipeline,
    checkpoint_vocab_hash,
    evaluate,
    load_checkpoint,
    provenance_lines,
    train,
    write_csv,
)
from .vocab import VocabError

logger = logging.getLogger("cawreader")

ENV_PREFIX = "CAW_"
GAMMA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

Splits = dict[str, list[ClozeExample]]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


_CHOICES = {"strategy": STRATEGIES, "char_encoder": ("rnn", "cnn")}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and optimisation (mirror config keys)")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "extra":
            continue
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None, choices=_CHOICES.get(f.name), metavar=None if f.name in _CHOICES else f.name.upper())
    p.add_argument("--config", help="key = value file with TrainConfig fields")


def _add_data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--dataset", help="directory with train/valid/test splits, or a single split file")
    g.add_argument("--synthetic", help="synthetic preset name (tiny, small, ablation) or key = value spec file")
    p.add_argument("--data-seed", type=int, default=None, help="synthetic generator seed (default: the run seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cawreader", description="Character-augmented gated-attention cloze reader.")
    parser.add_argument("--version", action="version", version=f"cawreader {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model and save the best checkpoint")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pretrained-embeddings", help="text file of '<word> v1 ... vd' lines")

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--out", help="directory for eval.json")

    p = sub.add_parser("ablate", help="compare the four join strategies on shared data")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: the config seed)")
    p.add_argument("--out", required=True)
    p.add_argument("--pretrained-embeddings")

    p = sub.add_parser("sweep", help="accuracy against the filter ratio over 0.1 .. 1.0")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--seeds", default=None, help="comma-separated seeds; accuracies are averaged")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", required=True)
    p.add_argument("--pretrained-embeddings")

    p = sub.add_parser("stats", help="dataset statistics per split")
    _add_data_flags(p)
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--out", help="directory for stats.csv")
    return parser


# ---------------------------------------------------------------------------
# configuration and data
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace, environ: Mapping[str, str] | None = None) -> TrainConfig:
    """defaults < --config file < CAW_* environment < flags."""
    environ = os.environ if environ is None else environ
    known = {f.name for f in dataclasses.fields(TrainConfig)} - {"extra"}
    raw: dict[str, object] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        file_vals = read_kv_file(path)
        unknown = set(file_vals) - known
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        raw.update(file_vals)
    for key in known:
        env = environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            raw[key] = env
    for key in known:
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            raw[key] = v
    try:
        return TrainConfig.from_dict({k: coerce(k, v) for k, v in raw.items()})
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def load_data(args: argparse.Namespace, seed: int) -> Splits:
    if args.dataset:
        path = Path(args.dataset)
        if path.is_dir():
            return load_dataset_dir(path)
        if not path.is_file():
            raise DataError(f"dataset {path} does not exist")
        return {"test": load_split(path)}
    data_seed = seed if args.data_seed is None else args.data_seed
    return generate_synthetic(resolve_synthetic(args.synthetic, seed=data_seed))


def prepare(splits: Splits, config: TrainConfig) -> Splits:
    return {k: lowercased(v) for k, v in splits.items()} if config.lowercase else splits


def _need(splits: Splits, name: str) -> list[ClozeExample]:
    if not splits.get(name):
        raise DataError(f"dataset has no {name} split")
    return splits[name]


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


def run_once(config: TrainConfig, splits: Splits, out_dir: str | Path | None = None, pretrained: str | None = None) -> dict:
    """Train on ``train`` (selecting on ``valid``) and score ``test``."""
    res = train(config, _need(splits, "train"), splits.get("valid"), out_dir, pretrained)
    row = {
        "valid_acc": res.best_valid if res.best_valid is not None else float("nan"),
        "test_acc": evaluate(res.model, splits["test"]).accuracy if splits.get("test") else float("nan"),
        "best_epoch": res.best_epoch,
    }
    return row


def _sweep_point(task: tuple[TrainConfig, Splits, str | None]) -> dict:
    config, splits, pretrained = task
    return run_once(config, splits, pretrained=pretrained)


def _seeds(args: argparse.Namespace, config: TrainConfig) -> list[int]:
    if not args.seeds:
        return [config.seed]
    try:
        return [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None


def _provenance(config: TrainConfig, args: argparse.Namespace, **extra) -> list[str]:
    run = {"command": args.command, "dataset": args.dataset, "synthetic": args.synthetic, "data_seed": args.data_seed, **extra}
    return provenance_lines(config, run)


def _write_json(path: Path, payload: dict, config: TrainConfig) -> None:
    doc = {"cawreader_version": __version__, "seed": config.seed, "config": config.to_dict(), **payload}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    splits = prepare(load_data(args, config.seed), config)
    out = Path(args.out)
    row = run_once(config, splits, out, args.pretrained_embeddings)
    _write_json(out / "summary.json", {"command": "train", **row}, config)
    print(f"best epoch {row['best_epoch']}  valid_acc {row['valid_acc']:.4f}  test_acc {row['test_acc']:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    config = model.config
    splits = prepare(load_data(args, config.seed), config)
    if splits.get("train"):
        vocab, _ = build_pipeline(config, splits["train"])
        if vocab.digest() != checkpoint_vocab_hash(args.checkpoint):
            raise DataError(
                "refusing to evaluate: the vocabulary rebuilt from this dataset's training split "
                "does not match the checkpoint's, so word ids would be misaligned"
            )
    else:
        logger.warning("no training split available; skipping the vocabulary consistency check")
    data = _need(splits, args.split)
    res = evaluate(model, data)
    print(f"{args.split} accuracy {res.accuracy:.4f} ({res.correct}/{res.n}, {res.unanswerable} unanswerable)  loss {res.loss:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"command": "eval", "checkpoint": str(args.checkpoint), "split": args.split, **dataclasses.asdict(res)}
        payload.pop("predictions")
        _write_json(out / "eval.json", payload, config)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    seeds = _seeds(args, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        splits = prepare(load_data(args, seed), base)
        for strategy in STRATEGIES:
            config = base.replace(strategy=strategy, seed=seed)
            r = run_once(config, splits, pretrained=args.pretrained_embeddings)
            rows.append({"strategy": strategy, "valid_acc": r["valid_acc"], "test_acc": r["test_acc"], "seed": seed})
            logger.info("ablate %s seed %d: valid %.4f test %.4f", strategy, seed, r["valid_acc"], r["test_acc"])
    header = _provenance(base, args, seeds=seeds)
    write_csv(rows, ("strategy", "valid_acc", "test_acc", "seed"), out / "ablation.csv", header)
    print(f"{'strategy':<10} {'valid_acc':>9} {'test_acc':>9}")
    for strategy in STRATEGIES:
        sel = [r for r in rows if r["strategy"] == strategy]
        print(f"{strategy:<10} {_mean(r['valid_acc'] for r in sel):>9.4f} {_mean(r['test_acc'] for r in sel):>9.4f}")
    return EXIT_OK


def _mean(values) -> float:
    vals = list(values)
    return sum(vals) / len(vals)


def sweep(
    base: TrainConfig,
    data_for_seed,
    seeds: Sequence[int],
    grid: Sequence[float] = GAMMA_GRID,
    workers: int = 1,
    pretrained: str | None = None,
) -> list[dict]:
    """Seed-averaged ``gamma, valid_acc, test_acc`` rows over ``grid``."""
    tasks, keys = [], []
    for seed in seeds:
        splits = data_for_seed(seed)
        for g in grid:
            tasks.append((base.replace(gamma=g, seed=seed), splits, pretrained))
            keys.append(g)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    rows = []
    for g in grid:
        sel = [r for k, r in zip(keys, results) if k == g]
        rows.append({"gamma": g, "valid_acc": _mean(r["valid_acc"] for r in sel), "test_acc": _mean(r["test_acc"] for r in sel)})
    return rows


def best_row(rows: Sequence[Mapping], key: str = "valid_acc") -> Mapping:
    """Highest ``key``; ties go to the larger gamma (the smaller filter)."""
    return max(rows, key=lambda r: (r[key], r["gamma"]))


def render_svg(rows: Sequence[Mapping], title: str, description: str = "") -> str:
    """Accuracy-versus-gamma line chart as a standalone SVG document."""
    W, H, L, R, T, B = 560, 360, 64, 24, 40, 52
    xs = [float(r["gamma"]) for r in rows]
    x0, x1 = 0.0, 1.0
    accs = [float(r[k]) for r in rows for k in ("valid_acc", "test_acc") if not math.isnan(float(r[k]))]
    lo = math.floor(min(accs, default=0.0) * 10) / 10
    hi = math.ceil(max(accs, default=1.0) * 10) / 10
    if hi - lo < 0.1:
        lo, hi = max(0.0, hi - 0.1), max(hi, 0.1)

    def px(x):
        return L + (x - x0) / (x1 - x0) * (W - L - R)

    def py(y):
        return H - B - (y - lo) / (hi - lo) * (H - T - B)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
        f"<title>{escape(title)}</title>",
        f"<desc>{escape(description)}</desc>",
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
    ]
    for x in xs:
        parts.append(f'<line x1="{px(x):.1f}" y1="{H - B}" x2="{px(x):.1f}" y2="{H - B + 4}" stroke="black"/>')
        parts.append(f'<text x="{px(x):.1f}" y="{H - B + 18}" text-anchor="middle">{x:.1f}</text>')
    n_ticks = int(round((hi - lo) / 0.1))
    for k in range(n_ticks + 1):
        y = lo + k * (hi - lo) / n_ticks
        parts.append(f'<line x1="{L - 4}" y1="{py(y):.1f}" x2="{W - R}" y2="{py(y):.1f}" stroke="#dddddd"/>')
        parts.append(f'<text x="{L - 8}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.1f}</text>')
    parts.append(f'<text x="{(L + W - R) / 2:.1f}" y="{H - 12}" text-anchor="middle">filter ratio gamma</text>')
    parts.append(f'<text x="16" y="{(T + H - B) / 2:.1f}" text-anchor="middle" transform="rotate(-90 16 {(T + H - B) / 2:.1f})">accuracy</text>')
    parts.append(f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for key, colour, dash in (("valid_acc", "#1f77b4", ""), ("test_acc", "#d62728", ' stroke-dasharray="6 3"')):
        pts = [(px(float(r["gamma"])), py(float(r[key]))) for r in rows if not math.isnan(float(r[key]))]
        if not pts:
            continue
        path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        parts.append(f'<polyline points="{path}" fill="none" stroke="{colour}" stroke-width="2"{dash}/>')
        parts.extend(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{colour}"/>' for x, y in pts)
    parts.append(f'<text x="{W - R - 90}" y="{T + 8}" fill="#1f77b4">valid</text>')
    parts.append(f'<text x="{W - R - 45}" y="{T + 8}" fill="#d62728">test</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_sweep(args: argparse.Namespace) -> int:
    base = resolve_config(args)
    seeds = _seeds(args, base)
    if args.workers < 1:
        raise UsageError("--workers must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sweep(base, lambda s: prepare(load_data(args, s), base), seeds, GAMMA_GRID, args.workers, args.pretrained_embeddings)
    header = _provenance(base, args, seeds=seeds, grid=list(GAMMA_GRID))
    csv_rows = [{**r, "gamma": f"{r['gamma']:.1f}"} for r in rows]
    write_csv(csv_rows, ("gamma", "valid_acc", "test_acc"), out / "sweep.csv", header)
    desc = " | ".join(line.lstrip("# ") for line in header)
    (out / "sweep.svg").write_text(render_svg(rows, f"accuracy vs filter ratio ({base.strategy})", desc), encoding="utf-8")
    best = best_row(rows)
    _write_json(out / "summary.json", {"command": "sweep", "seeds": seeds, "rows": rows, "best": dict(best)}, base)
    for r in rows:
        print(f"gamma {r['gamma']:.1f}  valid_acc {r['valid_acc']:.4f}  test_acc {r['test_acc']:.4f}")
    print(f"best gamma {best['gamma']:.1f} (valid_acc {best['valid_acc']:.4f}, test_acc {best['test_acc']:.4f})")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    splits = load_data(args, 0 if args.data_seed is None else args.data_seed)
    if args.lowercase:
        splits = {k: lowercased(v) for k, v in splits.items()}
    rows = []
    for name in ("train", "valid", "test"):
        if splits.get(name):
            rows.append({"split": name, **stats(splits[name]).as_row()})
    print(f"{'split':<6} {'queries':>8} {'avg_passage':>12} {'avg_query':>10} {'vocab':>8}")
    for r in rows:
        print(f"{r['split']:<6} {r['queries']:>8} {r['avg_passage_len']:>12.2f} {r['avg_query_len']:>10.2f} {r['vocab_size']:>8}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run = {"command": "stats", "dataset": args.dataset, "synthetic": args.synthetic, "data_seed": args.data_seed}
        header = [f"# cawreader {__version__}", f"# seed: {args.data_seed}", f"# run: {json.dumps(run, sort_keys=True)}"]
        write_csv(rows, ("split", "queries", "avg_passage_len", "avg_query_len", "vocab_size"), out / "stats.csv", header)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "sweep": cmd_sweep, "stats": cmd_stats}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cawreader: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, VocabError, CheckpointError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as exc:
        print(f"cawreader: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"cawreader: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

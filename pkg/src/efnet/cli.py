"""Command-line surface: corpus synthesis, training, evaluation, sweeps,
and attention dumps.

Exit codes: 0 success, 2 usage or input error, 3 checkpoint/model mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    InputError,
    ParseError,
    FormatError,
    _truncate,
    encode_sample,
    load_dataset,
    load_embeddings,
    synth_generate,
)
from .layers import ConfigError
from .model import CheckpointMismatch, EFNetParams, ModelConfig, forward, load_checkpoint
from .tensor import MaskError, ShapeError
from .train import TrainError, evaluate, head_sweep, train

_INT_KEYS = ("embed_dim", "hidden_dim", "heads", "capsule_dim", "att_dim",
             "batch_size", "max_len", "epochs", "seed")
_FLOAT_KEYS = ("dropout", "lr", "l2_lambda")
_PATH_KEYS = ("embeddings", "train", "val", "test")


@dataclasses.dataclass
class RunConfig:
    """Typed view of a ``key = value`` run configuration file."""

    embed_dim: int = 50
    hidden_dim: int = 32
    heads: int = 4
    capsule_dim: int = 16
    att_dim: int = 32
    dropout: float = 0.3
    lr: float = 1e-3
    l2_lambda: float = 1e-5
    batch_size: int = 128
    max_len: int = 36
    epochs: int = 10
    seed: int = 0
    text_only: bool = False
    embeddings: str | None = None
    train: str | None = None
    val: str | None = None
    test: str | None = None

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Parse the file at ``path``; unknown or malformed keys are
        rejected by name. Relative paths resolve against the file's
        directory."""
        cfg = cls()
        base = Path(path).resolve().parent
        seen = set()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                key, sep, value = (part.strip() for part in line.partition("="))
                if not sep or not key:
                    raise ConfigError(
                        f"config line {lineno}: expected 'key = value'")
                if key in seen:
                    raise ConfigError(f"config line {lineno}: duplicate key '{key}'")
                seen.add(key)
                cfg._assign(key, value, base)
        return cfg

    def _assign(self, key: str, value: str, base: Path) -> None:
        if key in _INT_KEYS:
            try:
                setattr(self, key, int(value))
            except ValueError:
                raise ConfigError(f"config key '{key}': not an integer: {value!r}")
        elif key in _FLOAT_KEYS:
            try:
                setattr(self, key, float(value))
            except ValueError:
                raise ConfigError(f"config key '{key}': not a number: {value!r}")
        elif key == "text_only":
            lowered = value.lower()
            if lowered in ("true", "1", "yes"):
                self.text_only = True
            elif lowered in ("false", "0", "no"):
                self.text_only = False
            else:
                raise ConfigError(f"config key 'text_only': not a boolean: {value!r}")
        elif key in _PATH_KEYS:
            setattr(self, key, str((base / value).resolve()))
        else:
            raise ConfigError(f"unknown config key '{key}'")

    def require(self, key: str) -> str:
        value = getattr(self, key)
        if value is None:
            raise InputError(f"config is missing required key '{key}'")
        return value

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            head_count=self.heads,
            capsule_dim=self.capsule_dim,
            att_dim=self.att_dim,
            dropout=self.dropout,
            l2_lambda=self.l2_lambda,
            max_len=self.max_len,
            text_only=self.text_only,
            seed=self.seed,
        )


def _build_model(config: ModelConfig, table) -> EFNetParams:
    rng = np.random.default_rng(config.seed)
    return EFNetParams.create(config, rng, table.matrix)


def cmd_synth(args) -> int:
    rule = synth_generate(args.out, seed=args.seed, n=args.n,
                          vocab_size=args.vocab, grid_rule=args.rule,
                          embed_dim=args.embed_dim)
    print(f"wrote {args.n} samples under {args.out} (rule: {rule['grid_rule']})")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    mc = cfg.model_config()
    mc.validate()
    table = load_embeddings(cfg.require("embeddings"))
    train_set = load_dataset(cfg.require("train"))
    val_set = load_dataset(cfg.require("val"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _build_model(mc, table)
    train(params, table, train_set, val_set, mc,
          epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
          checkpoint_path=out / "model.efck", log_path=out / "metrics.csv",
          on_epoch=print)
    print(f"checkpoint: {out / 'model.efck'}")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    mc = cfg.model_config()
    mc.validate()
    table = load_embeddings(cfg.require("embeddings"))
    samples = load_dataset(cfg.require(args.split))
    params = _build_model(mc, table)
    load_checkpoint(args.checkpoint, params)
    report = evaluate(params, table, samples, mc)
    print(f"{args.split} accuracy={report.accuracy:.6f} "
          f"macro_f1={report.macro_f1:.6f}")
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_sweep_heads(args) -> int:
    cfg = RunConfig.load(args.config)
    try:
        heads = [int(h) for h in args.heads.split(",") if h.strip()]
    except ValueError:
        raise ConfigError(f"--heads: not a comma-separated integer list: {args.heads!r}")
    mc = cfg.model_config()
    table = load_embeddings(cfg.require("embeddings"))
    train_set = load_dataset(cfg.require("train"))
    val_set = load_dataset(cfg.require("val"))
    rows = head_sweep(table, train_set, val_set, mc, heads,
                      epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                      out_path=args.out)
    for count, accuracy, macro_f1 in rows:
        print(f"heads={count} accuracy={accuracy:.6f} macro_f1={macro_f1:.6f}")
    return 0


def cmd_dump_attention(args) -> int:
    cfg = RunConfig.load(args.config)
    mc = cfg.model_config()
    mc.validate()
    table = load_embeddings(cfg.require("embeddings"))
    sample = None
    for split in ("train", "val", "test"):
        path = getattr(cfg, split)
        if path is None:
            continue
        for candidate in load_dataset(path):
            if candidate.id == args.sample_id:
                sample = candidate
                break
        if sample is not None:
            break
    if sample is None:
        raise InputError(f"sample id '{args.sample_id}' not found in any configured split")
    params = _build_model(mc, table)
    load_checkpoint(args.checkpoint, params)
    encoded = encode_sample(sample, table, mc.max_len, not mc.text_only)
    out = forward(encoded, params, mc, want_trace=True)
    tokens, _ = _truncate(sample.tokens, sample.target_span, mc.max_len)
    payload = {
        "id": encoded.id,
        "tokens": tokens,
        "interaction_heads": [w.tolist() for w in out.trace.interaction_heads],
        "fusion_heads": [w.tolist() for w in out.trace.fusion_heads],
        "image_grid": None if out.trace.image_grid is None
        else out.trace.image_grid.tolist(),
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"attention dump: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efnet",
        description="Targeted aspect-based multimodal sentiment model tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a planted-rule corpus")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n", type=int, required=True, help="sample count")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--rule", default="both", choices=("none", "cell", "both"),
                       help="label rule: text cue, bright cell, or their sum")
    synth.add_argument("--vocab", type=int, default=40)
    synth.add_argument("--embed-dim", type=int, default=50, dest="embed_dim")
    synth.set_defaults(func=cmd_synth)

    train_p = sub.add_parser("train", help="train a model from a config file")
    train_p.add_argument("--config", required=True)
    train_p.add_argument("--out", required=True,
                         help="directory for model.efck and metrics.csv")
    train_p.set_defaults(func=cmd_train)

    eval_p = sub.add_parser("eval", help="score a checkpoint on one split")
    eval_p.add_argument("--config", required=True)
    eval_p.add_argument("--checkpoint", required=True)
    eval_p.add_argument("--split", required=True, choices=("train", "val", "test"))
    eval_p.add_argument("--out", required=True, help="report file (JSON)")
    eval_p.set_defaults(func=cmd_eval)

    sweep = sub.add_parser("sweep-heads", help="train once per head count")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--heads", required=True, help="comma-separated counts")
    sweep.add_argument("--out", required=True, help="results table (CSV)")
    sweep.set_defaults(func=cmd_sweep_heads)

    dump = sub.add_parser("dump-attention", help="write attention weights for one sample")
    dump.add_argument("--config", required=True)
    dump.add_argument("--checkpoint", required=True)
    dump.add_argument("--sample-id", required=True, dest="sample_id")
    dump.add_argument("--out", required=True, help="dump file (JSON)")
    dump.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return args.func(args)
    except CheckpointMismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, InputError, ParseError, TrainError,
            ShapeError, MaskError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

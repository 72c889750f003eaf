"""Command-line entry point: ``unn <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..energy import DomainError, energy_nonincreasing
from ..trees import InvalidTreeError
from . import data as D
from . import training as T
from .selftest import run_selftest
from .tracegraphs import FAMILIES, random_traced_run

log = logging.getLogger("unn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(row: dict, path: Path | None = None) -> None:
    line = json.dumps(row)
    print(line)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as fh:
            fh.write(line + "\n")


def _config(args) -> T.RunConfig:
    cfg = T.load_run_config(args.config) if args.config else T.RunConfig()
    overrides = {}
    for key in ("seed", "k", "schedule", "init", "epochs", "out", "model"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return replace(cfg, **overrides).validate()


def _params_path(cfg: T.RunConfig, args) -> Path:
    path = Path(args.params) if getattr(args, "params", None) else Path(cfg.out) / "params.npz"
    if not path.exists():
        raise T.ConfigError(f"parameter file {path} not found; run `train` first")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_gen_seq(args) -> int:
    cfg = _config(args)
    seq = cfg.seq_config()
    if args.preset:
        seq = replace(D.SEQ_PRESETS[args.preset], split_seed=seq.split_seed)
    if args.seed is not None:
        seq = replace(seq, split_seed=args.seed)
    train, test = D.gen_sequences(seq)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train.save_jsonl(out / "train.jsonl")
    test.save_jsonl(out / "test.jsonl")
    (out / "seq_config.json").write_text(json.dumps(D.seq_config_to_dict(seq), indent=2))
    _emit({"train": len(train), "test": len(test), "out": str(out)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    writer = T.MetricsWriter(out / "metrics.jsonl")
    if cfg.model == "attention":
        p, rows = T.train_attention(cfg, writer)
        T.save_params(p, out / "params.npz")
    elif cfg.model == "conv":
        p, rows = T.train_conv(cfg, writer)
        T.save_params(p, out / "params.npz")
        if cfg.gamma > 0:
            T.write_prototypes(p, cfg.k, out / "prototypes", (cfg.image_size, cfg.image_size))
    else:
        p, tb, rows = T.train_parser(cfg, writer)
        T.save_params(p, out / "params.npz")
        T.save_vocab(tb.vocab, out / "vocab.json")
    print(json.dumps(rows[-1] if rows else {}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    p, _ = T.load_params(cfg.model, _params_path(cfg, args))
    if cfg.model == "attention":
        _, test = D.gen_sequences(cfg.seq_config())
        row = {"model": "attention", "k": cfg.k, "schedule": cfg.schedule,
               "test_accuracy": T.evaluate_attention(p, test, cfg)}
    elif cfg.model == "conv":
        _, test = T.load_image_split(cfg)
        row = {"model": "conv", "k": cfg.k, "test_accuracy": T.evaluate_conv(p, test, cfg.k)}
    else:
        vocab = T.load_vocab(Path(cfg.out) / "vocab.json")
        path = cfg.data.get("eval", cfg.data.get("train"))
        if path is None:
            raise T.ConfigError("parser eval needs data.eval or data.train")
        tb = T.load_treebank(path, vocab)
        row = {"model": "parser", "k": cfg.k, **T.evaluate_parser(p, tb, cfg.k)}
    _emit(row, Path(cfg.out) / "eval.jsonl")
    return EXIT_OK


def cmd_generate_prototypes(args) -> int:
    cfg = replace(_config(args), model="conv")
    p, _ = T.load_params("conv", _params_path(cfg, args))
    out = Path(cfg.out) / "prototypes"
    paths = T.write_prototypes(p, cfg.k, out, (cfg.image_size, cfg.image_size))
    _, pred = T.prototype_consistency(p, cfg.k, (cfg.image_size, cfg.image_size))
    _emit({"k": cfg.k, "files": [str(x) for x in paths], "predicted": pred.tolist(),
           "consistent": int(np.sum(pred == np.arange(len(pred))))})
    return EXIT_OK


def cmd_parse(args) -> int:
    cfg = replace(_config(args), model="parser")
    p, _ = T.load_params("parser", _params_path(cfg, args))
    vocab = T.load_vocab(Path(cfg.out) / "vocab.json")
    tb = T.load_treebank(args.input, vocab)
    pred, _ = T.predict_trees(p, tb, cfg.k)
    dest = Path(args.output) if args.output else Path(cfg.out) / "parsed.conllu"
    T.write_parses(tb, pred, dest)
    _emit({"sentences": len(pred), "output": str(dest), **T.parse_metrics(pred, [s.heads for s in tb.sentences])})
    return EXIT_OK


def cmd_energy_trace(args) -> int:
    seed = 0 if args.seed is None else args.seed
    k = 3 if args.k is None else args.k
    if k < 1:
        raise T.ConfigError("k must be >= 1")
    trace, updates = random_traced_run(args.family, np.random.default_rng(seed), k,
                                       args.init or "zero", args.schedule or "forward_backward")
    row = {"family": args.family, "seed": seed, "k": k, "updates": updates,
           "energy": [None if not np.isfinite(e) else e for e in trace],
           "nonincreasing": energy_nonincreasing(trace)}
    _emit(row, Path(args.out) / "energy_trace.jsonl" if args.out else None)
    return EXIT_OK if row["nonincreasing"] else EXIT_RUNTIME


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest(print) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="unn", description="Undirected neural networks: training, evaluation and oracles.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, model=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--k", type=int, help="coordinate-descent rounds")
        p.add_argument("--schedule", choices=["forward_backward", "fb", "random"])
        p.add_argument("--init", choices=["zero", "random", "uniform"])
        p.add_argument("--out", help="output directory")
        if model:
            p.add_argument("--model", choices=list(T.MODELS))
            p.add_argument("--epochs", type=int)

    p = sub.add_parser("gen-seq", help="generate the sequence-completion splits")
    common(p, model=False)
    p.add_argument("--preset", choices=sorted(D.SEQ_PRESETS))
    p.set_defaults(fn=cmd_gen_seq)

    p = sub.add_parser("train", help="train a model and write metrics/params")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters")
    common(p)
    p.add_argument("--params")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate-prototypes", help="write one PGM prototype per class")
    common(p, model=False)
    p.add_argument("--params")
    p.set_defaults(fn=cmd_generate_prototypes)

    p = sub.add_parser("parse", help="parse a CoNLL-U file with saved parameters")
    common(p, model=False)
    p.add_argument("--params")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.set_defaults(fn=cmd_parse)

    p = sub.add_parser("energy-trace", help="energy after every update on a random graph")
    common(p, model=False)
    p.add_argument("--family", choices=list(FAMILIES), default="mlp")
    p.set_defaults(fn=cmd_energy_trace)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.set_defaults(fn=cmd_selftest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as err:  # --help
        return EXIT_OK if err.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (T.ConfigError, InvalidTreeError, DomainError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:
        log.exception("run failed")
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Run configuration, training loops and evaluation for the three task models."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import trees
from ..models.attention import AttentionUnnParams, attention_complete, attention_loss
from ..models.conv import ConvUnnParams, conv_forward, conv_generate, conv_joint_loss
from ..models.parser import ParserUnnParams, parser_forward, parser_loss
from ..optim import Adam
from ..tensor import Tape, Tensor, backward
from . import data as D
from .metrics import parse_metrics

log = logging.getLogger(__name__)

MODELS = ("attention", "conv", "parser")
DEFAULT_LR = {"attention": 1e-4, "conv": 5e-4, "parser": 2e-3}


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 1)."""


@dataclass
class RunConfig:
    model: str = "attention"
    k: int = 1
    schedule: str = "forward_backward"
    init: str = "zero"
    lr: float | None = None
    gamma: float = 0.1
    d: int = 64
    r: int = 128
    epochs: int = 10
    batch_size: int = 16
    clip: float = 10.0
    seed: int = 0
    weight_scale: float = 1.0
    embed_scale: float = 1.0
    dropout: float = 0.0
    seq: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    out: str = "runs/default"
    n_test: int = 1000
    image_size: int = 28
    channels: tuple = (32, 64)
    kernels: tuple = (6, 4)

    @property
    def learning_rate(self) -> float:
        return DEFAULT_LR[self.model] if self.lr is None else self.lr

    def validate(self, check_paths: bool = True) -> RunConfig:
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.weight_scale <= 0 or self.embed_scale <= 0:
            raise ConfigError("weight_scale and embed_scale must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.schedule not in ("forward_backward", "fb", "random"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.init not in ("zero", "random", "uniform"):
            raise ConfigError(f"unknown init {self.init!r}")
        if check_paths:
            for key, path in self.data.items():
                if not Path(path).exists():
                    raise ConfigError(f"data path {key}={path} does not exist")
        if self.model == "attention":
            try:
                self.seq_config().validate()
            except (TypeError, ValueError) as err:
                raise ConfigError(f"bad sequence task config: {err}") from None
        return self

    def seq_config(self) -> D.SeqTaskConfig:
        seq = dict(self.seq)
        preset = seq.pop("preset", "desk")
        if preset not in D.SEQ_PRESETS:
            raise ConfigError(f"unknown sequence preset {preset!r}")
        base = D.seq_config_to_dict(D.SEQ_PRESETS[preset])
        base.update(seq)
        return D.seq_config_from_dict(base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"], d["kernels"] = list(self.channels), list(self.kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        for key in ("channels", "kernels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# parameter files
# ---------------------------------------------------------------------------
PARAM_TYPES = {"attention": AttentionUnnParams, "conv": ConvUnnParams, "parser": ParserUnnParams}


def save_params(p, path, extra: dict | None = None) -> None:
    arrays = {f.name: getattr(p, f.name).data for f in fields(p) if isinstance(getattr(p, f.name), Tensor)}
    scalars = {f.name: getattr(p, f.name) for f in fields(p) if not isinstance(getattr(p, f.name), Tensor)}
    meta = {"scalars": scalars, "extra": extra or {}}
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_params(model: str, path):
    cls = PARAM_TYPES[model]
    with np.load(path) as z:
        meta = json.loads(str(z["__meta__"]))
        kw = {name: Tensor(z[name], requires_grad=True) for name in z.files if name != "__meta__"}
    kw.update(meta["scalars"])
    return cls(**kw), meta["extra"]


class MetricsWriter:
    """Appends one JSON object per line; ``seconds`` is the only nondeterministic key."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, row: dict) -> None:
        self.rows.append(row)
        log.info("%s", row)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row) + "\n")


def _step(opt: Adam, params: list[Tensor], loss_fn) -> float:
    with Tape():
        loss = loss_fn()
        grads = backward(loss, params)
    opt.step(grads)
    return float(loss.data)


# ---------------------------------------------------------------------------
# sequence completion
# ---------------------------------------------------------------------------
def evaluate_attention(p: AttentionUnnParams, ds: D.SeqDataset, cfg: RunConfig, batch: int = 512) -> float:
    rng = np.random.default_rng(cfg.seed + 1)
    correct = total = 0
    for tokens, mask in ds.batches(batch):
        logits = attention_complete(p, tokens, mask, cfg.k, cfg.schedule, rng)
        correct += int(np.sum(logits.argmax(-1) + 1 == tokens[mask]))
        total += int(mask.sum())
    if total == 0:
        raise ValueError("no masked positions to evaluate")
    return correct / total


def train_attention(cfg: RunConfig, writer: MetricsWriter | None = None):
    writer = writer or MetricsWriter()
    seq = cfg.seq_config()
    train, test = D.gen_sequences(seq)
    rng = np.random.default_rng(cfg.seed)
    p = AttentionUnnParams.init(seq.max_value + 1, cfg.d, rng, cfg.weight_scale, cfg.embed_scale)
    opt = Adam(p.tensors(), lr=cfg.learning_rate, clip=cfg.clip)
    t0 = time.process_time()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for tokens, mask in train.batches(cfg.batch_size, rng):
            losses.append(
                _step(opt, p.tensors(), lambda: attention_loss(p, tokens, mask, cfg.k, cfg.schedule, rng))
            )
        acc = evaluate_attention(p, test, cfg)
        writer.write(
            {"epoch": epoch, "loss": float(np.mean(losses)), "test_accuracy": acc, "seconds": time.process_time() - t0}
        )
    return p, writer.rows


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------
def load_image_split(cfg: RunConfig) -> tuple[D.ImageDataset, D.ImageDataset]:
    try:
        ds = D.load_idx_images(cfg.data["images"], cfg.data["labels"])
    except KeyError as err:
        raise ConfigError(f"conv runs need data.{err.args[0]}") from None
    if not 0 < cfg.n_test < len(ds):
        raise ConfigError(f"n_test must lie in (0, {len(ds)})")
    return D.split_images(ds, cfg.n_test, cfg.seed)


def evaluate_conv(p: ConvUnnParams, ds: D.ImageDataset, k: int, batch: int = 500) -> float:
    correct = 0
    for i in range(0, len(ds), batch):
        probs = conv_forward(p, ds.images[i : i + batch], k)
        correct += int(np.sum(probs.argmax(-1) == ds.labels[i : i + batch]))
    return correct / len(ds)


def prototype_consistency(p: ConvUnnParams, k: int, image_hw=(28, 28)) -> tuple[np.ndarray, np.ndarray]:
    """Generated prototypes for every class and the class the forward pass assigns them."""
    classes = np.arange(p.n_classes)
    protos = conv_generate(p, classes, k, image_hw)
    pred = conv_forward(p, protos, k).argmax(-1)
    return protos, pred


def train_conv(cfg: RunConfig, writer: MetricsWriter | None = None, split=None):
    writer = writer or MetricsWriter()
    train, test = split if split is not None else load_image_split(cfg)
    rng = np.random.default_rng(cfg.seed)
    hw = train.images.shape[2:]
    if hw[0] != hw[1]:
        raise ConfigError("square images expected")
    p = ConvUnnParams.init(rng, hw[0], cfg.channels, cfg.kernels, gamma=cfg.gamma)
    opt = Adam(p.tensors(), lr=cfg.learning_rate, clip=cfg.clip)
    t0 = time.process_time()
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train))
        losses = []
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            X, y = train.images[idx], train.labels[idx]
            losses.append(_step(opt, p.tensors(), lambda: conv_joint_loss(p, X, y, cfg.k, cfg.gamma)))
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "test_accuracy": evaluate_conv(p, test, cfg.k),
            "seconds": time.process_time() - t0,
        }
        if cfg.gamma > 0:
            _, pred = prototype_consistency(p, cfg.k, hw)
            row["prototypes_consistent"] = int(np.sum(pred == np.arange(p.n_classes)))
        writer.write(row)
    return p, writer.rows


def write_prototypes(p: ConvUnnParams, k: int, out_dir, image_hw=(28, 28)) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    protos, pred = prototype_consistency(p, k, image_hw)
    paths = []
    for c in range(p.n_classes):
        path = out_dir / f"prototype_{c}.pgm"
        D.write_pgm(protos[c, 0], path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------
@dataclass
class Treebank:
    sentences: list
    vocab: D.Vocabulary

    def encoded(self):
        """Groups of equal-length sentences as (indices, tokens (B, n), gold packed (B, n, n))."""
        by_len: dict = {}
        for i, s in enumerate(self.sentences):
            by_len.setdefault(len(s.tokens), []).append(i)
        out = []
        for n in sorted(by_len):
            idx = by_len[n]
            tokens = np.stack([self.vocab.encode(self.sentences[i].tokens) for i in idx])
            gold = np.stack([trees.heads_to_packed(self.sentences[i].heads) for i in idx])
            out.append((idx, tokens, gold))
        return out


def load_treebank(path, vocab: D.Vocabulary | None = None) -> Treebank:
    report = D.load_conllu_report(path)
    if not report.sentences:
        raise ConfigError(f"{path}: no usable sentences ({report.rejected} rejected)")
    return Treebank(report.sentences, vocab or D.Vocabulary.from_sentences(report.sentences))


def predict_trees(p: ParserUnnParams, tb: Treebank, k: int, trace: bool = False):
    pred = [None] * len(tb.sentences)
    traces = []
    for idx, tokens, _ in tb.encoded():
        out = parser_forward(p, tokens, k, trace=trace)
        for i, t in zip(idx, out.trees):
            pred[i] = list(t.heads)
        if trace:
            traces.append(out.energy_trace)
    return pred, traces


def evaluate_parser(p: ParserUnnParams, tb: Treebank, k: int) -> dict:
    pred, _ = predict_trees(p, tb, k)
    return parse_metrics(pred, [s.heads for s in tb.sentences])


def train_parser(cfg: RunConfig, writer: MetricsWriter | None = None, treebank: Treebank | None = None):
    writer = writer or MetricsWriter()
    if treebank is None:
        if "train" not in cfg.data:
            raise ConfigError("parser runs need data.train")
        treebank = load_treebank(cfg.data["train"])
    rng = np.random.default_rng(cfg.seed)
    p = ParserUnnParams.init(len(treebank.vocab), rng, cfg.d, cfg.r)
    opt = Adam(p.tensors(), lr=cfg.learning_rate, clip=cfg.clip)
    groups = treebank.encoded()
    t0 = time.process_time()
    for epoch in range(1, cfg.epochs + 1):
        batches = []
        for _, tokens, gold in groups:
            perm = rng.permutation(len(tokens))
            for i in range(0, len(perm), cfg.batch_size):
                sel = perm[i : i + cfg.batch_size]
                batches.append((tokens[sel], gold[sel]))
        losses = []
        for j in rng.permutation(len(batches)):
            tokens, gold = batches[j]
            losses.append(
                _step(opt, p.tensors(), lambda: parser_loss(p, tokens, gold, cfg.k, cfg.dropout, rng))
                / len(tokens)
            )
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        row.update({f"train_{key}": v for key, v in evaluate_parser(p, treebank, cfg.k).items()})
        row["seconds"] = time.process_time() - t0
        writer.write(row)
    return p, treebank, writer.rows


def write_parses(tb: Treebank, heads, path) -> None:
    D.write_conllu([D.SentenceRecord(s.tokens, list(h)) for s, h in zip(tb.sentences, heads)], path)


def save_vocab(vocab: D.Vocabulary, path) -> None:
    Path(path).write_text(json.dumps(vocab.index, ensure_ascii=False))


def load_vocab(path) -> D.Vocabulary:
    v = D.Vocabulary()
    v.index = json.loads(Path(path).read_text())
    return v


def strip_timing(rows: list[dict]) -> list[dict]:
    """Metrics rows without wall-clock fields, for determinism comparisons."""
    return [{k: v for k, v in r.items() if k != "seconds"} for r in rows]

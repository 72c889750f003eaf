"""Datasets and file formats: toy sequences, CoNLL-U, IDX images, PGM."""

from __future__ import annotations

import gzip
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from ..trees import InvalidTreeError, validate_heads

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# sequence completion
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SeqTaskConfig:
    max_value: int = 32
    min_len: int = 8
    max_len: int = 16
    mask_fraction_max: float = 0.10
    directions: tuple = ("ascending", "descending")
    split_seed: int = 0
    train_ratio: float = 0.9
    mask_rounding: str = "ceil"

    def budget(self, length: int) -> int:
        raw = self.mask_fraction_max * length
        # guard against 0.1 * 10 = 1.0000000000000002
        raw = round(raw, 9)
        return math.ceil(raw) if self.mask_rounding == "ceil" else math.floor(raw)

    def validate(self) -> SeqTaskConfig:
        if not 1 <= self.min_len <= self.max_len <= self.max_value:
            raise ValueError("need 1 <= min_len <= max_len <= max_value")
        if not 0 < self.mask_fraction_max < 1:
            raise ValueError("mask_fraction_max must lie in (0, 1)")
        if self.mask_rounding not in ("ceil", "floor"):
            raise ValueError("mask_rounding must be 'ceil' or 'floor'")
        bad = set(self.directions) - {"ascending", "descending"}
        if bad or not self.directions:
            raise ValueError(f"directions must be a nonempty subset of ascending/descending, got {self.directions}")
        if not 0 < self.train_ratio < 1:
            raise ValueError("train_ratio must lie in (0, 1)")
        zero = [n for n in range(self.min_len, self.max_len + 1) if self.budget(n) < 1]
        if zero:
            raise ValueError(
                f"mask budget is 0 for lengths {zero}; raise mask_fraction_max, min_len or use ceil rounding"
            )
        return self


SEQ_PRESETS = {
    "desk": SeqTaskConfig(),
    # 8..24 inclusive with ceil budgets: 785,142 items, 706,628 / 78,514 at 0.9
    "paper": SeqTaskConfig(max_value=64, min_len=8, max_len=24),
}


@dataclass
class SeqDataset:
    """Items grouped by length: ``groups[n] = (tokens (N, n), mask (N, n))``."""

    groups: dict = field(default_factory=dict)

    def __len__(self):
        return sum(len(t) for t, _ in self.groups.values())

    def n_masked(self) -> int:
        return int(sum(m.sum() for _, m in self.groups.values()))

    def items(self):
        for n in sorted(self.groups):
            tokens, mask = self.groups[n]
            for t, m in zip(tokens, mask):
                yield t, m

    def batches(self, size: int, rng: np.random.Generator | None = None):
        """Equal-length batches; shuffled (order and membership) when rng is given."""
        chunks = []
        for n in sorted(self.groups):
            tokens, mask = self.groups[n]
            idx = rng.permutation(len(tokens)) if rng is not None else np.arange(len(tokens))
            for i in range(0, len(idx), size):
                chunks.append((tokens[idx[i : i + size]], mask[idx[i : i + size]]))
        if rng is not None:
            order = rng.permutation(len(chunks))
            chunks = [chunks[i] for i in order]
        return chunks

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.writelines(json.dumps({"tokens": t.tolist(), "mask": np.flatnonzero(m).tolist()}) + "\n" for t, m in self.items())

    @classmethod
    def load_jsonl(cls, path) -> SeqDataset:
        rows: dict = {}
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                t = np.asarray(rec["tokens"], dtype=np.int64)
                m = np.zeros(len(t), dtype=bool)
                m[rec["mask"]] = True
                rows.setdefault(len(t), ([], []))
                rows[len(t)][0].append(t)
                rows[len(t)][1].append(m)
        return cls({n: (np.array(ts), np.array(ms)) for n, (ts, ms) in rows.items()})


def _base_sequences(c: SeqTaskConfig, n: int) -> np.ndarray:
    starts = np.arange(1, c.max_value - n + 2)
    asc = starts[:, None] + np.arange(n)[None, :]
    out = []
    for direction in c.directions:
        out.append(asc if direction == "ascending" else asc[:, ::-1])
    return np.concatenate(out, axis=0)


def _mask_patterns(n: int, budget: int) -> np.ndarray:
    pats = []
    for m in range(1, budget + 1):
        for pos in combinations(range(n), m):
            row = np.zeros(n, dtype=bool)
            row[list(pos)] = True
            pats.append(row)
    return np.array(pats)


def gen_sequences(c: SeqTaskConfig) -> tuple[SeqDataset, SeqDataset]:
    """Every consecutive run and every mask pattern within budget, split by seed."""
    c.validate()
    per_len = {}
    for n in range(c.min_len, c.max_len + 1):
        base = _base_sequences(c, n)
        pats = _mask_patterns(n, c.budget(n))
        tokens = np.repeat(base, len(pats), axis=0)
        mask = np.tile(pats, (len(base), 1))
        per_len[n] = (tokens, mask)
    lengths = sorted(per_len)
    sizes = [len(per_len[n][0]) for n in lengths]
    total = sum(sizes)
    rng = np.random.default_rng(c.split_seed)
    perm = rng.permutation(total)
    n_train = int(round(c.train_ratio * total))
    is_train = np.zeros(total, dtype=bool)
    is_train[perm[:n_train]] = True
    train, test = SeqDataset(), SeqDataset()
    offset = 0
    for n, size in zip(lengths, sizes):
        sel = is_train[offset : offset + size]
        tokens, mask = per_len[n]
        if sel.any():
            train.groups[n] = (tokens[sel], mask[sel])
        if (~sel).any():
            test.groups[n] = (tokens[~sel], mask[~sel])
        offset += size
    return train, test


def count_sequences(c: SeqTaskConfig) -> int:
    c.validate()
    total = 0
    for n in range(c.min_len, c.max_len + 1):
        n_masks = sum(math.comb(n, m) for m in range(1, c.budget(n) + 1))
        total += len(c.directions) * (c.max_value - n + 1) * n_masks
    return total


def seq_config_from_dict(d: dict) -> SeqTaskConfig:
    d = dict(d)
    if "directions" in d:
        d["directions"] = tuple(d["directions"])
    return SeqTaskConfig(**d)


def seq_config_to_dict(c: SeqTaskConfig) -> dict:
    d = asdict(c)
    d["directions"] = list(c.directions)
    return d


# ---------------------------------------------------------------------------
# CoNLL-U
# ---------------------------------------------------------------------------
@dataclass
class SentenceRecord:
    tokens: list
    heads: list


@dataclass
class ConlluReport:
    sentences: list
    rejected: int = 0
    reasons: list = field(default_factory=list)


def _parse_block(lines: list[str], start_line: int) -> SentenceRecord:
    tokens, heads = [], []
    for offset, line in enumerate(lines):
        cols = line.split("\t")
        if len(cols) != 10:
            raise ValueError(f"line {start_line + offset}: expected 10 columns, got {len(cols)}")
        tid = cols[0]
        if "-" in tid or "." in tid:
            continue
        if int(tid) != len(tokens) + 1:
            raise ValueError(f"line {start_line + offset}: token id {tid} out of sequence")
        try:
            head = int(cols[6])
        except ValueError:
            raise ValueError(f"line {start_line + offset}: malformed HEAD {cols[6]!r}") from None
        tokens.append(cols[1])
        heads.append(head)
    validate_heads(heads)
    return SentenceRecord(tokens, heads)


def load_conllu_report(path) -> ConlluReport:
    """Parse a CoNLL-U file keeping FORM and HEAD; bad sentences are counted, not fatal."""
    report = ConlluReport(sentences=[])
    block: list[str] = []
    block_start = 1

    def flush():
        nonlocal block
        if block:
            try:
                report.sentences.append(_parse_block(block, block_start))
            except (ValueError, InvalidTreeError) as err:
                report.rejected += 1
                report.reasons.append(str(err))
            block = []

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("#"):
                continue
            if not block:
                block_start = lineno
            block.append(line)
    flush()
    if report.rejected:
        log.warning("%s: rejected %d sentence(s)", path, report.rejected)
    return report


def load_conllu(path) -> list[SentenceRecord]:
    return load_conllu_report(path).sentences


def write_conllu(sentences, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(sentences, start=1):
            fh.write(f"# sent_id = {i}\n")
            for j, (form, head) in enumerate(zip(s.tokens, s.heads), start=1):
                rel = "root" if head == 0 else "dep"
                fh.write(f"{j}\t{form}\t_\t_\t_\t_\t{head}\t{rel}\t_\t_\n")
            fh.write("\n")


class Vocabulary:
    """Word forms to ids; id 0 is reserved for unknown words."""

    def __init__(self, forms=()):
        self.index = {"<unk>": 0}
        for f in forms:
            self.add(f)

    def add(self, form: str) -> int:
        if form not in self.index:
            self.index[form] = len(self.index)
        return self.index[form]

    def encode(self, forms) -> np.ndarray:
        return np.array([self.index.get(f, 0) for f in forms], dtype=np.int64)

    def __len__(self):
        return len(self.index)

    @classmethod
    def from_sentences(cls, sentences) -> Vocabulary:
        v = cls()
        for s in sentences:
            for f in s.tokens:
                v.add(f)
        return v


# ---------------------------------------------------------------------------
# IDX images
# ---------------------------------------------------------------------------
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    with _open(path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != IDX_IMAGES:
            raise ValueError(f"{path}: bad image magic 0x{magic:08x}")
        buf = fh.read()
    if len(buf) != count * rows * cols:
        raise ValueError(f"{path}: expected {count * rows * cols} pixel bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as fh:
        magic, count = struct.unpack(">II", fh.read(8))
        if magic != IDX_LABELS:
            raise ValueError(f"{path}: bad label magic 0x{magic:08x}")
        buf = fh.read()
    if len(buf) != count:
        raise ValueError(f"{path}: expected {count} labels, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8).copy()


def write_idx_images(images: np.ndarray, path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    payload = struct.pack(">IIII", IDX_IMAGES, count, rows, cols) + images.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def write_idx_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    payload = struct.pack(">II", IDX_LABELS, len(labels)) + labels.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, 1, H, W) in [-1, 1]
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> ImageDataset:
        return ImageDataset(self.images[idx], self.labels[idx])


def pixels_to_unit(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 255.0 * 2.0 - 1.0


def load_idx_images(path_images, path_labels) -> ImageDataset:
    """Images scaled to [-1, 1] with a channel axis; labels as int64."""
    images = read_idx_images(path_images)
    labels = read_idx_labels(path_labels)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    return ImageDataset(pixels_to_unit(images)[:, None], labels.astype(np.int64))


def split_images(ds: ImageDataset, n_test: int, seed: int) -> tuple[ImageDataset, ImageDataset]:
    """Stratified-by-shuffle split into train and test subsets."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------
def quantize(image: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.round((v + 1.0) / 2.0 * 255.0).astype(np.uint8)


def write_pgm(image: np.ndarray, path) -> None:
    """Binary P5 greyscale, maxval 255; ``image`` is 2-D with values in [-1, 1]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"write_pgm needs a 2-D image, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantize(image).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    return pixels.reshape(h, w)

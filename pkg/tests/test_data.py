import gzip
import struct

import numpy as np
import pytest

from unn.harness import data
from unn.harness.data import (
    SEQ_PRESETS,
    SentenceRecord,
    SeqDataset,
    SeqTaskConfig,
    Vocabulary,
    count_sequences,
    gen_sequences,
    load_conllu,
    load_conllu_report,
    load_idx_images,
    read_pgm,
    write_conllu,
    write_pgm,
)


class TestSequences:
    def test_tiny_hand_enumeration(self):
        c = SeqTaskConfig(max_value=9, min_len=8, max_len=8, directions=("ascending",))
        train, test = gen_sequences(c)
        rows = {tuple(t) for ds in (train, test) for t, _ in ds.items()}
        assert rows == {tuple(range(1, 9)), tuple(range(2, 10))}
        # budget ceil(0.8) = 1: one masked position out of 8
        assert len(train) + len(test) == 16 == count_sequences(c)
        assert all(m.sum() == 1 for ds in (train, test) for _, m in ds.items())

    def test_descending(self):
        c = SeqTaskConfig(max_value=9, min_len=8, max_len=8)
        rows = {tuple(t) for ds in gen_sequences(c) for t, _ in ds.items()}
        assert (8, 7, 6, 5, 4, 3, 2, 1) in rows and len(rows) == 4

    def test_floor_rejects_zero_budget(self):
        with pytest.raises(ValueError, match="budget is 0"):
            gen_sequences(SeqTaskConfig(max_value=9, min_len=8, max_len=8, mask_rounding="floor"))

    def test_floor_accepted_from_length_ten(self):
        c = SeqTaskConfig(max_value=12, min_len=10, max_len=10, mask_rounding="floor")
        # 3 starts x 2 directions x 10 single masks
        assert count_sequences(c) == 60

    @pytest.mark.parametrize("kw", [
        dict(min_len=0), dict(min_len=9, max_len=8), dict(max_len=40), dict(mask_fraction_max=0.0),
        dict(mask_fraction_max=1.0), dict(directions=("sideways",)), dict(directions=()),
        dict(train_ratio=1.0), dict(mask_rounding="nearest"),
    ])
    def test_impossible_bounds(self, kw):
        with pytest.raises(ValueError):
            SeqTaskConfig(**kw).validate()

    def test_budget_rounding(self):
        c = SeqTaskConfig()
        assert [c.budget(n) for n in (8, 10, 11, 16, 20)] == [1, 1, 2, 2, 2]
        f = SeqTaskConfig(mask_rounding="floor")
        assert [f.budget(n) for n in (9, 10, 19, 20)] == [0, 1, 1, 2]

    def test_desk_counts(self):
        train, test = gen_sequences(SEQ_PRESETS["desk"])
        assert (len(train), len(test)) == (21641, 2405)
        assert len(train) + len(test) == count_sequences(SEQ_PRESETS["desk"])

    def test_paper_preset_counts(self):
        # reported split is around 706K / 78K
        total = count_sequences(SEQ_PRESETS["paper"])
        n_train = round(0.9 * total)
        assert (n_train, total - n_train) == (706628, 78514)

    def test_split_is_partition(self):
        c = SeqTaskConfig(max_value=14, min_len=8, max_len=12)
        train, test = gen_sequences(c)
        def key(ds):
            return {(tuple(t), tuple(m)) for t, m in ds.items()}

        a, b = key(train), key(test)
        assert not a & b
        assert len(a) + len(b) == count_sequences(c)

    def test_targets_are_consecutive_runs(self):
        train, _ = gen_sequences(SeqTaskConfig(max_value=12, min_len=8, max_len=10))
        for t, m in train.items():
            d = np.diff(t)
            assert np.all(d == 1) or np.all(d == -1)
            assert 1 <= m.sum() <= SeqTaskConfig().budget(len(t))
            assert t.min() >= 1 and t.max() <= 12

    def test_deterministic_and_seeded(self, tmp_path):
        c = SeqTaskConfig(max_value=14, min_len=8, max_len=12)
        for i in range(2):
            gen_sequences(c)[0].save_jsonl(tmp_path / f"run{i}.jsonl")
        assert (tmp_path / "run0.jsonl").read_bytes() == (tmp_path / "run1.jsonl").read_bytes()
        other = gen_sequences(SeqTaskConfig(max_value=14, min_len=8, max_len=12, split_seed=1))[0]
        other.save_jsonl(tmp_path / "other.jsonl")
        assert (tmp_path / "other.jsonl").read_bytes() != (tmp_path / "run0.jsonl").read_bytes()

    def test_jsonl_round_trip(self, tmp_path):
        train, _ = gen_sequences(SeqTaskConfig(max_value=12, min_len=8, max_len=10))
        train.save_jsonl(tmp_path / "t.jsonl")
        back = SeqDataset.load_jsonl(tmp_path / "t.jsonl")
        assert sorted(back.groups) == sorted(train.groups)
        for n in train.groups:
            np.testing.assert_array_equal(back.groups[n][0], train.groups[n][0])
            np.testing.assert_array_equal(back.groups[n][1], train.groups[n][1])

    def test_batches_cover_once(self, rng):
        train, _ = gen_sequences(SeqTaskConfig(max_value=12, min_len=8, max_len=10))
        batches = train.batches(7, rng)
        assert sum(len(t) for t, _ in batches) == len(train)
        assert all(t.shape == m.shape and len(t) <= 7 for t, m in batches)

    def test_config_dict_round_trip(self):
        c = SEQ_PRESETS["paper"]
        assert data.seq_config_from_dict(data.seq_config_to_dict(c)) == c


CONLLU = """# newdoc id = fixture
# sent_id = a
1\tIt\t_\t_\t_\t_\t2\tnsubj\t_\t_
2\tworks\t_\t_\t_\t_\t0\troot\t_\t_

# sent_id = b
1-2\tdont\t_\t_\t_\t_\t_\t_\t_\t_
1\tdo\t_\t_\t_\t_\t3\taux\t_\t_
2\tnot\t_\t_\t_\t_\t3\tadvmod\t_\t_
3\tgo\t_\t_\t_\t_\t0\troot\t_\t_
3.1\tgone\t_\t_\t_\t_\t_\t_\t_\t_

# sent_id = cyclic
1\ta\t_\t_\t_\t_\t2\tdep\t_\t_
2\tb\t_\t_\t_\t_\t1\tdep\t_\t_

# sent_id = malformed
1\ta\t_\t_\t_\t_\tx\tdep\t_\t_

1\tTwo\t_\t_\t_\t_\t0\troot\t_\t_
2\ttokens\t_\t_\t_\t_\t1\tdep\t_\t_
"""


class TestConllu:
    @pytest.fixture
    def path(self, tmp_path):
        p = tmp_path / "fixture.conllu"
        p.write_text(CONLLU, encoding="utf-8")
        return p

    def test_fixture(self, path):
        report = load_conllu_report(path)
        assert [s.tokens for s in report.sentences] == [["It", "works"], ["do", "not", "go"], ["Two", "tokens"]]
        assert [s.heads for s in report.sentences] == [[2, 0], [3, 3, 0], [0, 1]]
        assert report.rejected == 2
        assert "HEAD" in report.reasons[1]

    def test_round_trip(self, path, tmp_path):
        sents = load_conllu(path)
        write_conllu(sents, tmp_path / "out.conllu")
        back = load_conllu(tmp_path / "out.conllu")
        assert [(s.tokens, s.heads) for s in back] == [(s.tokens, s.heads) for s in sents]

    def test_toy_treebank(self, data_dir):
        report = load_conllu_report(data_dir / "toy_treebank.conllu")
        assert len(report.sentences) == 200 and report.rejected == 0

    def test_vocabulary(self):
        v = Vocabulary.from_sentences([SentenceRecord(["a", "b", "a"], [0, 1, 1])])
        assert len(v) == 3
        np.testing.assert_array_equal(v.encode(["b", "zzz", "a"]), [2, 0, 1])


def _idx_fixture(tmp_path, pixels, labels, gz=False):
    suffix = ".gz" if gz else ""
    pi, pl = tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"
    data.write_idx_images(pixels, pi)
    data.write_idx_labels(labels, pl)
    return pi, pl


class TestIdx:
    pixels = np.array([[[0, 255], [128, 7]], [[255, 0], [1, 254]]], dtype=np.uint8)

    @pytest.mark.parametrize("gz", [False, True])
    def test_round_trip(self, tmp_path, gz):
        pi, pl = _idx_fixture(tmp_path, self.pixels, [3, 9], gz)
        np.testing.assert_array_equal(data.read_idx_images(pi), self.pixels)
        np.testing.assert_array_equal(data.read_idx_labels(pl), [3, 9])
        ds = load_idx_images(pi, pl)
        assert ds.images.shape == (2, 1, 2, 2)
        np.testing.assert_array_equal(ds.labels, [3, 9])

    def test_header_bytes(self, tmp_path):
        pi, _ = _idx_fixture(tmp_path, self.pixels, [3, 9])
        assert struct.unpack(">IIII", pi.read_bytes()[:16]) == (2051, 2, 2, 2)

    def test_endpoints(self, tmp_path):
        ds = load_idx_images(*_idx_fixture(tmp_path, self.pixels, [3, 9]))
        assert ds.images[0, 0, 0, 0] == -1.0 and ds.images[0, 0, 0, 1] == 1.0

    def test_short_label_file(self, tmp_path):
        pi, pl = _idx_fixture(tmp_path, self.pixels, [3])
        with pytest.raises(ValueError):
            load_idx_images(pi, pl)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(struct.pack(">IIII", 2049, 1, 1, 1) + b"\x00")
        with pytest.raises(ValueError, match="magic"):
            data.read_idx_images(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "trunc.gz"
        with gzip.open(p, "wb") as fh:
            fh.write(struct.pack(">II", 2049, 5) + b"\x01\x02")
        with pytest.raises(ValueError):
            data.read_idx_labels(p)

    def test_mnist_subset(self, data_dir):
        mnist = data_dir / "mnist5k"
        ds = load_idx_images(mnist / "images-idx3-ubyte.gz", mnist / "labels-idx1-ubyte.gz")
        assert ds.images.shape == (5000, 1, 28, 28)
        np.testing.assert_array_equal(np.bincount(ds.labels), [500] * 10)
        assert ds.images.min() == -1.0 and ds.images.max() == 1.0

    def test_split(self, tmp_path):
        ds = load_idx_images(*_idx_fixture(tmp_path, np.zeros((10, 2, 2), np.uint8), np.arange(10)))
        tr, te = data.split_images(ds, 3, seed=0)
        assert len(tr) == 7 and len(te) == 3
        assert sorted(np.concatenate([tr.labels, te.labels])) == list(range(10))


class TestPgm:
    def test_constant_images(self, tmp_path):
        write_pgm(-np.ones((3, 4)), tmp_path / "a.pgm")
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5\n4 3\n255\n")
        assert raw[-12:] == bytes(12)
        write_pgm(np.ones((3, 4)), tmp_path / "b.pgm")
        np.testing.assert_array_equal(read_pgm(tmp_path / "b.pgm"), np.full((3, 4), 255))

    def test_round_trip_equals_quantized(self, tmp_path, rng):
        img = rng.uniform(-1.2, 1.2, (5, 7))
        write_pgm(img, tmp_path / "r.pgm")
        np.testing.assert_array_equal(read_pgm(tmp_path / "r.pgm"), data.quantize(img))

    def test_midpoint(self):
        assert data.quantize(np.array([0.0]))[0] == 128

    def test_needs_2d(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(np.zeros((1, 2, 2)), tmp_path / "x.pgm")

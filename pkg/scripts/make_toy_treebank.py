"""Generate the synthetic CoNLL-U fixture used by the parser experiments.

Each sentence draws distinct words from a small vocabulary.  Its gold tree is
the maximum spanning arborescence under a hidden word-pair affinity, so a
biaffine scorer over word identities can fit the corpus exactly.

Usage: python scripts/make_toy_treebank.py [out_path] [n_sentences] [seed]
"""

import sys

import numpy as np

from unn.harness.data import SentenceRecord, write_conllu
from unn.trees import cle_decode

VOCAB = 60
MIN_LEN, MAX_LEN = 4, 12


def make_treebank(n_sentences=200, seed=0):
    rng = np.random.default_rng(seed)
    words = [f"w{i:02d}" for i in range(VOCAB)]
    affinity = rng.normal(0.0, 1.0, (VOCAB, VOCAB))
    root = rng.normal(-1.0, 1.0, VOCAB)
    out = []
    for _ in range(n_sentences):
        n = int(rng.integers(MIN_LEN, MAX_LEN + 1))
        ids = rng.choice(VOCAB, size=n, replace=False)
        scores = affinity[np.ix_(ids, ids)].copy()
        scores[np.diag_indices(n)] = root[ids]
        tree = cle_decode(scores)
        out.append(SentenceRecord([words[i] for i in ids], list(tree.heads)))
    return out


def main(path="data/toy_treebank.conllu", n_sentences="200", seed="0"):
    sentences = make_treebank(int(n_sentences), int(seed))
    write_conllu(sentences, path)
    print(f"wrote {len(sentences)} sentences to {path}")


if __name__ == "__main__":
    main(*sys.argv[1:])

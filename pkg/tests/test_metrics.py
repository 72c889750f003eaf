import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unn.harness.metrics import (
    metric_exact_match,
    metric_modifier_list,
    metric_uas,
    modifier_sets,
    parse_metrics,
)

# Portuguese example sentence: Abre a perspectiva de aplicações por prazo mais longos .
WORDS = ["Abre", "a", "perspectiva", "de", "aplicações", "por", "prazo", "mais", "longos", "."]
GOLD = [0, 3, 1, 5, 3, 7, 5, 9, 7, 1]
BASELINE = [0, 3, 1, 5, 3, 7, 5, 9, 5, 1]  # longos attached to aplicações


def test_identity_scores_one():
    trees = [[0], [0, 1, 1], [2, 0, 2, 3]]
    assert parse_metrics(trees, trees) == {"uas": 1.0, "modifier_list": 1.0, "exact_match": 1.0}


def test_uas_hand_count():
    assert metric_uas([[0, 1, 1]], [[0, 1, 2]]) == pytest.approx(2 / 3, abs=1e-15)


def test_uas_counts_tokens_not_sentences():
    assert metric_uas([[0], [0, 1, 1]], [[0], [0, 1, 2]]) == pytest.approx(3 / 4, abs=1e-15)


def test_exact_match_one_wrong_of_four():
    gold = [[0], [0, 1], [2, 0], [0, 1, 2]]
    pred = [[0], [0, 1], [2, 0], [0, 1, 1]]
    assert metric_exact_match(pred, gold) == 0.75


def test_modifier_sets():
    assert modifier_sets([0, 1, 1]) == {0: {1}, 1: {2, 3}}


def test_modifier_list_partial_set_is_wrong():
    # gold: head 1 has {2, 3}; pred gives it {2} only
    gold, pred = [[0, 1, 1]], [[0, 1, 2]]
    # root {1} correct, head 1 wrong
    assert metric_modifier_list(pred, gold) == 0.5


def test_modifier_list_sentence_example():
    g, p = modifier_sets(GOLD), modifier_sets(BASELINE)
    right = {WORDS[h - 1] for h, mods in g.items() if h > 0 and p.get(h, set()) == mods}
    wrong = {WORDS[h - 1] for h, mods in g.items() if h > 0 and p.get(h, set()) != mods}
    assert right == {"perspectiva", "Abre", "longos"}
    assert wrong == {"aplicações", "prazo"}
    # root counted as a head: 4 of 6
    assert metric_modifier_list([BASELINE], [GOLD]) == pytest.approx(4 / 6, abs=1e-15)
    assert metric_uas([BASELINE], [GOLD]) == 0.9
    assert metric_exact_match([BASELINE], [GOLD]) == 0.0


@pytest.mark.parametrize("fn", [metric_uas, metric_modifier_list, metric_exact_match])
def test_errors(fn):
    with pytest.raises(ValueError):
        fn([], [])
    with pytest.raises(ValueError):
        fn([[0]], [[0], [0]])
    with pytest.raises(ValueError):
        fn([[0, 1]], [[0]])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bounds_and_ordering(seed):
    rng = np.random.default_rng(seed)
    gold, pred = [], []
    n = int(rng.integers(1, 7))
    for _ in range(int(rng.integers(1, 5))):
        gold.append(list(rng.integers(0, n + 1, size=n)))
        pred.append(list(rng.integers(0, n + 1, size=n)))
    m = parse_metrics(pred, gold)
    assert all(0.0 <= v <= 1.0 for v in m.values())
    # holds when sentences share a length; token weighting can break it otherwise
    assert m["exact_match"] <= m["uas"]


def test_exact_can_exceed_uas_across_lengths():
    gold = [[0], [0] * 10]
    pred = [[0], [2, 3, 4, 5, 6, 7, 8, 9, 10, 1]]
    assert metric_exact_match(pred, gold) == 0.5
    assert metric_uas(pred, gold) == pytest.approx(1 / 11, abs=1e-15)

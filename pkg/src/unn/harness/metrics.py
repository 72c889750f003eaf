"""Parsing metrics over corpora of head lists (0 = root)."""

from __future__ import annotations

import numpy as np


def _check(pred, gold):
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted sentences but {len(gold)} gold")
    if len(gold) == 0:
        raise ValueError("metric undefined on an empty corpus")
    for i, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise ValueError(f"sentence {i}: {len(p)} predicted heads but {len(g)} gold")


def metric_uas(pred, gold) -> float:
    """Fraction of tokens whose predicted head equals the gold head."""
    _check(pred, gold)
    correct = sum(int(np.sum(np.asarray(p) == np.asarray(g))) for p, g in zip(pred, gold))
    total = sum(len(g) for g in gold)
    if total == 0:
        raise ValueError("metric undefined on a corpus without tokens")
    return correct / total


def modifier_sets(heads) -> dict:
    """Map each head position (0 = root) to the set of its modifiers."""
    out: dict = {}
    for m, h in enumerate(heads, start=1):
        out.setdefault(int(h), set()).add(m)
    return out


def metric_modifier_list(pred, gold) -> float:
    """Share of gold heads (root included) whose modifier set is predicted exactly."""
    _check(pred, gold)
    correct = total = 0
    for p, g in zip(pred, gold):
        ps, gs = modifier_sets(p), modifier_sets(g)
        for h, mods in gs.items():
            total += 1
            correct += ps.get(h, set()) == mods
    return correct / total


def metric_exact_match(pred, gold) -> float:
    _check(pred, gold)
    return sum(list(p) == list(g) for p, g in zip(pred, gold)) / len(gold)


def parse_metrics(pred, gold) -> dict:
    return {
        "uas": metric_uas(pred, gold),
        "modifier_list": metric_modifier_list(pred, gold),
        "exact_match": metric_exact_match(pred, gold),
    }

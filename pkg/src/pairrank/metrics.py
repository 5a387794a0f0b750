"""The five list-ranking metrics plus screening curves.

All metrics operate on the strength convention (higher = stronger binding)
and only depend on score order, never magnitude. Aggregates are means of
per-list quantities, expressed as percentages except Kendall's tau.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ListRecord:
    list_id: int
    tau: float
    concordant: int
    discordant: int
    exact_match: bool
    top1_hit: bool
    pairwise_accuracy: float
    pairwise_auc: float


@dataclass
class EvalReport:
    records: list
    fra: float
    kendall: float
    pra: float
    pau: float
    p_at_1: float

    @property
    def n_lists(self):
        return len(self.records)

    def summary_rows(self):
        return [("n_lists", float(self.n_lists)), ("FRA", self.fra),
                ("Ktau", self.kendall), ("PRA", self.pra),
                ("PAU", self.pau), ("P@1", self.p_at_1)]


def predicted_permutation(scores):
    """Strongest-first order of predicted scores; ties by original index."""
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def kendall_tau(scores, strengths):
    r = np.asarray(scores, dtype=float)
    s = np.asarray(strengths, dtype=float)
    k = len(r)
    if k < 2:
        raise ValueError("Kendall tau needs at least 2 items")
    cp = dp = 0
    for u in range(k):
        for v in range(u + 1, k):
            prod = (r[u] - r[v]) * (s[u] - s[v])
            if prod > 0:
                cp += 1
            elif prod < 0:
                dp += 1
    return (cp - dp) / (k * (k - 1) / 2), cp, dp


def _pair_counts(scores, strengths):
    """(correct, total, auc_credit) over directed stronger-than pairs."""
    r = np.asarray(scores, dtype=float)
    s = np.asarray(strengths, dtype=float)
    k = len(r)
    correct = 0
    credit = 0.0
    total = k * (k - 1) // 2
    for u in range(k):
        for v in range(u + 1, k):
            hi, lo = (u, v) if s[u] > s[v] else (v, u)
            margin = r[hi] - r[lo]
            if margin > 0:
                correct += 1
                credit += 1.0
            elif margin == 0:
                credit += 0.5
    return correct, total, credit


def evaluate_lists(list_ids, scores_per_list, strengths_per_list):
    """Per-list records and the five aggregates."""
    records = []
    for lid, r, s in zip(list_ids, scores_per_list, strengths_per_list):
        tau, cp, dp = kendall_tau(r, s)
        pred = predicted_permutation(r)
        true = predicted_permutation(s)
        correct, total, credit = _pair_counts(r, s)
        records.append(ListRecord(
            list_id=lid, tau=tau, concordant=cp, discordant=dp,
            exact_match=bool(np.array_equal(pred, true)),
            top1_hit=bool(pred[0] == true[0]),
            pairwise_accuracy=correct / total,
            pairwise_auc=credit / total))
    if not records:
        raise ValueError("no lists to evaluate")
    return EvalReport(
        records=records,
        fra=100.0 * np.mean([r.exact_match for r in records]),
        kendall=float(np.mean([r.tau for r in records])),
        pra=100.0 * np.mean([r.pairwise_accuracy for r in records]),
        pau=100.0 * np.mean([r.pairwise_auc for r in records]),
        p_at_1=100.0 * np.mean([r.top1_hit for r in records]))


def fra(report):
    return report.fra


def pra(report):
    return report.pra


def pau(report):
    return report.pau


def p_at_1(report):
    return report.p_at_1


def screening_curves(global_order, true_strengths, top_m):
    """Hit-rate and top-m recall as functions of candidates screened.

    ``global_order`` is the ranked candidate-id list; ``true_strengths`` maps
    id -> noiseless strength. Returns (hit_rate, recall) arrays of length N.
    """
    ids = list(global_order)
    n = len(ids)
    if top_m > n:
        raise ValueError("top_m exceeds the candidate count")
    by_truth = sorted(true_strengths, key=lambda c: (-true_strengths[c], c))
    best = by_truth[0]
    top_set = set(by_truth[:top_m])
    hit = np.zeros(n)
    recall = np.zeros(n)
    found = 0
    seen_best = False
    for j, cid in enumerate(ids):
        if cid == best:
            seen_best = True
        if cid in top_set:
            found += 1
        hit[j] = 1.0 if seen_best else 0.0
        recall[j] = found / top_m
    return hit, recall

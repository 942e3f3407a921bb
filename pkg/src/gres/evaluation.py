"""Splitting, full-catalog ranking and HR / NDCG / MRR at K."""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

KS = (5, 10, 20, 50)
METRICS = ("HR", "NDCG", "MRR")


@dataclass(frozen=True)
class Split:
    train: tuple
    val: tuple
    test: tuple
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def items_of(self, part: str) -> dict:
        out = defaultdict(set)
        for x in getattr(self, part):
            out[x.user].add(x.target)
        return out


def split_dataset(interactions, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Split:
    """Random per-interaction split in which every user keeps a training interaction.

    One interaction per user is pinned to train first; validation and test are
    then filled from the rest. A user with a single interaction therefore
    never appears in validation or test.
    """
    inter = sorted((x for x in interactions if x.domain == "A"), key=lambda x: (x.user, x.target))
    n = len(inter)
    if n < 10:
        raise ValueError(f"split_dataset: need at least 10 interactions, got {n}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split_dataset: ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))

    by_user = defaultdict(list)
    for k, x in enumerate(inter):
        by_user[x.user].append(k)
    pinned = set()
    for u in sorted(by_user):
        ks = by_user[u]
        pinned.add(ks[int(rng.integers(len(ks)))])
        if len(ks) == 1:
            log.info("user %d has a single interaction; kept in train", u)
    free = np.array([k for k in range(n) if k not in pinned], dtype=np.int64)
    free = free[rng.permutation(len(free))]
    if len(free) < n_val + n_test:
        log.warning("split_dataset: only %d free interactions for %d held-out slots",
                    len(free), n_val + n_test)
    val = sorted(free[:n_val].tolist())
    test = sorted(free[n_val:n_val + n_test].tolist())
    held = set(val) | set(test)
    train = [k for k in range(n) if k not in held]
    pick = lambda ks: tuple(inter[k] for k in ks)  # noqa: E731
    return Split(pick(train), pick(val), pick(test), tuple(ratios), seed)


# ---------------------------------------------------------------- ranking and metrics

def rank_candidates(scores, exclude=(), items=None) -> list:
    """Item ids by descending score, ties by ascending id, excluded ids removed."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores)) if items is None else np.asarray(items)
    keep = ~np.isin(ids, list(exclude))
    ids, s = ids[keep], scores[keep]
    order = np.lexsort((ids, -s))
    return ids[order].tolist()


def hr_at_k(ranked, truth, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    return 1.0 if truth in ranked[:k] else 0.0


def ndcg_at_k(ranked, truth, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    top = list(ranked[:k])
    return 1.0 / np.log2(top.index(truth) + 2) if truth in top else 0.0


def mrr_at_k(ranked, truth, k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    top = list(ranked[:k])
    return 1.0 / (top.index(truth) + 1) if truth in top else 0.0


def rank_of(scores: np.ndarray, candidate_mask: np.ndarray, truth: int) -> int:
    """1-based rank of ``truth`` among candidates, by counting (no sort)."""
    s = scores[truth]
    ids = np.arange(len(scores))
    ahead = candidate_mask & ((scores > s) | ((scores == s) & (ids < truth)))
    return int(ahead.sum()) + 1


def metrics_from_rank(rank: int, k: int) -> tuple:
    if rank > k:
        return 0.0, 0.0, 0.0
    return 1.0, 1.0 / np.log2(rank + 1), 1.0 / rank


@dataclass
class MetricsReport:
    values: dict  # K -> {"HR": .., "NDCG": .., "MRR": ..}
    n: int = 0
    meta: dict = field(default_factory=dict)

    def __getitem__(self, key) -> float:
        metric, k = key
        return self.values[k][metric]

    def hr(self, k: int) -> float:
        return self.values[k]["HR"]

    def violations(self) -> list:
        bad = []
        ks = sorted(self.values)
        for k in ks:
            v = self.values[k]
            for m in METRICS:
                if not 0.0 <= v[m] <= 1.0:
                    bad.append(f"{m}@{k}={v[m]} outside [0, 1]")
            if v["NDCG"] > v["HR"] + 1e-12:
                bad.append(f"NDCG@{k} > HR@{k}")
            if v["MRR"] > v["HR"] + 1e-12:
                bad.append(f"MRR@{k} > HR@{k}")
        for a, b in zip(ks, ks[1:]):
            if self.values[b]["HR"] < self.values[a]["HR"] - 1e-12:
                bad.append(f"HR@{b} < HR@{a}")
        return bad

    def check(self) -> None:
        bad = self.violations()
        if bad:
            raise AssertionError("metric invariants violated: " + "; ".join(bad))

    def columns(self) -> list:
        return [f"{m}@{k}" for m in METRICS for k in sorted(self.values)]

    def row(self) -> list:
        return [self.values[k][m] for m in METRICS for k in sorted(self.values)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "K", "value"])
            for m in METRICS:
                for k in sorted(self.values):
                    w.writerow([m, k, repr(self.values[k][m])])


def _known(split: Split, part: str) -> dict:
    known = split.items_of("train")
    if part == "test":
        for u, its in split.items_of("val").items():
            known[u] |= its
    return known


def evaluate(model, split: Split, part: str = "test", ks=KS, verify: bool = False,
             batch_users: int = 64) -> MetricsReport:
    """Average per-interaction metrics over ``split.<part>`` with full-catalog ranking.

    Candidates for a held-out (user, item) are all items except the user's
    training items, their validation items when scoring test, and their other
    held-out items in the same part. ``model.score_all(users)`` must return a
    ``(len(users), n_items)`` score matrix. With ``verify`` the first 50
    interactions are recomputed through sorted lists and must match exactly.
    """
    held = list(getattr(split, part))
    known = _known(split, part)
    same = split.items_of(part)
    users = sorted({x.user for x in held})
    sums = {k: np.zeros(3) for k in ks}
    checked = 0
    for start in range(0, len(users), batch_users):
        chunk = users[start:start + batch_users]
        scores = np.asarray(model.score_all(chunk), dtype=np.float64)
        row = {u: r for r, u in enumerate(chunk)}
        n_items = scores.shape[1]
        for x in (x for x in held if x.user in row):
            s = scores[row[x.user]]
            mask = np.ones(n_items, dtype=bool)
            excl = list(known.get(x.user, ())) + [i for i in same[x.user] if i != x.target]
            mask[excl] = False
            r = rank_of(s, mask, x.target)
            for k in ks:
                vals = metrics_from_rank(r, k)
                sums[k] += vals
                if verify and checked < 50:
                    ranked = rank_candidates(s, excl)
                    brute = (hr_at_k(ranked, x.target, k), ndcg_at_k(ranked, x.target, k),
                             mrr_at_k(ranked, x.target, k))
                    if brute != vals:
                        raise AssertionError(f"metric fast path {vals} != brute force {brute} for {x}")
            checked += 1
    n = max(len(held), 1)
    values = {k: dict(zip(METRICS, (sums[k] / n).tolist())) for k in ks}
    report = MetricsReport(values, len(held))
    report.check()
    return report


# ---------------------------------------------------------------- baselines

class PopularityModel:
    """Scores every item by its global training purchase count."""

    def __init__(self, split: Split, n_items: int):
        self.counts = np.zeros(n_items)
        for x in split.train:
            self.counts[x.target] += x.count

    def score_all(self, users) -> np.ndarray:
        return np.tile(self.counts, (len(users), 1))


def popularity_baseline(split: Split, n_items: int) -> PopularityModel:
    return PopularityModel(split, n_items)


class RandomModel:
    def __init__(self, n_items: int, seed: int = 0):
        self.n_items = n_items
        self.rng = np.random.default_rng(seed)

    def score_all(self, users) -> np.ndarray:
        return self.rng.random((len(users), self.n_items))


class OracleModel:
    """Scores held-out items above everything else (sanity upper bound)."""

    def __init__(self, split: Split, n_items: int, part: str = "test"):
        self.truth = split.items_of(part)
        self.n_items = n_items

    def score_all(self, users) -> np.ndarray:
        out = np.zeros((len(users), self.n_items))
        for r, u in enumerate(users):
            out[r, list(self.truth.get(u, ()))] = 1.0
        return out

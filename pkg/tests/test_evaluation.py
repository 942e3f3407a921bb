import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gres.data import Interaction
from gres.evaluation import (KS, METRICS, MetricsReport, OracleModel, RandomModel, evaluate, hr_at_k,
                             metrics_from_rank, mrr_at_k, ndcg_at_k, popularity_baseline, rank_candidates,
                             rank_of, split_dataset)


def purchases(n_users=20, per_user=5, n_items=40, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for u in range(n_users):
        for i in rng.choice(n_items, per_user, replace=False):
            out.append(Interaction(u, int(i), int(rng.integers(1, 4)), "A"))
    return out


# ---------------------------------------------------------------- split

def test_split_sizes():
    s = split_dataset(purchases(), seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (80, 10, 10)


def test_split_is_deterministic_per_seed():
    data = purchases()
    assert split_dataset(data, seed=4) == split_dataset(data, seed=4)
    assert split_dataset(data, seed=4) != split_dataset(data, seed=5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_split_partitions_without_leakage(seed, per_user):
    data = purchases(n_users=15, per_user=per_user, seed=seed % 1000)
    s = split_dataset(data, seed=seed)
    parts = [set(s.train), set(s.val), set(s.test)]
    assert sum(map(len, parts)) == len(data)
    assert set().union(*parts) == set(data)
    train_pairs = {(x.user, x.target) for x in s.train}
    assert not train_pairs & {(x.user, x.target) for x in s.test}
    train_users = {x.user for x in s.train}
    assert {x.user for x in s.test} <= train_users and {x.user for x in s.val} <= train_users


def test_single_interaction_user_stays_in_train():
    data = purchases(n_users=12) + [Interaction(99, 0, 1, "A")]
    s = split_dataset(data, seed=0)
    assert Interaction(99, 0, 1, "A") in s.train


def test_split_ignores_domain_b_and_needs_ten_records():
    data = purchases() + [Interaction(0, 0, 1, "B")]
    s = split_dataset(data)
    assert all(x.domain == "A" for x in s.train + s.val + s.test)
    with pytest.raises(ValueError, match="at least 10"):
        split_dataset(purchases(n_users=1, per_user=5))


# ---------------------------------------------------------------- ranking and metrics

def test_rank_by_score():
    assert rank_candidates([0.9, 0.1]) == [0, 1]


def test_ties_break_by_ascending_id():
    assert rank_candidates([0.5, 0.7, 0.5, 0.5]) == [1, 0, 2, 3]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.data())
def test_exclusion_removes_candidates(scores, data):
    excl = data.draw(st.sets(st.integers(0, len(scores) - 1)))
    ranked = rank_candidates(scores, excl)
    assert set(ranked) == set(range(len(scores))) - excl


def test_metrics_at_rank_one():
    for k in KS:
        assert (hr_at_k([4, 1, 2], 4, k), ndcg_at_k([4, 1, 2], 4, k), mrr_at_k([4, 1, 2], 4, k)) == (1, 1, 1)


def test_metrics_at_rank_three():
    ranked = [9, 8, 7, 6, 5, 4, 3]
    assert hr_at_k(ranked, 7, 5) == 1.0
    assert ndcg_at_k(ranked, 7, 5) == 0.5
    assert mrr_at_k(ranked, 7, 5) == pytest.approx(1 / 3)


def test_metrics_outside_the_cutoff_are_zero():
    ranked = [9, 8, 7, 6, 5, 4, 3]
    assert (hr_at_k(ranked, 3, 5), ndcg_at_k(ranked, 3, 5), mrr_at_k(ranked, 3, 5)) == (0, 0, 0)


def test_k_must_be_positive():
    for fn in (hr_at_k, ndcg_at_k, mrr_at_k):
        with pytest.raises(ValueError):
            fn([1], 1, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=40), st.data())
def test_counting_rank_equals_sorted_rank(raw, data):
    scores = np.array(raw, dtype=float)  # small integer range forces ties
    truth = data.draw(st.integers(0, len(scores) - 1))
    excl = data.draw(st.sets(st.integers(0, len(scores) - 1)).filter(lambda e: truth not in e))
    mask = np.ones(len(scores), dtype=bool)
    mask[list(excl)] = False
    ranked = rank_candidates(scores, excl)
    r = rank_of(scores, mask, truth)
    assert r == ranked.index(truth) + 1
    for k in KS:
        assert metrics_from_rank(r, k) == (hr_at_k(ranked, truth, k), ndcg_at_k(ranked, truth, k),
                                           mrr_at_k(ranked, truth, k))


# ---------------------------------------------------------------- reports and models

@pytest.fixture(scope="module")
def split_and_size(small_ds):
    return split_dataset(small_ds.interactions, seed=0), small_ds.n_items


def test_oracle_hits_everything(split_and_size):
    split, n = split_and_size
    rep = evaluate(OracleModel(split, n), split, verify=True)
    for k in KS:
        assert rep.hr(k) == 1.0


def test_random_model_hits_at_chance(split_and_size):
    split, n = split_and_size
    known = split.items_of("train")
    for u, its in split.items_of("val").items():
        known[u] |= its
    same = split.items_of("test")
    k = 10
    # exact chance level per held-out interaction: K over its candidate count
    p = np.array([min(k, n - len(known[x.user]) - len(same[x.user]) + 1) /
                  (n - len(known[x.user]) - len(same[x.user]) + 1) for x in split.test])
    hrs = [evaluate(RandomModel(n, seed), split, ks=(k,)).hr(k) for seed in range(5)]
    sigma = math.sqrt((p * (1 - p)).sum() / 5) / len(p)
    assert abs(np.mean(hrs) - p.mean()) < 3 * sigma


def test_popularity_puts_the_top_item_first(split_and_size):
    split, n = split_and_size
    model = popularity_baseline(split, n)
    top = int(np.argmax(model.counts))
    scores = model.score_all([0, 5, 9])
    for row in scores:
        assert rank_candidates(row)[0] == top
    np.testing.assert_array_equal(scores, popularity_baseline(split, n).score_all([0, 5, 9]))


def test_report_invariants_and_layout(split_and_size, tmp_path):
    split, n = split_and_size
    rep = evaluate(popularity_baseline(split, n), split, verify=True)
    assert rep.violations() == []
    assert rep.columns() == [f"{m}@{k}" for m in METRICS for k in KS]
    assert len(rep.row()) == 12
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "metric,K,value" and len(lines) == 13


def test_broken_report_is_flagged():
    vals = {5: {"HR": 0.5, "NDCG": 0.6, "MRR": 0.1}, 10: {"HR": 0.4, "NDCG": 0.3, "MRR": 0.2}}
    rep = MetricsReport(vals)
    bad = rep.violations()
    assert "NDCG@5 > HR@5" in bad and "HR@10 < HR@5" in bad
    with pytest.raises(AssertionError, match="metric invariants violated"):
        rep.check()

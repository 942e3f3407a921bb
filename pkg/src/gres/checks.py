"""Self-checks run by ``gres verify``: gradients, normalization, metrics, trees.

Each check returns a :class:`CheckResult`; none of them raises on failure.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import DataSection, GraphConfig, RunConfig, TextConfig, TrainSection, TreeConfig
from .data import GenConfig, generate_synthetic
from .evaluation import (hr_at_k, metrics_from_rank, mrr_at_k, ndcg_at_k, rank_candidates,
                         rank_of, split_dataset)
from .model import sample_training_rows
from .tree2vec import gcn_normalize
from .treegraph import TMS, build_tg, deserialize, serialize_tms_dfs, tg_adjacency


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def micro_config(seed: int = 0) -> RunConfig:
    """A five-user run small enough for finite-difference checks."""
    return RunConfig(
        seed=seed,
        data=DataSection(n_common_users=4, n_unique_users=1, n_items=12, n_categories=4,
                         n_dishes=6, sparsity_A=0.3, latent_dim=3, vocab_size=40, doc_len=(8, 12),
                         max_dishes_per_user=2, max_recipe_categories=2, max_items_per_category=2),
        text=TextConfig(dim=8, epochs=5),
        graph=GraphConfig(dim=8, walk_len=8, walks_per_node=2, window=2, epochs=5),
        tree=TreeConfig(feat_dim=8, gcn_hidden=6, gcn_out=6, d_model=8, heads=2, layers=1, ff_dim=8),
        train=TrainSection(max_epochs=10, patience=10),
        seeds=(seed,))


def _timed(name, fn) -> CheckResult:
    clock = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, ok, detail, time.perf_counter() - clock)


def end_to_end_grad_check(seed: int = 0, h: float = 1e-5, n_coords: int = 400) -> nx.GradCheckResult:
    """Gradient check of the full model's training loss on the micro run."""
    from .pipeline import build_model, prepare

    cfg = micro_config(seed)
    prep = prepare(cfg)
    model = build_model(prep, cfg, "full")
    users, items, labels = sample_training_rows(prep.split, prep.ds.n_items, 4,
                                                np.random.default_rng(seed))
    # nudge every parameter off zero so ReLU kinks and zero biases are not hit exactly
    rng = np.random.default_rng([seed, 7])
    for t in model.params.tensors():
        t.data += rng.normal(0.0, 0.05, t.shape)

    def loss():
        return nx.bce_with_logits(model.logits(users, items), labels)

    return nx.grad_check_report(loss, model.params.tensors(), h=h, n_coords=n_coords, seed=seed)


def check_gradients(seed: int = 0) -> CheckResult:
    def run():
        res = end_to_end_grad_check(seed)
        ok = res.max_error < 1e-4 and res.checked >= 0.9 * (res.checked + res.skipped)
        return ok, (f"max relative error {res.max_error:.2e} (limit 1e-4) over {res.checked} "
                    f"coordinates, {res.skipped} skipped at ReLU kinks")
    return _timed("end-to-end gradient", run)


def brute_gcn_normalize(m: np.ndarray) -> np.ndarray:
    n = len(m)
    mt = [[m[i][j] + (1.0 if i == j else 0.0) for j in range(n)] for i in range(n)]
    deg = [sum(row) for row in mt]
    return np.array([[mt[i][j] / (deg[i] ** 0.5 * deg[j] ** 0.5) for j in range(n)] for i in range(n)])


def random_lower_triangular(rng, n: int) -> np.ndarray:
    m = np.tril(rng.random((n, n)), k=-1)
    m[rng.random((n, n)) < 0.5] = 0.0
    return m


def check_gcn_normalize(trials: int = 100, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            m = random_lower_triangular(rng, int(rng.integers(1, 11)))
            worst = max(worst, float(np.max(np.abs(gcn_normalize(m) - brute_gcn_normalize(m)))))
        return worst <= 1e-12, f"{trials} matrices, max abs difference {worst:.1e}"
    return _timed("gcn_normalize vs brute force", run)


def check_metric_paths(lists: int = 50, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        for t in range(lists):
            n = int(rng.integers(2, 60))
            # coarse scores force ties so the id tie-break is exercised
            scores = rng.integers(0, 6, n).astype(float) if t % 2 else rng.random(n)
            truth = int(rng.integers(n))
            excl = [i for i in range(n) if i != truth and rng.random() < 0.2]
            mask = np.ones(n, dtype=bool)
            mask[excl] = False
            ranked = rank_candidates(scores, excl)
            r = rank_of(scores, mask, truth)
            for k in (1, 5, 10, 20, 50):
                fast = metrics_from_rank(r, k)
                brute = (hr_at_k(ranked, truth, k), ndcg_at_k(ranked, truth, k), mrr_at_k(ranked, truth, k))
                if fast != brute:
                    return False, f"list {t}, K={k}: fast {fast} != brute {brute}"
        return True, f"{lists} lists identical at K in 1, 5, 10, 20, 50"
    return _timed("metric fast path vs brute force", run)


def random_tms(rng, dish: int = 0) -> TMS:
    cats = rng.choice(50, size=int(rng.integers(1, 5)), replace=False)
    return TMS(dish, tuple((int(c), tuple(int(i) for i in rng.choice(
        100, size=int(rng.integers(1, 5)), replace=False))) for c in cats))


def check_tms_round_trip(trials: int = 1000, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        for t in range(trials):
            tms = random_tms(rng, int(rng.integers(0, 1000)))
            if deserialize(serialize_tms_dfs(tms)) != tms:
                return False, f"round trip changed TMS {t}"
        n_tg = 0
        for s in range(5):
            ds = generate_synthetic(GenConfig(n_common_users=40, n_unique_users=4, n_items=30,
                                              n_categories=6, n_dishes=25, rng_seed=seed + s))
            for u in ds.common_users:
                m = tg_adjacency(build_tg(u, ds))
                if np.any(np.triu(m) != 0):
                    return False, f"TG of user {u} is not strictly lower-triangular"
                n_tg += 1
        return True, f"{trials} random TMSs round-trip; {n_tg} TG adjacencies strictly lower-triangular"
    return _timed("TMS DFS round trip", run)


def check_split(seed: int = 0) -> CheckResult:
    def run():
        ds = generate_synthetic(GenConfig(n_common_users=30, n_unique_users=5, n_items=40,
                                          n_categories=8, n_dishes=20, rng_seed=seed))
        sp = split_dataset(ds.interactions, seed=seed)
        train = {(x.user, x.target) for x in sp.train}
        leak = [(x.user, x.target) for x in sp.test + sp.val if (x.user, x.target) in train]
        orphan = [x.user for x in sp.test if x.user not in {y.user for y in sp.train}]
        ok = not leak and not orphan
        return ok, f"{len(sp.train)}/{len(sp.val)}/{len(sp.test)} split, {len(leak)} leaks, {len(orphan)} test-only users"
    return _timed("split leakage", run)


def check_config_round_trip() -> CheckResult:
    def run():
        cfg = micro_config(3)
        return RunConfig.from_yaml(cfg.to_yaml()) == cfg, "parse(serialize(cfg)) == cfg"
    return _timed("config round trip", run)


def run_all(seed: int = 0) -> list:
    return [check_gradients(seed), check_gcn_normalize(seed=seed), check_metric_paths(seed=seed),
            check_tms_round_trip(seed=seed), check_split(seed), check_config_round_trip()]

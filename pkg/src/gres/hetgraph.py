"""Domain-A heterogeneous graph and its node2vec embedding.

Nodes are users, categories and items. Same-kind edges come from thresholded
document similarity; cross-kind edges (user-item, user-category,
category-item) come from max-normalized order counts.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .data import Dataset, EntityId, Kind, category, item, user
from .numerics import AdamState, adam_step

EDGE_TYPES = ("user-user", "item-item", "category-category",
              "user-item", "user-category", "category-item")
_KIND_RANK = {Kind.USER: 0, Kind.CATEGORY: 1, Kind.ITEM: 2, Kind.DISH: 3}


def _order(a: EntityId, b: EntityId) -> tuple:
    return (a, b) if (_KIND_RANK[a.kind], a.index) <= (_KIND_RANK[b.kind], b.index) else (b, a)


def edge_type(a: EntityId, b: EntityId) -> str:
    a, b = _order(a, b)
    return f"{a.kind.value}-{b.kind.value}"


class Edge(NamedTuple):
    src: EntityId
    dst: EntityId
    weight: float
    type: str


def make_edge(a: EntityId, b: EntityId, weight: float) -> Edge:
    a, b = _order(a, b)
    return Edge(a, b, float(weight), f"{a.kind.value}-{b.kind.value}")


# ---------------------------------------------------------------- edge rules

@dataclass
class SimilarityMap:
    keys: list
    values: np.ndarray  # symmetric, diagonal zeroed and ignored


def similarity_matrix(vectors, keys=None, inversion: bool = True) -> SimilarityMap:
    """Min-max normalized pairwise Euclidean distances, optionally inverted.

    ``vectors`` is either a mapping key -> vector (then ``keys`` selects and
    orders the entities) or an ``(n, d)`` array. With ``inversion`` the value
    is ``1 - normalized distance`` so that close entities get large weights.
    """
    if keys is None:
        keys = list(range(len(vectors))) if isinstance(vectors, np.ndarray) else list(vectors)
    mat = vectors if isinstance(vectors, np.ndarray) else np.stack([vectors[k] for k in keys])
    if len(keys) < 2:
        raise ValueError("similarity_matrix: need at least two entities")
    d = pdist(np.asarray(mat, dtype=np.float64), metric="euclidean")
    lo, hi = d.min(), d.max()
    if hi - lo <= 0:
        raise ValueError("degenerate similarity (zero range)")
    norm = (d - lo) / (hi - lo)
    vals = squareform(1.0 - norm if inversion else norm)
    np.fill_diagonal(vals, 0.0)
    return SimilarityMap(list(keys), vals)


def threshold_edges(sim: SimilarityMap, alpha: float) -> list:
    """Keep pairs whose value is strictly above ``alpha``; the value becomes the weight."""
    if not 0 <= alpha < 1:
        raise ValueError(f"threshold_edges: alpha must be in [0, 1), got {alpha}")
    iu, ju = np.triu_indices(len(sim.keys), k=1)
    v = sim.values[iu, ju]
    keep = v > alpha
    out = []
    for i, j, w in zip(iu[keep], ju[keep], v[keep]):
        a, b = sim.keys[i], sim.keys[j]
        out.append(make_edge(a, b, w) if isinstance(a, EntityId) else (int(a), int(b), float(w)))
    return out


def interaction_edge_weights(interactions, pair_kind: str, item_category=None) -> list:
    """Order-count edges for ``user-item``, ``user-category`` or ``category-item``.

    user-item: count over the user's largest item count. user-category: counts
    summed per category, then divided by the user's largest category total.
    category-item: each item's total count over all users, divided by the
    largest total within its category.
    """
    inter = [x for x in interactions if x.domain == "A"]
    if pair_kind == "user-item":
        top = defaultdict(int)
        for x in inter:
            top[x.user] = max(top[x.user], x.count)
        return [make_edge(user(x.user), item(x.target), x.count / top[x.user]) for x in inter]
    if item_category is None:
        raise ValueError(f"interaction_edge_weights: {pair_kind} needs the item->category map")
    if pair_kind == "user-category":
        agg = defaultdict(int)
        for x in inter:
            agg[(x.user, item_category[x.target])] += x.count
        top = defaultdict(int)
        for (u, _), n in agg.items():
            top[u] = max(top[u], n)
        return [make_edge(user(u), category(c), n / top[u]) for (u, c), n in sorted(agg.items())]
    if pair_kind == "category-item":
        tot = defaultdict(int)
        for x in inter:
            tot[x.target] += x.count
        top = defaultdict(int)
        for i, n in tot.items():
            top[item_category[i]] = max(top[item_category[i]], n)
        return [make_edge(category(item_category[i]), item(i), n / top[item_category[i]])
                for i, n in sorted(tot.items())]
    raise ValueError(f"interaction_edge_weights: unknown pair kind {pair_kind!r}")


# ---------------------------------------------------------------- graph

@dataclass
class HeterogeneousGraph:
    nodes: list
    edges: list
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {n: k for k, n in enumerate(self.nodes)}

    def __len__(self) -> int:
        return len(self.nodes)

    def edges_of_type(self, kind: str) -> list:
        return [e for e in self.edges if e.type == kind]

    def isolated(self) -> list:
        touched = {e.src for e in self.edges} | {e.dst for e in self.edges}
        return [n for n in self.nodes if n not in touched]

    def csr(self) -> tuple:
        """Symmetric weighted adjacency as ``(indptr, indices, weights)``."""
        n = len(self.nodes)
        if not self.edges:
            return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
        s = np.array([self.index[e.src] for e in self.edges])
        d = np.array([self.index[e.dst] for e in self.edges])
        w = np.array([e.weight for e in self.edges])
        rows = np.concatenate([s, d])
        cols = np.concatenate([d, s])
        ww = np.concatenate([w, w])
        order = np.lexsort((cols, rows))
        rows, cols, ww = rows[order], cols[order], ww[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return indptr, cols, ww

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src", "dst", "type", "weight"])
            for e in self.edges:
                w.writerow([str(e.src), str(e.dst), e.type, repr(e.weight)])

    @classmethod
    def from_csv(cls, path, nodes) -> "HeterogeneousGraph":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        edges = [Edge(EntityId.parse(r["src"]), EntityId.parse(r["dst"]), float(r["weight"]), r["type"])
                 for r in rows]
        return cls(list(nodes), edges)


def build_hg(ds: Dataset, docvecs, alpha: float = 0.05, interactions=None,
             similarity_inversion: bool = True) -> HeterogeneousGraph:
    """Assemble all six edge types.

    ``interactions`` defaults to every domain-A record; pass the training
    split to keep held-out purchases out of the graph.
    """
    if interactions is None:
        interactions = ds.interactions
    users = [user(u.id) for u in ds.users]
    cats = [category(c.id) for c in ds.categories]
    items = [item(i.id) for i in ds.items]
    edges = []
    for keys in (users, items, cats):
        # one pair has no range to min-max normalize, so two entities get no edge
        if len(keys) >= 3:
            sim = similarity_matrix(docvecs.vectors if hasattr(docvecs, "vectors") else docvecs,
                                    keys, inversion=similarity_inversion)
            edges += threshold_edges(sim, alpha)
    item_cat = [it.category for it in ds.items]
    for kind in ("user-item", "user-category", "category-item"):
        edges += interaction_edge_weights(interactions, kind, item_cat)
    return HeterogeneousGraph(users + cats + items, edges)


# ---------------------------------------------------------------- walks

def _edge_keys(indptr, indices, n) -> np.ndarray:
    rows = np.repeat(np.arange(n), np.diff(indptr))
    return np.sort(rows * n + indices)


def transition_probs(graph: HeterogeneousGraph, prev, cur, p: float = 1.0, q: float = 1.0) -> dict:
    """Explicit next-node distribution for a walker at ``cur`` that came from ``prev``.

    ``prev=None`` gives the first-order (weight-proportional) step.
    """
    indptr, indices, weights = graph.csr()
    c = graph.index[cur]
    nbrs = indices[indptr[c]:indptr[c + 1]]
    w = weights[indptr[c]:indptr[c + 1]].copy()
    if prev is not None:
        t = graph.index[prev]
        tn = set(indices[indptr[t]:indptr[t + 1]].tolist())
        for k, x in enumerate(nbrs):
            if x == t:
                w[k] /= p
            elif x not in tn:
                w[k] /= q
    w = w / w.sum()
    return {graph.nodes[x]: float(pk) for x, pk in zip(nbrs, w)}


def random_walks(graph: HeterogeneousGraph, walk_len: int = 40, walks_per_node: int = 10,
                 p: float = 1.0, q: float = 1.0, seed: int = 0) -> np.ndarray:
    """Biased second-order walks, ``-1``-padded, one row per walk.

    Steps are drawn weight-proportionally and accepted with probability
    ``bias / max_bias`` (``1/p`` to return, ``1`` to stay near the previous
    node, ``1/q`` to move outward), which samples the node2vec transition
    exactly. A walk starting at an isolated node has length 1.
    """
    n = len(graph.nodes)
    indptr, indices, weights = graph.csr()
    deg = np.diff(indptr)
    cum = np.cumsum(weights)
    start_cum = np.concatenate([[0.0], cum])[indptr[:-1]]
    total = np.bincount(np.repeat(np.arange(n), deg), weights=weights, minlength=n)
    keys = _edge_keys(indptr, indices, n)
    second_order = not (p == 1.0 and q == 1.0)
    max_bias = max(1.0 / p, 1.0, 1.0 / q)

    rng = np.random.default_rng(seed)
    starts = np.tile(np.arange(n), walks_per_node)
    walks = np.full((len(starts), walk_len), -1, dtype=np.int64)
    walks[:, 0] = starts

    def propose(cur):
        target = start_cum[cur] + rng.random(len(cur)) * total[cur]
        pos = np.searchsorted(cum, target, side="right")
        return indices[np.clip(pos, indptr[cur], indptr[cur + 1] - 1)]

    alive = deg[starts] > 0
    for step in range(1, walk_len):
        idx = np.flatnonzero(alive)
        if not len(idx):
            break
        cur = walks[idx, step - 1]
        nxt = propose(cur)
        if second_order and step >= 2:
            prev = walks[idx, step - 2]
            pending = np.arange(len(idx))
            while len(pending):
                x, t = nxt[pending], prev[pending]
                bias = np.where(x == t, 1.0 / p, 1.0 / q)
                ek = t * n + x
                hit = np.searchsorted(keys, ek)
                near = (hit < len(keys)) & (keys[np.minimum(hit, len(keys) - 1)] == ek)
                bias = np.where((x != t) & near, 1.0, bias)
                ok = rng.random(len(pending)) * max_bias < bias
                pending = pending[~ok]
                if len(pending):
                    nxt[pending] = propose(cur[pending])
        walks[idx, step] = nxt
    return walks


# ---------------------------------------------------------------- skip-gram

@dataclass
class NodeEmbeddings:
    dim: int
    vectors: dict
    untrained: list = field(default_factory=list)

    def __getitem__(self, key) -> np.ndarray:
        return self.vectors[key]

    def __contains__(self, key) -> bool:
        return key in self.vectors

    def matrix(self, keys) -> np.ndarray:
        return np.stack([self.vectors[k] for k in keys])

    def to_tensors(self) -> dict:
        return {str(k): v for k, v in self.vectors.items()}


def _cooccurrence(walks: np.ndarray, window: int, n: int) -> np.ndarray:
    counts = np.zeros(n * n)
    for off in range(1, window + 1):
        a, b = walks[:, :-off].reshape(-1), walks[:, off:].reshape(-1)
        ok = (a >= 0) & (b >= 0)
        a, b = a[ok], b[ok]
        counts += np.bincount(a * n + b, minlength=n * n)
        counts += np.bincount(b * n + a, minlength=n * n)
    return counts.reshape(n, n)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def node2vec_embed(graph: HeterogeneousGraph, dim: int = 64, walk_len: int = 40,
                   walks_per_node: int = 10, p: float = 1.0, q: float = 1.0, window: int = 5,
                   negatives: int = 5, epochs: int = 100, seed: int = 0,
                   lr: float = 0.05) -> NodeEmbeddings:
    """Skip-gram with negative sampling over node2vec walk windows.

    Every (center, context) occurrence in the walk windows is a positive;
    each positive draws ``negatives`` noise nodes from the walk-frequency^0.75
    distribution, resampled per epoch (Poissonized per center/noise pair). Because one pair always has the same
    score, the objective is accumulated on dense count matrices and optimized
    full-batch with Adam.
    """
    if not graph.nodes:
        raise ValueError("node2vec_embed: empty graph")
    n = len(graph.nodes)
    rng = np.random.default_rng(seed)
    walks = random_walks(graph, walk_len, walks_per_node, p, q, seed=int(rng.integers(2**63)))
    pos = _cooccurrence(walks, window, n)
    freq = np.bincount(walks[walks >= 0], minlength=n).astype(np.float64)
    noise = freq ** 0.75
    noise /= noise.sum()
    expected_neg = np.outer(pos.sum(axis=1) * negatives, noise)

    params = {"in": (rng.random((n, dim)) - 0.5) / dim,
              "out": (rng.random((n, dim)) - 0.5) / dim}
    state = AdamState(lr=lr)
    for _ in range(epochs):
        neg = rng.poisson(expected_neg).astype(np.float64)
        s = params["in"] @ params["out"].T
        sig = np.exp(_log_sigmoid(s))
        g = pos * (sig - 1.0) + neg * sig
        adam_step(params, {"in": g @ params["out"], "out": g.T @ params["in"]}, state)

    isolated = set(graph.isolated())
    vectors = {node: params["in"][k].copy() for k, node in enumerate(graph.nodes)}
    return NodeEmbeddings(dim, vectors, [nd for nd in graph.nodes if nd in isolated])

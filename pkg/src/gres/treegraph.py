"""Domain-B tree-shaped meta structures (dish -> categories -> items).

A user's tree-shaped graph (TG) merges the trees of every dish they sell:
shared categories and items become one node. Nodes are ordered dishes, then
categories, then items (by id within a level), so every edge points from an
earlier node to a later one and the adjacency is strictly lower-triangular.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, EntityId, Kind, category, dish, item

DISH_EDGE = "-"
ITEM_EDGE = "- -"
LEVEL = {Kind.DISH: 1, Kind.CATEGORY: 2, Kind.ITEM: 3}
EDGE_LEVEL = 0


@dataclass(frozen=True)
class TMS:
    dish: int
    children: tuple  # ((category, (item, ...)), ...) in recipe order

    def __post_init__(self):
        if not self.children:
            raise ValueError(f"TMS for dish {self.dish} has no categories")
        for c, items in self.children:
            if not items:
                raise ValueError(f"TMS for dish {self.dish}: category {c} has no items")

    @classmethod
    def from_recipe(cls, recipe) -> "TMS":
        return cls(recipe.dish, tuple((int(c), tuple(int(i) for i in its)) for c, its in recipe.components))

    @property
    def n_nodes(self) -> int:
        return 1 + len(self.children) + sum(len(its) for _, its in self.children)

    @property
    def n_edges(self) -> int:
        return self.n_nodes - 1


@dataclass
class TreeShapedGraph:
    owner: int
    tms_list: list
    node_order: list
    edges: dict  # (parent EntityId, child EntityId) -> weight
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if not self.tms_list:
            raise ValueError(f"TG of user {self.owner} has no TMS")
        self.index = {n: k for k, n in enumerate(self.node_order)}
        for (p, c) in self.edges:
            if self.index[p] >= self.index[c]:
                raise ValueError(f"TG of user {self.owner}: edge {p}->{c} violates node order")

    def __len__(self) -> int:
        return len(self.node_order)

    def nodes_of(self, kind: Kind) -> list:
        return [n for n in self.node_order if n.kind == kind]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parent", "child", "weight"])
            for (p, c), wt in sorted(self.edges.items(), key=lambda e: (self.index[e[0][0]], self.index[e[0][1]])):
                w.writerow([str(p), str(c), repr(wt)])


def _node_key(n: EntityId) -> tuple:
    return (LEVEL[n.kind], n.index)


def build_tg(user_id: int, ds: Dataset, edge_weight_rule: str = "max") -> TreeShapedGraph:
    """Merge the TMSs of every dish ``user_id`` sells into one weighted graph.

    Dish->category edges carry the dish's sales count over the user's largest
    dish count. Category->item edges carry how many of the user's recipes use
    the item under that category, over the largest such count for the
    category.
    """
    if edge_weight_rule != "max":
        raise ValueError(f"unknown edge weight rule {edge_weight_rule!r}")
    rec = ds.users[user_id]
    if not rec.is_common:
        raise ValueError(f"no TG for unique user {user_id}")
    sales = {x.target: x.count for x in ds.interactions if x.domain == "B" and x.user == user_id}
    if not sales:
        raise ValueError(f"common user {user_id} sells no dish (no TMS)")
    top = max(sales.values())
    tms_list = [TMS.from_recipe(ds.dishes[d].recipe) for d in sorted(sales)]

    edges = {}
    uses = defaultdict(int)
    for t in tms_list:
        for c, items in t.children:
            edges[(dish(t.dish), category(c))] = sales[t.dish] / top
            for i in items:
                uses[(c, i)] += 1
    cat_top = defaultdict(int)
    for (c, _), n in uses.items():
        cat_top[c] = max(cat_top[c], n)
    for (c, i), n in uses.items():
        edges[(category(c), item(i))] = n / cat_top[c]

    nodes = {p for p, _ in edges} | {c for _, c in edges}
    order = sorted(nodes, key=_node_key)
    return TreeShapedGraph(user_id, tms_list, order, edges)


def tg_adjacency(tg: TreeShapedGraph) -> np.ndarray:
    """``M[r, c]`` is the weight of the edge from parent ``node_order[c]`` to child ``node_order[r]``."""
    n = len(tg)
    m = np.zeros((n, n))
    for (p, c), w in tg.edges.items():
        m[tg.index[c], tg.index[p]] = w
    if np.any(np.triu(m) != 0):
        raise AssertionError(f"TG of user {tg.owner}: adjacency is not strictly lower-triangular")
    return m


# ---------------------------------------------------------------- DFS tokens

@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple  # EntityId nodes interleaved with DISH_EDGE / ITEM_EDGE markers
    levels: tuple

    def __len__(self) -> int:
        return len(self.tokens)

    def to_json(self) -> str:
        return json.dumps({"tokens": [t if isinstance(t, str) else str(t) for t in self.tokens],
                           "levels": list(self.levels)})

    @classmethod
    def from_json(cls, line: str) -> "TokenSequence":
        obj = json.loads(line)
        toks = tuple(t if t in (DISH_EDGE, ITEM_EDGE) else EntityId.parse(t) for t in obj["tokens"])
        return cls(toks, tuple(obj["levels"]))


def serialize_tms_dfs(tms: TMS) -> TokenSequence:
    """Depth-first walk in recipe order with an edge marker before every child."""
    toks, levels = [dish(tms.dish)], [1]
    for c, items in tms.children:
        toks += [DISH_EDGE, category(c)]
        levels += [EDGE_LEVEL, 2]
        for i in items:
            toks += [ITEM_EDGE, item(i)]
            levels += [EDGE_LEVEL, 3]
    return TokenSequence(tuple(toks), tuple(levels))


def deserialize(seq: TokenSequence) -> TMS:
    toks = list(seq.tokens)
    if len(toks) != len(seq.levels):
        raise ValueError("malformed sequence: tokens and levels differ in length")
    for t, lv in zip(toks, seq.levels):
        want = EDGE_LEVEL if isinstance(t, str) else LEVEL[t.kind]
        if lv != want:
            raise ValueError(f"malformed sequence: token {t} tagged with level {lv}")
    if not toks or isinstance(toks[0], str) or toks[0].kind != Kind.DISH:
        raise ValueError("malformed sequence: must start with a dish token")
    children = []
    k = 1
    while k < len(toks):
        marker = toks[k]
        nxt = toks[k + 1] if k + 1 < len(toks) else None
        if nxt is None or isinstance(nxt, str):
            raise ValueError(f"malformed sequence: dangling edge token at position {k}")
        if marker == DISH_EDGE and nxt.kind == Kind.CATEGORY:
            children.append((nxt.index, []))
        elif marker == ITEM_EDGE and nxt.kind == Kind.ITEM and children:
            children[-1][1].append(nxt.index)
        else:
            raise ValueError(f"malformed sequence: {marker!r} followed by {nxt} at position {k}")
        k += 2
    return TMS(toks[0].index, tuple((c, tuple(its)) for c, its in children))


def write_sequences(path, seqs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in seqs:
            fh.write(s.to_json() + "\n")


def read_sequences(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [TokenSequence.from_json(line) for line in fh if line.strip()]

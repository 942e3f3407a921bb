"""Tree2vec: spatial (GCN) and semantic (transformer) features of a user's TG.

The GCN runs on the normalized lower-triangular TG adjacency; the encoder
reads each TMS as a DFS token sequence whose position embedding is the node
level (dish, category, item, edge marker). A user's embedding is the sum of
its dish vectors from both parts, concatenated; an item's embedding is its
node row (GCN) concatenated with the mean of its token vectors (encoder).

Everything is batched over users: TGs become one block-diagonal sparse
adjacency and all sequences are padded into one tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .data import Dataset, Kind, category, dish, item
from .numerics import Params, Tensor
from .treegraph import (DISH_EDGE, ITEM_EDGE, LEVEL, TreeShapedGraph, build_tg,
                        serialize_tms_dfs, tg_adjacency)


@dataclass(frozen=True)
class TreeFlags:
    gcn: bool = True
    bert: bool = True
    unidirectional: bool = True
    fix_position: bool = True
    tree: bool = True
    flow: str = "down"

    def __post_init__(self):
        if not (self.gcn or self.bert):
            raise ValueError("Tree2vec needs at least one of the GCN and encoder parts")
        if self.flow not in ("down", "up"):
            raise ValueError(f"flow must be 'down' or 'up', got {self.flow!r}")


VARIANTS = {
    "full": TreeFlags(),
    "no-tree": TreeFlags(tree=False),
    "no-gcn": TreeFlags(gcn=False),
    "no-unidirectional": TreeFlags(unidirectional=False),
    "no-bert": TreeFlags(bert=False),
    "no-fix-position": TreeFlags(fix_position=False),
}

VARIANT_LABELS = {
    "full": "GReS",
    "no-tree": "GReS w/o tree",
    "no-gcn": "GReS w/o GCN",
    "no-unidirectional": "GReS w/o unidirectional",
    "no-bert": "GReS w/o BERT",
    "no-fix-position": "GReS w/o fix-position",
}


@dataclass(frozen=True)
class Tree2vecConfig:
    feat_dim: int = 64
    gcn_hidden: int = 64
    gcn_out: int = 64
    d_model: int = 64
    heads: int = 2
    layers: int = 2
    ff_dim: int = 128
    max_len: int = 128

    def tree_dim(self, flags: TreeFlags) -> int:
        return (self.gcn_out if flags.gcn else 0) + (self.d_model if flags.bert else 0)


# ---------------------------------------------------------------- GCN

def gcn_normalize(m: np.ndarray) -> np.ndarray:
    """``D^-1/2 (M + I) D^-1/2`` with ``D`` the row sums of ``M + I``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"gcn_normalize: expected a square matrix, got shape {m.shape}")
    if np.any(m < 0):
        raise ValueError("gcn_normalize: adjacency has negative entries")
    mt = m + np.eye(len(m))
    inv = 1.0 / np.sqrt(mt.sum(axis=1))
    return mt * inv[:, None] * inv[None, :]


def message_matrix(m: np.ndarray, flags: TreeFlags) -> np.ndarray:
    """Adjacency actually fed to the GCN under the direction flags."""
    if not flags.unidirectional:
        return m + m.T
    return m if flags.flow == "down" else m.T


def init_gcn(params: Params, cfg: Tree2vecConfig) -> None:
    params.glorot("gcn.W0", cfg.feat_dim, cfg.gcn_hidden)
    params.glorot("gcn.W1", cfg.gcn_hidden, cfg.gcn_out)


def gcn_layers(adj_hat, h0, params: Params) -> Tensor:
    """Two layers: ``relu(A H0 W0)`` then ``A H1 W1`` (linear output)."""
    w0, w1 = params["gcn.W0"], params["gcn.W1"]
    h0 = nx.tensor(h0)
    if h0.shape[1] != w0.shape[0]:
        raise nx.ShapeError(f"gcn_forward: features {h0.shape} vs W0 {w0.shape}")
    h1 = nx.relu(nx.spmm(adj_hat, h0) @ w0)
    return nx.spmm(adj_hat, h1 @ w1)


def gcn_forward(tg: TreeShapedGraph, node_features, params: Params,
                flags: TreeFlags = TreeFlags()) -> Tensor:
    """Per-node GCN output for one TG, rows in ``tg.node_order``."""
    adj = gcn_normalize(message_matrix(tg_adjacency(tg), flags))
    return gcn_layers(adj, node_features, params)


def gcn_aggregate(tg: TreeShapedGraph, node_vectors) -> tuple:
    """Sum of dish rows for the user, and the row of every item node."""
    node_vectors = np.asarray(getattr(node_vectors, "data", node_vectors))
    dishes = [tg.index[n] for n in tg.node_order if n.kind == Kind.DISH]
    g_user = node_vectors[dishes].sum(axis=0)
    g_items = {n.index: node_vectors[tg.index[n]] for n in tg.node_order if n.kind == Kind.ITEM}
    return g_user, g_items


# ---------------------------------------------------------------- encoder

class Vocabulary:
    """Token ids: padding, the two edge markers, then dishes, categories, items."""
    PAD, DISH_EDGE_ID, ITEM_EDGE_ID = 0, 1, 2

    def __init__(self, n_dishes: int, n_categories: int, n_items: int):
        self.offsets = {Kind.DISH: 3, Kind.CATEGORY: 3 + n_dishes, Kind.ITEM: 3 + n_dishes + n_categories}
        self.size = 3 + n_dishes + n_categories + n_items

    @classmethod
    def of(cls, ds: Dataset) -> "Vocabulary":
        return cls(ds.n_dishes, ds.n_categories, ds.n_items)

    def __len__(self) -> int:
        return self.size

    def id(self, token) -> int:
        if token == DISH_EDGE:
            return self.DISH_EDGE_ID
        if token == ITEM_EDGE:
            return self.ITEM_EDGE_ID
        return self.offsets[token.kind] + token.index


def init_encoder(params: Params, cfg: Tree2vecConfig, vocab_size: int, token_init=None) -> None:
    d = cfg.d_model
    if cfg.d_model % cfg.heads:
        raise ValueError("d_model must be divisible by heads")
    emb = params.rng.normal(0.0, 0.1, (vocab_size, d))
    if token_init is not None:
        rows, vecs = token_init
        emb[rows] = vecs
    params.add("enc.tok", emb)
    params.add("enc.level", params.rng.normal(0.0, 0.1, (4, d)))
    params.ones("enc.ln0.g", d)
    params.zeros("enc.ln0.b", d)
    for layer in range(cfg.layers):
        p = f"enc.{layer}."
        for w in ("q", "k", "v", "o"):
            params.glorot(p + w, d, d)
            params.zeros(p + "b" + w, d)
        params.ones(p + "ln1.g", d)
        params.zeros(p + "ln1.b", d)
        params.glorot(p + "ff1", d, cfg.ff_dim)
        params.zeros(p + "bf1", cfg.ff_dim)
        params.glorot(p + "ff2", cfg.ff_dim, d)
        params.zeros(p + "bf2", d)
        params.ones(p + "ln2.g", d)
        params.zeros(p + "ln2.b", d)


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = 1.0 / np.power(10000.0, (2 * (np.arange(d) // 2)) / d)
    ang = pos * rate[None, :]
    out = np.zeros((length, d))
    out[:, 0::2] = np.sin(ang[:, 0::2])
    out[:, 1::2] = np.cos(ang[:, 1::2])
    return out


def pad_sequences(seqs) -> tuple:
    """``(ids, levels, mask)`` arrays of shape ``(n, T)`` from ``(ids, levels)`` pairs."""
    t = max(len(ids) for ids, _ in seqs)
    ids = np.zeros((len(seqs), t), dtype=np.int64)
    levels = np.zeros((len(seqs), t), dtype=np.int64)
    mask = np.zeros((len(seqs), t), dtype=bool)
    for k, (a, b) in enumerate(seqs):
        ids[k, :len(a)] = a
        levels[k, :len(b)] = b
        mask[k, :len(a)] = True
    return ids, levels, mask


def position_vectors(levels, params: Params, fix_position: bool = True):
    """Per-token position term: the level table row, or sinusoidal offsets when not fixed."""
    levels = np.asarray(levels)
    if fix_position:
        return nx.embedding(params["enc.level"], levels)
    n, t = levels.shape
    d = params["enc.level"].shape[1]
    return np.broadcast_to(sinusoidal_positions(t, d)[None, :, :], (n, t, d))


def encode_batch(ids, levels, mask, params: Params, cfg: Tree2vecConfig, fix_position: bool = True,
                 attention: list | None = None) -> Tensor:
    """Transformer encoder over padded token batches; returns ``(n, T, d)``.

    Padded keys are excluded from attention. If ``attention`` is a list, the
    per-layer attention weights ``(n, heads, T, T)`` are appended to it.
    """
    n, t = ids.shape
    if t > cfg.max_len:
        raise ValueError(f"sequence length {t} exceeds the maximum of {cfg.max_len}")
    d, h = cfg.d_model, cfg.heads
    dk = d // h
    x = nx.embedding(params["enc.tok"], ids) + position_vectors(levels, params, fix_position)
    x = nx.layer_norm(x, params["enc.ln0.g"], params["enc.ln0.b"])
    key_bias = np.where(mask, 0.0, -1e9)[:, None, None, :]
    for layer in range(cfg.layers):
        p = f"enc.{layer}."

        def heads(z):
            return nx.transpose(nx.reshape(z, (n, t, h, dk)), (0, 2, 1, 3))

        q = heads(x @ params[p + "q"] + params[p + "bq"])
        k = heads(x @ params[p + "k"] + params[p + "bk"])
        v = heads(x @ params[p + "v"] + params[p + "bv"])
        scores = nx.mul(q @ nx.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dk)) + key_bias
        att = nx.softmax(scores, axis=-1)
        if attention is not None:
            attention.append(att.data)
        ctx = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (n, t, d))
        x = nx.layer_norm(x + (ctx @ params[p + "o"] + params[p + "bo"]),
                          params[p + "ln1.g"], params[p + "ln1.b"])
        ff = nx.relu(x @ params[p + "ff1"] + params[p + "bf1"]) @ params[p + "ff2"] + params[p + "bf2"]
        x = nx.layer_norm(x + ff, params[p + "ln2.g"], params[p + "ln2.b"])
    return x


def sequence_arrays(seq, vocab: Vocabulary) -> tuple:
    return (np.array([vocab.id(tok) for tok in seq.tokens], dtype=np.int64),
            np.array(seq.levels, dtype=np.int64))


def encode_sequence(seq, params: Params, cfg: Tree2vecConfig, vocab: Vocabulary,
                    fix_position: bool = True) -> Tensor:
    """Per-token vectors ``(len(seq), d)`` for one token sequence."""
    if len(seq) > cfg.max_len:
        tms = seq.tokens[0]
        raise ValueError(f"overlong sequence ({len(seq)} > {cfg.max_len} tokens) for TMS of {tms}")
    ids, levels, mask = pad_sequences([sequence_arrays(seq, vocab)])
    return nx.reshape(encode_batch(ids, levels, mask, params, cfg, fix_position), (len(seq), cfg.d_model))


def bert_aggregate(seqs, encodings) -> tuple:
    """Sum of dish-token vectors; mean of each item's token vectors over occurrences."""
    b_user = None
    acc, cnt = {}, {}
    for seq, enc in zip(seqs, encodings):
        enc = np.asarray(getattr(enc, "data", enc))
        for tok, vec in zip(seq.tokens, enc):
            if isinstance(tok, str):
                continue
            if tok.kind == Kind.DISH:
                b_user = vec.copy() if b_user is None else b_user + vec
            elif tok.kind == Kind.ITEM:
                acc[tok.index] = acc.get(tok.index, 0.0) + vec
                cnt[tok.index] = cnt.get(tok.index, 0) + 1
    return b_user, {i: acc[i] / cnt[i] for i in acc}


# ---------------------------------------------------------------- per-user inputs

@dataclass
class UserTree:
    """Everything Tree2vec needs for one user, precomputed under fixed flags."""
    user: int
    nodes: list
    adj_hat: np.ndarray
    features: np.ndarray
    sequences: list  # (token ids, levels) arrays
    items: list  # item ids with a tree embedding, ascending
    item_node: dict = field(default_factory=dict)  # item -> node row
    dish_nodes: list = field(default_factory=list)
    dish_tokens: list = field(default_factory=list)  # (sequence, position)
    item_tokens: dict = field(default_factory=dict)  # item -> [(sequence, position)]


def _features(nodes, docvecs, dim: int) -> np.ndarray:
    return np.stack([docvecs[n] for n in nodes]) if nodes else np.zeros((0, dim))


def prepare_user(user_id: int, ds: Dataset, docvecs, vocab: Vocabulary, flags: TreeFlags,
                 tg: TreeShapedGraph | None = None) -> UserTree:
    tg = tg if tg is not None else build_tg(user_id, ds)
    if flags.tree:
        nodes = list(tg.node_order)
        adj = gcn_normalize(message_matrix(tg_adjacency(tg), flags))
        seqs = [serialize_tms_dfs(t) for t in tg.tms_list]
        arrays = [sequence_arrays(s, vocab) for s in seqs]
        token_lists = [s.tokens for s in seqs]
    else:
        # structure removed: one flat sequence over the multiset of dishes and
        # items, uniform level tags, fully connected graph over distinct nodes
        bag = []
        for t in tg.tms_list:
            bag.append(dish(t.dish))
            bag += [item(i) for _, its in t.children for i in its]
        bag.sort(key=lambda e: (LEVEL[e.kind], e.index))
        nodes = sorted(set(bag), key=lambda e: (LEVEL[e.kind], e.index))
        full = np.ones((len(nodes), len(nodes))) - np.eye(len(nodes))
        adj = gcn_normalize(full)
        arrays = [(np.array([vocab.id(tok) for tok in bag], dtype=np.int64),
                   np.full(len(bag), LEVEL[Kind.DISH], dtype=np.int64))]
        token_lists = [tuple(bag)]

    index = {n: k for k, n in enumerate(nodes)}
    dish_tokens, item_tokens = [], {}
    for s, toks in enumerate(token_lists):
        for pos, tok in enumerate(toks):
            if isinstance(tok, str):
                continue
            if tok.kind == Kind.DISH:
                dish_tokens.append((s, pos))
            elif tok.kind == Kind.ITEM:
                item_tokens.setdefault(tok.index, []).append((s, pos))
    items = sorted(n.index for n in nodes if n.kind == Kind.ITEM)
    return UserTree(
        user=user_id, nodes=nodes, adj_hat=adj, features=_features(nodes, docvecs, docvecs.dim),
        sequences=arrays, items=items,
        item_node={i: index[item(i)] for i in items},
        dish_nodes=[index[n] for n in nodes if n.kind == Kind.DISH],
        dish_tokens=dish_tokens, item_tokens=item_tokens)


# ---------------------------------------------------------------- batched forward

@dataclass
class TreeBatch:
    """Output of :func:`tree_forward`: one row per user, one per (user, item) pair."""
    users: Tensor
    items: Tensor
    pairs: list  # (position of user in the batch, item id)
    gcn_users: Tensor | None = None
    gcn_items: Tensor | None = None
    bert_users: Tensor | None = None
    bert_items: Tensor | None = None


def _selector(rows, cols, vals, shape) -> sp.csr_matrix:
    return sp.csr_matrix((np.asarray(vals, dtype=np.float64), (rows, cols)), shape=shape)


def _encode_unique(trees, params: Params, cfg: Tree2vecConfig, flags: TreeFlags,
                   n_buckets: int = 2) -> tuple:
    """Encode each distinct sequence of the batch once, in length buckets.

    Returns a map from ``(tree position, sequence position)`` to the first
    output row of that sequence, and the stacked ``(rows, d_model)`` token
    vectors.
    Padded keys get zero attention weight, so bucketing does not change the
    vectors of real tokens.
    """
    unique, where = {}, {}
    for u, t in enumerate(trees):
        for s, (ids, levels) in enumerate(t.sequences):
            if len(ids) > cfg.max_len:
                raise ValueError(f"overlong sequence for user {t.user} ({len(ids)} > {cfg.max_len} tokens)")
            key = (ids.tobytes(), levels.tobytes())
            if key not in unique:
                unique[key] = (ids, levels)
            where[(u, s)] = key
    keys = sorted(unique, key=lambda k: (len(unique[k][0]), k))
    size = -(-len(keys) // n_buckets)
    start_of, blocks, offset = {}, [], 0
    for b in range(0, len(keys), size):
        group = keys[b:b + size]
        ids, levels, mask = pad_sequences([unique[k] for k in group])
        n, tlen = ids.shape
        blocks.append(nx.reshape(encode_batch(ids, levels, mask, params, cfg, flags.fix_position),
                                 (n * tlen, cfg.d_model)))
        for j, k in enumerate(group):
            start_of[k] = offset + j * tlen
        offset += n * tlen
    rows = {us: start_of[k] for us, k in where.items()}
    return rows, blocks[0] if len(blocks) == 1 else nx.concat(blocks, axis=0)


def tree_forward(trees, params: Params, cfg: Tree2vecConfig, flags: TreeFlags) -> TreeBatch:
    trees = list(trees)
    pairs = [(u, i) for u, t in enumerate(trees) for i in t.items]
    parts_u, parts_i = [], []
    out = {}

    if flags.gcn:
        adj = sp.block_diag([t.adj_hat for t in trees], format="csr")
        h0 = np.concatenate([t.features for t in trees])
        h2 = gcn_layers(adj, h0, params)
        offs = np.cumsum([0] + [len(t.nodes) for t in trees])
        r, c = [], []
        for u, t in enumerate(trees):
            r += [u] * len(t.dish_nodes)
            c += [offs[u] + k for k in t.dish_nodes]
        g_u = nx.spmm(_selector(r, c, np.ones(len(r)), (len(trees), len(h0))), h2)
        cols = [offs[u] + trees[u].item_node[i] for u, i in pairs]
        g_i = nx.spmm(_selector(np.arange(len(pairs)), cols, np.ones(len(pairs)), (len(pairs), len(h0))), h2)
        parts_u.append(g_u)
        parts_i.append(g_i)
        out.update(gcn_users=g_u, gcn_items=g_i)

    if flags.bert:
        rows_of, x = _encode_unique(trees, params, cfg, flags)
        n_rows = x.shape[0]
        r, c = [], []
        for u, t in enumerate(trees):
            for s, pos in t.dish_tokens:
                r.append(u)
                c.append(rows_of[(u, s)] + pos)
        b_u = nx.spmm(_selector(r, c, np.ones(len(r)), (len(trees), n_rows)), x)
        r, c, v = [], [], []
        for k, (u, i) in enumerate(pairs):
            occ = trees[u].item_tokens[i]
            for s, pos in occ:
                r.append(k)
                c.append(rows_of[(u, s)] + pos)
                v.append(1.0 / len(occ))
        b_i = nx.spmm(_selector(r, c, v, (len(pairs), n_rows)), x)
        parts_u.append(b_u)
        parts_i.append(b_i)
        out.update(bert_users=b_u, bert_items=b_i)

    users = parts_u[0] if len(parts_u) == 1 else nx.concat(parts_u, axis=-1)
    items = parts_i[0] if len(parts_i) == 1 else nx.concat(parts_i, axis=-1)
    return TreeBatch(users, items, pairs, **out)


@dataclass
class TreeEmbeddings:
    user: np.ndarray
    items: dict
    gcn_user: np.ndarray | None = None
    bert_user: np.ndarray | None = None
    gcn_items: dict | None = None
    bert_items: dict | None = None


def tree2vec(user_id: int, ds: Dataset, docvecs, params: Params, cfg: Tree2vecConfig,
             flags: TreeFlags = TreeFlags(), tg: TreeShapedGraph | None = None) -> TreeEmbeddings:
    """Tree embedding of one common user and of the items in their TG."""
    tree = prepare_user(user_id, ds, docvecs, Vocabulary.of(ds), flags, tg)
    b = tree_forward([tree], params, cfg, flags)

    def rows(t):
        return None if t is None else {i: t.data[k] for k, (_, i) in enumerate(b.pairs)}

    return TreeEmbeddings(
        user=b.users.data[0], items=rows(b.items),
        gcn_user=None if b.gcn_users is None else b.gcn_users.data[0],
        bert_user=None if b.bert_users is None else b.bert_users.data[0],
        gcn_items=rows(b.gcn_items), bert_items=rows(b.bert_items))


def init_tree_params(params: Params, cfg: Tree2vecConfig, flags: TreeFlags, vocab: Vocabulary,
                     docvecs=None, ds: Dataset | None = None) -> None:
    if flags.gcn:
        init_gcn(params, cfg)
    if flags.bert:
        token_init = None
        if docvecs is not None and ds is not None and docvecs.dim == cfg.d_model:
            ents = ([dish(d.id) for d in ds.dishes] + [category(c.id) for c in ds.categories] +
                    [item(i.id) for i in ds.items])
            ents = [e for e in ents if e in docvecs]
            rows = [vocab.id(e) for e in ents]
            vecs = np.stack([docvecs[e] for e in ents])
            vecs = vecs / (np.linalg.norm(vecs, axis=1, keepdims=True) + 1e-12)
            token_init = (rows, vecs)
        init_encoder(params, cfg, len(vocab), token_init)


"""Element-wise attention fusion, MLP scoring and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .data import Dataset, item, user
from .evaluation import Split, evaluate
from .numerics import AdamState, Params, Tensor
from .tree2vec import (Tree2vecConfig, TreeFlags, Vocabulary, init_tree_params, prepare_user,
                       tree_forward)

log = logging.getLogger(__name__)

MLP_HIDDEN = (128, 64, 32)


# ---------------------------------------------------------------- fusion primitives

def combine(v_hat, v_tilde, gate):
    """``gate * v_hat + (1 - gate) * v_tilde``, element-wise; works on arrays or tensors."""
    if isinstance(v_hat, Tensor) or isinstance(v_tilde, Tensor) or isinstance(gate, Tensor):
        v_tilde = nx.tensor(v_tilde)
        return v_tilde + gate * (nx.tensor(v_hat) - v_tilde)
    v_hat, v_tilde, gate = (np.asarray(a, dtype=np.float64) for a in (v_hat, v_tilde, gate))
    if v_hat.shape != v_tilde.shape or gate.shape[-1] != v_hat.shape[-1]:
        raise ValueError(f"combine: dimension mismatch {v_hat.shape}, {v_tilde.shape}, gate {gate.shape}")
    return gate * v_hat + (1.0 - gate) * v_tilde


def combine_partial(v_hat, v_tilde=None, gate=None):
    """Fuse when a domain-B embedding exists, otherwise pass ``v_hat`` through."""
    if v_hat is None:
        raise ValueError("combine_partial: entity has neither a domain-A nor a domain-B embedding")
    if v_tilde is None:
        return np.asarray(v_hat, dtype=np.float64)
    return combine(v_hat, v_tilde, gate)


def gate_weights(v_hat, v_tilde, params: Params, prefix: str) -> Tensor:
    """``sigmoid([v_hat, v_tilde] W + b)``, strictly inside (0, 1) per coordinate."""
    return nx.sigmoid(nx.concat([v_hat, v_tilde], axis=-1) @ params[prefix + ".W"] + params[prefix + ".b"])


def init_mlp(params: Params, in_dim: int, hidden=MLP_HIDDEN) -> None:
    sizes = (in_dim,) + tuple(hidden) + (1,)
    for k, (a, b) in enumerate(zip(sizes, sizes[1:])):
        w = params.glorot(f"mlp.{k}.W", a, b)
        if k < len(sizes) - 2:
            w.data *= np.sqrt(2.0)  # He scale for ReLU layers
        params.zeros(f"mlp.{k}.b", b)


def mlp_logits(x, params: Params) -> Tensor:
    k = 0
    h = nx.tensor(x)
    while f"mlp.{k}.W" in params:
        h = h @ params[f"mlp.{k}.W"] + params[f"mlp.{k}.b"]
        if f"mlp.{k + 1}.W" in params:
            h = nx.relu(h)
        k += 1
    return nx.reshape(h, (h.shape[0],))


def score(v_u, v_i, params: Params) -> np.ndarray:
    """``sigmoid(MLP([v_u, v_i]))`` for row-aligned user and item vectors."""
    with nx.no_grad():
        z = mlp_logits(np.concatenate([np.atleast_2d(v_u), np.atleast_2d(v_i)], axis=-1), params)
    return nx._stable_sigmoid(z.data)


# ---------------------------------------------------------------- model

class GReSModel:
    """Node2vec (domain A) and Tree2vec (domain B) embeddings fused per entity, scored by an MLP.

    A common user's tree vector comes from their TG. An item gets a tree vector
    only when scored for a user whose TG contains it; every other (user, item)
    pair uses the item's domain-A vector as is.
    """

    def __init__(self, ds: Dataset, node_emb, docvecs, flags: TreeFlags = TreeFlags(),
                 tree_cfg: Tree2vecConfig | None = None, seed: int = 0, hidden=MLP_HIDDEN):
        self.flags = flags
        self.n_items = ds.n_items
        self.u_hat = node_emb.matrix([user(u.id) for u in ds.users])
        self.i_hat = node_emb.matrix([item(i.id) for i in ds.items])
        d = self.u_hat.shape[1]
        self.dim = d
        self.tree_cfg = tree_cfg or Tree2vecConfig(feat_dim=docvecs.dim)
        vocab = Vocabulary.of(ds)
        self.trees = {u: prepare_user(u, ds, docvecs, vocab, flags) for u in ds.common_users}

        self.params = Params(seed)
        init_tree_params(self.params, self.tree_cfg, flags, vocab, docvecs, ds)
        tdim = self.tree_cfg.tree_dim(flags)
        for side in ("user", "item"):
            self.params.glorot(f"proj.{side}.W", tdim, d)
            self.params.zeros(f"proj.{side}.b", d)
            self.params.glorot(f"gate.{side}.W", 2 * d, d)
            self.params.zeros(f"gate.{side}.b", d)
        init_mlp(self.params, 2 * d, hidden)
        self.gated_rows = 0  # instrumentation: rows that went through a gate in the last call

    # -- forward pieces
    def _fused(self, users):
        """Fused tree-side vectors for the common users in ``users``.

        Returns ``(common, tb, fused_u, fused_i)`` where ``tb.pairs`` indexes
        ``fused_i`` rows by (position in ``common``, item id).
        """
        common = [u for u in users if u in self.trees]
        if not common:
            return common, None, None, None
        tb = tree_forward([self.trees[u] for u in common], self.params, self.tree_cfg, self.flags)
        p = self.params
        vt_u = tb.users @ p["proj.user.W"] + p["proj.user.b"]
        vh_u = self.u_hat[common]
        fused_u = combine(vh_u, vt_u, gate_weights(vh_u, vt_u, p, "gate.user"))
        if tb.pairs:
            vt_i = tb.items @ p["proj.item.W"] + p["proj.item.b"]
            vh_i = self.i_hat[[i for _, i in tb.pairs]]
            fused_i = combine(vh_i, vt_i, gate_weights(vh_i, vt_i, p, "gate.item"))
        else:
            fused_i = None
        return common, tb, fused_u, fused_i

    def logits(self, users, items) -> Tensor:
        """Pre-sigmoid scores for row-aligned ``users`` and ``items`` arrays."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        b = len(users)
        common, tb, fused_u, fused_i = self._fused(sorted(set(users.tolist())))
        v_u = nx.tensor(self.u_hat[users])
        v_i = nx.tensor(self.i_hat[items])
        self.gated_rows = 0
        if common:
            pos = {u: k for k, u in enumerate(common)}
            rows = [r for r in range(b) if users[r] in pos]
            sel = sp.csr_matrix((np.ones(len(rows)), (rows, [pos[users[r]] for r in rows])),
                                shape=(b, len(common)))
            v_u = v_u + nx.spmm(sel, fused_u - self.u_hat[common])
            self.gated_rows += len(rows)
            if fused_i is not None:
                pair = {key: k for k, key in enumerate(tb.pairs)}
                hit = [(r, pair[(pos[users[r]], items[r])]) for r in rows
                       if (pos[users[r]], items[r]) in pair]
                if hit:
                    r_, c_ = zip(*hit)
                    sel_i = sp.csr_matrix((np.ones(len(hit)), (r_, c_)), shape=(b, len(tb.pairs)))
                    v_i = v_i + nx.spmm(sel_i, fused_i - self.i_hat[[i for _, i in tb.pairs]])
        return mlp_logits(nx.concat([v_u, v_i], axis=-1), self.params)

    def user_vectors(self, users) -> tuple:
        """Fused user vectors and per-user item matrices (numpy, no graph)."""
        with nx.no_grad():
            common, tb, fused_u, fused_i = self._fused(users)
        pos = {u: k for k, u in enumerate(common)}
        vu = self.u_hat[users].copy()
        vis = []
        for r, u in enumerate(users):
            vi = self.i_hat.copy()
            if u in pos:
                vu[r] = fused_u.data[pos[u]]
            vis.append(vi)
        if fused_i is not None:
            for k, (cu, i) in enumerate(tb.pairs):
                vis[users.index(common[cu])][i] = fused_i.data[k]
        return vu, vis

    def score_all(self, users) -> np.ndarray:
        users = list(users)
        vu, vis = self.user_vectors(users)
        out = np.empty((len(users), self.n_items))
        with nx.no_grad():
            for r in range(len(users)):
                x = np.concatenate([np.broadcast_to(vu[r], (self.n_items, self.dim)), vis[r]], axis=1)
                out[r] = mlp_logits(x, self.params).data
        return out  # logits: same ranking as sigmoid scores

    def predict(self, users, items) -> np.ndarray:
        with nx.no_grad():
            return nx._stable_sigmoid(self.logits(users, items).data)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0015
    batch: int = 30
    negatives: int = 4
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    freeze: bool = False
    resample_negatives: bool = True
    early_stop_k: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("TrainConfig.lr must be > 0")
        if self.batch < 1:
            raise ValueError("TrainConfig.batch must be >= 1")


@dataclass
class History:
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, val_hr
    best_epoch: int = -1

    def losses(self) -> list:
        return [e["loss"] for e in self.epochs]

    def to_csv(self, path, k: int = 10) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"epoch,loss,val_hr@{k}\n")
            for e in self.epochs:
                fh.write(f"{e['epoch']},{e['loss']!r},{e['val_hr']!r}\n")


def sample_training_rows(split: Split, n_items: int, negatives: int, rng) -> tuple:
    """Positives from ``split.train`` plus ``negatives`` uniform unobserved items each."""
    pos_u = np.array([x.user for x in split.train], dtype=np.int64)
    pos_i = np.array([x.target for x in split.train], dtype=np.int64)
    seen = set(zip(pos_u.tolist(), pos_i.tolist()))
    neg_u = np.repeat(pos_u, negatives)
    neg_i = rng.integers(0, n_items, len(neg_u))
    bad = np.array([(u, i) in seen for u, i in zip(neg_u.tolist(), neg_i.tolist())], dtype=bool)
    while bad.any():
        idx = np.flatnonzero(bad)
        neg_i[idx] = rng.integers(0, n_items, len(idx))
        bad[idx] = [(u, i) in seen for u, i in zip(neg_u[idx].tolist(), neg_i[idx].tolist())]
    users = np.concatenate([pos_u, neg_u])
    items = np.concatenate([pos_i, neg_i])
    labels = np.concatenate([np.ones(len(pos_u)), np.zeros(len(neg_u))])
    return users, items, labels


def train(model: GReSModel, split: Split, cfg: TrainConfig = TrainConfig(),
          validate_every: int = 1) -> History:
    """Mini-batch Adam on binary cross-entropy with sampled negatives.

    Early-stops on validation HR@``early_stop_k`` and leaves the best
    parameters in ``model``. A non-finite loss aborts with a
    ``FloatingPointError`` that names the epoch and batch.
    """
    params = model.params
    state = AdamState(lr=cfg.lr)
    hist = History()
    best, best_hr, waited = params.snapshot(), -1.0, 0
    fixed = None
    for epoch in range(cfg.max_epochs):
        if cfg.resample_negatives or fixed is None:
            fixed = sample_training_rows(split, model.n_items, cfg.negatives,
                                         np.random.default_rng([cfg.seed, epoch if cfg.resample_negatives else 0]))
        users, items, labels = fixed
        order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(users))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            params.zero_grad()
            loss = nx.bce_with_logits(model.logits(users[idx], items[idx]), labels[idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch starting {start}: "
                                         f"users {users[idx].tolist()}")
            total += float(loss.data) * len(idx)
            count += len(idx)
            if cfg.freeze:
                continue
            loss.backward()
            nx.adam_step(params.arrays(), params.grads(), state)
        val_hr = float("nan")
        if split.val and (epoch + 1) % validate_every == 0:
            val_hr = evaluate(model, split, "val", ks=(cfg.early_stop_k,)).hr(cfg.early_stop_k)
        hist.epochs.append({"epoch": epoch, "loss": total / count, "val_hr": val_hr})
        log.info("epoch %d loss %.6f val HR@%d %.4f", epoch, total / count, cfg.early_stop_k, val_hr)
        if np.isnan(val_hr):
            continue
        if val_hr > best_hr:
            best, best_hr, waited = params.snapshot(), val_hr, 0
            hist.best_epoch = epoch
        else:
            waited += 1
            if waited >= cfg.patience:
                break
    if hist.best_epoch >= 0:
        params.restore(best)
    return hist

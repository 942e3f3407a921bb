"""Paragraph vectors (PV-DBOW) with negative sampling.

Each document vector is trained to predict the tokens of its document against
``negatives`` noise tokens drawn from the unigram^0.75 distribution. Updates
are full-batch per epoch and every per-document random draw is seeded by the
document's content hash, so two identical documents always end up with the
same vector.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import AdamState, adam_step


def content_hash(tokens) -> int:
    digest = hashlib.sha256("\x1f".join(tokens).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    return np.exp(_log_sigmoid(z))


@dataclass
class DocVectors:
    """Trained document vectors plus the frozen word model used for inference."""
    dim: int
    vectors: dict
    vocab: dict = field(repr=False, default_factory=dict)
    word_out: np.ndarray = field(repr=False, default=None)
    noise: np.ndarray = field(repr=False, default=None)
    negatives: int = 5
    seed: int = 0
    epochs: int = 50
    lr: float = 0.05

    def __getitem__(self, key) -> np.ndarray:
        return self.vectors[key]

    def __contains__(self, key) -> bool:
        return key in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def matrix(self, keys) -> np.ndarray:
        return np.stack([self.vectors[k] for k in keys])

    def to_tensors(self) -> dict:
        return {str(k): v for k, v in self.vectors.items()}


def _init_doc(tokens, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, content_hash(tokens)])
    return (rng.random(dim) - 0.5) / dim


def _counts(docs_idx, hashes, noise, negatives, seed, epoch, vocab_size):
    """Positive and negative (doc, word) count matrices for one epoch."""
    cdf = np.cumsum(noise)
    pos = np.zeros((len(docs_idx), vocab_size))
    neg = np.zeros((len(docs_idx), vocab_size))
    for d, (toks, h) in enumerate(zip(docs_idx, hashes)):
        rng = np.random.default_rng([seed, h, epoch])
        draws = np.searchsorted(cdf, rng.random(len(toks) * negatives) * cdf[-1], side="right")
        pos[d] = np.bincount(toks, minlength=vocab_size)
        neg[d] = np.bincount(np.minimum(draws, vocab_size - 1), minlength=vocab_size)
    return pos, neg


def _grads(doc_mat, word_out, pos, neg):
    # every (doc, word) pair shares one score, so the objective is a weighted
    # sum over the dense score matrix
    scores = doc_mat @ word_out.T
    loss = -(pos * _log_sigmoid(scores) + neg * _log_sigmoid(-scores)).sum()
    sig = _sigmoid(scores)
    g = pos * (sig - 1.0) + neg * sig
    return loss, g @ word_out, g.T @ doc_mat


def train_doc_embeddings(corpus, dim: int = 64, epochs: int = 50, seed: int = 0,
                         negatives: int = 5, lr: float = 0.05) -> DocVectors:
    """Train PV-DBOW vectors for ``corpus``, a list of ``(key, tokens)``."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("train_doc_embeddings: empty corpus")
    if dim < 2:
        raise ValueError(f"train_doc_embeddings: dim must be >= 2, got {dim}")
    for key, toks in corpus:
        if not toks:
            raise ValueError(f"train_doc_embeddings: empty document for {key}")

    vocab = {}
    for _, toks in corpus:
        for t in toks:
            vocab.setdefault(t, len(vocab))
    freq = np.zeros(len(vocab))
    docs_idx = []
    for _, toks in corpus:
        ix = np.array([vocab[t] for t in toks], dtype=np.int64)
        np.add.at(freq, ix, 1)
        docs_idx.append(ix)
    noise = freq ** 0.75
    noise /= noise.sum()

    hashes = [content_hash(toks) for _, toks in corpus]
    doc_mat = np.stack([_init_doc(toks, dim, seed) for _, toks in corpus])
    word_out = np.random.default_rng(seed).normal(0.0, 0.1 / np.sqrt(dim), (len(vocab), dim))

    params = {"doc": doc_mat, "word": word_out}
    state = AdamState(lr=lr)
    for epoch in range(epochs):
        pos, neg = _counts(docs_idx, hashes, noise, negatives, seed, epoch, len(vocab))
        _, g_doc, g_word = _grads(params["doc"], params["word"], pos, neg)
        adam_step(params, {"doc": g_doc, "word": g_word}, state)

    vectors = {key: params["doc"][k].copy() for k, (key, _) in enumerate(corpus)}
    return DocVectors(dim, vectors, vocab, params["word"], noise, negatives, seed, epochs, lr)


def embed_query(doc, model: DocVectors, epochs: int | None = None) -> np.ndarray:
    """Infer a vector for an unseen document with the word weights frozen."""
    toks = [t for t in doc if t in model.vocab]
    if not doc:
        raise ValueError("embed_query: empty document")
    if not toks:
        raise ValueError("embed_query: every token is out of vocabulary")
    epochs = model.epochs if epochs is None else epochs
    ix = np.array([model.vocab[t] for t in toks], dtype=np.int64)
    h = content_hash(tuple(doc))
    params = {"doc": _init_doc(tuple(doc), model.dim, model.seed)[None, :]}
    state = AdamState(lr=model.lr)
    for epoch in range(epochs):
        pos, neg = _counts([ix], [h], model.noise, model.negatives, model.seed, epoch,
                           len(model.vocab))
        _, g_doc, _ = _grads(params["doc"], model.word_out, pos, neg)
        adam_step(params, {"doc": g_doc}, state)
    return params["doc"][0].copy()

"""End-to-end runs: data, embeddings, graphs, training, evaluation and experiments.

Every stage can run in memory or through a run directory::

    out/
      config.yaml
      data/       dataset JSONL files
      graphs/     doc vectors, split, HG edge list, node embeddings, TG CSVs, DFS sequences
      train/<variant>/   checkpoint and history
      eval/<variant>/    metric report
      ablate/, m_sweep/  experiment tables

Each directory gets a ``manifest.json`` with the config hash, the seed and
git-style content hashes of what the stage read and wrote.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, EntityId, Interaction, generate_synthetic, load_dataset, save_dataset
from .evaluation import KS, METRICS, MetricsReport, Split, evaluate, popularity_baseline, split_dataset
from .hetgraph import HeterogeneousGraph, NodeEmbeddings, build_hg, node2vec_embed
from .model import GReSModel, History, train
from .numerics import load_tensors, save_tensors
from .text import DocVectors, train_doc_embeddings
from .tree2vec import VARIANT_LABELS
from .treegraph import build_tg, serialize_tms_dfs, write_sequences

log = logging.getLogger(__name__)


class MissingArtifact(RuntimeError):
    """An upstream stage has not been run for this run directory."""


# ---------------------------------------------------------------- seeds and hashes

def sub_seed(seed: int, stage: str) -> int:
    """Independent, stable seed for one pipeline stage."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_tree(path) -> dict:
    """Content hash of every file under ``path`` except manifests."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    base = path.parent if path.is_file() else path
    return {str(p.relative_to(base)): blob_hash(p.read_bytes())
            for p in files if p.name != "manifest.json"}


def write_manifest(directory, command: str, cfg: RunConfig, inputs=(), extra=None) -> dict:
    directory = Path(directory)
    man = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "inputs": {str(Path(p).name): hash_tree(p) for p in inputs},
        "outputs": hash_tree(directory),
    }
    if extra:
        man.update(extra)
    (directory / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    return man


# ---------------------------------------------------------------- shared stages

@dataclass
class Prepared:
    """Everything that does not depend on the Tree2vec variant."""
    ds: Dataset
    docvecs: DocVectors
    split: Split
    graph: HeterogeneousGraph | None
    node_emb: NodeEmbeddings
    timings: dict = field(default_factory=dict)


def make_dataset(cfg: RunConfig, m: float | None = None) -> Dataset:
    return generate_synthetic(cfg.data.build(sub_seed(cfg.seed, "data"), m))


def prepare(cfg: RunConfig, ds: Dataset | None = None) -> Prepared:
    """Doc vectors, split, heterogeneous graph and node embeddings for ``cfg.seed``."""
    t = {}
    clock = time.perf_counter()
    ds = ds if ds is not None else make_dataset(cfg)
    t["data"] = time.perf_counter() - clock
    clock = time.perf_counter()
    tc = cfg.text
    docvecs = train_doc_embeddings(ds.documents(), dim=tc.dim, epochs=tc.epochs,
                                   seed=sub_seed(cfg.seed, "text"), negatives=tc.negatives, lr=tc.lr)
    t["text"] = time.perf_counter() - clock
    split = split_dataset(ds.interactions, cfg.split, seed=sub_seed(cfg.seed, "split"))
    clock = time.perf_counter()
    g = cfg.graph
    hg = build_hg(ds, docvecs, alpha=g.alpha, interactions=split.train,
                  similarity_inversion=g.similarity_inversion)
    node_emb = node2vec_embed(hg, dim=g.dim, walk_len=g.walk_len, walks_per_node=g.walks_per_node,
                              p=g.p, q=g.q, window=g.window, negatives=g.negatives, epochs=g.epochs,
                              seed=sub_seed(cfg.seed, "node2vec"), lr=g.lr)
    t["graph"] = time.perf_counter() - clock
    return Prepared(ds, docvecs, split, hg, node_emb, t)


def build_model(prep: Prepared, cfg: RunConfig, variant: str | None = None) -> GReSModel:
    tree_cfg = cfg.tree.encoder()
    if tree_cfg.feat_dim != prep.docvecs.dim:
        raise ValueError(f"tree.feat_dim ({tree_cfg.feat_dim}) must equal text.dim ({prep.docvecs.dim})")
    return GReSModel(prep.ds, prep.node_emb, prep.docvecs, cfg.flags(variant), tree_cfg,
                     seed=sub_seed(cfg.seed, "model"))


def fit(prep: Prepared, cfg: RunConfig, variant: str | None = None) -> tuple:
    model = build_model(prep, cfg, variant)
    hist = train(model, prep.split, cfg.train.build(sub_seed(cfg.seed, "train")))
    return model, hist


def run_variant(prep: Prepared, cfg: RunConfig, variant: str | None = None,
                verify: bool = True) -> tuple:
    """Train one variant and evaluate it on the test split."""
    variant = variant or cfg.variant
    clock = time.perf_counter()
    model, hist = fit(prep, cfg, variant)
    report = evaluate(model, prep.split, "test", verify=verify)
    report.meta.update(seed=cfg.seed, variant=variant, flags=str(cfg.flags(variant)),
                       best_epoch=hist.best_epoch, seconds=time.perf_counter() - clock)
    return report, model, hist


def run_popularity(prep: Prepared, cfg: RunConfig) -> MetricsReport:
    report = evaluate(popularity_baseline(prep.split, prep.ds.n_items), prep.split, "test", verify=True)
    report.meta.update(seed=cfg.seed, variant="popularity")
    return report


# ---------------------------------------------------------------- experiments

def mean_report(reports) -> MetricsReport:
    reports = list(reports)
    ks = sorted(reports[0].values)
    values = {k: {m: float(np.mean([r.values[k][m] for r in reports])) for m in METRICS} for k in ks}
    return MetricsReport(values, sum(r.n for r in reports), {"runs": len(reports)})


@dataclass
class ComparisonTable:
    """Seed-averaged metrics per variant, with relative deltas of the full model."""
    rows: dict  # label -> MetricsReport (mean over seeds)
    per_seed: dict  # label -> [MetricsReport]
    order: list

    def columns(self) -> list:
        return [f"{m}@{k}" for m in METRICS for k in KS]

    def deltas(self, base: str = "full") -> dict:
        """``(base - best other) / best other`` per column, as a fraction."""
        others = [v for v in self.order if v != base and v in self.rows]
        out = {}
        for m in METRICS:
            for k in KS:
                best = max(self.rows[v].values[k][m] for v in others) if others else float("nan")
                mine = self.rows[base].values[k][m]
                out[f"{m}@{k}"] = (mine - best) / best if best > 0 else float("nan")
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model"] + self.columns())
            for v in self.order:
                w.writerow([label(v)] + [repr(self.rows[v].values[k][m]) for m in METRICS for k in KS])
            if "full" in self.rows and len(self.order) > 1:
                d = self.deltas()
                w.writerow(["GReS vs. best other"] + [repr(d[c]) for c in self.columns()])

    def pretty(self) -> str:
        cols = self.columns()
        width = max(len(label(v)) for v in self.order) + 2
        lines = ["model".ljust(width) + " ".join(c.rjust(8) for c in cols)]
        for v in self.order:
            r = self.rows[v]
            lines.append(label(v).ljust(width) + " ".join(f"{r.values[k][m]:8.4f}" for m in METRICS for k in KS))
        if "full" in self.rows and len(self.order) > 1:
            d = self.deltas()
            lines.append("GReS vs. best other".ljust(width) + " ".join(f"{100 * d[c]:+7.2f}%" for c in cols))
        return "\n".join(lines)


def label(variant: str) -> str:
    return VARIANT_LABELS.get(variant, variant.capitalize())


def run_ablation(cfg: RunConfig, variants=None, seeds=None, include_popularity: bool = True,
                 datasets: dict | None = None) -> ComparisonTable:
    """Train every variant on every seed with shared data, split and node embeddings."""
    variants = list(variants or cfg.ablation_variants)
    seeds = list(cfg.seeds if seeds is None else seeds)
    per_seed = {v: [] for v in variants}
    if include_popularity:
        per_seed["popularity"] = []
    for s in seeds:
        scfg = cfg.with_overrides(seed=s)
        prep = prepare(scfg, (datasets or {}).get(s))
        if include_popularity:
            per_seed["popularity"].append(run_popularity(prep, scfg))
        for v in variants:
            report, _, _ = run_variant(prep, scfg, v)
            log.info("seed %d %s HR@10 %.4f (%.1fs)", s, v, report.hr(10), report.meta["seconds"])
            per_seed[v].append(report)
    order = variants + (["popularity"] if include_popularity else [])
    return ComparisonTable({v: mean_report(per_seed[v]) for v in order}, per_seed, order)


def run_m_sweep(cfg: RunConfig, m_values=None, variant: str | None = None) -> list:
    """Regenerate the data at each unique-user proportion and evaluate one variant.

    Returns rows ``(M, n_unique_users, K, metric, value)``.
    """
    rows = []
    for m in (cfg.m_values if m_values is None else m_values):
        ds = make_dataset(cfg, m)
        report, _, _ = run_variant(prepare(cfg, ds), cfg, variant)
        for k in KS:
            for metric in METRICS:
                rows.append((float(m), len(ds.unique_users), k, metric, report.values[k][metric]))
    return rows


def write_sweep(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["M", "n_unique_users", "K", "metric", "value"])
        for m, n_u, k, metric, value in rows:
            w.writerow([f"{m:.3f}", n_u, k, metric, repr(value)])


# ---------------------------------------------------------------- run directories

class RunDir:
    """Paths and loaders for one run directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.graphs = self.root / "graphs"

    def train_dir(self, variant: str) -> Path:
        return self.root / "train" / variant

    def eval_dir(self, variant: str) -> Path:
        return self.root / "eval" / variant

    def require(self, path: Path, command: str) -> None:
        if not (path / "manifest.json").exists():
            raise MissingArtifact(f"{path} not found: run {command} first")

    # -- stage writers
    def gen_data(self, cfg: RunConfig) -> Dataset:
        ds = make_dataset(cfg)
        save_dataset(ds, self.data)
        cfg.save(self.root / "config.yaml")
        write_manifest(self.data, "gen-data", cfg)
        return ds

    def build_graphs(self, cfg: RunConfig) -> Prepared:
        self.require(self.data, "gen-data")
        prep = prepare(cfg, load_dataset(self.data))
        g = self.graphs
        (g / "tg").mkdir(parents=True, exist_ok=True)
        save_tensors(g / "docvecs.bin", prep.docvecs.to_tensors())
        save_tensors(g / "node_embeddings.bin", prep.node_emb.to_tensors())
        write_split(prep.split, g / "split.json")
        prep.graph.to_csv(g / "hg_edges.csv")
        seqs = []
        for u in prep.ds.common_users:
            tg = build_tg(u, prep.ds)
            tg.to_csv(g / "tg" / f"user_{u}.csv")
            seqs += [serialize_tms_dfs(t) for t in tg.tms_list]
        write_sequences(g / "sequences.jsonl", seqs)
        write_manifest(g, "build-graphs", cfg, inputs=[self.data])
        return prep

    def load_prepared(self, cfg: RunConfig) -> Prepared:
        self.require(self.graphs, "build-graphs")
        self.require(self.data, "gen-data")
        ds = load_dataset(self.data)
        dv = load_tensors(self.graphs / "docvecs.bin")
        ne = load_tensors(self.graphs / "node_embeddings.bin")
        docvecs = DocVectors(cfg.text.dim, {EntityId.parse(k): v for k, v in dv.items()})
        node_emb = NodeEmbeddings(cfg.graph.dim, {EntityId.parse(k): v for k, v in ne.items()})
        return Prepared(ds, docvecs, read_split(self.graphs / "split.json"), None, node_emb)

    def train(self, cfg: RunConfig, variant: str | None = None) -> tuple:
        variant = variant or cfg.variant
        prep = self.load_prepared(cfg)
        model, hist = fit(prep, cfg, variant)
        d = self.train_dir(variant)
        d.mkdir(parents=True, exist_ok=True)
        save_tensors(d / "params.bin", model.params.arrays())
        hist.to_csv(d / "history.csv", cfg.train.early_stop_k)
        write_manifest(d, "train", cfg, inputs=[self.data, self.graphs],
                       extra={"variant": variant, "best_epoch": hist.best_epoch})
        return model, hist

    def evaluate(self, cfg: RunConfig, variant: str | None = None) -> MetricsReport:
        variant = variant or cfg.variant
        self.require(self.train_dir(variant), "train")
        prep = self.load_prepared(cfg)
        model = build_model(prep, cfg, variant)
        model.params.restore(load_tensors(self.train_dir(variant) / "params.bin"))
        report = evaluate(model, prep.split, "test", verify=True)
        report.meta.update(seed=cfg.seed, variant=variant)
        d = self.eval_dir(variant)
        d.mkdir(parents=True, exist_ok=True)
        report.to_csv(d / "report.csv")
        (d / "report.txt").write_text(format_report(report, label(variant)) + "\n", encoding="utf-8")
        write_manifest(d, "evaluate", cfg, inputs=[self.graphs, self.train_dir(variant)],
                       extra={"variant": variant})
        return report


def write_split(split: Split, path) -> None:
    def rows(part):
        return [[x.user, x.target, x.count] for x in part]
    obj = {"ratios": list(split.ratios), "seed": split.seed,
           "train": rows(split.train), "val": rows(split.val), "test": rows(split.test)}
    Path(path).write_text(json.dumps(obj, separators=(",", ":")) + "\n", encoding="utf-8")


def read_split(path) -> Split:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))

    def part(name):
        return tuple(Interaction(u, t, c, "A") for u, t, c in obj[name])
    return Split(part("train"), part("val"), part("test"), tuple(obj["ratios"]), obj["seed"])


def format_report(report: MetricsReport, name: str = "") -> str:
    head = f"{'':8}" + "".join(f"{'@' + str(k):>9}" for k in sorted(report.values))
    lines = [name] if name else []
    lines.append(head)
    for m in METRICS:
        lines.append(f"{m:8}" + "".join(f"{report.values[k][m]:9.4f}" for k in sorted(report.values)))
    return "\n".join(lines)

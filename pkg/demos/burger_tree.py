"""Follow one dish through the tree pipeline.

A shop sells a beef burger (beef, tomato, pickled cucumber) and a tomato
salad that shares the tomato. We build its tree-shaped graph, print the
lower-triangular adjacency, the DFS token sequences the encoder reads, and
the Tree2vec vectors for the shop and for each ingredient.
"""
import numpy as np

from gres.data import (CategoryRecord, Dataset, DishRecord, Interaction, ItemRecord, Recipe, UserRecord)
from gres.numerics import Params
from gres.text import train_doc_embeddings
from gres.tree2vec import TreeFlags, Tree2vecConfig, Vocabulary, init_tree_params, tree2vec
from gres.treegraph import build_tg, serialize_tms_dfs, tg_adjacency

CATEGORIES = ["beef", "tomato", "pickled cucumber", "lettuce"]
ITEMS = [("wagyu patty", 0), ("vine tomato", 1), ("dill pickle", 2), ("romaine", 3)]
burger = Recipe(0, ((0, (0,)), (1, (1,)), (2, (2,))))
salad = Recipe(1, ((1, (1,)), (3, (3,))))

ds = Dataset(
    users=(UserRecord(0, True, ("burger", "bar", "grill")), UserRecord(1, False, ("bakery", "bread"))),
    categories=tuple(CategoryRecord(c, tuple(name.split())) for c, name in enumerate(CATEGORIES)),
    items=tuple(ItemRecord(i, c, tuple(name.split())) for i, (name, c) in enumerate(ITEMS)),
    dishes=(DishRecord(0, burger, ("beef", "burger", "tomato", "pickle")),
            DishRecord(1, salad, ("tomato", "salad", "lettuce"))),
    interactions=(Interaction(0, 0, 3, "A"), Interaction(1, 1, 1, "A"),
                  Interaction(0, 0, 12, "B"), Interaction(0, 1, 4, "B")),
)

tg = build_tg(0, ds)
print("nodes in topological order:", [str(n) for n in tg.node_order])
print("adjacency (row = child, column = parent):")
print(np.array2string(tg_adjacency(tg), precision=2, suppress_small=True))

for t in tg.tms_list:
    seq = serialize_tms_dfs(t)
    print(" ".join(str(tok) for tok in seq.tokens), "| levels", seq.levels)

docvecs = train_doc_embeddings(ds.documents(), dim=8, epochs=30, seed=0)
cfg = Tree2vecConfig(feat_dim=8, gcn_hidden=8, gcn_out=8, d_model=8, heads=2, layers=1, ff_dim=16)
vocab = Vocabulary.of(ds)
for flags in (TreeFlags(), TreeFlags(tree=False)):
    params = Params(0)
    init_tree_params(params, cfg, flags, vocab, docvecs, ds)
    emb = tree2vec(0, ds, docvecs, params, cfg, flags)
    print(f"\ntree={flags.tree}: shop vector has {emb.user.shape[0]} dims (GCN half, encoder half)")
    for i in sorted(emb.items):
        print(f"  {ITEMS[i][0]:12s} GCN", np.array2string(emb.gcn_items[i][:3], precision=3),
              " encoder", np.array2string(emb.bert_items[i][:3], precision=3))
# without the tree the graph is complete with uniform weights, so every GCN row is the same
# and only the encoder half still tells the ingredients apart

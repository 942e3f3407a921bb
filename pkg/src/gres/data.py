"""Dataset entities, JSONL interchange, validation and a synthetic generator.

Domain A is the supply-chain platform: users buy items (ingredients), each
item belongs to one category. Domain B is the downstream platform where
*common* users sell dishes; each dish has a recipe listing categories and the
items used under each one. *Unique* users only exist in domain A.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np


class Kind(str, enum.Enum):
    USER = "user"
    ITEM = "item"
    CATEGORY = "category"
    DISH = "dish"


class EntityId(NamedTuple):
    kind: Kind
    index: int

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "EntityId":
        kind, _, idx = text.partition(":")
        return cls(Kind(kind), int(idx))


def user(i: int) -> EntityId:
    return EntityId(Kind.USER, int(i))


def item(i: int) -> EntityId:
    return EntityId(Kind.ITEM, int(i))


def category(i: int) -> EntityId:
    return EntityId(Kind.CATEGORY, int(i))


def dish(i: int) -> EntityId:
    return EntityId(Kind.DISH, int(i))


@dataclass(frozen=True)
class UserRecord:
    id: int
    is_common: bool
    doc: tuple


@dataclass(frozen=True)
class CategoryRecord:
    id: int
    doc: tuple


@dataclass(frozen=True)
class ItemRecord:
    id: int
    category: int
    doc: tuple


@dataclass(frozen=True)
class Recipe:
    """Ordered ``(category, items)`` components of one dish."""
    dish: int
    components: tuple

    @property
    def categories(self) -> tuple:
        return tuple(c for c, _ in self.components)

    @property
    def items(self) -> tuple:
        return tuple(i for _, items in self.components for i in items)


@dataclass(frozen=True)
class DishRecord:
    id: int
    recipe: Recipe
    doc: tuple


@dataclass(frozen=True)
class Interaction:
    """A purchase (domain A, target is an item) or a sale (domain B, target is a dish)."""
    user: int
    target: int
    count: int
    domain: str


@dataclass(frozen=True)
class Dataset:
    users: tuple
    categories: tuple
    items: tuple
    dishes: tuple
    interactions: tuple

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_dishes(self) -> int:
        return len(self.dishes)

    @property
    def common_users(self) -> list:
        return [u.id for u in self.users if u.is_common]

    @property
    def unique_users(self) -> list:
        return [u.id for u in self.users if not u.is_common]

    def domain(self, name: str) -> list:
        return [x for x in self.interactions if x.domain == name]

    def with_interactions(self, interactions) -> "Dataset":
        return replace(self, interactions=tuple(interactions))

    def documents(self) -> list:
        """``(EntityId, tokens)`` for every user, category, item and dish."""
        docs = [(user(u.id), u.doc) for u in self.users]
        docs += [(category(c.id), c.doc) for c in self.categories]
        docs += [(item(i.id), i.doc) for i in self.items]
        docs += [(dish(d.id), d.doc) for d in self.dishes]
        return docs


# ---------------------------------------------------------------- validation

@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    entities: tuple = ()


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def add(self, code: str, message: str, *entities) -> None:
        self.violations.append(Violation(code, message, tuple(str(e) for e in entities)))

    def codes(self) -> set:
        return {v.code for v in self.violations}

    def __str__(self) -> str:
        return "\n".join(f"[{v.code}] {v.message}" for v in self.violations) or "ok"


class DatasetError(ValueError):
    pass


def validate(ds: Dataset) -> ValidationReport:
    """Collect every invariant violation; an empty report means the dataset is valid."""
    rep = ValidationReport()
    for name, records in (("user", ds.users), ("category", ds.categories),
                          ("item", ds.items), ("dish", ds.dishes)):
        for pos, rec in enumerate(records):
            if rec.id != pos:
                rep.add("non-contiguous-id", f"{name} record at position {pos} has id {rec.id}",
                        EntityId(Kind(name), rec.id))

    for it in ds.items:
        if not 0 <= it.category < ds.n_categories:
            rep.add("unknown-category", f"item {it.id} refers to missing category {it.category}",
                    item(it.id))

    for d in ds.dishes:
        r = d.recipe
        if r.dish != d.id:
            rep.add("recipe-dish-mismatch", f"dish {d.id} carries recipe for dish {r.dish}", dish(d.id))
        if not r.components:
            rep.add("empty-recipe", f"dish {d.id} has no categories", dish(d.id))
        for c, items in r.components:
            if not items:
                rep.add("empty-recipe-category", f"dish {d.id} lists category {c} without items",
                        dish(d.id), category(c))
            for i in items:
                if not 0 <= i < ds.n_items:
                    rep.add("unknown-item", f"dish {d.id} lists missing item {i}", dish(d.id))
                elif ds.items[i].category != c:
                    rep.add("recipe-item-outside-category",
                            f"dish {d.id}: item {i} listed under category {c} but belongs to "
                            f"{ds.items[i].category}", dish(d.id), item(i), category(c))

    sells = {u.id: 0 for u in ds.users}
    seen = set()
    for x in ds.interactions:
        if not 0 <= x.user < ds.n_users:
            rep.add("unknown-user", f"interaction references missing user {x.user}")
            continue
        if x.count < 1:
            rep.add("non-positive-count", f"user {x.user} target {x.target} has count {x.count}",
                    user(x.user))
        key = (x.user, x.target, x.domain)
        if key in seen:
            rep.add("duplicate-interaction", f"duplicate {x.domain} record user {x.user} target {x.target}",
                    user(x.user))
        seen.add(key)
        if x.domain == "A":
            if not 0 <= x.target < ds.n_items:
                rep.add("unknown-item", f"purchase of missing item {x.target}", user(x.user))
        elif x.domain == "B":
            if not 0 <= x.target < ds.n_dishes:
                rep.add("unknown-dish", f"sale of missing dish {x.target}", user(x.user))
            if not ds.users[x.user].is_common:
                rep.add("unique-user-in-domain-b", f"unique user {x.user} has a domain-B record",
                        user(x.user))
            sells[x.user] += 1
        else:
            rep.add("unknown-domain", f"interaction domain {x.domain!r}", user(x.user))

    for u in ds.users:
        if u.is_common and sells[u.id] == 0:
            rep.add("common-user-without-tms", f"common user without TMS: user {u.id}", user(u.id))
    return rep


# ---------------------------------------------------------------- JSONL interchange

FILES = ("users", "categories", "items", "dishes", "interactions")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def save_dataset(ds: Dataset, path) -> None:
    """Write one JSONL file per entity class plus ``interactions.jsonl``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    rows = {
        "users": [{"id": u.id, "is_common": u.is_common, "doc": list(u.doc)} for u in ds.users],
        "categories": [{"id": c.id, "doc": list(c.doc)} for c in ds.categories],
        "items": [{"id": i.id, "category": i.category, "doc": list(i.doc)} for i in ds.items],
        "dishes": [{"id": d.id, "doc": list(d.doc),
                    "recipe": [{"category": c, "items": list(its)} for c, its in d.recipe.components]}
                   for d in ds.dishes],
        "interactions": [asdict(x) for x in ds.interactions],
    }
    for name in FILES:
        with open(out / f"{name}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for row in rows[name]:
                fh.write(_dump(row) + "\n")


def _read_jsonl(path: Path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
    return rows


def _field(path, lineno, row, name, typ):
    if name not in row:
        raise DatasetError(f"{path}:{lineno}: missing field {name!r}")
    val = row[name]
    if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise DatasetError(f"{path}:{lineno}: field {name!r} must be an integer, got {val!r}")
    if typ is bool and not isinstance(val, bool):
        raise DatasetError(f"{path}:{lineno}: field {name!r} must be a boolean, got {val!r}")
    if typ is list and not isinstance(val, list):
        raise DatasetError(f"{path}:{lineno}: field {name!r} must be a list, got {val!r}")
    if typ is str and not isinstance(val, str):
        raise DatasetError(f"{path}:{lineno}: field {name!r} must be a string, got {val!r}")
    return val


def load_dataset(path, check: bool = True) -> Dataset:
    """Read a dataset directory written by :func:`save_dataset`.

    Malformed records raise :class:`DatasetError` naming file, line and field.
    With ``check`` the loaded dataset must also pass :func:`validate`.
    """
    root = Path(path)
    tables = {}
    for name in FILES:
        p = root / f"{name}.jsonl"
        if not p.exists():
            raise DatasetError(f"{p}: missing dataset file")
        tables[name] = (p, _read_jsonl(p))

    p, rows = tables["users"]
    users = tuple(UserRecord(_field(p, n, r, "id", int), _field(p, n, r, "is_common", bool),
                             tuple(_field(p, n, r, "doc", list))) for n, r in rows)
    p, rows = tables["categories"]
    cats = tuple(CategoryRecord(_field(p, n, r, "id", int), tuple(_field(p, n, r, "doc", list)))
                 for n, r in rows)
    p, rows = tables["items"]
    items = tuple(ItemRecord(_field(p, n, r, "id", int), _field(p, n, r, "category", int),
                             tuple(_field(p, n, r, "doc", list))) for n, r in rows)
    p, rows = tables["dishes"]
    dishes = []
    for n, r in rows:
        did = _field(p, n, r, "id", int)
        comps = []
        for comp in _field(p, n, r, "recipe", list):
            if not isinstance(comp, dict):
                raise DatasetError(f"{p}:{n}: field 'recipe' entries must be objects")
            its = _field(p, n, comp, "items", list)
            if any(isinstance(i, bool) or not isinstance(i, int) for i in its):
                raise DatasetError(f"{p}:{n}: field 'items' must hold integers")
            comps.append((_field(p, n, comp, "category", int), tuple(its)))
        dishes.append(DishRecord(did, Recipe(did, tuple(comps)), tuple(_field(p, n, r, "doc", list))))
    p, rows = tables["interactions"]
    if not rows:
        raise DatasetError(f"{p}: no interactions")
    inter = []
    for n, r in rows:
        dom = _field(p, n, r, "domain", str)
        if dom not in ("A", "B"):
            raise DatasetError(f"{p}:{n}: field 'domain' must be 'A' or 'B', got {dom!r}")
        cnt = _field(p, n, r, "count", int)
        if cnt < 1:
            raise DatasetError(f"{p}:{n}: field 'count' must be >= 1, got {cnt}")
        inter.append(Interaction(_field(p, n, r, "user", int), _field(p, n, r, "target", int), cnt, dom))

    ds = Dataset(users, cats, items, tuple(dishes), tuple(inter))
    if check:
        rep = validate(ds)
        if rep:
            raise DatasetError(f"{root}: invalid dataset\n{rep}")
    return ds


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    for x in ds.interactions:
        h.update(_dump(asdict(x)).encode())
    for rec in ds.users + ds.categories + ds.items + ds.dishes:
        h.update(repr(rec).encode())
    return h.hexdigest()


# ---------------------------------------------------------------- synthetic generator

@dataclass(frozen=True)
class GenConfig:
    n_common_users: int = 300
    n_unique_users: int = 60
    n_items: int = 200
    n_categories: int = 40
    n_dishes: int = 150
    unique_user_proportion: float | None = None
    sparsity_A: float = 0.04
    latent_dim: int = 8
    rng_seed: int = 0
    vocab_size: int = 500
    doc_len: tuple = (20, 50)
    max_dishes_per_user: int = 4
    max_recipe_categories: int = 3
    max_items_per_category: int = 2
    taste_sharpness: float = 8.0
    category_boost: float = 4.0
    recipe_item_boost: float = 2.0

    @property
    def n_users(self) -> int:
        return self.n_common_users + self.n_unique_users

    @property
    def proportion(self) -> float:
        return self.n_unique_users / self.n_users

    @classmethod
    def with_unique_proportion(cls, m: float, n_common_users: int = 300, **kw) -> "GenConfig":
        """Config whose unique-user fraction is ``m`` within one user."""
        if not 0 < m < 1:
            raise ValueError(f"unique-user proportion must be in (0, 1), got {m}")
        n_unique = max(1, int(round(m * n_common_users / (1.0 - m))))
        return cls(n_common_users=n_common_users, n_unique_users=n_unique,
                   unique_user_proportion=m, **kw)

    def check(self) -> None:
        for name in ("n_common_users", "n_items", "n_categories", "n_dishes", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"GenConfig.{name} must be >= 1")
        if self.n_unique_users < 0:
            raise ValueError("GenConfig.n_unique_users must be >= 0")
        if not 0 < self.sparsity_A < 1:
            raise ValueError(f"GenConfig.sparsity_A must be in (0, 1), got {self.sparsity_A}")
        if self.unique_user_proportion is not None:
            m = self.unique_user_proportion
            if not 0 < m < 1:
                raise ValueError(f"GenConfig.unique_user_proportion must be in (0, 1), got {m}")
            if abs(self.proportion - m) > 1.0 / self.n_users:
                raise ValueError(f"unique_user_proportion {m} inconsistent with "
                                 f"{self.n_unique_users}/{self.n_users} users")
        if self.n_items < self.n_categories:
            raise ValueError("infeasible config: fewer items than categories")
        if self.vocab_size < self.latent_dim:
            raise ValueError("infeasible config: vocabulary smaller than the number of topics")


def standard_config(seed: int = 0, **overrides) -> GenConfig:
    """The desk-scale dataset used by the acceptance runs."""
    return replace(GenConfig(rng_seed=seed), **overrides)


def _topic_vocab(cfg: GenConfig) -> list:
    buckets = np.array_split(np.arange(cfg.vocab_size), cfg.latent_dim)
    return [[f"w{t}_{j}" for j in range(len(b))] for t, b in enumerate(buckets)]


def _document(rng, mix: np.ndarray, vocab: list, cfg: GenConfig) -> tuple:
    lo, hi = cfg.doc_len
    n = int(rng.integers(lo, hi + 1))
    mix = 0.9 * mix + 0.1 / len(mix)
    topics = rng.choice(len(mix), size=n, p=mix / mix.sum())
    return tuple(vocab[t][int(rng.integers(len(vocab[t])))] for t in topics)


def _dirichlet(rng, k: int, conc: float) -> np.ndarray:
    return rng.dirichlet(np.full(k, conc))


def generate_synthetic(cfg: GenConfig) -> Dataset:
    """Sample a two-domain dataset driven by latent topic mixtures.

    Latent taste vectors drive dish sales, ingredient purchases and every
    document, so text similarity tracks behavioural similarity. Common users
    buy preferentially from the categories (and the exact items) of the
    recipes they sell.
    """
    cfg.check()
    rng = np.random.default_rng(cfg.rng_seed)
    k = cfg.latent_dim
    vocab = _topic_vocab(cfg)

    cat_lat = np.empty((cfg.n_categories, k))
    for c in range(cfg.n_categories):
        cat_lat[c] = 0.7 * np.eye(k)[c % k] + 0.3 * _dirichlet(rng, k, 0.5)

    item_cat = np.concatenate([np.arange(cfg.n_categories),
                               rng.integers(0, cfg.n_categories, cfg.n_items - cfg.n_categories)])
    item_cat = np.sort(item_cat)
    item_lat = 0.7 * cat_lat[item_cat] + 0.3 * rng.dirichlet(np.full(k, 0.5), cfg.n_items)
    by_cat = [np.flatnonzero(item_cat == c) for c in range(cfg.n_categories)]

    recipes, seen = [], set()
    for d in range(cfg.n_dishes):
        for _attempt in range(200):
            pref = _dirichlet(rng, k, 0.3)
            w = cat_lat @ pref
            n_c = int(rng.integers(1, min(cfg.max_recipe_categories, cfg.n_categories) + 1))
            cats = rng.choice(cfg.n_categories, size=n_c, replace=False, p=w / w.sum())
            comps = []
            for c in cats:
                pool = by_cat[c]
                n_i = int(rng.integers(1, min(cfg.max_items_per_category, len(pool)) + 1))
                comps.append((int(c), tuple(sorted(int(i) for i in rng.choice(pool, n_i, replace=False)))))
            key = tuple(sorted(comps))
            if key not in seen:
                seen.add(key)
                recipes.append(Recipe(d, tuple(comps)))
                break
        else:
            raise ValueError(f"infeasible config: cannot build {cfg.n_dishes} distinct recipes "
                             f"from {cfg.n_categories} categories and {cfg.n_items} items")
    dish_lat = np.array([item_lat[list(r.items)].mean(axis=0) for r in recipes])

    n_users = cfg.n_users
    user_lat = rng.dirichlet(np.full(k, 0.3), n_users)
    is_common = np.zeros(n_users, dtype=bool)
    is_common[rng.permutation(n_users)[:cfg.n_common_users]] = True

    def taste(u, lat):
        s = lat @ user_lat[u]
        w = np.exp(cfg.taste_sharpness * (s - s.max()))
        return w

    interactions = []
    sold = {}
    for u in range(n_users):
        if not is_common[u]:
            continue
        n_d = min(cfg.n_dishes, 1 + int(rng.binomial(cfg.max_dishes_per_user - 1, 0.4)))
        w = taste(u, dish_lat)
        ds_ = np.sort(rng.choice(cfg.n_dishes, size=n_d, replace=False, p=w / w.sum()))
        sold[u] = ds_
        for d in ds_:
            interactions.append(Interaction(u, int(d), int(rng.geometric(0.5)), "B"))

    total = int(round(cfg.sparsity_A * n_users * cfg.n_items))
    if total < n_users:
        raise ValueError(f"infeasible config: {total} domain-A interactions for {n_users} users")
    activity = rng.lognormal(0.0, 0.5, n_users)
    per_user = 1 + rng.multinomial(total - n_users, activity / activity.sum())
    overflow = np.maximum(per_user - cfg.n_items, 0).sum()
    per_user = np.minimum(per_user, cfg.n_items)
    while overflow:
        room = np.flatnonzero(per_user < cfg.n_items)
        if not len(room):
            raise ValueError("infeasible config: sparsity_A too high")
        per_user[rng.choice(room)] += 1
        overflow -= 1

    popularity = rng.lognormal(0.0, 0.5, cfg.n_items)
    for u in range(n_users):
        w = taste(u, item_lat) * popularity
        if is_common[u]:
            in_cat = np.zeros(cfg.n_items, dtype=bool)
            in_recipe = np.zeros(cfg.n_items, dtype=bool)
            for d in sold[u]:
                for c in recipes[d].categories:
                    in_cat[by_cat[c]] = True
                in_recipe[list(recipes[d].items)] = True
            w = w * np.where(in_cat, cfg.category_boost, 1.0) * np.where(in_recipe, cfg.recipe_item_boost, 1.0)
        chosen = np.sort(rng.choice(cfg.n_items, size=int(per_user[u]), replace=False, p=w / w.sum()))
        for i in chosen:
            interactions.append(Interaction(u, int(i), int(rng.geometric(0.5)), "A"))

    users = tuple(UserRecord(u, bool(is_common[u]), _document(rng, user_lat[u], vocab, cfg))
                  for u in range(n_users))
    cats = tuple(CategoryRecord(c, _document(rng, cat_lat[c], vocab, cfg)) for c in range(cfg.n_categories))
    items = tuple(ItemRecord(i, int(item_cat[i]), _document(rng, item_lat[i], vocab, cfg))
                  for i in range(cfg.n_items))
    dishes = tuple(DishRecord(d, recipes[d], _document(rng, dish_lat[d], vocab, cfg))
                   for d in range(cfg.n_dishes))
    inter = sorted(interactions, key=lambda x: (x.domain, x.user, x.target))
    return Dataset(users, cats, items, dishes, tuple(inter))

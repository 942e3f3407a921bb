import dataclasses
import filecmp
from collections import Counter

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from gres.config import M_VALUES
from gres.data import (DatasetError, EntityId, GenConfig, Interaction, Kind, dataset_digest,
                       generate_synthetic, item, load_dataset, save_dataset, validate)


def test_entity_id_round_trip():
    e = item(7)
    assert str(e) == "item:7"
    assert EntityId.parse("item:7") == e
    assert EntityId.parse("dish:0").kind is Kind.DISH


def test_generation_is_deterministic_to_the_byte(tmp_path):
    cfg = GenConfig(n_common_users=20, n_unique_users=4, n_items=30, n_categories=6, n_dishes=15, rng_seed=9)
    save_dataset(generate_synthetic(cfg), tmp_path / "a")
    save_dataset(generate_synthetic(cfg), tmp_path / "b")
    names = [p.name for p in (tmp_path / "a").iterdir()]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors and len(match) == 5


def test_different_seeds_give_different_interactions():
    base = GenConfig(n_common_users=20, n_unique_users=4, n_items=30, n_categories=6, n_dishes=15)
    a = generate_synthetic(dataclasses.replace(base, rng_seed=1))
    b = generate_synthetic(dataclasses.replace(base, rng_seed=2))
    assert Counter(a.interactions) != Counter(b.interactions)


def test_user_counts_at_full_scale():
    ds = generate_synthetic(GenConfig(n_common_users=3000, n_unique_users=600, n_items=200,
                                      n_categories=40, n_dishes=150, sparsity_A=0.005))
    assert len(ds.common_users) == 3000
    assert len(ds.unique_users) == 600


def test_sparsity_sets_the_purchase_volume():
    ds = generate_synthetic(GenConfig(n_common_users=250, n_unique_users=50, n_items=200,
                                      n_categories=40, n_dishes=150, sparsity_A=0.01))
    n = len(ds.domain("A"))
    assert 480 <= n <= 720


def test_generated_dataset_invariants(small_ds):
    assert not validate(small_ds)
    sold = {x.user for x in small_ds.domain("B")}
    bought = {x.user for x in small_ds.domain("A")}
    for u in small_ds.common_users:
        assert u in sold and u in bought
    assert not sold & set(small_ds.unique_users)
    for d in small_ds.dishes:
        for c, items in d.recipe.components:
            assert all(small_ds.items[i].category == c for i in items)


@pytest.mark.parametrize("m", M_VALUES)
def test_unique_user_fraction_matches_proportion(m):
    cfg = GenConfig.with_unique_proportion(m, n_common_users=300)
    ds = generate_synthetic(dataclasses.replace(cfg, n_items=60, n_categories=10, n_dishes=30))
    assert abs(len(ds.unique_users) / ds.n_users - m) <= 1.0 / ds.n_users


def test_infeasible_config_is_rejected():
    with pytest.raises(ValueError, match="infeasible"):
        generate_synthetic(GenConfig(n_common_users=5, n_unique_users=0, n_items=3, n_categories=2,
                                     n_dishes=500, max_recipe_categories=1, max_items_per_category=1))


def test_save_load_round_trip(small_ds, tmp_path):
    save_dataset(small_ds, tmp_path)
    assert load_dataset(tmp_path) == small_ds


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 2**32 - 1), n_common=st.integers(1, 12), n_unique=st.integers(0, 4))
def test_round_trip_property(tmp_path_factory, seed, n_common, n_unique):
    ds = generate_synthetic(GenConfig(n_common_users=n_common, n_unique_users=n_unique, n_items=25,
                                      n_categories=5, n_dishes=12, sparsity_A=0.1, rng_seed=seed))
    d = tmp_path_factory.mktemp("rt")
    save_dataset(ds, d)
    again = load_dataset(d)
    assert again == ds
    assert dataset_digest(again) == dataset_digest(ds)


def test_domain_b_record_for_unique_user_fails_validation(small_ds, tmp_path):
    u = small_ds.unique_users[0]
    bad = small_ds.with_interactions(small_ds.interactions + (Interaction(u, 0, 1, "B"),))
    assert "unique-user-in-domain-b" in validate(bad).codes()
    save_dataset(bad, tmp_path)
    with pytest.raises(DatasetError, match="invalid dataset"):
        load_dataset(tmp_path)


def test_empty_interaction_file(small_ds, tmp_path):
    save_dataset(small_ds, tmp_path)
    (tmp_path / "interactions.jsonl").write_text("")
    with pytest.raises(DatasetError, match="no interactions"):
        load_dataset(tmp_path)


def test_malformed_record_names_file_line_and_field(small_ds, tmp_path):
    save_dataset(small_ds, tmp_path)
    lines = (tmp_path / "items.jsonl").read_text().splitlines()
    lines[2] = lines[2].replace('"category":', '"categ":')
    (tmp_path / "items.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"items\.jsonl:3: missing field 'category'"):
        load_dataset(tmp_path)


def test_common_user_without_dishes(small_ds):
    u = small_ds.common_users[0]
    kept = [x for x in small_ds.interactions if not (x.domain == "B" and x.user == u)]
    rep = validate(small_ds.with_interactions(kept))
    assert rep.codes() == {"common-user-without-tms"}
    assert f"common user without TMS: user {u}" in str(rep)


def test_recipe_item_outside_its_category(small_ds):
    d = small_ds.dishes[0]
    c, items = d.recipe.components[0]
    stranger = next(i.id for i in small_ds.items if i.category != c)
    recipe = dataclasses.replace(d.recipe, components=((c, items + (stranger,)),) + d.recipe.components[1:])
    dishes = (dataclasses.replace(d, recipe=recipe),) + small_ds.dishes[1:]
    rep = validate(dataclasses.replace(small_ds, dishes=dishes))
    assert "recipe-item-outside-category" in rep.codes()
    assert any(str(item(stranger)) in v.entities for v in rep.violations)

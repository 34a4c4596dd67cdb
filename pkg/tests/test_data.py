import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from varsguard.data import (DataError, EmptyDatasetError, ImageStore, InteractionDataset, ParseError, SplitSpec,
                            SyntheticSpec, class_templates, generate_synthetic, leave_one_out_split,
                            load_interactions, preprocess, sample_triplet, sample_triplets)


def write_csv(tmp_path, text, name="r.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_binarization_of_ratings(tmp_path):
    ds = load_interactions(write_csv(tmp_path, "alice,a,5\nalice,b,3\nalice,c,1\n"))
    assert ds.num_users == 1 and ds.num_items == 3
    assert ds.num_interactions == 3


def test_duplicates_collapse_and_keys_reindexed(tmp_path):
    ds = load_interactions(write_csv(tmp_path, "user,item,rating\nu9,x,4\nu9,x,2\nu3,y,1\nu3,x,5\n"))
    assert ds.user_keys == ("u9", "u3")
    assert ds.item_keys == ("x", "y")
    assert ds.num_interactions == 3
    assert sorted(ds.positives(1).tolist()) == [0, 1]


def test_nonpositive_ratings_are_not_interactions(tmp_path):
    ds = load_interactions(write_csv(tmp_path, "a,x,0\na,y,2\n"))
    assert ds.num_interactions == 1


def test_parse_error_carries_row(tmp_path):
    with pytest.raises(ParseError) as err:
        load_interactions(write_csv(tmp_path, "a,x,1\nb,y\n"))
    assert err.value.row == 2
    with pytest.raises(ParseError) as err:
        load_interactions(write_csv(tmp_path, "a,x,1\nb,y,lots\n"))
    assert err.value.row == 2


def test_empty_file(tmp_path):
    with pytest.raises(EmptyDatasetError):
        load_interactions(write_csv(tmp_path, ""))


def test_from_pairs_range_checks():
    with pytest.raises(DataError):
        InteractionDataset.from_pairs(2, 2, [(2, 0)])
    with pytest.raises(DataError):
        InteractionDataset.from_pairs(2, 2, [(0, -1)])


pair_lists = st.lists(st.tuples(st.integers(0, 7), st.integers(0, 11)), min_size=1, max_size=60)


@given(pair_lists)
@settings(max_examples=60, deadline=None)
def test_positives_are_projection_of_interactions(pairs):
    ds = InteractionDataset.from_pairs(8, 12, pairs)
    proj = {u: set() for u in range(8)}
    for u, i in set(pairs):
        proj[u].add(i)
    assert {u: set(v) for u, v in ds.per_user_positives.items()} == proj
    assert ds.pairs[:, 0].max() < 8 and ds.pairs[:, 1].max() < 12


def test_preprocess_threshold_and_item_ids_kept():
    pairs = [(0, i) for i in range(5)] + [(1, i) for i in range(4)] + [(2, i) for i in range(3, 9)]
    ds = preprocess(InteractionDataset.from_pairs(3, 9, pairs), 5)
    assert ds.num_users == 2
    assert ds.num_items == 9
    assert all(len(ds.positives(u)) >= 5 for u in range(ds.num_users))
    assert ds.positives(1).tolist() == list(range(3, 9))


def test_preprocess_everyone_removed():
    with pytest.raises(EmptyDatasetError):
        preprocess(InteractionDataset.from_pairs(1, 3, [(0, 0)]), 5)


def test_leave_one_out_properties():
    ds, _ = generate_synthetic(SyntheticSpec(num_users=30, num_items=80, interactions_per_user=6))
    split = leave_one_out_split(ds, 3)
    assert set(split.test) == set(range(ds.num_users))
    for u, i in split.test.items():
        assert i in set(ds.positives(u).tolist())
        assert i not in set(split.train.positives(u).tolist())
        assert len(split.train.positives(u)) == len(ds.positives(u)) - 1
    assert split.train.num_interactions == ds.num_interactions - ds.num_users
    again = SplitSpec.from_json(split.to_json(), ds)
    assert again.test == split.test
    assert np.array_equal(again.train.pairs, split.train.pairs)


def test_leave_one_out_rejects_single_interaction_users():
    ds = InteractionDataset.from_pairs(2, 4, [(0, 0), (0, 1), (1, 2)])
    with pytest.raises(DataError):
        leave_one_out_split(ds, 0)


def test_triplets_respect_positives():
    ds, _ = generate_synthetic(SyntheticSpec(num_users=20, num_items=60, interactions_per_user=5))
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = sample_triplet(ds, rng)
        pos = set(ds.positives(t.user).tolist())
        assert t.pos in pos and t.neg not in pos
    trips = sample_triplets(ds, 2000, rng)
    for u, i, j in trips:
        pos = ds.positives(u)
        assert i in pos and j not in pos


def test_triplets_skip_users_without_positives():
    ds = InteractionDataset.from_pairs(3, 5, [(1, 0), (1, 3)])
    trips = sample_triplets(ds, 100, np.random.default_rng(1))
    assert set(trips[:, 0].tolist()) == {1}


def test_triplet_sampling_deterministic():
    ds, _ = generate_synthetic(SyntheticSpec(num_users=20, num_items=60, interactions_per_user=5))
    a = sample_triplets(ds, 300, np.random.default_rng(7))
    b = sample_triplets(ds, 300, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_synthetic_spec_validation():
    with pytest.raises(DataError):
        SyntheticSpec(interactions_per_user=4).validate()
    with pytest.raises(DataError):
        SyntheticSpec(num_latent_classes=1).validate()


def test_synthetic_is_seeded_and_in_range():
    spec = SyntheticSpec(num_users=25, num_items=70, interactions_per_user=6, image_side=16)
    ds1, st1 = generate_synthetic(spec)
    ds2, st2 = generate_synthetic(spec)
    assert np.array_equal(ds1.pairs, ds2.pairs)
    assert np.array_equal(st1.images, st2.images)
    assert st1.images.shape == (70, 3, 16, 16)
    assert st1.images.min() >= 0 and st1.images.max() <= 1
    assert (ds1.interaction_counts() == 6).all()


def test_synthetic_users_prefer_a_few_classes():
    ds, store = generate_synthetic(SyntheticSpec(num_users=120, num_items=300))
    # items a user picks concentrate on few classes: far fewer distinct classes than picks
    distinct = [len(set(store.labels[ds.positives(u)].tolist())) for u in range(ds.num_users)]
    assert np.mean(distinct) < 0.6 * 12


def test_templates_have_common_mean():
    t = class_templates(8, 32)
    assert np.allclose(t.mean(axis=(2, 3)), 0.5, atol=1e-5)
    # distinct motifs
    flat = t.reshape(8, -1)
    assert min(np.abs(flat[a] - flat[b]).max() for a in range(8) for b in range(a + 1, 8)) > 0.05


def test_image_store_roundtrip(tmp_path):
    _, store = generate_synthetic(SyntheticSpec(num_users=10, num_items=20, interactions_per_user=5,
                                                image_side=8))
    store.save(tmp_path / "npy")
    back = ImageStore.load(tmp_path / "npy", 20)
    assert np.array_equal(back.images, store.images)
    store.save(tmp_path / "png", fmt="png")
    back = ImageStore.load(tmp_path / "png", 20)
    assert np.abs(back.images - store.images).max() <= 0.5 / 255 + 1e-6


def test_image_store_validation(tmp_path):
    with pytest.raises(DataError):
        ImageStore(np.full((2, 3, 4, 4), 1.5, np.float32))
    with pytest.raises(DataError):
        ImageStore.load(tmp_path, 3)

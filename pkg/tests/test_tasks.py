import functools
import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abstractor_lab import tasks
from abstractor_lab.errors import CapacityError, CheckpointError, ContractError
from abstractor_lab.rng import Rng


@pytest.fixture(scope="module")
def universe():
    return tasks.gen_object_universe(0)


@functools.lru_cache(maxsize=1)
def all_triples():
    """Every unordered triple of distinct cards, (85320, 3, 4)."""
    deck = tasks.all_cards()
    idx = np.array(list(itertools.combinations(range(81), 3)))
    return deck[idx]


def comparison_sort(u, row):
    def cmp(a, b):
        return -1 if u.precedes(row[a], row[b]) else 1

    return sorted(range(len(row)), key=functools.cmp_to_key(cmp))


# object universe ---------------------------------------------------------------------------
def test_universe_shape(universe):
    assert universe.objects.shape == (48, 12)
    assert len({o.tobytes() for o in universe.objects}) == 48


def test_product_structure(universe):
    o = universe.objects
    for i in range(48):
        alpha, beta = divmod(i, 12)
        np.testing.assert_array_equal(o[i, :4], o[alpha * 12, :4])
        np.testing.assert_array_equal(o[i, 4:], o[beta, 4:])


def test_primary_key_wins(universe):
    # (a_1, b_5) precedes (a_2, b_1) under the identity orders
    assert universe.precedes(4, 12)
    assert not universe.precedes(12, 4)


def test_order_is_strict_total(universe):
    u = universe
    prec = np.array([[u.precedes(i, j) for j in range(48)] for i in range(48)])
    assert not prec.diagonal().any()
    off = ~np.eye(48, dtype=bool)
    assert np.all((prec ^ prec.T)[off])
    # transitivity: (P @ P)[i, k] > 0 means some j with i < j < k
    assert np.all(prec[(prec.astype(int) @ prec.astype(int)) > 0])


def test_rank_agrees_with_precedes(universe):
    ranks = universe.rank(np.arange(48))
    assert sorted(ranks.tolist()) == list(range(48))
    for i, j in itertools.permutations(range(0, 48, 5), 2):
        assert universe.precedes(i, j) == (ranks[i] < ranks[j])


# sorting dataset --------------------------------------------------------------------------
def test_sorted_and_reversed_targets(universe):
    order = np.argsort(universe.rank(np.arange(48)))
    ascending = order[::4][:10]
    np.testing.assert_array_equal(tasks.argsort_targets(universe, ascending[None])[0], np.arange(10))
    np.testing.assert_array_equal(tasks.argsort_targets(universe, ascending[::-1][None])[0], np.arange(10)[::-1])


def test_targets_match_comparison_sort(universe):
    ds = tasks.gen_sorting_dataset(universe, 1000, 10, 10, seed=3)
    split = ds.train
    ranks = universe.rank(split.indices)
    for row, target, r in zip(split.indices, split.targets, ranks):
        assert sorted(target.tolist()) == list(range(10))
        assert np.all(np.diff(r[target]) > 0)
    for row, target in zip(split.indices[:100], split.targets[:100]):
        assert comparison_sort(universe, row) == target.tolist()


def test_sequences_distinct_and_splits_disjoint(universe):
    ds = tasks.gen_sorting_dataset(universe, 300, 100, 200, seed=4)
    keys = {name: {tuple(r) for r in s.indices} for name, s in ds.splits().items()}
    assert [len(k) for k in keys.values()] == [300, 100, 200]
    assert not keys["train"] & keys["val"] and not keys["train"] & keys["test"] and not keys["val"] & keys["test"]
    assert all(len(set(r)) == 10 for r in ds.train.indices)
    np.testing.assert_array_equal(ds.train.inputs, universe.objects[ds.train.indices])


def test_infeasible_sizes(universe):
    small = tasks.ObjectUniverse(universe.objects[:3], np.arange(4), np.arange(12), 0)
    with pytest.raises(CapacityError):
        tasks.gen_sorting_dataset(small, 5, 1, 1, seq_len=3)
    with pytest.raises(CapacityError):
        tasks.gen_sorting_dataset(universe, 1, 1, 1, seq_len=49)


def test_sorting_generator_deterministic(universe):
    a = tasks.gen_sorting_dataset(universe, 50, 10, 10, seed=9)
    b = tasks.gen_sorting_dataset(tasks.gen_object_universe(0), 50, 10, 10, seed=9)
    for name in ("train", "val", "test"):
        np.testing.assert_array_equal(a.splits()[name].inputs, b.splits()[name].inputs)
        np.testing.assert_array_equal(a.splits()[name].targets, b.splits()[name].targets)


# reshuffled primary order -----------------------------------------------------------------
def test_reshuffle_keeps_objects_and_b_order(universe):
    v = tasks.reshuffle_primary_order(universe, 5)
    assert v.objects.tobytes() == universe.objects.tobytes()
    np.testing.assert_array_equal(v.b_order, universe.b_order)
    assert sorted(v.a_order.tolist()) == [0, 1, 2, 3]


def test_identity_reshuffle_keeps_order(universe):
    seed = next(s for s in range(1000) if np.array_equal(Rng(s).permutation(4), np.arange(4)))
    v = tasks.reshuffle_primary_order(universe, seed)
    for i, j in itertools.permutations(range(48), 2):
        assert v.precedes(i, j) == universe.precedes(i, j)


def test_b_only_comparisons_unchanged(universe):
    v = tasks.reshuffle_primary_order(universe, 7)
    checked = 0
    for alpha in range(4):
        for b1, b2 in itertools.combinations(range(12), 2):
            i, j = alpha * 12 + b1, alpha * 12 + b2
            assert v.precedes(i, j) == universe.precedes(i, j)
            checked += 1
    assert checked == 4 * 66


def test_relabel_changes_only_targets(universe):
    ds = tasks.gen_sorting_dataset(universe, 20, 5, 5, seed=1)
    v = tasks.reshuffle_primary_order(universe, 7)
    re = tasks.relabel(ds, v)
    np.testing.assert_array_equal(re.train.indices, ds.train.indices)
    np.testing.assert_array_equal(re.train.targets, tasks.argsort_targets(v, ds.train.indices))


# order pairs ----------------------------------------------------------------------------------
def test_order_pairs_counts_and_split():
    ds = tasks.gen_order_pairs(seed=0)
    assert len(ds.pairs) == 1024
    assert tuple(np.bincount(ds.split)) == (512, 154, 358)
    assert tasks.split_sizes(1024, (0.5, 0.15, 0.35)) == (512, 154, 358)
    assert len({tuple(p) for p in ds.pairs}) == 1024


def test_order_pair_labels():
    ds = tasks.gen_order_pairs(seed=0)
    label = {tuple(p): l for p, l in zip(ds.pairs.tolist(), ds.labels)}
    assert label[(0, 1)] == 1 and label[(1, 0)] == 0
    assert all(label[(i, i)] == 0 for i in range(32))
    x, y = ds.part("test")
    assert x.shape == (358, 2, 8) and y.shape == (358,)


def test_order_pairs_transitive():
    ds = tasks.gen_order_pairs(N=12, seed=1)
    L = ds.labels.reshape(12, 12).astype(int)
    assert np.all(L[(L @ L) > 0] == 1)


def test_split_fractions_must_sum_to_one():
    with pytest.raises(ContractError):
        tasks.split_sizes(10, (0.5, 0.5, 0.5))


# SET ---------------------------------------------------------------------------------------------
def test_is_set_examples():
    assert tasks.is_set([[0, 0, 0, 0], [1, 1, 1, 1], [2, 2, 2, 2]])
    assert tasks.is_set([[0, 0, 0, 0], [0, 0, 0, 1], [0, 0, 0, 2]])
    assert not tasks.is_set([[0, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 2]])


def test_is_set_rejects_bad_cards():
    with pytest.raises(ContractError):
        tasks.is_set([[0, 0, 0, 3], [0, 0, 0, 1], [0, 0, 0, 2]])
    with pytest.raises(ContractError):
        tasks.is_set([[0, 0, 0], [0, 0, 1], [0, 0, 2]])


def test_exhaustive_set_count_and_mod3_equivalence():
    triples = all_triples()
    assert len(triples) == 85_320
    direct = np.array([tasks.is_set(t) for t in triples])
    mod3 = np.array([tasks.is_set_mod3(t) for t in triples])
    assert direct.sum() == 1080
    np.testing.assert_array_equal(direct, mod3)


def test_symbolic_bits_determine_label():
    triples = all_triples()
    bits = tasks.symbolic_relations_batch(triples).astype(int)
    labels = np.all(triples.sum(1) % 3 == 0, axis=1)
    seen = {}
    for b, l in zip(map(tuple, bits), labels):
        assert seen.setdefault(b, l) == l


def test_symbolic_relation_examples():
    all_distinct = tasks.SetTriple(np.array([[0, 0, 0, 0], [1, 1, 1, 1], [2, 2, 2, 2]]), True)
    np.testing.assert_array_equal(tasks.symbolic_relations(all_distinct), np.zeros(12))
    color_only = np.array([[0, 0, 0, 0], [0, 1, 1, 1], [0, 2, 2, 2]])
    bits = tasks.symbolic_relations(color_only)
    np.testing.assert_array_equal(np.nonzero(bits)[0], [0, 1, 2])
    np.testing.assert_array_equal(tasks.symbolic_relations_batch(color_only[None])[0], bits)


def test_one_hot_layout():
    emb = tasks.one_hot_cards(np.array([[2, 0, 1, 1]]))
    np.testing.assert_array_equal(np.nonzero(emb[0])[0], [2, 3, 7, 10])


def test_generated_triples_are_valid():
    triples = tasks.gen_set_dataset(10_000, seed=0)
    labels = np.array([t.label for t in triples])
    assert abs(labels.mean() - 0.5) < 0.05
    for t in triples:
        assert t.label == tasks.is_set(t.cards)
        assert len({tuple(c) for c in t.cards}) == 3
        np.testing.assert_array_equal(t.embedding, tasks.one_hot_cards(t.cards))


def test_set_card_order_shuffled():
    triples = tasks.gen_set_dataset(2000, seed=1)
    firsts = [tasks.card_id(t.cards[0]) < tasks.card_id(t.cards[1]) for t in triples]
    assert 0.4 < np.mean(firsts) < 0.6


def test_set_splits_disjoint():
    ds = tasks.gen_set_splits(500, 200, 300, seed=2)
    keys = [{tuple(tasks.card_id(c) for c in t.cards) for t in part} for part in (ds.train, ds.val, ds.test)]
    assert [len(k) for k in keys] == [500, 200, 300]
    assert not (keys[0] & keys[1]) and not (keys[0] & keys[2]) and not (keys[1] & keys[2])


def test_set_generator_deterministic():
    a, b = tasks.gen_set_dataset(50, 3), tasks.gen_set_dataset(50, 3)
    assert all(np.array_equal(x.cards, y.cards) and x.label == y.label for x, y in zip(a, b))


# corruptions -------------------------------------------------------------------------------------
def test_zero_additive_is_identity(universe):
    np.testing.assert_array_equal(tasks.corrupt_additive(universe.objects, 0.0, Rng(0)), universe.objects)


def test_additive_noise_energy():
    o = np.zeros((1000, 12))
    sigma = 0.5
    noisy = tasks.corrupt_additive(o, sigma, Rng(1))
    energy = ((noisy - o) ** 2).sum(1).mean()
    assert abs(energy - sigma**2 * 12) < 4 * sigma**2 * np.sqrt(2 * 12 / 1000)


def test_linear_map_preserves_inner_products_on_average(universe):
    o = universe.objects.astype(np.float64)
    d = o.shape[1]
    sigma = d**-0.5
    rng = Rng(2)
    gram = o @ o.T
    est = np.zeros_like(gram)
    trials = 200
    for _ in range(trials):
        p = tasks.corrupt_linear(o, sigma, rng)
        est += p @ p.T / (sigma**2 * d)
    est /= trials
    norms = np.linalg.norm(o, axis=1)
    distortion = np.abs(est - gram) / np.outer(norms, norms)
    assert distortion.mean() < 0.2


def test_linear_map_is_shared():
    o = Rng(3).normal((5, 4))
    out = tasks.corrupt_linear(o, 1.0, Rng(4))
    phi = np.linalg.lstsq(o[:4], out[:4], rcond=None)[0]
    np.testing.assert_allclose(o[4] @ phi, out[4], atol=1e-8)


def test_negative_sigma_rejected():
    with pytest.raises(ContractError):
        tasks.corrupt_additive(np.zeros((2, 2)), -1.0, Rng(0))
    with pytest.raises(ContractError):
        tasks.corrupt_universe(tasks.gen_object_universe(0), "rotate", 1.0, Rng(0))


# containers --------------------------------------------------------------------------------------
@given(seed=st.integers(0, 2**31 - 1))
def test_container_round_trip(seed, tmp_path_factory):
    rng = Rng(seed)
    arrays = {"x": rng.normal((3, 4)).astype(np.float32), "y": rng.integers(0, 10, (3, 2))}
    path = tmp_path_factory.mktemp("data") / "d.data"
    tasks.save_arrays(path, "sorting", seed, arrays, {"note": "t"})
    header, loaded = tasks.load_arrays(path)
    assert header["kind"] == "sorting" and header["seed"] == seed
    np.testing.assert_array_equal(loaded["x"], arrays["x"])
    np.testing.assert_array_equal(loaded["y"], arrays["y"])
    assert loaded["x"].dtype == np.dtype("<f4") and loaded["y"].dtype == np.dtype("<i8")


def test_container_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.data"
    path.write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        tasks.load_arrays(path)


def test_jsonl_export(tmp_path):
    path = tmp_path / "r.jsonl"
    tasks.export_jsonl(path, [{"a": 1}, {"b": [1, 2]}])
    assert [json.loads(l) for l in path.read_text().splitlines()] == [{"a": 1}, {"b": [1, 2]}]

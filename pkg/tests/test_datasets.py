import filecmp
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from copd import datasets as D
from copd import synthgen
from copd.datasets import Interaction


def _raw(rows):
    return [Interaction(u, i, 1.0, t) for u, i, t in rows]


def _small_dataset(seed=0, **kw):
    spec = synthgen.SynthSpec(n_users=40, n_items_a=60, n_items_b=50,
                              interactions_per_user_per_domain=12, seed=seed, **kw)
    a, b = synthgen.generate(spec)
    return D.leave_one_out_split(D.build_dual_domain(a, b, 5, 2), seed)


# --- ingestion ---------------------------------------------------------------

def test_load_single_line(tmp_path):
    p = tmp_path / "x.tsv"
    p.write_text("u1\ti9\t5.0\t1404000000\n")
    assert D.load_interactions(p) == [Interaction("u1", "i9", 5.0, 1404000000)]


def test_load_empty_file(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    assert D.load_interactions(p) == []


def test_load_skips_malformed_with_warning(tmp_path, caplog):
    p = tmp_path / "x.tsv"
    p.write_text("# header\nu1\ti1\t4.0\t10\nbroken line\nu2\ti1\t3.0\t-1\n")
    with caplog.at_level(logging.WARNING):
        got = D.load_interactions(p)
    assert len(got) == 2 and got[1].timestamp == -1
    assert sum("malformed" in r.message for r in caplog.records) == 1
    with pytest.raises(D.DatasetParseError):
        D.load_interactions(p, strict=True)


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        D.load_interactions(tmp_path / "nope.tsv")


def test_write_load_round_trip(tmp_path):
    rows = _raw([("u1", "i1", 5), ("u2", "i3", 7)])
    D.write_interactions(tmp_path / "r.tsv", rows)
    assert D.load_interactions(tmp_path / "r.tsv") == rows


# --- building ----------------------------------------------------------------

def test_nothing_filtered_when_thresholds_met():
    a = _raw([(u, f"a{i}", i) for u in ("x", "y") for i in range(5)])
    b = _raw([(u, f"b{i}", i) for u in ("x", "y") for i in range(5)])
    ds = D.build_dual_domain(a, b, min_user_inter=5, min_item_inter=2)
    assert ds.n_users == 2 and ds.n_items_a == 5 and ds.n_items_b == 5
    assert len(ds.train_a) == 10


def test_duplicates_collapse_keep_latest_timestamp():
    a = _raw([("x", "a0", 5), ("x", "a0", 9), ("x", "a1", 1)])
    b = _raw([("x", "b0", 1)])
    ds = D.build_dual_domain(a, b, 1, 1)
    assert len(ds.train_a) == 2
    assert ds.ts_a.tolist() == [9, 1]


def test_non_overlapping_users_dropped():
    a = _raw([("x", "a0", 1), ("y", "a0", 2)])
    b = _raw([("x", "b0", 1), ("z", "b0", 2)])
    ds = D.build_dual_domain(a, b, 1, 1)
    assert ds.user_map == ["x"]


def test_empty_after_filtering():
    a = _raw([("x", "a0", 1)])
    b = _raw([("y", "b0", 1)])
    with pytest.raises(D.EmptyDatasetError):
        D.build_dual_domain(a, b, 1, 1)
    with pytest.raises(D.EmptyDatasetError):
        D.build_dual_domain([], b)


def _naive_filter(a, b, mu, mi):
    """Brute-force fixed point: repeat single passes until nothing changes."""
    pa = {(x.user, x.item) for x in a}
    pb = {(x.user, x.item) for x in b}
    while True:
        users = {u for u, _ in pa} & {u for u, _ in pb}
        new = []
        for p in (pa, pb):
            uc = {u: sum(1 for v, _ in p if v == u) for u, _ in p}
            ic = {i: sum(1 for _, j in p if j == i) for _, i in p}
            new.append({(u, i) for u, i in p if u in users and uc[u] >= mu and ic[i] >= mi})
        if new == [pa, pb]:
            return pa, pb
        pa, pb = new


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_filtering_matches_naive_fixed_point(seed):
    rng = np.random.default_rng(seed)
    a = _raw([(f"u{rng.integers(12)}", f"a{rng.integers(15)}", 0) for _ in range(90)])
    b = _raw([(f"u{rng.integers(12)}", f"b{rng.integers(15)}", 0) for _ in range(90)])
    want_a, want_b = _naive_filter(a, b, 3, 3)
    if not want_a:
        with pytest.raises(D.EmptyDatasetError):
            D.build_dual_domain(a, b, 3, 3)
        return
    ds = D.build_dual_domain(a, b, 3, 3)
    got_a = {(ds.user_map[u], ds.item_map_a[i]) for u, i in ds.train_a}
    got_b = {(ds.user_map[u], ds.item_map_b[i]) for u, i in ds.train_b}
    assert got_a == want_a and got_b == want_b
    assert ds.user_map == sorted(ds.user_map)


# --- split -------------------------------------------------------------------

def test_latest_timestamp_held_out():
    a = _raw([("x", "a0", 10), ("x", "a1", 20), ("x", "a2", 30),
              ("y", "a2", 5), ("y", "a1", 6)])
    b = _raw([("x", "b0", 1), ("y", "b0", 1)])
    ds = D.leave_one_out_split(D.build_dual_domain(a, b, 1, 1), seed=0)
    assert ds.item_map_a[ds.test_a[0]] == "a2"
    assert ds.item_map_a[ds.test_a[1]] == "a1"
    assert ds.test_b.tolist() == [-1, -1]  # single-interaction users keep everything


def test_cold_start_item_not_tested():
    a = _raw([("x", "a0", 1), ("x", "a9", 99), ("y", "a0", 1), ("y", "a1", 2)])
    b = _raw([("x", "b0", 1), ("y", "b0", 1)])
    ds = D.leave_one_out_split(D.build_dual_domain(a, b, 1, 1), seed=0)
    x = ds.user_map.index("x")
    assert ds.test_a[x] == -1
    assert ds.item_map_a.index("a9") in ds.user_items("A")[x]
    D.check_invariants(ds)


def _brute_force_split(pairs, ts, n_users, seed):
    """Per-user scan for the maximum timestamp (unique maxima in this fixture)."""
    test = {}
    for u in range(n_users):
        rows = [(t, i) for (v, i), t in zip(pairs.tolist(), ts.tolist()) if v == u]
        if len(rows) >= 2:
            test[u] = max(rows)[1]
    trained = [i for (v, i) in pairs.tolist() if test.get(v) != i]
    return {u: i for u, i in test.items() if i in trained}


def test_split_matches_brute_force_on_five_users():
    rng = np.random.default_rng(4)
    rows_a, rows_b = [], []
    for u in range(5):
        for k, t in enumerate(rng.permutation(40)[:6]):
            rows_a.append((f"u{u}", f"a{rng.integers(8)}", int(t) * 10 + k))
            rows_b.append((f"u{u}", f"b{rng.integers(8)}", int(t) * 10 + k))
    built = D.build_dual_domain(_raw(rows_a), _raw(rows_b), 1, 1)
    ds = D.leave_one_out_split(built, seed=3)
    for dom, pairs, ts in (("A", built.train_a, built.ts_a), ("B", built.train_b, built.ts_b)):
        want = _brute_force_split(pairs, ts, built.n_users, 3)
        got = {u: int(i) for u, i in enumerate(ds.test(dom)) if i >= 0}
        assert got == want
        assert len(ds.train(dom)) + len(got) == len(pairs)


def test_split_tie_choice_is_seeded():
    a = _raw([("x", f"a{i}", 7) for i in range(6)] + [("y", f"a{i}", 1) for i in range(6)])
    b = _raw([("x", "b0", 1), ("y", "b0", 1)])
    built = D.build_dual_domain(a, b, 1, 1)
    picks = {D.leave_one_out_split(built, s).test_a[0] for s in range(20)}
    assert len(picks) > 1
    assert D.leave_one_out_split(built, 5).test_a[0] == D.leave_one_out_split(built, 5).test_a[0]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 1.0))
def test_synthetic_builds_satisfy_invariants(seed, gamma):
    ds = _small_dataset(seed, conformity_fraction=gamma)
    D.check_invariants(ds)
    for dom in D.DOMAINS:
        pop = ds.popularity(dom)
        if pop.max() > 0:
            assert pop.min() == 0.0 and pop.max() == 1.0
        np.testing.assert_array_equal(pop, D.compute_popularity(ds.train(dom), ds.n_items(dom)))


# --- popularity --------------------------------------------------------------

@pytest.mark.parametrize("counts,want", [([1, 5, 9], [0.0, 0.5, 1.0]),
                                         ([3, 3, 3], [0.0, 0.0, 0.0]),
                                         ([2, 3, 7, 7], [0.0, 0.2, 1.0, 1.0])])
def test_popularity_min_max(counts, want):
    items = np.repeat(np.arange(len(counts)), counts)
    pairs = np.stack([np.zeros_like(items), items], axis=1)
    np.testing.assert_allclose(D.compute_popularity(pairs, len(counts)), want, rtol=0, atol=1e-15)


# --- BPR sampling ------------------------------------------------------------

def _one_user(items_a, n_a):
    tr = np.array([[0, i] for i in items_a])
    return D.DualDomainDataset(
        n_users=1, n_items_a=n_a, n_items_b=2, train_a=tr, train_b=np.array([[0, 0]]),
        test_a=np.array([-1]), test_b=np.array([-1]),
        pop_a=D.compute_popularity(tr, n_a), pop_b=np.zeros(2),
        user_map=["x"], item_map_a=[f"a{i}" for i in range(n_a)], item_map_b=["b0", "b1"])


def test_forced_negative():
    ds = _one_user([0], 2)
    batch = D.sample_bpr_batch(ds, 50, np.random.default_rng(0))
    assert all(t.pos_item_a == 0 and t.neg_item_a == 1 and t.neg_item_b == 1 for t in batch)


def test_batch_size_exact_and_membership():
    ds = _small_dataset()
    batch = D.sample_bpr_batch(ds, 1024, np.random.default_rng(1))
    assert len(batch) == 1024
    nbrs = {d: ds.user_items(d) for d in D.DOMAINS}
    for t in batch:
        assert t.pos_item_a in nbrs["A"][t.user] and t.neg_item_a not in nbrs["A"][t.user]
        assert t.pos_item_b in nbrs["B"][t.user] and t.neg_item_b not in nbrs["B"][t.user]


def test_sampler_exhausted():
    ds = _one_user([0, 1], 2)
    with pytest.raises(D.SamplerExhaustedError):
        D.sample_bpr_batch(ds, 4, np.random.default_rng(0))


def test_positive_frequency_uniform_over_neighbourhood():
    ds = _one_user([0, 2, 3, 5, 8], 10)
    users, pos_a, neg_a, _, _ = D.BprSampler(ds).sample_arrays(100_000, np.random.default_rng(7))
    counts = np.bincount(pos_a, minlength=10)[[0, 2, 3, 5, 8]]
    assert stats.chisquare(counts).pvalue > 0.01
    neg_counts = np.bincount(neg_a, minlength=10)[[1, 4, 6, 7, 9]]
    assert stats.chisquare(neg_counts).pvalue > 0.01


def test_sampler_deterministic():
    ds = _small_dataset()
    a = D.BprSampler(ds).sample_arrays(64, np.random.default_rng(3))
    b = D.BprSampler(ds).sample_arrays(64, np.random.default_rng(3))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


# --- evaluation negatives ----------------------------------------------------

def test_eval_negatives_shortage_returns_all():
    ds = _one_user([0, 1, 2, 4, 5, 7, 8], 10)
    assert D.sample_eval_negatives(ds, 0, "A", n=999, seed=0) == [3, 6, 9]


def test_eval_negatives_distinct_and_excluded_over_many_users():
    spec = synthgen.SynthSpec(n_users=1000, n_items_a=400, n_items_b=300,
                              interactions_per_user_per_domain=10, seed=1)
    ds = D.leave_one_out_split(D.build_dual_domain(*synthgen.generate(spec), 5, 1), 1)
    nbrs = ds.user_items("A")
    cands = D.eval_candidates(ds, "A", n=99, seed=2)
    assert len(cands) > 900
    for u, negs in cands.items():
        touched = set(nbrs[u].tolist()) | {int(ds.test_a[u])}
        assert len(negs) == len(set(negs)) == min(99, ds.n_items_a - len(touched))
        assert not touched & set(negs)
    again = D.eval_candidates(ds, "A", n=99, seed=2)
    assert again == cands
    assert D.eval_candidates(ds, "A", n=99, seed=3) != cands


# --- prepared directory --------------------------------------------------------

def test_prepared_round_trip_and_idempotence(tmp_path):
    ds = _small_dataset()
    D.save_prepared(ds, tmp_path / "p1", {"seed": 0})
    D.save_prepared(_small_dataset(), tmp_path / "p2", {"seed": 0})
    cmp = filecmp.dircmp(tmp_path / "p1", tmp_path / "p2")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    back = D.load_prepared(tmp_path / "p1")
    for f in ("train_a", "train_b", "test_a", "test_b", "pop_a", "pop_b"):
        np.testing.assert_array_equal(getattr(back, f), getattr(ds, f))
    assert back.user_map == ds.user_map and back.item_map_b == ds.item_map_b


def test_stats_density():
    ds = _small_dataset()
    row = ds.stats()[0]
    assert row["density_pct"] == pytest.approx(100 * row["interactions"] / (row["users"] * row["items"]))
    assert 118114 / (3325 * 38706) * 100 == pytest.approx(0.0918, abs=1e-4)

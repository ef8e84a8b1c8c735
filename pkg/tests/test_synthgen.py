import numpy as np
import pytest
from scipy import stats

from copd import datasets as D
from copd import synthgen
from copd.synthgen import SynthSpec, generate, group_blocks, user_groups


def test_group_blocks_remainder_to_last():
    blocks = group_blocks(10, 3)
    assert [len(b) for b in blocks] == [3, 3, 4]
    assert np.array_equal(np.concatenate(blocks), np.arange(10))


def test_pure_interest_stays_in_group_block():
    spec = SynthSpec(n_users=50, n_items_a=80, n_items_b=60, conformity_fraction=0.0, seed=3)
    groups = user_groups(spec)
    raw_a, raw_b = generate(spec)
    for raw, n_items in ((raw_a, 80), (raw_b, 60)):
        blocks = group_blocks(n_items, spec.n_groups)
        for it in raw:
            u, item = int(it.user[1:]), int(it.item[1:])
            assert item in blocks[groups[u]]


def test_pure_conformity_follows_power_law():
    n_items, draws = 200, 100_000
    spec = SynthSpec(n_users=2000, n_items_a=n_items, n_items_b=n_items,
                     interactions_per_user_per_domain=50, conformity_fraction=1.0,
                     popularity_exponent=1.5, seed=9)
    raw_a, _ = generate(spec)
    assert len(raw_a) == draws
    counts = np.bincount([int(it.item[1:]) for it in raw_a], minlength=n_items)
    # the target law over popularity ranks; items are matched to ranks by the
    # generator's own permutation, recovered by replaying its stream
    rng = np.random.default_rng([9, 0x5EED])
    rng.integers(0, spec.n_groups, size=spec.n_users)
    probs = synthgen.popularity_distribution(n_items, 1.5, rng)
    by_rank = np.argsort(-probs, kind="stable")
    target = np.cumsum(np.sort(probs)[::-1])
    empirical = np.cumsum(counts[by_rank]) / draws
    # KS statistic over the rank-ordered support; the continuous null
    # distribution is conservative for a discrete target
    ks = np.abs(empirical - target).max()
    assert stats.kstwo.sf(ks, draws) > 0.01


def test_same_spec_same_files(tmp_path):
    spec = SynthSpec(n_users=20, n_items_a=40, n_items_b=40, seed=5)
    for name in ("x", "y"):
        a, b = generate(spec)
        D.write_interactions(tmp_path / f"{name}_a.tsv", a)
        D.write_interactions(tmp_path / f"{name}_b.tsv", b)
    assert (tmp_path / "x_a.tsv").read_bytes() == (tmp_path / "y_a.tsv").read_bytes()
    assert (tmp_path / "x_b.tsv").read_bytes() == (tmp_path / "y_b.tsv").read_bytes()
    other = generate(SynthSpec(n_users=20, n_items_a=40, n_items_b=40, seed=6))[0]
    assert [i.item for i in other] != [i.item for i in generate(spec)[0]]


@pytest.mark.parametrize("bad", [dict(interactions_per_user_per_domain=600),
                                 dict(conformity_fraction=1.5), dict(n_groups=0),
                                 dict(n_users=0), dict(popularity_exponent=-1.0)])
def test_infeasible_spec(bad):
    with pytest.raises(ValueError):
        generate(SynthSpec(**bad))


def test_timestamps_increase_per_user():
    raw_a, _ = generate(SynthSpec(n_users=5, seed=1))
    per_user = {}
    for it in raw_a:
        per_user.setdefault(it.user, []).append(it.timestamp)
    assert all(np.all(np.diff(ts) > 0) for ts in per_user.values())


@pytest.mark.parametrize("seed", [0, 1])
def test_default_build_satisfies_dataset_invariants(seed):
    ds = D.leave_one_out_split(D.build_dual_domain(*generate(SynthSpec(seed=seed)), 5, 2), seed)
    D.check_invariants(ds)
    assert ds.n_users == 300

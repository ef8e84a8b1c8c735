"""Dual-domain interaction data: ingestion, filtering, splitting, sampling."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DOMAINS = ("A", "B")
_DOMAIN_CODE = {"A": 0, "B": 1}


class DatasetParseError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class SamplerExhaustedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    rating: float
    timestamp: int = -1


@dataclass(frozen=True)
class BprTriple:
    user: int
    pos_item_a: int
    neg_item_a: int
    pos_item_b: int
    neg_item_b: int


@dataclass
class DualDomainDataset:
    """Interactions of one shared user set in two item domains.

    ``train_a``/``train_b`` are ``(n, 2)`` int arrays of ``(user, item)``;
    ``test_a``/``test_b`` hold one held-out item per user or ``-1``.
    """

    n_users: int
    n_items_a: int
    n_items_b: int
    train_a: np.ndarray
    train_b: np.ndarray
    test_a: np.ndarray
    test_b: np.ndarray
    pop_a: np.ndarray
    pop_b: np.ndarray
    user_map: list
    item_map_a: list
    item_map_b: list
    ts_a: np.ndarray = field(default=None, repr=False)
    ts_b: np.ndarray = field(default=None, repr=False)

    def n_items(self, domain):
        return self.n_items_a if domain == "A" else self.n_items_b

    def train(self, domain):
        return self.train_a if domain == "A" else self.train_b

    def test(self, domain):
        return self.test_a if domain == "A" else self.test_b

    def popularity(self, domain):
        return self.pop_a if domain == "A" else self.pop_b

    def item_map(self, domain):
        return self.item_map_a if domain == "A" else self.item_map_b

    def user_items(self, domain):
        """Per-user sorted arrays of training items (``N_u``)."""
        return _neighbourhoods(self.train(domain), self.n_users)

    def stats(self):
        rows = []
        for dom in DOMAINS:
            n_inter = len(self.train(dom)) + int((self.test(dom) >= 0).sum())
            density = n_inter / (self.n_users * self.n_items(dom))
            rows.append({"domain": dom, "users": self.n_users, "items": self.n_items(dom),
                         "interactions": n_inter, "density_pct": 100.0 * density})
        return rows


def _neighbourhoods(pairs, n_users):
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    users, items = pairs[order, 0], pairs[order, 1]
    bounds = np.searchsorted(users, np.arange(n_users + 1))
    return [items[bounds[u]:bounds[u + 1]] for u in range(n_users)]


# ---------------------------------------------------------------------------
# Ingestion


def load_interactions(path, format="tsv", strict=False):
    """Read ``user<TAB>item<TAB>rating<TAB>timestamp`` lines.

    Malformed lines are skipped with a warning, or raise
    :class:`DatasetParseError` when ``strict`` is set.
    """
    if format != "tsv":
        raise ValueError(f"unsupported format {format!r}")
    out, bad = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                if len(parts) not in (3, 4) or not parts[0] or not parts[1]:
                    raise ValueError("expected 3 or 4 tab-separated fields")
                rating = float(parts[2])
                ts = int(parts[3]) if len(parts) == 4 else -1
                if not math.isfinite(rating):
                    raise ValueError("non-finite rating")
            except ValueError:
                bad.append(lineno)
                continue
            out.append(Interaction(parts[0], parts[1], rating, ts))
    if bad:
        if strict:
            raise DatasetParseError(f"{path}: {len(bad)} malformed line(s), first at line {bad[0]}")
        log.warning("%s: skipped %d malformed line(s): %s", path, len(bad), bad[:10])
    return out


def write_interactions(path, interactions):
    with open(path, "w", encoding="utf-8") as fh:
        for it in interactions:
            fh.write(f"{it.user}\t{it.item}\t{it.rating!r}\t{it.timestamp}\n")


# ---------------------------------------------------------------------------
# Building


def _dedupe(raw):
    """Collapse duplicate (user, item) pairs, keeping the latest timestamp."""
    best = {}
    for it in raw:
        key = (it.user, it.item)
        if key not in best or it.timestamp > best[key]:
            best[key] = it.timestamp
    return best


def _filter(pairs, min_user, min_item, keep_users):
    while True:
        user_cnt, item_cnt = {}, {}
        for u, i in pairs:
            user_cnt[u] = user_cnt.get(u, 0) + 1
            item_cnt[i] = item_cnt.get(i, 0) + 1
        kept = {(u, i): ts for (u, i), ts in pairs.items()
                if u in keep_users and user_cnt[u] >= min_user and item_cnt[i] >= min_item}
        if len(kept) == len(pairs):
            return kept
        pairs = kept


def build_dual_domain(raw_a, raw_b, min_user_inter=5, min_item_inter=10):
    """Filter to a fixed point, keep overlapping users, and reindex."""
    if not raw_a or not raw_b:
        raise EmptyDatasetError("both domains need at least one interaction")
    pa, pb = _dedupe(raw_a), _dedupe(raw_b)
    while True:
        users = {u for u, _ in pa} & {u for u, _ in pb}
        na = _filter(pa, min_user_inter, min_item_inter, users)
        nb = _filter(pb, min_user_inter, min_item_inter, users)
        if len(na) == len(pa) and len(nb) == len(pb):
            users_a, users_b = {u for u, _ in na}, {u for u, _ in nb}
            if users_a == users_b:
                break
        pa, pb = na, nb
    if not users_a:
        raise EmptyDatasetError("no shared users survive filtering")

    user_map = sorted(users_a)
    uidx = {u: k for k, u in enumerate(user_map)}

    def encode(pairs):
        item_map = sorted({i for _, i in pairs})
        iidx = {i: k for k, i in enumerate(item_map)}
        keys = sorted(pairs, key=lambda k: (uidx[k[0]], iidx[k[1]]))
        arr = np.array([(uidx[u], iidx[i]) for u, i in keys], dtype=np.int64).reshape(-1, 2)
        ts = np.array([pairs[k] for k in keys], dtype=np.int64)
        return item_map, arr, ts

    item_map_a, train_a, ts_a = encode(pa)
    item_map_b, train_b, ts_b = encode(pb)
    n_users = len(user_map)
    empty = np.full(n_users, -1, dtype=np.int64)
    return DualDomainDataset(
        n_users=n_users, n_items_a=len(item_map_a), n_items_b=len(item_map_b),
        train_a=train_a, train_b=train_b, test_a=empty.copy(), test_b=empty.copy(),
        pop_a=compute_popularity(train_a, len(item_map_a)),
        pop_b=compute_popularity(train_b, len(item_map_b)),
        user_map=user_map, item_map_a=item_map_a, item_map_b=item_map_b, ts_a=ts_a, ts_b=ts_b)


def _split_domain(pairs, ts, n_users, rng):
    held = np.full(len(pairs), False)
    test = np.full(n_users, -1, dtype=np.int64)
    bounds = np.searchsorted(pairs[:, 0], np.arange(n_users + 1))
    for u in range(n_users):
        lo, hi = bounds[u], bounds[u + 1]
        if hi - lo < 2:
            continue
        user_ts = ts[lo:hi]
        latest = np.flatnonzero(user_ts == user_ts.max())
        pick = lo + (latest[0] if len(latest) == 1 else rng.choice(latest))
        held[pick] = True
        test[u] = pairs[pick, 1]
    # cold-start rule: a held-out item must still occur in training
    remaining = np.bincount(pairs[~held, 1], minlength=pairs[:, 1].max() + 1 if len(pairs) else 0)
    for u in np.flatnonzero(test >= 0):
        if remaining[test[u]] == 0:
            log.info("user %d: held-out item %d is cold-start; no test entry", u, test[u])
            idx = bounds[u] + np.flatnonzero(pairs[bounds[u]:bounds[u + 1], 1] == test[u])[0]
            held[idx] = False
            test[u] = -1
    return pairs[~held], ts[~held], test


def leave_one_out_split(dataset, seed):
    """Hold out each user's latest interaction per domain."""
    if dataset.ts_a is None or dataset.ts_b is None:
        raise ValueError("dataset has no timestamps; was it already split?")
    rng = np.random.default_rng([int(seed), 0x100])
    train_a, ts_a, test_a = _split_domain(dataset.train_a, dataset.ts_a, dataset.n_users, rng)
    train_b, ts_b, test_b = _split_domain(dataset.train_b, dataset.ts_b, dataset.n_users, rng)
    return replace(dataset, train_a=train_a, train_b=train_b, test_a=test_a, test_b=test_b,
                   ts_a=ts_a, ts_b=ts_b,
                   pop_a=compute_popularity(train_a, dataset.n_items_a),
                   pop_b=compute_popularity(train_b, dataset.n_items_b))


def compute_popularity(train, n_items=None):
    """Min-max normalized training interaction counts (all zero if counts are equal)."""
    train = np.asarray(train)
    items = train[:, 1] if train.ndim == 2 else train
    if n_items is None:
        n_items = int(items.max()) + 1
    counts = np.bincount(items, minlength=n_items).astype(np.float64)
    lo, hi = counts.min(), counts.max()
    if hi == lo:
        return np.zeros(n_items)
    return (counts - lo) / (hi - lo)


def check_invariants(ds):
    """Raise ``AssertionError`` if a built dataset violates its contract."""
    for dom in DOMAINS:
        tr, te, n_items = ds.train(dom), ds.test(dom), ds.n_items(dom)
        assert tr[:, 0].min() >= 0 and tr[:, 0].max() < ds.n_users
        assert tr[:, 1].min() >= 0 and tr[:, 1].max() < n_items
        assert set(np.unique(tr[:, 0])) == set(range(ds.n_users)), f"user without train in {dom}"
        seen = set(tr[:, 1].tolist())
        assert all(int(i) in seen for i in te[te >= 0]), f"cold-start test item in {dom}"
        pop = ds.popularity(dom)
        assert pop.min() >= 0.0 and pop.max() <= 1.0


# ---------------------------------------------------------------------------
# Sampling


class BprSampler:
    """Draws joint (user, pos/neg in A, pos/neg in B) training triples."""

    def __init__(self, dataset, max_rejections=100):
        self.n_users = dataset.n_users
        self.max_rejections = max_rejections
        self._domains = {}
        self._keys = {}
        for dom in DOMAINS:
            nbrs = dataset.user_items(dom)
            indptr = np.concatenate([[0], np.cumsum([len(n) for n in nbrs])])
            indices = np.concatenate(nbrs) if nbrs else np.zeros(0, dtype=np.int64)
            self._domains[dom] = (indptr, indices, dataset.n_items(dom))
            owners = np.repeat(np.arange(self.n_users), np.diff(indptr))
            self._keys[dom] = owners * dataset.n_items(dom) + indices

    def _positives(self, users, dom, rng):
        indptr, indices, _ = self._domains[dom]
        deg = indptr[users + 1] - indptr[users]
        return indices[indptr[users] + (rng.random(len(users)) * deg).astype(np.int64)]

    def _is_positive(self, users, items, dom):
        keys, n_items = self._keys[dom], self._domains[dom][2]
        q = users * n_items + items
        j = np.minimum(np.searchsorted(keys, q), max(len(keys) - 1, 0))
        return keys[j] == q if len(keys) else np.zeros(len(q), dtype=bool)

    def _negatives(self, users, dom, rng):
        n_items = self._domains[dom][2]
        neg = rng.integers(0, n_items, size=len(users))
        todo = np.flatnonzero(self._is_positive(users, neg, dom))
        for _ in range(self.max_rejections):
            if not len(todo):
                return neg
            neg[todo] = rng.integers(0, n_items, size=len(todo))
            todo = todo[self._is_positive(users[todo], neg[todo], dom)]
        if len(todo):
            raise SamplerExhaustedError(
                f"domain {dom}: no negative for user {users[todo[0]]} after "
                f"{self.max_rejections} rejections")
        return neg

    def sample_arrays(self, batch_size, rng):
        users = rng.integers(0, self.n_users, size=batch_size)
        pos_a = self._positives(users, "A", rng)
        neg_a = self._negatives(users, "A", rng)
        pos_b = self._positives(users, "B", rng)
        neg_b = self._negatives(users, "B", rng)
        return users, pos_a, neg_a, pos_b, neg_b


def sample_bpr_batch(dataset, batch_size, seed_stream, sampler=None):
    """Return ``batch_size`` :class:`BprTriple` drawn with ``seed_stream`` (a Generator)."""
    sampler = sampler or BprSampler(dataset)
    cols = sampler.sample_arrays(batch_size, seed_stream)
    return [BprTriple(*map(int, row)) for row in zip(*cols)]


def sample_eval_negatives(dataset, user, domain, n=999, seed=0, _interacted=None):
    """``n`` distinct items the user never touched in ``domain`` (train or test)."""
    n_items = dataset.n_items(domain)
    if _interacted is None:
        tr = dataset.train(domain)
        _interacted = set(tr[tr[:, 0] == user, 1].tolist())
        gt = int(dataset.test(domain)[user])
        if gt >= 0:
            _interacted.add(gt)
    mask = np.ones(n_items, dtype=bool)
    mask[list(_interacted)] = False
    pool = np.flatnonzero(mask)
    if len(pool) <= n:
        return pool.tolist()
    rng = np.random.default_rng([int(seed), _DOMAIN_CODE[domain], int(user)])
    return np.sort(rng.choice(pool, size=n, replace=False)).tolist()


def eval_candidates(dataset, domain, n=999, seed=0):
    """Map every user with a test entry to its list of sampled negatives."""
    nbrs = dataset.user_items(domain)
    test = dataset.test(domain)
    out = {}
    for u in np.flatnonzero(test >= 0):
        touched = set(nbrs[u].tolist())
        touched.add(int(test[u]))
        out[int(u)] = sample_eval_negatives(dataset, int(u), domain, n, seed, _interacted=touched)
    return out


# ---------------------------------------------------------------------------
# Prepared-dataset directory


def _write_pairs(path, arr):
    with open(path, "w", encoding="utf-8") as fh:
        for row in arr:
            fh.write("\t".join(str(int(x)) for x in row) + "\n")


def _write_lines(path, values):
    with open(path, "w", encoding="utf-8") as fh:
        for v in values:
            fh.write(f"{v}\n")


def save_prepared(ds, out_dir, meta=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    info = {"n_users": ds.n_users, "n_items_a": ds.n_items_a, "n_items_b": ds.n_items_b,
            "n_train_a": len(ds.train_a), "n_train_b": len(ds.train_b),
            "n_test_a": int((ds.test_a >= 0).sum()), "n_test_b": int((ds.test_b >= 0).sum())}
    info.update(meta or {})
    (out / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    _write_pairs(out / "train_a.tsv", ds.train_a)
    _write_pairs(out / "train_b.tsv", ds.train_b)
    for dom, test in (("a", ds.test_a), ("b", ds.test_b)):
        users = np.flatnonzero(test >= 0)
        _write_pairs(out / f"test_{dom}.tsv", np.stack([users, test[users]], axis=1))
    _write_lines(out / "pop_a.tsv", (repr(float(x)) for x in ds.pop_a))
    _write_lines(out / "pop_b.tsv", (repr(float(x)) for x in ds.pop_b))
    _write_lines(out / "user_map.tsv", (f"{k}\t{u}" for k, u in enumerate(ds.user_map)))
    _write_lines(out / "item_map_a.tsv", (f"{k}\t{i}" for k, i in enumerate(ds.item_map_a)))
    _write_lines(out / "item_map_b.tsv", (f"{k}\t{i}" for k, i in enumerate(ds.item_map_b)))


def _read_pairs(path):
    arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    return arr.reshape(-1, 2)


def _read_map(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").split("\t", 1)[1] for line in fh if line.strip()]


def load_prepared(in_dir):
    d = Path(in_dir)
    meta = json.loads((d / "meta.json").read_text())
    n_users = meta["n_users"]
    tests = []
    for dom in ("a", "b"):
        pairs = _read_pairs(d / f"test_{dom}.tsv")
        test = np.full(n_users, -1, dtype=np.int64)
        test[pairs[:, 0]] = pairs[:, 1]
        tests.append(test)
    return DualDomainDataset(
        n_users=n_users, n_items_a=meta["n_items_a"], n_items_b=meta["n_items_b"],
        train_a=_read_pairs(d / "train_a.tsv"), train_b=_read_pairs(d / "train_b.tsv"),
        test_a=tests[0], test_b=tests[1],
        pop_a=np.loadtxt(d / "pop_a.tsv", ndmin=1), pop_b=np.loadtxt(d / "pop_b.tsv", ndmin=1),
        user_map=_read_map(d / "user_map.tsv"), item_map_a=_read_map(d / "item_map_a.tsv"),
        item_map_b=_read_map(d / "item_map_b.tsv"))

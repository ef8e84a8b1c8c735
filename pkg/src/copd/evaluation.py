"""Leave-one-out ranking evaluation (HR@K, NDCG@K) and embedding export."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as M
from .datasets import eval_candidates
from .graph import build_all_graphs, build_domain_graph
from .numcore import InvalidArgumentError, Tensor


class EmptyEvaluationError(ValueError):
    pass


@dataclass
class EvalResult:
    domain: str
    hr_at_k: float
    ndcg_at_k: float
    n_users_evaluated: int
    k: int

    def to_json(self, task="", seed=None, checkpoint=None):
        return {"task": task, "domain": self.domain, "k": self.k, "hr": self.hr_at_k,
                "ndcg": self.ndcg_at_k, "n_users": self.n_users_evaluated, "seed": seed,
                "checkpoint": checkpoint}


def rank_ground_truth(e_u, gt_item, negatives, e_i):
    """1-based rank of ``gt_item`` among itself and ``negatives``.

    Ties with a candidate are resolved in favour of the smaller item index.
    """
    negatives = np.asarray(negatives, dtype=np.int64)
    if np.any(negatives == gt_item):
        raise InvalidArgumentError(f"ground-truth item {gt_item} is among the negatives")
    e_i = np.asarray(e_i)
    e_u = np.asarray(e_u)
    gt_score = float(e_i[gt_item] @ e_u)
    neg_scores = e_i[negatives] @ e_u
    return _rank(gt_score, gt_item, neg_scores, negatives)


def _rank(gt_score, gt_item, neg_scores, negatives):
    ahead = (neg_scores > gt_score) | ((neg_scores == gt_score) & (negatives < gt_item))
    return 1 + int(ahead.sum())


def hr_ndcg(rank, k=10):
    if rank < 1:
        raise InvalidArgumentError("rank is 1-based")
    if rank > k:
        return 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1)


def rank_users(user_emb, item_emb, test, candidates, workers=1):
    """Ranks of each user's held-out item against its sampled negatives."""
    users = sorted(candidates)

    def chunk(us):
        out = []
        for u in us:
            negs = np.asarray(candidates[u], dtype=np.int64)
            gt = int(test[u])
            scores = item_emb[np.concatenate([[gt], negs])] @ user_emb[u]
            out.append(_rank(scores[0], gt, scores[1:], negs))
        return out

    if workers <= 1 or len(users) < 2 * workers:
        return users, chunk(users)
    parts = np.array_split(np.asarray(users), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        ranks = [r for part in pool.map(chunk, parts) for r in part]
    return users, ranks


def evaluate_embeddings(user_emb, item_emb, dataset, domain, k=10, candidates=None,
                        n_negatives=999, seed=0, workers=1):
    test = dataset.test(domain)
    if candidates is None:
        candidates = eval_candidates(dataset, domain, n_negatives, seed)
    if not candidates:
        raise EmptyEvaluationError(f"domain {domain} has no test entries")
    _, ranks = rank_users(np.asarray(user_emb), np.asarray(item_emb), test, candidates, workers)
    hits = ndcgs = 0.0
    for r in ranks:
        h, n = hr_ndcg(r, k)
        hits += h
        ndcgs += n
    n_users = len(ranks)
    return EvalResult(domain, hits / n_users, ndcgs / n_users, n_users, k)


def inference_embeddings(params, graphs, L):
    """Fused user/item embeddings per domain from an inference forward pass."""
    return M.forward(detached(params), graphs, L, training=False)


def detached(params):
    """Frozen copy that records no computation."""
    cls = type(params)
    return cls(**{k: Tensor(v.values) for k, v in vars(params).items()})


def evaluate(params, dataset, domain, config, graphs=None, candidates=None, state=None,
             workers=1):
    """HR@K / NDCG@K of a CoPD model (or baseline params) on one domain's test set."""
    if isinstance(params, M.BaselineParams):
        return evaluate_baseline(params, dataset, domain, config, graphs, candidates, workers)
    if state is None:
        if graphs is None:
            graphs = build_all_graphs(dataset)
        state = inference_embeddings(params, graphs, config.L)
    return evaluate_embeddings(state.user(domain).values, state.item(domain).values, dataset,
                               domain, config.top_k, candidates, config.eval_negatives,
                               config.seed, workers)


def evaluate_baseline(params, dataset, domain, config, graph=None, candidates=None, workers=1):
    if graph is None or isinstance(graph, tuple):
        graph = build_domain_graph(dataset.train(domain), dataset.n_users, dataset.n_items(domain))
    frozen = detached(params)
    z_u, z_i = M.baseline_encode(graph, frozen.H_u, frozen.H_i, config.L)
    return evaluate_embeddings(z_u.values, z_i.values, dataset, domain, config.top_k, candidates,
                               config.eval_negatives, config.seed, workers)


def write_results(results, path, task="", seed=None, checkpoint=None):
    payload = [r.to_json(task, seed, checkpoint) for r in results]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


EXPORT_LABELS = ("A-emb", "B-emb", "Int-emb", "Conf-emb")


def export_embeddings(params, graphs, L, path):
    """Write z_u^A, z_u^B, z^int and z^conf rows as ``label<TAB>user<TAB>values...``."""
    st = inference_embeddings(params, graphs, L)
    blocks = zip(EXPORT_LABELS, (st.z_u_A, st.z_u_B, st.z_int, st.z_conf))
    with open(path, "w", encoding="utf-8") as fh:
        for label, t in blocks:
            for u, row in enumerate(t.values):
                fh.write(label + "\t" + str(u) + "\t"
                         + "\t".join(format(float(x), ".17g") for x in row) + "\n")


def read_embeddings(path):
    labels, users, rows = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            labels.append(parts[0])
            users.append(int(parts[1]))
            rows.append([float(x) for x in parts[2:]])
    return labels, np.array(users), np.array(rows)


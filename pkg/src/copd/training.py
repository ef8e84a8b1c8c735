"""Joint training loop for CoPD and the single-domain baseline."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import losses as Lo
from . import model as M
from . import numcore as nc
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401  (re-export)
from .datasets import DOMAINS, BprSampler, eval_candidates
from .evaluation import evaluate
from .graph import build_domain_graph

log = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "domain", "hr_at_10", "ndcg_at_10",
                 "l_rec", "l_dom", "l_cc", "l_pd", "total"]


@dataclass
class TrainConfig:
    d: int = 128
    L: int = 3
    lr: float = 0.001
    batch_size: int = 1024
    epochs: int = 100
    tau: float = 0.05
    lambda1: float = 1.0
    lambda2: float = 1.0
    beta: float = 1e-4
    dropout: float = 0.3
    neg_per_pos: int = 1
    seed: int = 0
    eval_every: int = 10
    eval_negatives: int = 999
    top_k: int = 10
    popularity_weighting: bool = True

    def __post_init__(self):
        for name in ("lr", "lambda1", "lambda2", "beta", "dropout"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.neg_per_pos != 1:
            raise ValueError("only one negative per positive is supported")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss component turns non-finite; carries the last good params."""

    def __init__(self, component, epoch, step, last_good):
        super().__init__(f"non-finite {component} at epoch {epoch}, step {step}")
        self.component = component
        self.epoch = epoch
        self.step = step
        self.last_good = last_good


@dataclass
class TrainResult:
    params: object
    metric_log: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    best_params: object = None
    best_epoch: int = 0
    best_hr: float = -1.0


def steps_per_epoch(dataset, batch_size):
    return math.ceil((len(dataset.train_a) + len(dataset.train_b)) / (2 * batch_size))


def _unique_rows(table, idx):
    return nc.take_rows(table, np.unique(idx))


def step_loss(params, graphs, dataset, batch, config, rng):
    """Forward one joint batch and return ``(total_tensor, LossBreakdown)``."""
    users, pos_a, neg_a, pos_b, neg_b = batch
    st = M.forward(params, graphs, config.L, training=True, rng=rng, rate=config.dropout)

    l_rec = None
    for dom, pos, neg in (("A", pos_a, neg_a), ("B", pos_b, neg_b)):
        e_u = nc.take_rows(st.user(dom), users)
        e_i = st.item(dom)
        term = Lo.bpr_loss(M.row_scores(e_u, nc.take_rows(e_i, pos)),
                           M.row_scores(e_u, nc.take_rows(e_i, neg)))
        l_rec = term if l_rec is None else l_rec + term
    if config.beta:
        touched = [_unique_rows(params.H_u_A, users), _unique_rows(params.H_u_B, users),
                   _unique_rows(params.H_u_S, users),
                   _unique_rows(params.H_i_A, np.concatenate([pos_a, neg_a])),
                   _unique_rows(params.H_i_B, np.concatenate([pos_b, neg_b]))]
        l_rec = l_rec + nc.scale(Lo.l2_penalty(touched), config.beta)

    p_A = M.classify_domain(nc.take_rows(st.z_u_A, users), params)
    p_B = M.classify_domain(nc.take_rows(st.z_u_B, users), params)
    p_S = M.classify_domain(nc.take_rows(st.z_u_S, users), params)
    l_dom = Lo.domain_loss(p_A, p_B, p_S)

    l_cc_A = Lo.coherence_loss(nc.take_rows(st.z_i_AS, pos_a), nc.take_rows(st.z_i_A, pos_a),
                               nc.take_rows(st.z_i_A, neg_a))
    l_cc_B = Lo.coherence_loss(nc.take_rows(st.z_i_BS, pos_b), nc.take_rows(st.z_i_B, pos_b),
                               nc.take_rows(st.z_i_B, neg_b))

    z_int = nc.take_rows(st.z_int, users)
    z_conf = nc.take_rows(st.z_conf, users)
    parts = {"l_cc_A": l_cc_A, "l_cc_B": l_cc_B}
    for dom, shared, pos in (("A", st.z_i_AS, pos_a), ("B", st.z_i_BS, pos_b)):
        pop = dataset.popularity(dom)
        if not config.popularity_weighting:
            pop = np.full_like(pop, 0.5)
        parts[f"l_conf_{dom}"], parts[f"l_int_{dom}"] = Lo.preference_loss(
            z_int, z_conf, shared, pop, pos, config.tau)
    l_pd = parts["l_conf_A"] + parts["l_int_A"] + parts["l_conf_B"] + parts["l_int_B"]
    return Lo.total_loss(l_rec, l_dom, l_cc_A + l_cc_B, l_pd, config.lambda1, config.lambda2,
                         parts)


def _mean_breakdown(items):
    keys = ("l_rec", "l_dom", "l_cc", "l_pd", "total")
    if not items:
        return {k: float("nan") for k in keys}
    return {k: float(np.mean([getattr(b, k) for b in items])) for k in keys}


def train(dataset, graphs, config, on_epoch=None):
    """Run the joint training procedure; deterministic for a given ``config.seed``."""
    params = M.init_params(dataset.n_users, dataset.n_items_a, dataset.n_items_b,
                           config.d, config.seed)
    tensors = params.tensors()
    opt = nc.AdamState.for_params(tensors, lr=config.lr)
    rng = np.random.default_rng([int(config.seed), 1])
    sampler = BprSampler(dataset)
    result = TrainResult(params=params)
    candidates = None
    n_steps = steps_per_epoch(dataset, config.batch_size)
    last_good = params.copy()

    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        for step in range(n_steps):
            batch = sampler.sample_arrays(config.batch_size, rng)
            try:
                total, breakdown = step_loss(params, graphs, dataset, batch, config, rng)
            except Lo.NonFiniteLossError as exc:
                raise TrainingDivergedError(exc.component, epoch, step, last_good) from exc
            nc.zero_grad(tensors)
            nc.backward(total)
            nc.adam_step(tensors, [t.grad for t in tensors], opt)
            if not all(np.all(np.isfinite(t.values)) for t in tensors):
                raise TrainingDivergedError("parameters", epoch, step, last_good)
            epoch_losses.append(breakdown)
            result.step_losses.append(breakdown.total)
        last_good = params.copy()

        if epoch % max(config.eval_every, 1) == 0 or epoch == config.epochs:
            if candidates is None:
                candidates = {dom: eval_candidates(dataset, dom, config.eval_negatives,
                                                   config.seed) for dom in DOMAINS}
            means = _mean_breakdown(epoch_losses)
            hrs = []
            for dom in DOMAINS:
                res = evaluate(params, dataset, dom, config, graphs, candidates[dom])
                hrs.append(res.hr_at_k)
                result.metric_log.append({"epoch": epoch, "domain": dom,
                                          "hr_at_10": res.hr_at_k, "ndcg_at_10": res.ndcg_at_k,
                                          **means})
            if np.mean(hrs) > result.best_hr:
                result.best_hr = float(np.mean(hrs))
                result.best_epoch = epoch
                result.best_params = params.copy()
            log.info("epoch %d: loss %.4f hr %s", epoch, means["total"], hrs)
        if on_epoch is not None:
            on_epoch(epoch, params, result)
    if result.best_params is None:
        result.best_params = params.copy()
    return result


def train_baseline(dataset, domain, config, graph=None):
    """BPR-only light-propagation model on a single domain."""
    n_items = dataset.n_items(domain)
    if graph is None:
        graph = build_domain_graph(dataset.train(domain), dataset.n_users, n_items)
    params = M.init_baseline(dataset.n_users, n_items, config.d, config.seed)
    tensors = params.tensors()
    opt = nc.AdamState.for_params(tensors, lr=config.lr)
    rng = np.random.default_rng([int(config.seed), 2])
    sampler = BprSampler(dataset)
    n_steps = math.ceil(len(dataset.train(domain)) / config.batch_size)
    losses = []
    for _ in range(config.epochs):
        for _ in range(n_steps):
            users, pos_a, neg_a, pos_b, neg_b = sampler.sample_arrays(config.batch_size, rng)
            pos, neg = (pos_a, neg_a) if domain == "A" else (pos_b, neg_b)
            z_u, z_i = M.baseline_encode(graph, params.H_u, params.H_i, config.L)
            e_u = nc.take_rows(z_u, users)
            loss = Lo.bpr_loss(M.row_scores(e_u, nc.take_rows(z_i, pos)),
                               M.row_scores(e_u, nc.take_rows(z_i, neg)))
            if config.beta:
                touched = [_unique_rows(params.H_u, users),
                           _unique_rows(params.H_i, np.concatenate([pos, neg]))]
                loss = loss + nc.scale(Lo.l2_penalty(touched), config.beta)
            nc.zero_grad(tensors)
            nc.backward(loss)
            nc.adam_step(tensors, [t.grad for t in tensors], opt)
            losses.append(float(loss.values))
    return params, losses


def write_metric_log(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_metric_log(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["epoch"] = int(row["epoch"])
        for k in METRIC_FIELDS[2:]:
            row[k] = float(row[k])
    return rows

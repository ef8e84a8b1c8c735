"""Training objectives. Every loss is a batch mean and returns a scalar Tensor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc

PROB_CLIP = 1e-7
NORM_FLOOR = 1e-12


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component, value):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component


def cosine_rows(a, b):
    """Row-wise cosine similarity, shape ``(n, 1)``, norms floored at 1e-12."""
    na = nc.clip(nc.row_l2_norm(a), lo=NORM_FLOOR)
    nb = nc.clip(nc.row_l2_norm(b), lo=NORM_FLOOR)
    return nc.sum(a * b, axis=1, keepdims=True) / (na * nb)


def coherence_loss(z_shared_pos, z_spec_pos, z_spec_neg):
    """Mean of ``1 - cos(shared_i, SG(spec_i)) + max(0, cos(shared_i, SG(spec_j)))``.

    Domain-specific inputs are frozen here, so only the shared side learns.
    """
    pos = cosine_rows(z_shared_pos, nc.stop_gradient(z_spec_pos))
    neg = cosine_rows(z_shared_pos, nc.stop_gradient(z_spec_neg))
    return nc.mean(1.0 - pos + nc.relu(neg))


def _clip_prob(p):
    return nc.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


def cross_entropy(p, y):
    """Mean binary cross-entropy of probabilities ``p`` against a constant label ``y``."""
    p = _clip_prob(p)
    terms = []
    if y != 0.0:
        terms.append(nc.scale(nc.log(p), -y))
    if y != 1.0:
        terms.append(nc.scale(nc.log(1.0 - p), -(1.0 - y)))
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return nc.mean(total)


def kl_bernoulli(y, p):
    """Mean ``KL(Bernoulli(y) || Bernoulli(p))`` for a constant target ``y``."""
    p = _clip_prob(p)
    terms = []
    if y > 0.0:
        terms.append(nc.scale(nc.log(p), -y) + y * math.log(y))
    if y < 1.0:
        terms.append(nc.scale(nc.log(1.0 - p), -(1.0 - y)) + (1.0 - y) * math.log(1.0 - y))
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return nc.mean(total)


def domain_loss(p_A, p_B, p_S):
    """One third of: KL of shared predictions to 0.5, plus CE of A vs 1 and B vs 0."""
    total = kl_bernoulli(0.5, p_S) + cross_entropy(p_A, 1.0) + cross_entropy(p_B, 0.0)
    return nc.scale(total, 1.0 / 3.0)


def weighted_softmax_nll(z_users, z_items, pos_items, weights, tau):
    """Mean over the batch of ``-w_i log softmax_i(z_u . z_k / tau)`` over all items k."""
    if not tau > 0:
        raise nc.InvalidArgumentError(f"temperature must be positive, got {tau}")
    logits = nc.scale(z_users @ nc.transpose(z_items), 1.0 / tau)
    log_prob = nc.take_along_rows(logits, pos_items) - nc.sum(nc.logsumexp_rows(logits), axis=1)
    w = np.asarray(weights, dtype=np.float64)
    return nc.mean(nc.neg(log_prob * w))


def preference_loss(z_int, z_conf, z_items_shared, popularity, pos_items, tau):
    """``(l_conf, l_int)`` for one domain, weighted by ``p_i`` and ``1 - p_i``."""
    pos_items = np.asarray(pos_items, dtype=np.int64)
    p = np.asarray(popularity, dtype=np.float64)[pos_items]
    l_conf = weighted_softmax_nll(z_conf, z_items_shared, pos_items, p, tau)
    l_int = weighted_softmax_nll(z_int, z_items_shared, pos_items, 1.0 - p, tau)
    return l_conf, l_int


def bpr_loss(pos_scores, neg_scores):
    """Mean ``-ln sigma(pos - neg)``."""
    return nc.mean(nc.neg(nc.log_sigmoid(pos_scores - neg_scores)))


def l2_penalty(rows):
    """Sum of squared entries over a list of gathered embedding rows."""
    total = None
    for r in rows:
        term = nc.sum(r * r)
        total = term if total is None else total + term
    return total


def bpr_l2_loss(pos_scores, neg_scores, batch_params=(), beta=1e-4):
    loss = bpr_loss(pos_scores, neg_scores)
    if beta and batch_params:
        loss = loss + nc.scale(l2_penalty(batch_params), beta)
    return loss


@dataclass
class LossBreakdown:
    l_rec: float
    l_dom: float
    l_cc: float
    l_pd: float
    total: float
    parts: dict = field(default_factory=dict)


def total_loss(l_rec, l_dom, l_cc, l_pd, lambda1, lambda2, parts=None):
    """Combine the four objectives; returns ``(total_tensor, LossBreakdown)``.

    Each argument may be a Tensor or a float. ``parts`` holds per-domain
    sub-terms for diagnostics.
    """
    named = {"l_rec": l_rec, "l_dom": l_dom, "l_cc": l_cc, "l_pd": l_pd}
    named.update(parts or {})
    values = {}
    for k, v in named.items():
        val = float(v.values) if isinstance(v, nc.Tensor) else float(v)
        if not math.isfinite(val):
            raise NonFiniteLossError(k, val)
        values[k] = val
    total = nc.add(nc.add(l_rec, l_dom),
                   nc.add(nc.scale(l_cc, lambda1), nc.scale(l_pd, lambda2)))
    t = float(total.values)
    if not math.isfinite(t):
        raise NonFiniteLossError("total", t)
    breakdown = LossBreakdown(values["l_rec"], values["l_dom"], values["l_cc"], values["l_pd"], t,
                              {k: values[k] for k in (parts or {})})
    return total, breakdown

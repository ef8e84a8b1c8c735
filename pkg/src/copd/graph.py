"""Symmetric-normalized user-item bipartite graphs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import InvalidArgumentError, SparseMatrix


@dataclass(frozen=True)
class NormalizedBipartiteGraph:
    n_users: int
    n_items: int
    user_to_item: SparseMatrix
    item_to_user: SparseMatrix
    degree_u: np.ndarray
    degree_i: np.ndarray


def build_domain_graph(train, n_users, n_items):
    """Edge ``(u, i)`` gets weight ``1 / sqrt(|N_u| * |N_i|)``; isolated nodes get no edges."""
    pairs = np.asarray(train, dtype=np.int64).reshape(-1, 2)
    users, items = pairs[:, 0], pairs[:, 1]
    if len(pairs) and (users.min() < 0 or users.max() >= n_users
                       or items.min() < 0 or items.max() >= n_items):
        raise InvalidArgumentError("interaction index out of bounds")
    if len(np.unique(users * n_items + items)) != len(pairs):
        raise InvalidArgumentError("duplicate interaction in split")
    deg_u = np.bincount(users, minlength=n_users)
    deg_i = np.bincount(items, minlength=n_items)
    weights = 1.0 / np.sqrt(deg_u[users].astype(np.float64) * deg_i[items])
    ui = SparseMatrix.from_arrays(n_users, n_items, users, items, weights)
    iu = SparseMatrix.from_arrays(n_items, n_users, items, users, weights)
    return NormalizedBipartiteGraph(n_users, n_items, ui, iu, deg_u, deg_i)


def build_global_graph(train_a, train_b, n_users, n_items_a, n_items_b):
    """Graph of ``[R_A | R_B]``: domain-B items are offset by ``n_items_a`` columns."""
    a = np.asarray(train_a, dtype=np.int64).reshape(-1, 2)
    b = np.asarray(train_b, dtype=np.int64).reshape(-1, 2)
    if len(b) and (b[:, 1].min() < 0 or b[:, 1].max() >= n_items_b):
        raise InvalidArgumentError("domain-B item index out of bounds")
    if len(a) and (a[:, 1].min() < 0 or a[:, 1].max() >= n_items_a):
        raise InvalidArgumentError("domain-A item index out of bounds")
    shifted = b + np.array([0, n_items_a])
    return build_domain_graph(np.concatenate([a, shifted]), n_users, n_items_a + n_items_b)



def build_all_graphs(dataset):
    """``(G_A, G_B, G_S)`` from a dataset's training splits."""
    return (
        build_domain_graph(dataset.train_a, dataset.n_users, dataset.n_items_a),
        build_domain_graph(dataset.train_b, dataset.n_users, dataset.n_items_b),
        build_global_graph(dataset.train_a, dataset.train_b, dataset.n_users,
                           dataset.n_items_a, dataset.n_items_b),
    )

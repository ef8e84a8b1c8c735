"""CoPD network: light propagation on local/global graphs, preference encoders,
domain classifier, fusion and inner-product scoring."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from . import numcore as nc
from .numcore import InvalidShapeError, Tensor

DROPOUT_RATE = 0.3


@dataclass
class CoPDParams:
    """All trainable tensors. Weights act on row vectors: ``y = x @ W + b``."""

    H_u_A: Tensor
    H_u_B: Tensor
    H_u_S: Tensor
    H_i_A: Tensor
    H_i_B: Tensor
    int_W1: Tensor
    int_b1: Tensor
    int_W2: Tensor
    int_b2: Tensor
    conf_W1: Tensor
    conf_b1: Tensor
    conf_W2: Tensor
    conf_b2: Tensor
    dom_w: Tensor
    dom_b: Tensor
    fcn_A_W: Tensor
    fcn_A_b: Tensor
    fcn_B_W: Tensor
    fcn_B_b: Tensor
    att_A_W: Tensor
    att_A_b: Tensor
    att_A_v: Tensor
    att_B_W: Tensor
    att_B_b: Tensor
    att_B_v: Tensor

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]

    def named(self):
        return {name: getattr(self, name) for name in self.names()}

    def tensors(self):
        return list(self.named().values())

    @property
    def d(self):
        return self.H_u_A.shape[1]

    @property
    def n_users(self):
        return self.H_u_A.shape[0]

    @property
    def n_items_a(self):
        return self.H_i_A.shape[0]

    @property
    def n_items_b(self):
        return self.H_i_B.shape[0]

    def encoder(self, kind):
        p = self.named()
        return tuple(p[f"{kind}_{k}"] for k in ("W1", "b1", "W2", "b2"))

    def fcn(self, domain):
        return getattr(self, f"fcn_{domain}_W"), getattr(self, f"fcn_{domain}_b")

    def att(self, domain):
        return tuple(getattr(self, f"att_{domain}_{k}") for k in ("W", "b", "v"))

    def copy(self):
        return CoPDParams(**{k: nc.parameter(t.values) for k, t in self.named().items()})

    def checksum(self):
        h = hashlib.sha256()
        for name, t in self.named().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.values).tobytes())
        return h.hexdigest()


def param_shapes(n_users, n_items_a, n_items_b, d):
    shapes = {
        "H_u_A": (n_users, d), "H_u_B": (n_users, d), "H_u_S": (n_users, d),
        "H_i_A": (n_items_a, d), "H_i_B": (n_items_b, d),
        "dom_w": (d, 1), "dom_b": (1,),
    }
    for kind in ("int", "conf"):
        shapes.update({f"{kind}_W1": (d, d), f"{kind}_b1": (d,),
                       f"{kind}_W2": (d, d), f"{kind}_b2": (d,)})
    for dom in ("A", "B"):
        shapes.update({f"fcn_{dom}_W": (2 * d, d), f"fcn_{dom}_b": (d,),
                       f"att_{dom}_W": (d, d), f"att_{dom}_b": (d,), f"att_{dom}_v": (d, 1)})
    return {name: shapes[name] for name in CoPDParams.names()}


def _child_seed(seed, k):
    return int(np.random.SeedSequence([int(seed), k]).generate_state(1, dtype=np.uint64)[0])


def init_params(n_users, n_items_a, n_items_b, d, seed):
    """Xavier-uniform for every matrix, zeros for biases."""
    out = {}
    for k, (name, shape) in enumerate(param_shapes(n_users, n_items_a, n_items_b, d).items()):
        if len(shape) == 1:
            out[name] = nc.parameter(np.zeros(shape))
        else:
            out[name] = nc.xavier_init(shape, _child_seed(seed, k))
    return CoPDParams(**out)


@dataclass
class ForwardState:
    z_u_A: Tensor
    z_u_B: Tensor
    z_u_S: Tensor
    z_i_A: Tensor
    z_i_B: Tensor
    z_i_AS: Tensor
    z_i_BS: Tensor
    z_i_S: Tensor = None
    z_int: Tensor = None
    z_conf: Tensor = None
    e_u_A: Tensor = None
    e_u_B: Tensor = None
    e_i_A: Tensor = None
    e_i_B: Tensor = None

    def user(self, domain):
        return self.e_u_A if domain == "A" else self.e_u_B

    def item(self, domain):
        return self.e_i_A if domain == "A" else self.e_i_B


def propagate(graph, user_table, item_table, L):
    """Layer-mean of ``L`` rounds of normalized neighbour sums (no transforms)."""
    if L < 1:
        raise ValueError("L must be >= 1")
    if user_table.shape[0] != graph.n_users or item_table.shape[0] != graph.n_items:
        raise InvalidShapeError(
            f"tables {user_table.shape[0]}x{item_table.shape[0]} do not match graph "
            f"{graph.n_users}x{graph.n_items}")
    hu, hi = user_table, item_table
    users, items = [hu], [hi]
    for _ in range(L):
        hu, hi = (nc.sparse_dense_matmul(graph.user_to_item, hi),
                  nc.sparse_dense_matmul(graph.item_to_user, hu))
        users.append(hu)
        items.append(hi)
    return nc.mean_stack(users), nc.mean_stack(items)


baseline_encode = propagate


def encode_all(params, G_A, G_B, G_S, L, training=False):
    z_u_A, z_i_A = propagate(G_A, params.H_u_A, params.H_i_A, L)
    z_u_B, z_i_B = propagate(G_B, params.H_u_B, params.H_i_B, L)
    z_u_S, z_i_S = propagate(G_S, params.H_u_S, nc.concat_rows([params.H_i_A, params.H_i_B]), L)
    n_a = params.n_items_a
    return ForwardState(
        z_u_A=z_u_A, z_u_B=z_u_B, z_u_S=z_u_S, z_i_A=z_i_A, z_i_B=z_i_B,
        z_i_AS=nc.slice_rows(z_i_S, 0, n_a),
        z_i_BS=nc.slice_rows(z_i_S, n_a, z_i_S.shape[0]),
        z_i_S=z_i_S)


def _encoder(x, W1, b1, W2, b2, training, seed, rate):
    hidden = nc.relu(x @ W1 + b1)
    hidden = nc.dropout(hidden, rate, seed, training)
    return hidden @ W2 + b2


def disentangle(z_u_S, params, training=False, seeds=(0, 0), rate=DROPOUT_RATE):
    """Interest and conformity embeddings from the shared user embedding."""
    z_int = _encoder(z_u_S, *params.encoder("int"), training, seeds[0], rate)
    z_conf = _encoder(z_u_S, *params.encoder("conf"), training, seeds[1], rate)
    return z_int, z_conf


def classify_domain(z_u, params):
    """Probability that each row belongs to domain A."""
    return nc.sigmoid(z_u @ params.dom_w + params.dom_b)


def fuse_item(z_i_dom, z_i_shared, fcn, training=False, seed=0, rate=DROPOUT_RATE):
    W, b = fcn
    if z_i_dom.shape != z_i_shared.shape:
        raise InvalidShapeError(f"item inputs differ: {z_i_dom.shape} vs {z_i_shared.shape}")
    x = nc.dropout(nc.concat_cols([z_i_dom, z_i_shared]), rate, seed, training)
    return x @ W + b


def attention_weights(z_list, att):
    """Softmax over additive scores ``v . tanh(z W + b)``, one column per input."""
    W, b, v = att
    scores = nc.concat_cols([nc.tanh(z @ W + b) @ v for z in z_list])
    return nc.exp(scores - nc.logsumexp_rows(scores))


def fuse_user(z_u_dom, z_conf, z_int, att):
    z_list = [z_u_dom, z_conf, z_int]
    if len({z.shape for z in z_list}) != 1:
        raise InvalidShapeError("user fusion inputs must share a shape")
    alpha = attention_weights(z_list, att)
    out = None
    for k, z in enumerate(z_list):
        term = nc.slice_cols(alpha, k, k + 1) * z
        out = term if out is None else out + term
    return out


def score(e_u, e_i):
    """Inner-product score of one user row and one item row."""
    return float(np.dot(np.asarray(e_u, dtype=np.float64), np.asarray(e_i, dtype=np.float64)))


def row_scores(e_u, e_i):
    """Recorded per-row inner products of two aligned ``(n, d)`` tensors."""
    return nc.sum(e_u * e_i, axis=1)


def forward(params, graphs, L, training=False, rng=None, rate=DROPOUT_RATE):
    """Full forward pass; ``graphs`` is ``(G_A, G_B, G_S)``.

    ``rng`` supplies dropout seeds and is only consulted when ``training``.
    """
    G_A, G_B, G_S = graphs
    if training and rng is None:
        raise ValueError("training forward needs an rng for dropout")
    seeds = rng.integers(0, 2**63, size=4) if training else np.zeros(4, dtype=np.int64)
    st = encode_all(params, G_A, G_B, G_S, L, training)
    st.z_int, st.z_conf = disentangle(st.z_u_S, params, training, seeds[:2], rate)
    st.e_i_A = fuse_item(st.z_i_A, st.z_i_AS, params.fcn("A"), training, seeds[2], rate)
    st.e_i_B = fuse_item(st.z_i_B, st.z_i_BS, params.fcn("B"), training, seeds[3], rate)
    st.e_u_A = fuse_user(st.z_u_A, st.z_conf, st.z_int, params.att("A"))
    st.e_u_B = fuse_user(st.z_u_B, st.z_conf, st.z_int, params.att("B"))
    return st


# ---------------------------------------------------------------------------
# Single-domain light-propagation baseline


@dataclass
class BaselineParams:
    H_u: Tensor
    H_i: Tensor

    def tensors(self):
        return [self.H_u, self.H_i]


def init_baseline(n_users, n_items, d, seed):
    return BaselineParams(nc.xavier_init((n_users, d), _child_seed(seed, 0)),
                          nc.xavier_init((n_items, d), _child_seed(seed, 1)))

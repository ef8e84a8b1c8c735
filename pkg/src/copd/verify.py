"""Release-gate checks: gradients, propagation and metric oracles, loss unit values."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import losses as Lo
from . import model as M
from . import numcore as nc
from .datasets import DualDomainDataset, compute_popularity
from .evaluation import hr_ndcg, rank_ground_truth
from .gradcheck import analytic_grad, max_rel_error, numeric_grad
from .graph import build_all_graphs, build_domain_graph
from .training import TrainConfig, step_loss

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def tiny_dataset():
    """3 users, 2 items per domain; every node has at least one edge."""
    train_a = np.array([[0, 0], [1, 0], [1, 1], [2, 1]])
    train_b = np.array([[0, 1], [1, 0], [1, 1], [2, 0]])
    return DualDomainDataset(
        n_users=3, n_items_a=2, n_items_b=2, train_a=train_a, train_b=train_b,
        test_a=np.full(3, -1), test_b=np.full(3, -1),
        pop_a=compute_popularity(train_a, 2), pop_b=np.array([0.25, 0.8]),
        user_map=["u0", "u1", "u2"], item_map_a=["a0", "a1"], item_map_b=["b0", "b1"])


# (users, pos_a, neg_a, pos_b, neg_b); every negative lies outside the user's history
TINY_BATCH = (np.array([0, 2, 0]), np.array([0, 1, 0]), np.array([1, 0, 1]),
              np.array([1, 0, 1]), np.array([0, 1, 0]))


def loss_fixtures(seed=3, d=4):
    """Scalar-loss closures over a shared parameter set for gradient checking.

    Domain-specific embeddings feeding the coherence loss are captured as
    constants, since the loss treats them as frozen.
    """
    ds = tiny_dataset()
    graphs = build_all_graphs(ds)
    params = M.init_params(3, 2, 2, d, seed)
    cfg = TrainConfig(d=d, L=2, tau=0.5, beta=1e-2, lambda1=0.7, lambda2=1.3, seed=seed)
    users, pos_a, neg_a, pos_b, neg_b = TINY_BATCH

    def fwd():
        return M.forward(params, graphs, cfg.L, training=True, rng=np.random.default_rng(9))

    frozen = M.forward(params, graphs, cfg.L)
    spec_pos = nc.tensor(frozen.z_i_A.values[pos_a])
    spec_neg = nc.tensor(frozen.z_i_A.values[neg_a])

    def l_cc():
        st = fwd()
        return Lo.coherence_loss(nc.take_rows(st.z_i_AS, pos_a), spec_pos, spec_neg)

    def l_dom():
        st = fwd()
        return Lo.domain_loss(*(M.classify_domain(nc.take_rows(z, users), params)
                                for z in (st.z_u_A, st.z_u_B, st.z_u_S)))

    def l_conf_int():
        st = fwd()
        l_conf, l_int = Lo.preference_loss(nc.take_rows(st.z_int, users),
                                           nc.take_rows(st.z_conf, users), st.z_i_BS,
                                           ds.pop_b, pos_b, cfg.tau)
        return l_conf + nc.scale(l_int, 0.6)

    def bpr_l2():
        st = fwd()
        e_u = nc.take_rows(st.e_u_A, users)
        pos = M.row_scores(e_u, nc.take_rows(st.e_i_A, pos_a))
        neg = M.row_scores(e_u, nc.take_rows(st.e_i_A, neg_a))
        rows = [nc.take_rows(params.H_u_A, np.unique(users)),
                nc.take_rows(params.H_i_A, np.unique(np.concatenate([pos_a, neg_a])))]
        return Lo.bpr_l2_loss(pos, neg, rows, cfg.beta)

    return params, {"L_cc": l_cc, "L_dom": l_dom, "L_conf/L_int": l_conf_int, "BPR+L2": bpr_l2}


def check_loss_gradients():
    params, fixtures = loss_fixtures()
    tensors = params.tensors()
    out = []
    for name, f in fixtures.items():
        err = max_rel_error(analytic_grad(f, tensors), numeric_grad(f, tensors))
        out.append(CheckResult(f"gradcheck {name}", err <= GRAD_TOL, f"max rel err {err:.2e}"))
    return out


def check_total_gradient():
    """Whole objective with lambda1 = 0: the coherence term's frozen side would
    otherwise move under finite differences while reverse mode ignores it."""
    ds = tiny_dataset()
    graphs = build_all_graphs(ds)
    params = M.init_params(3, 2, 2, 4, 5)
    cfg = TrainConfig(d=4, L=2, tau=0.5, beta=1e-2, lambda1=0.0, lambda2=1.3)

    def f():
        return step_loss(params, graphs, ds, TINY_BATCH, cfg, np.random.default_rng(9))[0]

    tensors = params.tensors()
    err = max_rel_error(analytic_grad(f, tensors), numeric_grad(f, tensors))
    return CheckResult("gradcheck total", err <= GRAD_TOL, f"max rel err {err:.2e}")


def check_stop_gradient():
    ds = tiny_dataset()
    graphs = build_all_graphs(ds)
    params = M.init_params(3, 2, 2, 4, 1)
    st = M.forward(params, graphs, 2)
    users, pos_a, neg_a = TINY_BATCH[:3]
    loss = Lo.coherence_loss(nc.take_rows(st.z_i_AS, pos_a), nc.take_rows(st.z_i_A, pos_a),
                             nc.take_rows(st.z_i_A, neg_a))
    nc.zero_grad(params.tensors())
    nc.backward(loss)
    # H_u_A reaches the loss only through the frozen domain-specific side
    ok = bool(np.all(params.H_u_A.grad == 0.0)) and bool(np.any(params.H_u_S.grad != 0.0))
    return CheckResult("stop-gradient zero", ok, "H_u_A grad exactly zero" if ok else "leak")


def _dense_oracle(train, n_users, n_items, hu, hi, L):
    r = np.zeros((n_users, n_items))
    for u, i in train:
        r[u, i] = 1.0
    du, di = r.sum(1), r.sum(0)
    with np.errstate(divide="ignore"):
        su = np.where(du > 0, 1 / np.sqrt(du), 0.0)
        si = np.where(di > 0, 1 / np.sqrt(di), 0.0)
    rn = su[:, None] * r * si[None, :]
    n = n_users + n_items
    a = np.zeros((n, n))
    a[:n_users, n_users:] = rn
    a[n_users:, :n_users] = rn.T
    h = np.vstack([hu, hi])
    acc, cur = h.copy(), h.copy()
    for _ in range(L):
        cur = a @ cur
        acc += cur
    acc /= L + 1
    return acc[:n_users], acc[n_users:]


def check_propagation(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for L in (1, 2, 3):
        mask = rng.random((5, 5)) < 0.4
        train = np.argwhere(mask)
        hu, hi = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        g = build_domain_graph(train, 5, 5)
        zu, zi = M.propagate(g, nc.tensor(hu), nc.tensor(hi), L)
        ou, oi = _dense_oracle(train, 5, 5, hu, hi, L)
        worst = max(worst, np.abs(zu.values - ou).max(), np.abs(zi.values - oi).max())
    return CheckResult("propagation oracle", worst <= 1e-10, f"max abs diff {worst:.1e}")


def check_metrics():
    e_i = np.array([[3.0], [2.0], [1.0], [2.0]] + [[0.5]] * 12)
    cases = [(rank_ground_truth([1.0], 0, list(range(1, 16)), e_i), 1),
             (rank_ground_truth([1.0], 1, [0, 3, 2], e_i), 2),
             (rank_ground_truth([1.0], 3, [0, 1, 2], e_i), 3)]
    ok = all(a == b for a, b in cases)
    ok &= hr_ndcg(1) == (1.0, 1.0) and hr_ndcg(3) == (1.0, 0.5) and hr_ndcg(11) == (0.0, 0.0)
    return CheckResult("metric oracle", ok, "ranks " + str([c[0] for c in cases]))


def check_loss_values():
    ln2 = math.log(2.0)
    t = nc.tensor
    vals = {
        "BPR equal scores": (float(Lo.bpr_loss(t([0.3]), t([0.3])).values), ln2),
        "CE p=0.5": (float(Lo.cross_entropy(t([[0.5]]), 1.0).values), ln2),
        "softmax 2 items": (float(Lo.weighted_softmax_nll(t([[1.0, 0.0]]), t([[0.5, 0.0], [0.5, 0.0]]),
                                                          [0], [1.0], 0.05).values), ln2),
        "coherence min": (float(Lo.coherence_loss(t([[1.0, 0.0]]), t([[1.0, 0.0]]),
                                                  t([[0.0, 1.0]])).values), 0.0),
        "coherence max": (float(Lo.coherence_loss(t([[1.0, 0.0]]), t([[-1.0, 0.0]]),
                                                  t([[1.0, 0.0]])).values), 3.0),
        "KL(0.5||0.5)": (float(Lo.kl_bernoulli(0.5, t([[0.5]])).values), 0.0),
    }
    return [CheckResult(f"loss value {k}", abs(got - want) <= 1e-9, f"{got:.12f}")
            for k, (got, want) in vals.items()]


def run_all():
    results = check_loss_gradients()
    results.append(check_total_gradient())
    results.append(check_stop_gradient())
    results.append(check_propagation())
    results.append(check_metrics())
    results.extend(check_loss_values())
    return results

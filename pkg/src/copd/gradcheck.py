"""Central finite-difference gradient checking."""
import numpy as np

from . import numcore as nc


def numeric_grad(f, params, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(f().values)
            flat[k] = orig - h
            down = float(f().values)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(f, params):
    nc.zero_grad(params)
    nc.backward(f())
    return [p.grad.copy() for p in params]


def max_rel_error(a, b, floor=1e-6):
    """Largest ``|a-b| / max(|a|, |b|, floor)`` across a list of arrays."""
    worst = 0.0
    for x, y in zip(a, b):
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float((np.abs(x - y) / denom).max()))
    return worst


def check(f, params, h=1e-5):
    return max_rel_error(analytic_grad(f, params), numeric_grad(f, params, h))

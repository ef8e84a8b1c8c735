"""Finite-difference check of every training loss on a three-user toy graph.

    python3 demos/gradient_check.py

This prints the same report as ``copd verify``, then repeats one check by
hand so the mechanics are visible.
"""
import numpy as np

from copd import verify
from copd.gradcheck import analytic_grad, numeric_grad

for r in verify.run_all():
    print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.detail}")

params, losses = verify.loss_fixtures()
f = losses["BPR+L2"]
names, tensors = zip(*params.named().items())
analytic = analytic_grad(f, tensors)
numeric = numeric_grad(f, tensors)
print()
print("BPR+L2 on domain A, per tensor (largest gap between backprop and central differences).")
print("Domain B tensors do not enter this loss, so both sides are exactly zero there.")
for name, t, a, n in zip(names, tensors, analytic, numeric):
    print(f"  {name:<10} shape {str(t.values.shape):<10} |grad| {np.abs(a).max():.3e}  "
          f"gap {np.abs(a - n).max():.1e}")

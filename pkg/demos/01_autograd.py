"""Reverse-mode autodiff on numpy, checked against finite differences.

Run: python demos/01_autograd.py
"""

import numpy as np

from seqnorm_vit import Tensor, precision
from seqnorm_vit import autograd as ag
from seqnorm_vit.gradcheck import OP_CASES, check, check_op

with precision("f64"):
    # A tiny graph: loss = sum(softmax(x @ w) * c).
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    c = Tensor(rng.standard_normal((4, 5)))
    loss = (ag.softmax(x @ w, axis=-1) * c).sum()
    loss.backward()
    print("loss", loss.item())
    print("dL/dw row 0", np.round(w.grad[0], 4))

    # The same gradients, numerically.
    report = check(lambda x, w: (ag.softmax(x @ w, axis=-1) * c).sum(), [x, w])
    print("independent check ->", report.subject, "max rel. error", f"{report.max_error:.1e}")

# Every primitive op has a registered finite-difference case.
for name in sorted(OP_CASES):
    r = check_op(name, seed=0)
    print(f"  {name:<14} {'ok' if r.passed else 'FAIL'}  {r.max_error:.1e}")

# A second backward without zeroing is refused instead of silently accumulating.
t = Tensor(np.ones(3), requires_grad=True)
(t * t).sum().backward()
try:
    (t * t).sum().backward()
except ag.GradientError as exc:
    print("second backward:", exc)

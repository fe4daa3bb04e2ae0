"""
Checking hand-written backward passes
=====================================

Every layer comes as a ``*_fwd`` / ``*_bwd`` pair that passes a cache between
them. Here we compare one conv layer's analytic gradient with central
differences by hand, then run the packaged check over all layers.

Run: ``python demos/gradient_check.py``
"""
import numpy as np

from iradonmap.gradcheck import numerical_grad, rel_error, run_suite
from iradonmap.layers import conv2d_bwd, conv2d_fwd

rng = np.random.default_rng(0)
x = rng.standard_normal((2, 3, 7, 7))
w = rng.standard_normal((4, 3, 3, 3))
b = rng.standard_normal(4)
dout = rng.standard_normal((2, 4, 7, 7))

# %% Analytic gradients from the backward pass
out, cache = conv2d_fwd(x, w, b)
dx, dw, db = conv2d_bwd(dout, cache)

# %% Numerical gradients of L = <conv(x), dout>
loss = lambda: np.vdot(conv2d_fwd(x, w, b)[0], dout)
print("dx rel error %.2e" % rel_error(dx, numerical_grad(loss, x)))
print("dw rel error %.2e" % rel_error(dw, numerical_grad(loss, w)))
print("db rel error %.2e" % rel_error(db, numerical_grad(loss, b)))

# %% The full suite (filter, sinobp, conv2d, resblock, refiner, whole model)
for r in run_suite(instances=3, seed=1):
    print("%-10s max rel err %.2e  tol %.0e  %s" % (r.layer, r.max_error, r.tolerance,
                                                   "pass" if r.passed else "FAIL"))

# %% A deliberately wrong gradient is caught
bad = run_suite(instances=1, seed=1, corrupt="sinobp", layers=("sinobp",))[0]
print("corrupted sinobp passes?", bad.passed)

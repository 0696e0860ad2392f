"""
Reverse-mode gradients, first and second order
==============================================

The engine differentiates any graph built from its primitives, and the
gradient graph can itself be differentiated.  Here both are checked against
central differences on a small convex network.
"""

import numpy as np

from otlab import models
from otlab import numcore as nc

rng = np.random.default_rng(0)

# a scalar function of a vector input
x = nc.leaf([1.0, 2.0])
(g,) = nc.grad(nc.dot(x, x), [x])
print("grad of |x|^2 at (1, 2):", g)

# input gradient of a convex potential vs finite differences
v = models.init_model("icnn", [3, 8, 8], 0.3, seed=1, alpha=0.1)
pts = rng.normal(size=(4, 3))
analytic = models.icnn_input_grad(v, pts)
numeric = nc.finite_diff_grad(lambda p: float(np.sum(v(p).value)), pts)
print("input gradient, relative error:", nc.relative_error(analytic, numeric))

# second order: differentiate <grad v(x), w> in one weight matrix
w = rng.normal(size=pts.shape)
W = v.skip_weights[0]


def probe():
    return nc.sum(nc.mul(models.icnn_input_grad(v, pts, create_graph=True), nc.constant(w)))


(dW,) = nc.grad(probe(), [W])
base = W.value.copy()


def probe_at(val):
    W.value = val
    out = float(probe().value)
    W.value = base
    return out


print("second-order path, relative error:",
      nc.relative_error(dW, nc.finite_diff_grad(probe_at, base.copy())))

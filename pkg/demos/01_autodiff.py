"""A walk through the reverse-mode engine.

Scalar graphs first, then broadcasting, then derivatives of derivatives,
ending with the pattern meta-learning relies on: differentiating through
a gradient update.
"""

import numpy as np

from hdrmeta.tensor import core, gradcheck
from hdrmeta.tensor.core import Tensor, backward

# ---------------------------------------------------------------------------
# first derivatives

x = Tensor(3.0, requires_grad=True)
y = x * x + 2.0 * x
print("y = x^2 + 2x at x=3  ->", y.item())
print("dy/dx               ->", backward(y, x).item(), "(2x + 2 = 8)")

# several leaves at once: backward takes a list and returns one grad each
a = Tensor(2.0, requires_grad=True)
b = Tensor(5.0, requires_grad=True)
ga, gb = backward(a * b + b, [a, b])
print("d(ab + b)/da =", ga.item(), " d(ab + b)/db =", gb.item())

# ---------------------------------------------------------------------------
# broadcasting reduces gradients back to the leaf shape

m = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
row = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32), requires_grad=True)
s = core.sum(m * row)
gm, grow = backward(s, [m, row])
print("\nd sum(m * row)/d row =", grow.data, "(each entry sums its column: 2 copies)")
print("d sum(m * row)/d m   =\n", gm.data)

# ---------------------------------------------------------------------------
# derivatives of derivatives

# create_graph keeps the backward pass itself differentiable
x = Tensor(np.float64(1.5), requires_grad=True)
p = x * x * x * x
d1 = backward(p, x, create_graph=True)
d2 = backward(d1, x, create_graph=True)
d3 = backward(d2, x)
print("\nx^4 at x=1.5: d1 =", d1.item(), " d2 =", d2.item(), " d3 =", d3.item())
print("closed forms:        ", 4 * 1.5**3, "      ", 12 * 1.5**2, "      ", 24 * 1.5)

# the sigmoid's second derivative has a tidy closed form: s(1-s)(1-2s)
x = Tensor(np.float64(0.7), requires_grad=True)
s = core.sigmoid(x)
ds = backward(s, x, create_graph=True)
d2s = backward(ds, x)
sv = 1.0 / (1.0 + np.exp(-0.7))
print("sigmoid'' at 0.7:", d2s.item(), " vs ", sv * (1 - sv) * (1 - 2 * sv))

# ---------------------------------------------------------------------------
# cross-checking against finite differences

def f(v: Tensor) -> Tensor:
    return core.sum(core.sigmoid(v) * core.sqrt(v + 2.0))

x0 = np.linspace(-1.0, 1.0, 5)
leaf = Tensor(x0, requires_grad=True)
analytic = backward(f(leaf), leaf).data
numeric = gradcheck.fd_gradient(f, Tensor(x0))
print("\nfd agreement:", gradcheck.max_rel_err(analytic, numeric), "(max rel err)")

# ---------------------------------------------------------------------------
# differentiating through an update step

# inner loss L(w) = (w - a)^2 / 2, one gradient step phi = w - lr * L'(w),
# outer loss measured at phi.  The chain rule gives
# dOuter/dw = (phi - b) * (1 - lr), and the graph tracks it automatically.
a_val, b_val, lr = 0.8, -0.4, 0.1
w = Tensor(np.float64(0.3), requires_grad=True)
inner = (w - a_val) * (w - a_val) * 0.5
gw = backward(inner, w, create_graph=True)
phi = w - lr * gw
outer = (phi - b_val) * (phi - b_val) * 0.5
meta_grad = backward(outer, w).item()
phi_val = 0.3 - lr * (0.3 - a_val)
print("\nmeta-gradient through the update:", meta_grad)
print("closed form:                     ", (phi_val - b_val) * (1 - lr))

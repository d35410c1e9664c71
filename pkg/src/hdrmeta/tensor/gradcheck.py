"""Finite-difference verification of analytic gradients.

`fd_gradient` is the oracle: a central-difference derivative computed in
float64, one coordinate at a time, with no knowledge of the graph.  The
check suites below compare it against `backward` for every primitive, for
composed networks, and (through one adaptation step) for meta-gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import core, nn
from .core import Tensor, backward

__all__ = [
    "fd_gradient",
    "fd_directional",
    "max_rel_err",
    "CheckResult",
    "check_gradient",
    "run_op_checks",
    "run_network_check",
    "run_second_order_checks",
    "run_all",
]

DENOM_FLOOR = 1e-8


def fd_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    Evaluates f 2*x.size times in float64.  `f` must treat its input as a
    constant (no gradient machinery is involved).
    """
    base = np.asarray(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat_out = grad.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xp.reshape(-1)[i] += h
        xm = base.copy()
        xm.reshape(-1)[i] -= h
        flat_out[i] = (_scalar(f(Tensor(xp))) - _scalar(f(Tensor(xm)))) / (2.0 * h)
    return grad


def fd_directional(f: Callable[[Tensor], Tensor], x: Tensor, v: np.ndarray, h: float = 1e-4) -> float:
    """Central-difference directional derivative of f at x along v."""
    base = np.asarray(x.data, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return (_scalar(f(Tensor(base + h * v))) - _scalar(f(Tensor(base - h * v)))) / (2.0 * h)


def _scalar(r) -> float:
    return r.item() if isinstance(r, Tensor) else float(r)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> float:
    """max |a - n| scaled by the largest magnitude present (floored)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(float(np.max(np.abs(numeric), initial=0.0)), float(np.max(np.abs(analytic), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / denom


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def check_gradient(
    name: str,
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    tol: float,
    h: float = 1e-4,
) -> CheckResult:
    """Compare backward() against fd_gradient() for scalar-valued f."""
    leaf = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
    analytic = backward(f(leaf), leaf).data
    numeric = fd_gradient(f, leaf, h=h)
    return CheckResult(name, max_rel_err(analytic, numeric), tol)


# ---------------------------------------------------------------------------
# per-op suite


def _weighted(rng: np.random.Generator):
    """Scalarize a tensor-valued op with fixed random weights so every output
    element influences the objective."""

    cache = {}

    def scalarize(t: Tensor) -> Tensor:
        key = t.shape
        if key not in cache:
            cache[key] = Tensor(rng.standard_normal(t.shape))
        return core.sum(core.mul(t, cache[key]))

    return scalarize


def run_op_checks(seed: int = 0, tol: float = 1e-5, h: float = 1e-4) -> list[CheckResult]:
    """Finite-difference check of every differentiable primitive and composite."""
    rng = np.random.default_rng(seed)
    s = _weighted(rng)
    out: list[CheckResult] = []

    def add_check(name, f, x):
        out.append(check_gradient(name, f, Tensor(np.asarray(x, dtype=np.float64)), tol, h))

    x234 = rng.standard_normal((2, 3, 4))
    other = Tensor(rng.uniform(1.0, 2.0, (3, 4)))

    add_check("add.lhs", lambda t: s(core.add(t, other)), x234)
    add_check("add.rhs", lambda t: s(core.add(other, t)), x234)
    add_check("sub.lhs", lambda t: s(core.sub(t, other)), x234)
    add_check("sub.rhs", lambda t: s(core.sub(other, t)), x234)
    add_check("mul.lhs", lambda t: s(core.mul(t, other)), x234)
    add_check("mul.rhs", lambda t: s(core.mul(other, t)), x234)
    add_check("div.lhs", lambda t: s(core.div(t, other)), x234)
    add_check("div.rhs", lambda t: s(core.div(other, t)), rng.uniform(1.0, 2.0, (2, 3, 4)))
    add_check("neg", lambda t: s(core.neg(t)), x234)
    # keep |x| and max(x, 0.2) inputs away from their kinks
    add_check("abs", lambda t: s(core.absolute(t)), rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))
    add_check("pow_scalar.2", lambda t: s(core.pow_scalar(t, 2.0)), x234)
    add_check("pow_scalar.-1", lambda t: s(core.pow_scalar(t, -1.0)), rng.uniform(1.0, 2.0, (3, 4)))
    add_check("sqrt", lambda t: s(core.sqrt(t)), rng.uniform(0.5, 2.0, (3, 4)))
    add_check(
        "maximum_scalar",
        lambda t: s(core.maximum_scalar(t, 0.2)),
        rng.uniform(0.4, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)),
    )
    add_check("sigmoid", lambda t: s(core.sigmoid(t)), 3.0 * rng.standard_normal((3, 4)))
    add_check("sum.all", lambda t: core.sum(t), x234)
    add_check("sum.axis", lambda t: s(core.sum(t, axis=(0, 2), keepdims=True)), x234)
    add_check("mean", lambda t: s(core.mean(t, axis=1)), x234)
    add_check("reshape", lambda t: s(core.reshape(t, (4, 6))), x234)
    add_check("transpose", lambda t: s(core.transpose(t, (2, 0, 1))), x234)
    add_check("broadcast_to", lambda t: s(core.broadcast_to(t, (5, 3, 4))), rng.standard_normal((1, 3, 4)))
    add_check("concat.a", lambda t: s(core.concat([t, other], axis=0)), rng.standard_normal((2, 4)))
    add_check("concat.b", lambda t: s(core.concat([other, t], axis=1)), rng.standard_normal((3, 2)))
    add_check("narrow", lambda t: s(core.narrow(t, 1, 1, 2)), x234)
    add_check("pad", lambda t: s(core.pad(t, [(1, 0), (2, 1)])), rng.standard_normal((3, 4)))

    m_lhs = rng.standard_normal((4, 3))
    m_rhs = rng.standard_normal((3, 5))
    add_check("matmul.lhs", lambda t: s(core.matmul(t, Tensor(m_rhs))), m_lhs)
    add_check("matmul.rhs", lambda t: s(core.matmul(Tensor(m_lhs), t)), m_rhs)

    img = rng.standard_normal((2, 3, 6, 6))
    add_check("im2col", lambda t: s(nn.im2col(t, 3, 1)), img)
    add_check(
        "col2im",
        lambda t: s(nn.col2im(t, (1, 2, 4, 4), 3, 1)),
        rng.standard_normal((16, 18)),
    )
    add_check("depth_to_space2", lambda t: s(nn.depth_to_space2(t)), rng.standard_normal((2, 8, 3, 3)))
    add_check("space_to_depth2", lambda t: s(nn.space_to_depth2(t)), rng.standard_normal((2, 2, 6, 6)))

    w3 = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b4 = rng.standard_normal(4)
    add_check("conv2d.x", lambda t: s(nn.conv2d(t, Tensor(w3), Tensor(b4))), img)
    add_check("conv2d.w", lambda t: s(nn.conv2d(Tensor(img), t, Tensor(b4))), w3)
    add_check("conv2d.b", lambda t: s(nn.conv2d(Tensor(img), Tensor(w3), t)), b4)
    w1 = rng.standard_normal((2, 3, 1, 1))
    add_check("conv2d.k1", lambda t: s(nn.conv2d(Tensor(img), t)), w1)

    wt = rng.standard_normal((3, 2, 2, 2)) * 0.5
    b2 = rng.standard_normal(2)
    add_check("conv_transpose2d.x", lambda t: s(nn.conv_transpose2d(t, Tensor(wt), Tensor(b2))), img)
    add_check("conv_transpose2d.w", lambda t: s(nn.conv_transpose2d(Tensor(img), t, Tensor(b2))), wt)
    add_check("conv_transpose2d.b", lambda t: s(nn.conv_transpose2d(Tensor(img), Tensor(wt), t)), b2)

    add_check("maxpool2", lambda t: s(nn.maxpool2(t)), rng.standard_normal((2, 2, 6, 6)))

    gam = rng.uniform(0.5, 1.5, 3)
    bet = rng.standard_normal(3)
    add_check("batchnorm2d.x", lambda t: s(nn.batchnorm2d(t, Tensor(gam), Tensor(bet))), img)
    add_check("batchnorm2d.gamma", lambda t: s(nn.batchnorm2d(Tensor(img), t, Tensor(bet))), gam)
    add_check("batchnorm2d.beta", lambda t: s(nn.batchnorm2d(Tensor(img), Tensor(gam), t)), bet)

    return out


# ---------------------------------------------------------------------------
# composed-network and second-order suites (lazy imports: these reach into
# higher layers of the package to exercise realistic graphs)


def run_network_check(seed: int = 0, tol: float = 1e-4, h: float = 1e-4) -> list[CheckResult]:
    """Full forward+loss gradient check of a small network, parameter by parameter."""
    from .. import loss as loss_mod
    from .. import unet

    rng = np.random.default_rng(seed)
    cfg = unet.UNetConfig(depth=1, base_channels=4)
    params = unet.init_params(cfg, seed=seed).astype(np.float64)
    x = rng.uniform(0.0, 1.0, (1, 3, 8, 8))
    target = rng.uniform(0.05, 1.0, (1, 3, 8, 8))

    def objective(pset):
        pred = unet.forward(pset, Tensor(x))
        return loss_mod.expandnet_loss(pred, Tensor(target))

    results: list[CheckResult] = []
    names = list(params)
    leaves = {name: Tensor(params[name].data, requires_grad=True) for name in names}
    pset = params.replace(leaves)
    analytic = backward(objective(pset), [pset[n] for n in names])
    numeric = {}
    for name in names:
        def f(t, _name=name):
            return objective(pset.replace({_name: t}))

        numeric[name] = fd_gradient(f, pset[name], h=h)
    # One relative error over the stacked gradient vector.  Per-parameter
    # floors would amplify fd noise on parameters whose true gradient is
    # zero (a conv bias feeding batch norm: mean subtraction removes any
    # constant channel shift exactly).
    scale = max(
        max(float(np.abs(g.data).max()) for g in analytic),
        max(float(np.abs(n).max()) for n in numeric.values()),
        1e-8,
    )
    for name, g in zip(names, analytic):
        err = float(np.abs(g.data - numeric[name]).max()) / scale
        results.append(CheckResult(f"net.{name}", err, tol))
    return results


def run_second_order_checks(seed: int = 0, tol: float = 1e-3, h: float = 1e-4) -> list[CheckResult]:
    """Check gradients-of-gradients and the meta-gradient path.

    Three layers of evidence:

    * a 1-D quadratic adaptation problem with a hand-derived closed form,
      for both one and three inner steps;
    * the degenerate inner_lr=0 case, where first- and second-order
      meta-gradients must agree exactly;
    * a finite-difference check of the full meta-gradient of a small
      network through three adaptation steps, along random directions
      and a handful of individual coordinates.
    """
    from .. import loss as loss_mod
    from .. import meta, unet

    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    # quadratic task: inner loss (w-a)^2/2, outer loss (phi-b)^2/2.
    # After k steps phi = a + (w-a)(1-lr)^k, so dL/dw = (phi-b)(1-lr)^k;
    # the first-order variant treats dphi/dw as 1.
    a_val, b_val, w0, lr = 0.8, -0.4, 0.3, 0.1

    def quad_inner(p):
        d = core.sub(p["w"], a_val)
        return core.mul(core.mul(d, d), 0.5)

    def quad_outer(p):
        d = core.sub(p["w"], b_val)
        return core.mul(core.mul(d, d), 0.5)

    for steps in (1, 3):
        for mode, scale in (("second_order", (1.0 - lr) ** steps), ("first_order", 1.0)):
            theta = unet.ParamSet({"w": Tensor(np.float64(w0), requires_grad=True)})
            acfg = meta.AdaptConfig(inner_lr=lr, steps=steps, mode=mode)
            phi = meta.adapt(theta, support=None, cfg=acfg, loss_fn=lambda p, _s: quad_inner(p))
            g = backward(quad_outer(phi), theta["w"]).item()
            phi_k = a_val + (w0 - a_val) * (1.0 - lr) ** steps
            expected = (phi_k - b_val) * scale
            results.append(
                CheckResult(f"quadratic.{mode}.steps{steps}", max_rel_err(np.float64(g), np.float64(expected)), tol)
            )

    # tiny network, three adaptation steps, meta-gradient vs finite differences
    cfg = unet.UNetConfig(depth=1, base_channels=4)
    theta64 = unet.init_params(cfg, seed=seed).astype(np.float64)
    ldr = rng.uniform(0.0, 1.0, (2, 3, 8, 8)).astype(np.float64)
    hdr = rng.uniform(0.05, 1.0, (2, 3, 8, 8)).astype(np.float64)
    support = [(ldr[0], hdr[0])]
    query = (ldr[1], hdr[1])
    acfg = meta.AdaptConfig(inner_lr=0.01, steps=3, mode="second_order")
    lcfg = loss_mod.LossConfig()

    names = list(theta64)
    flat_sizes = {n: theta64[n].size for n in names}

    def unpack(vec: Tensor) -> "unet.ParamSet":
        arrs = {}
        offset = 0
        for n in names:
            size = flat_sizes[n]
            arrs[n] = core.reshape(core.narrow(vec, 0, offset, size), theta64[n].shape)
            offset += size
        return theta64.replace(arrs)

    def meta_objective_vec(vec: Tensor) -> Tensor:
        pset = unpack(vec)
        phi = meta.adapt(pset, support, acfg, loss_cfg=lcfg)
        pred = unet.forward(phi, Tensor(query[0][None]))
        return loss_mod.expandnet_loss(pred, Tensor(query[1][None]), lcfg)

    vec0 = np.concatenate([theta64[n].data.reshape(-1) for n in names])
    leaf = Tensor(vec0, requires_grad=True)
    analytic = backward(meta_objective_vec(leaf), leaf).data

    for trial in range(3):
        v = rng.standard_normal(vec0.size)
        v /= np.linalg.norm(v)
        num = fd_directional(meta_objective_vec, Tensor(vec0), v, h=h)
        ana = float(analytic @ v)
        results.append(CheckResult(f"meta_grad.dir{trial}", max_rel_err(np.float64(ana), np.float64(num)), tol))
    coords = rng.choice(vec0.size, size=5, replace=False)
    for ci in coords:
        e = np.zeros(vec0.size)
        e[ci] = 1.0
        num = fd_directional(meta_objective_vec, Tensor(vec0), e, h=h)
        results.append(
            CheckResult(f"meta_grad.coord{int(ci)}", max_rel_err(np.float64(analytic[ci]), np.float64(num)), tol)
        )

    # lr=0 degeneracy: both modes must equal the query gradient at theta
    zero_cfg_so = meta.AdaptConfig(inner_lr=0.0, steps=2, mode="second_order")
    zero_cfg_fo = meta.AdaptConfig(inner_lr=0.0, steps=2, mode="first_order")
    grads = {}
    for label, acfg0 in (("so", zero_cfg_so), ("fo", zero_cfg_fo)):
        pset = theta64.replace({n: Tensor(theta64[n].data, requires_grad=True) for n in names})
        phi = meta.adapt(pset, support, acfg0, loss_cfg=lcfg)
        pred = unet.forward(phi, Tensor(query[0][None]))
        obj = loss_mod.expandnet_loss(pred, Tensor(query[1][None]), lcfg)
        gs = backward(obj, [pset[n] for n in names])
        grads[label] = np.concatenate([g.data.reshape(-1) for g in gs])
    diff = float(np.max(np.abs(grads["so"] - grads["fo"])))
    results.append(CheckResult("meta_grad.lr0_fo_eq_so", diff, 0.0))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    """Every gradient check the package defines, for the CLI and acceptance tests."""
    results = run_op_checks(seed=seed)
    results += run_network_check(seed=seed)
    results += run_second_order_checks(seed=seed)
    return results

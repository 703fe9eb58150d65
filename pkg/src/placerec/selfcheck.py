"""Finite-difference checks of every hand-written backward pass.

Each check draws small random inputs and parameters from ``seed``, forms
the scalar ``sum(R * output)`` for a fixed random ``R``, and compares the
analytic gradient of every input and parameter against central
differences.
"""

from __future__ import annotations

import numpy as np

from .aggregation import G2mHead, GemHead, NetVladHead, NvlHead
from .aggregation.gem import gca_backward, gca_forward
from .loss import MsLossConfig, SimilarityMatrix, mine_pairs, ms_loss
from .numerics import GradReport, grad_check

CHECKS = ("gem", "gca", "g2m", "netvlad", "nvl", "nvl-cls", "ms-loss")


def _maps(rng, b=2, c=6, n=5):
    # positive-shifted N(0, 1), clear of the GeM clamp so the objective is smooth
    return np.abs(rng.standard_normal((b, c, n))) + 0.5


def _randomize(head, rng):
    """Redraw every parameter at unit-ish scale.

    Trained-style initializers (sharp k-means assignments, saturating gates)
    leave some gradients near 1e-8, where central differences are all
    roundoff; the checks are about the formulas, not the init.
    """
    for k, v in head.params.items():
        if k.endswith("log_p"):
            head.params[k] = np.log(rng.uniform(1.0, 4.0, v.shape))
        else:
            head.params[k] = 0.5 * rng.standard_normal(v.shape)
    return head


def _head_check(name, head, x, rng, cls=None, tol=1e-4):
    _randomize(head, rng)
    d, _ = head.forward(x, cls)
    R = rng.standard_normal(d.shape)
    keys = list(head.params)

    def f(p):
        P = {k: p[k] for k in keys}
        out, cache = head.forward(p["x"], p.get("cls"), P)
        grads, dx, dcls = head.backward(R, cache)
        g = {k: grads[k] for k in keys}
        g["x"] = dx
        if "cls" in p:
            g["cls"] = dcls
        return float(np.sum(R * out)), g

    params = {**head.params, "x": x}
    if cls is not None:
        params["cls"] = cls
    return grad_check(f, params, tol=tol, op_name=name)


def check(name: str, seed: int = 0, tol: float = 1e-4) -> GradReport:
    rng = np.random.default_rng(seed)
    if name == "gem":
        return _head_check(name, GemHead.create(6, 4, rng=rng), _maps(rng), rng, tol=tol)
    if name == "g2m":
        return _head_check(name, G2mHead.create(6, 2, 4, rng=rng), _maps(rng), rng, tol=tol)
    if name == "netvlad":
        return _head_check(name, NetVladHead.create(6, 3, rng=rng), _maps(rng), rng, tol=tol)
    if name == "nvl":
        return _head_check(name, NvlHead.create(6, 3, 4, rng=rng), _maps(rng), rng, tol=tol)
    if name == "nvl-cls":
        x = _maps(rng)
        return _head_check(name, NvlHead.create(6, 3, 4, with_cls=True, rng=rng), x, rng, cls=x.mean(axis=2), tol=tol)
    if name == "gca":
        c, r = 6, 2
        params = {
            "x": _maps(rng, c=c),
            "log_p": np.log(rng.uniform(1.0, 4.0, c)),
            "w_down": 0.5 * rng.standard_normal((c, r)),
            "b_down": 0.5 * rng.standard_normal(r),
            "w_up": 0.5 * rng.standard_normal((r, c)),
            "b_up": 0.5 * rng.standard_normal(c),
        }
        R = rng.standard_normal((2, c))

        def f(p):
            g, cache = gca_forward(p["x"], p["log_p"], p["w_down"], p["b_down"], p["w_up"], p["b_up"])
            grads = dict(zip(["x", "log_p", "w_down", "b_down", "w_up", "b_up"], gca_backward(R, cache)))
            return float(np.sum(R * g)), grads

        return grad_check(f, params, tol=tol, op_name=name)
    if name == "ms-loss":
        labels = np.repeat(np.arange(3), 3)
        d = rng.standard_normal((9, 5))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        cfg = MsLossConfig(beta=10.0)
        # mining is piecewise constant in S; hold the masks of the base point fixed
        masks = mine_pairs(SimilarityMatrix(d @ d.T, labels), cfg)

        def f(p):
            x = p["d"]
            loss, g = ms_loss(SimilarityMatrix(x @ x.T, labels), cfg, masks=masks, return_grad=True)
            return loss, {"d": (g + g.T) @ x}

        return grad_check(f, {"d": d}, tol=tol, op_name=name)
    raise ValueError(f"unknown check {name!r}; choose from {CHECKS}")


def check_all(names=CHECKS, seeds=range(10), tol: float = 1e-4) -> list[GradReport]:
    """The worst report per check over ``seeds``."""
    out = []
    for name in names:
        reports = [check(name, s, tol) for s in seeds]
        failed = [r for r in reports if not r.passed]
        out.append(failed[0] if failed else max(reports, key=lambda r: r.max_rel_error))
    return out

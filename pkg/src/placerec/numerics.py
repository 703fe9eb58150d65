"""Elementwise activations with derivatives, L2 normalization, and a
central-difference gradient checker.

Every differentiable piece of the package is written as a pair of plain
functions: a forward that returns ``(output, cache)`` and a backward that
maps an upstream gradient back through the cache.  ``grad_check`` is the
single place where those backward passes are compared against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# |min_x gelu(x)|; gelu attains about -0.16997 near x = -0.7518.
GELU_MIN_OFFSET = 0.17

NORM_EPS = 1e-12


def _check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in {what}")


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    x = np.asarray(x, dtype=float)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def relu(x):
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def power(x, exponent):
    x = np.asarray(x, dtype=float)
    exponent = np.asarray(exponent, dtype=float)
    integral = np.all(exponent == np.round(exponent))
    if not integral and np.any(x < 0):
        raise ValueError("power: negative base with a fractional exponent")
    return np.power(x, exponent)


_KINDS = {"sigmoid": sigmoid, "gelu": gelu, "relu": relu}


def elementwise(kind: str, x, exponent=None) -> np.ndarray:
    """Apply one of ``power``, ``sigmoid``, ``gelu``, ``relu`` elementwise.

    Raises ``ValueError`` on non-finite input or on a negative base raised
    to a fractional power.
    """
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    if kind == "power":
        if exponent is None:
            raise ValueError("power needs an exponent")
        return power(x, exponent)
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(x)


def l2_normalize(x: np.ndarray, axis: int = -1):
    """Normalize along ``axis``; returns ``(y, norm)`` for the backward."""
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    norm = np.maximum(norm, NORM_EPS)
    return x / norm, norm


def l2_normalize_backward(dy: np.ndarray, y: np.ndarray, norm: np.ndarray, axis: int = -1):
    # d(x/|x|) = (I - y y^T) / |x|
    proj = np.sum(dy * y, axis=axis, keepdims=True)
    return (dy - y * proj) / norm


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    per_param_errors: dict[str, float] = field(default_factory=dict)
    passed: bool = False
    tolerance: float = 1e-4
    reason: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.op_name}: max_rel_error={self.max_rel_error:.3e} (tol {self.tolerance:g})"
        if self.reason:
            text += f" [{self.reason}]"
        return text


def grad_check(
    f: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    op_name: str = "f",
    max_coords: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare the analytic gradient returned by ``f`` with central differences.

    ``f(params)`` must return ``(value, grads)`` where ``grads`` has one
    array per entry of ``params`` (same shapes).  All arithmetic is done in
    float64.  The relative error per coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.

    ``max_coords`` caps the number of coordinates probed per tensor; the
    probed subset is drawn with ``seed``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, analytic = f(base)
    rng = np.random.default_rng(seed)

    per_param: dict[str, float] = {}
    for name, value in base.items():
        g = np.asarray(analytic[name], dtype=np.float64)
        if g.shape != value.shape:
            return GradReport(op_name, np.inf, per_param, False, tol,
                              f"gradient shape {g.shape} != param shape {value.shape} for {name}")
        if not np.all(np.isfinite(g)):
            return GradReport(op_name, np.inf, per_param, False, tol, f"non-finite analytic gradient for {name}")

        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(base)[0])
            flat[i] = orig - eps
            fm = float(f(base)[0])
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            if not np.isfinite(num):
                return GradReport(op_name, np.inf, per_param, False, tol, f"non-finite numeric gradient for {name}")
            ana = g.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
        per_param[name] = worst

    max_err = max(per_param.values(), default=0.0)
    return GradReport(op_name, max_err, per_param, bool(max_err < tol), tol)

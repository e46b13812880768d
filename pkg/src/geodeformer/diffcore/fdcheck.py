"""Central finite-difference verification of analytic gradients.

All checks run in real-64: half-precision steps drown in rounding noise,
so float64 is the only dtype this harness accepts. The error metric is
``|analytic - numeric| / max(1, |analytic|, |numeric|)``, which behaves
like a relative error for large gradients and an absolute one near zero.
"""

from __future__ import annotations

import numpy as np

from .tensor import REAL64, Parameter, ShapeError, Tensor, backward, no_grad


class NonFiniteValue(ArithmeticError):
    """A probe evaluation produced NaN or infinity; names the perturbed index."""


def finite_diff_grad(fn, x: Tensor, step: float = 1e-5) -> Tensor:
    """Numeric gradient of a scalar-valued ``fn`` at ``x``, one probe per entry.

    ``fn`` is evaluated 2·size times on perturbed copies: central differences
    (f(x+h·e_i) − f(x−h·e_i)) / 2h. ``fn`` may return a Tensor or a float.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if x.dtype != REAL64:
        raise ShapeError(f"finite differences need real-64 input, got {x.dtype}")
    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    with no_grad():
        for i in range(base.size):
            idx = tuple(int(k) for k in np.unravel_index(i, base.shape))
            probe = base.copy()
            probe[idx] = base[idx] + step
            hi = _scalar(fn(Tensor(probe)), idx)
            probe[idx] = base[idx] - step
            lo = _scalar(fn(Tensor(probe)), idx)
            flat[i] = (hi - lo) / (2.0 * step)
    return Tensor(grad)


def _scalar(value, idx) -> float:
    out = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(out):
        raise NonFiniteValue(f"probe at index {idx} returned {out}")
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-case entrywise error, relative above 1 and absolute below."""
    a = np.asarray(analytic, dtype=REAL64)
    f = np.asarray(numeric, dtype=REAL64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0


def check_parameter_grads(fn, params, step: float = 1e-5) -> dict:
    """Compare backward() against finite differences for each named parameter.

    ``fn()`` (no arguments; closes over ``params``) must rebuild the graph and
    return a scalar loss. ``params`` maps names to Parameters. Returns the
    worst error per name.
    """
    for p in params.values():
        p.zero_grad()
    backward(fn())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    errors = {}
    for name, p in params.items():
        if p.dtype != REAL64:
            raise ShapeError(f"parameter {name!r} is {p.dtype}; checks need real-64")

        def probe(values, p=p):
            saved = p.data.copy()
            p.assign(values.data)
            try:
                with no_grad():
                    return fn()
            finally:
                p.assign(saved)

        numeric = finite_diff_grad(probe, Tensor(p.data.copy()), step)
        errors[name] = rel_error(analytic[name], numeric.data)
    return errors


def check_input_grad(fn, x: Tensor, step: float = 1e-5) -> float:
    """Compare the gradient w.r.t. a free input against finite differences."""
    leaf = Parameter(x.data.astype(REAL64, copy=True))
    backward(fn(leaf))
    numeric = finite_diff_grad(fn, Tensor(leaf.data.copy()), step)
    return rel_error(leaf.grad, numeric.data)

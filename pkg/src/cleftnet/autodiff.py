"""Reverse-mode differentiation utilities: parameters, backward, gradient checks.

The tape itself lives in :mod:`cleftnet.tensor` (recording is interwoven with
the operations); this module adds the training-facing surface.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError
from .tensor import Tape, Tensor

__all__ = ["Tape", "Parameter", "backward", "grad_check", "GradCheckReport"]


class Parameter(Tensor):
    """A named leaf tensor with a persistent gradient buffer.

    Gradients accumulate by summation across backward passes; call
    :meth:`zero_grad` between optimizer steps.
    """

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(np.asarray(value), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def backward(tape: Tape, loss: Tensor, params=None) -> dict:
    """Run the reverse sweep and return {name: gradient} for ``params``.

    Parameters not on the path from ``loss`` keep zero gradients.  The sweep
    itself accumulates into every leaf's ``grad``; this wrapper just collects.
    """
    tape.backward(loss)
    if params is None:
        return {}
    return {p.name: p.grad for p in params}


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    per_param: dict = field(default_factory=dict)  # name -> max relative error
    checked: dict = field(default_factory=dict)    # name -> elements compared
    max_rel_err: float = 0.0
    tol: float = 1e-4
    deterministic: bool = True
    passed: bool = False

    def worst(self) -> str:
        if not self.per_param:
            return "(no parameters)"
        name = max(self.per_param, key=self.per_param.get)
        return f"{name} ({self.per_param[name]:.3e})"

    def lines(self):
        for name in sorted(self.per_param):
            yield f"{name}\t{self.per_param[name]:.6e}\t{self.checked[name]}"


def grad_check(f, params, eps: float = 1e-5, tol: float = 1e-4,
               max_samples: int = 100, seed: int = 0,
               grad_hook=None) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` is a zero-argument callable returning a scalar :class:`Tensor`
    computed from the current values of ``params``; it must be deterministic
    and evaluated in 64-bit.  Every element is checked for small tensors; a
    seeded random sample of ``max_samples`` elements is checked for larger
    ones.  Relative error is |a-n| / max(1e-8, |a|+|n|).

    ``grad_hook``, when given, may replace the analytic gradient map before
    comparison; it exists as a corruption hook for negative-control tests.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, {p.name} is {p.data.dtype}")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if loss.data.ndim != 0:
        raise ShapeError("grad_check target must be scalar")
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    if grad_hook is not None:
        analytic = grad_hook(analytic)

    v1 = float(f().data)
    v2 = float(f().data)
    if v1 != v2:
        raise NumericalError("grad_check target is not deterministic; refusing to compare")
    report = GradCheckReport(tol=tol)

    rng = np.random.default_rng(seed)
    overall = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_samples:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=max_samples, replace=False)
        worst = 0.0
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            fp = float(f().data)
            flat[i] = keep - eps
            fm = float(f().data)
            flat[i] = keep
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[p.name].reshape(-1)[i]
            rel = float(abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
            if rel > worst:
                worst = rel
        report.per_param[p.name] = worst
        report.checked[p.name] = int(len(idxs))
        overall = max(overall, worst)
    report.max_rel_err = overall
    report.passed = overall <= tol and report.deterministic
    return report

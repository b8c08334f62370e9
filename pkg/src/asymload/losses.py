"""Symmetric and asymmetric regression losses on signed errors ``e = predicted - actual``.

Every function accepts a scalar or an array and works elementwise. The
asymmetric losses penalise negative errors (underestimates) more heavily:

* ``al1``: ``a|e|`` on (-1, 0], ``a e^2`` for e <= -1, ``b e^2`` on (0, 1), ``b|e|`` for e >= 1.
* ``al2``: ``a|e|`` for e < 0, zero on [0, eps1), ``b e^2`` on [eps1, eps2), ``b|e|`` for e >= eps2.

``al2`` jumps at ``eps2``; this is kept as is, not smoothed. Gradients at
kinks take the branch that owns the point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("mse", "al1", "al2")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"
    a: float = 5.0
    b: float = 2.0
    eps1: float = 0.005
    eps2: float = 0.01

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", self.kind.lower())
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not self.a > self.b > 0:
            raise ValueError("loss weights need a > b > 0")
        if not 0 < self.eps1 < self.eps2:
            raise ValueError("loss thresholds need 0 < eps1 < eps2")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b, "eps1": self.eps1, "eps2": self.eps2}


def _out(x, like):
    return float(x) if np.ndim(like) == 0 else x


def loss_mse(e):
    e = np.asarray(e, dtype=np.float64)
    return _out(e * e, e)


def loss_al1(e, spec: LossSpec = LossSpec("al1")):
    e = np.asarray(e, dtype=np.float64)
    a, b = spec.a, spec.b
    ae = np.abs(e)
    val = np.select(
        [e <= -1, e <= 0, e < 1],
        [a * e * e, a * ae, b * e * e],
        default=b * ae,
    )
    return _out(val, e)


def loss_al2(e, spec: LossSpec = LossSpec("al2")):
    e = np.asarray(e, dtype=np.float64)
    val = np.select(
        [e < 0, e < spec.eps1, e < spec.eps2],
        [spec.a * -e, np.zeros_like(e), spec.b * e * e],
        default=spec.b * e,
    )
    return _out(val, e)


def loss_values(e, spec: LossSpec):
    if spec.kind == "mse":
        return loss_mse(e)
    if spec.kind == "al1":
        return loss_al1(e, spec)
    return loss_al2(e, spec)


def batch_loss(errors, spec: LossSpec) -> float:
    """Mean per-sample loss; every sample counts toward the denominator."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("batch_loss of an empty batch")
    return float(np.sum(loss_values(e, spec)) / e.size)


def loss_grad(e, spec: LossSpec):
    """Derivative of the per-sample loss with respect to ``e``."""
    e = np.asarray(e, dtype=np.float64)
    a, b = spec.a, spec.b
    if spec.kind == "mse":
        g = 2.0 * e
    elif spec.kind == "al1":
        g = np.select([e <= -1, e <= 0, e < 1], [2 * a * e, np.full_like(e, -a), 2 * b * e], default=b)
    else:
        g = np.select(
            [e < 0, e < spec.eps1, e < spec.eps2],
            [np.full_like(e, -a), np.zeros_like(e), 2 * b * e],
            default=b,
        )
    return _out(np.asarray(g, dtype=np.float64), e)

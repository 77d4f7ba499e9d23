"""Training-aware binarization of weights and activations.

The approximation starts as a near-linear ramp and sharpens into ``sign`` as
training advances::

    f(z) = k * (-sign(z) * t**2 * z**2 / 2 + sqrt(2) * t * z)   if |z| < sqrt(2)/t
    f(z) = k * sign(z)                                            otherwise

    t = 10 ** (-2 + 3 i / T),   k = max(1 / t, 1)

The linear term carries the factor ``t``. Without it the two branches do not
meet at ``|z| = sqrt(2)/t`` and the closed-form derivative below would not be
the derivative of ``f``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SQRT2 = np.sqrt(2.0)


@dataclass
class BinarizeSchedule:
    total_iters: int
    current_iter: int = 0

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        if not 0 <= self.current_iter <= self.total_iters:
            raise ValueError(f"current_iter {self.current_iter} outside [0, {self.total_iters}]")

    @property
    def tk(self) -> tuple[float, float]:
        return schedule_tk(self.current_iter, self.total_iters)

    def advance(self) -> None:
        self.current_iter = min(self.current_iter + 1, self.total_iters)


def schedule_tk(i: int, total: int) -> tuple[float, float]:
    """Return ``(t, k)`` for iteration ``i`` of ``total``."""
    if total <= 0:
        raise ValueError("total iterations must be positive")
    if not 0 <= i <= total:
        raise ValueError(f"iteration {i} outside [0, {total}]")
    # exact endpoints; the float power is off by an ulp at i == total
    if i == 0:
        t = 0.01
    elif i == total:
        t = 10.0
    else:
        t = 10.0 ** (-2.0 + 3.0 * i / total)
    return t, max(1.0 / t, 1.0)


# Final point of the schedule; used as the surrogate gradient of hard sign.
FINAL_TK = schedule_tk(1, 1)


def binarize_forward(z, t: float, k: float) -> np.ndarray:
    z = np.asarray(z)
    s = np.sign(z)
    a = np.abs(z)
    inner = k * (-s * (t * t) * z * z / 2.0 + SQRT2 * t * z)
    return np.where(a < SQRT2 / t, inner, k * s)


def binarize_backward(z, t: float, k: float) -> np.ndarray:
    z = np.asarray(z)
    return k * np.maximum(SQRT2 * t - (t * t) * np.abs(z), 0.0)


def hard_sign(z) -> np.ndarray:
    # sign(0) == 0 so that gated-off channels stay silent downstream
    return np.sign(z)


@dataclass
class BinarizePolicy:
    """Which tensors of a network are binarized.

    ``binarize_all_weights`` covers the first and last layer too. The inputs
    of the first and last weighted layer are always left in full precision.
    """

    binarize_all_weights: bool = True
    activation_exceptions: tuple[str, ...] = field(default=("first", "last"))


def apply_policy(graph, policy: BinarizePolicy | None = None):
    """Return a copy of ``graph`` marked as a binary network under ``policy``."""
    from .core import WEIGHTED

    policy = policy or BinarizePolicy()
    unknown = set(policy.activation_exceptions) - {"first", "last"}
    if unknown:
        raise ValueError(f"unknown activation exceptions {sorted(unknown)}")
    g = graph.copy()
    weighted = [i for i, spec in enumerate(g.layers) if spec.kind in WEIGHTED]
    if not weighted:
        raise ValueError("policy needs at least one conv2d/linear layer")
    for i, spec in enumerate(g.layers):
        if spec.kind not in WEIGHTED:
            continue
        if spec.precision not in ("fp32", "binary"):
            raise ValueError(f"layer {i} already has precision {spec.precision!r}")
        edge = i in (weighted[0], weighted[-1])
        if policy.binarize_all_weights or not edge:
            spec.precision, spec.n_bits = "binary", 1
        else:
            spec.precision, spec.n_bits = "fp32", 32
        skip = (i == weighted[0] and "first" in policy.activation_exceptions) or (
            i == weighted[-1] and "last" in policy.activation_exceptions
        )
        spec.binarize_input = not skip
    return g

"""Barrier functions, class-K gains and virtual controllers."""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BarrierFunction",
    "ControllerKind",
    "VirtualController",
    "half_sontag_lambda",
]

log = logging.getLogger(__name__)

Array = np.ndarray

#: below this value of ||L_g h||^2 the half-Sontag law falls back to zero
SONTAG_B_TOL = 1e-12


@dataclass(frozen=True)
class BarrierFunction:
    """Scalar safety function ``h(x_i)`` with its derivatives and linear class-K gains.

    ``alpha`` enters the high-order candidate, ``beta`` the condition on its
    derivative and ``gamma`` the first-order tracking row.
    """

    eval: Callable[[Array], float]
    grad: Callable[[Array], Array]
    hess: Callable[[Array], Array]
    alpha: float
    beta: float
    gamma: float = 0.0
    radius: float | None = None

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")

    @classmethod
    def ball(
        cls,
        radius: float,
        alpha: float,
        beta: float,
        gamma: float = 0.0,
        center: Array | float = 0.0,
    ) -> BarrierFunction:
        """``h(x) = (r^2 - ||x - center||^2) / 2``: stay within ``r`` of ``center``."""
        if not radius > 0:
            raise ValueError(f"radius must be positive, got {radius}")
        c = np.atleast_1d(np.asarray(center, dtype=float))

        def h(x: Array) -> float:
            d = np.atleast_1d(x) - c
            return 0.5 * (radius**2 - float(d @ d))

        def grad(x: Array) -> Array:
            return -(np.atleast_1d(x) - c)

        def hess(x: Array) -> Array:
            return -np.eye(np.atleast_1d(x).shape[0])

        return cls(h, grad, hess, alpha, beta, gamma, radius=radius)


class ControllerKind(str, enum.Enum):
    ZERO = "zero"
    HALF_SONTAG = "half_sontag"
    CUSTOM = "custom"


@dataclass(frozen=True)
class VirtualController:
    """Feedback law used inside the high-order barrier candidate.

    ``custom_eval`` receives ``(x_i, x_nbrs)`` with ``x_nbrs`` holding the
    in-neighbor states and must return a vector of the agent's input size.
    It may only depend on in-neighbor states, otherwise the derivative of the
    candidate would involve inputs of agents outside the in-neighborhood.
    """

    kind: ControllerKind = ControllerKind.ZERO
    custom_eval: Callable[[Array, Mapping[int, Array]], Array] | None = field(default=None, compare=False)
    sontag_eps: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ControllerKind(self.kind))
        if self.kind is ControllerKind.CUSTOM and self.custom_eval is None:
            raise ValueError("custom controller needs custom_eval")
        if self.sontag_eps < 0:
            raise ValueError("sontag_eps must be non-negative")

    @classmethod
    def zero(cls) -> VirtualController:
        return cls(ControllerKind.ZERO)

    @classmethod
    def half_sontag(cls, eps: float = 0.1) -> VirtualController:
        return cls(ControllerKind.HALF_SONTAG, sontag_eps=eps)

    @classmethod
    def custom(cls, fn: Callable[[Array, Mapping[int, Array]], Array]) -> VirtualController:
        return cls(ControllerKind.CUSTOM, custom_eval=fn)


def half_sontag_lambda(a: float, b: float, eps: float = 0.1) -> float:
    """Gain ``(-a + sqrt(a^2 + eps b^2)) / (2b)`` of the half-Sontag filter.

    Returns 0 when ``b < SONTAG_B_TOL``. The limit is 0 there only for
    ``a > 0``; for ``a <= 0`` no smooth filter exists and a warning is logged.
    """
    if b < SONTAG_B_TOL:
        if a <= 0:
            log.warning("half-Sontag evaluated at L_g h = 0 with a = %g <= 0; returning 0", a)
        return 0.0
    # algebraically equal form that avoids cancellation when a >> 0
    root = math.sqrt(a * a + eps * b * b)
    if a > 0:
        return eps * b / (2.0 * (a + root))
    return (-a + root) / (2.0 * b)

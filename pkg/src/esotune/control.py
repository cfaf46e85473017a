"""Observer gains, state-feedback law and observer dynamics.

The extended state observer (ESO) tracks z = (x1, x2, d) with

    zhat' = A zhat + b * g_hat * u + l * (y - zhat_1)

where l = (l1, l2, l3) places the observer eigenvalues.  The
characteristic polynomial of the error dynamics is

    s^3 + l1 s^2 + l2 s + l3 = (s - lam1)(s - lam2)(s - lam3)

so the gains follow from Vieta's formulas.  The classical bandwidth
parametrization puts all three eigenvalues at -omega0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EigenTriple:
    """Three strictly negative real observer eigenvalues."""

    lam1: float
    lam2: float
    lam3: float

    def __post_init__(self) -> None:
        for lam in (self.lam1, self.lam2, self.lam3):
            if not lam < 0.0:
                raise ValueError(f"observer eigenvalues must be < 0, got {lam}")

    def canonical(self) -> "EigenTriple":
        """Sorted ascending; the canonical representative of the multiset."""
        a, b, c = sorted((self.lam1, self.lam2, self.lam3))
        return EigenTriple(a, b, c)

    def as_array(self) -> np.ndarray:
        return np.array([self.lam1, self.lam2, self.lam3])

    def sum(self) -> float:
        return self.lam1 + self.lam2 + self.lam3


@dataclass(frozen=True)
class ObserverGains:
    l1: float
    l2: float
    l3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l1, self.l2, self.l3])


@dataclass(frozen=True)
class ControllerGains:
    """State feedback u_0 = -k1 x1 - k2 x2 with both closed-loop poles at -k."""

    k: float
    k1: float
    k2: float


def gains_from_eigenvalues(triple: EigenTriple) -> ObserverGains:
    """Observer gains by Vieta's formulas on the canonicalized triple."""
    a, b, c = sorted((triple.lam1, triple.lam2, triple.lam3))
    l1 = -((a + b) + c)
    l2 = (a * b + a * c) + b * c
    l3 = -((a * b) * c)
    return ObserverGains(l1, l2, l3)


def gains_from_bandwidth(omega0: float) -> ObserverGains:
    """Gains for a triple eigenvalue at -omega0 (omega0 > 0).

    Arithmetic matches :func:`gains_from_eigenvalues` on (-omega0,) * 3
    exactly, operation for operation.
    """
    if not omega0 > 0.0:
        raise ValueError(f"omega0 must be > 0, got {omega0}")
    return ObserverGains(3.0 * omega0, 3.0 * (omega0 * omega0), (omega0 * omega0) * omega0)


def gains_array(lams: np.ndarray) -> np.ndarray:
    """Vectorized Vieta map: (N, 3) eigenvalue rows -> (N, 3) gain rows."""
    lams = np.sort(np.asarray(lams, dtype=float), axis=1)
    a, b, c = lams[:, 0], lams[:, 1], lams[:, 2]
    l1 = -((a + b) + c)
    l2 = (a * b + a * c) + b * c
    l3 = -((a * b) * c)
    return np.column_stack([l1, l2, l3])


def controller_gains(k: float) -> ControllerGains:
    """Feedback gains k1 = k^2, k2 = 2k for a double pole at -k."""
    if not k > 0.0:
        raise ValueError(f"controller pole k must be > 0, got {k}")
    return ControllerGains(k=k, k1=k * k, k2=2.0 * k)


def control_law(zhat, kg: ControllerGains, g_hat: float):
    """Disturbance-compensating feedback computed from the observer state.

    u = ( -k1 zhat1 - k2 zhat2 - zhat3 ) / g_hat; broadcasts over leading
    axes of ``zhat`` so batched callers can reuse it.
    """
    zhat = np.asarray(zhat, dtype=float)
    u = (-kg.k1 * zhat[..., 0] - kg.k2 * zhat[..., 1] - zhat[..., 2]) / g_hat
    if u.ndim == 0:
        return float(u)
    return u


def eso_derivative(zhat, y, u, gains: ObserverGains, g_hat: float) -> np.ndarray:
    """Time derivative of the observer state for measurement y and control u."""
    zhat = np.asarray(zhat, dtype=float)
    e = y - zhat[..., 0]
    return np.stack(
        [
            zhat[..., 1] + gains.l1 * e,
            zhat[..., 2] + g_hat * u + gains.l2 * e,
            gains.l3 * e,
        ],
        axis=-1,
    )

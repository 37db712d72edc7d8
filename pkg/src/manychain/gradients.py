"""Gradient access and its independent numerical check.

Targets carry their own analytic gradients (value_and_grad method), derived
by chain rule through the exp reparameterization of the scales; this module
is the seam where a gradient can be validated against central finite
differences before anyone trusts it inside a trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def value_and_grad(target, z):
    """Log density and gradient at z. value is bitwise equal to
    target.log_prob(z); gradient cost is a small constant times one density
    evaluation (one extra matrix product for the data term)."""
    return target.value_and_grad(z)


@dataclass
class FiniteDifferenceReport:
    analytic: np.ndarray
    numeric: np.ndarray
    abs_error: np.ndarray
    rel_error: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max())

    @property
    def max_abs_error(self) -> float:
        return float(self.abs_error.max())


def finite_difference_check(target, z, h: float = 1e-5) -> FiniteDifferenceReport:
    """Compare the analytic gradient with central differences at z.

    Double precision only: in single precision the differences drown in
    rounding noise and the check would certify nothing.
    """
    if getattr(target, "precision", "double") != "double":
        raise ValueError("finite_difference_check requires a double-precision target")
    if not (h > 0.0):
        raise ValueError(f"finite-difference step must be positive, got {h}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"expected a single (P,) state, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("state contains non-finite entries")

    _, analytic = target.value_and_grad(z)
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.empty_like(analytic)
    for i in range(z.size):
        step = np.zeros_like(z)
        step[i] = h
        numeric[i] = (target.log_prob(z + step) - target.log_prob(z - step)) / (2.0 * h)
    abs_error = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    rel_error = np.where(denom > 0.0, abs_error / np.where(denom > 0.0, denom, 1.0), 0.0)
    return FiniteDifferenceReport(analytic, numeric, abs_error, rel_error)

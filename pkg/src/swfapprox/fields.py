"""Synthetic gradient fields used by demos and tests.

Anything with ``dim``, ``field_batch`` and ``csd_batch`` can drive the
cubical flow-map machinery; truncated models satisfy the same protocol.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["GradientField", "double_well_1d", "product_field", "radial_ridge"]


@dataclass(frozen=True)
class GradientField:
    """Downward gradient flow of an explicit potential."""

    dim: int
    potential: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    name: str = "field"

    def csd_batch(self, X: np.ndarray) -> np.ndarray:
        return self.potential(np.atleast_2d(np.asarray(X, dtype=float)))

    def field_batch(self, X: np.ndarray) -> np.ndarray:
        return -self.gradient(np.atleast_2d(np.asarray(X, dtype=float)))

    def field(self, x: np.ndarray) -> np.ndarray:
        return self.field_batch(np.asarray(x, dtype=float)[None, :])[0]

    def csd(self, x: np.ndarray) -> float:
        return float(self.csd_batch(np.asarray(x, dtype=float)[None, :])[0])


def double_well_1d(well: float = 1.0, scale: float = 1.0) -> GradientField:
    """Two sinks at +-well and a source at 0: potential s(x^4/4 - w^2 x^2/2)."""

    def potential(X):
        x = X[:, 0]
        return scale * (x ** 4 / 4.0 - well ** 2 * x ** 2 / 2.0)

    def gradient(X):
        x = X[:, 0]
        return scale * (x ** 3 - well ** 2 * x)[:, None]

    return GradientField(1, potential, gradient, name="double-well")


def product_field(f1: GradientField, f2: GradientField) -> GradientField:
    """Product flow: potentials add, gradients concatenate."""

    d1 = f1.dim

    def potential(X):
        return f1.csd_batch(X[:, :d1]) + f2.csd_batch(X[:, d1:])

    def gradient(X):
        return np.hstack([-f1.field_batch(X[:, :d1]), -f2.field_batch(X[:, d1:])])

    return GradientField(f1.dim + f2.dim, potential, gradient,
                         name=f"{f1.name}x{f2.name}")


def radial_ridge(dim: int, rho: float, scale: float = 1.0) -> GradientField:
    """Repelling sphere of radius rho: potential -s(|x|^2 - rho^2)^2."""

    def potential(X):
        r2 = np.sum(X * X, axis=1)
        return -scale * (r2 - rho ** 2) ** 2

    def gradient(X):
        r2 = np.sum(X * X, axis=1)
        return (-4.0 * scale * (r2 - rho ** 2))[:, None] * X

    return GradientField(dim, potential, gradient, name="radial-ridge")

"""Neumann-Laplacian cosine eigenbasis on the unit interval or unit square.

Fields live on a vertex-centred uniform grid and are stored flattened
(row-major in 2D, x index slowest).  All spatial integrals use the
trapezoidal rule, under which the sampled cosine modes are exactly
orthonormal.  The heat semigroup is applied spectrally with the continuum
eigenvalues, so ``apply_semigroup`` is exact for the cosine interpolant of
the grid data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class AliasingError(ValueError):
    """More modes were requested than the grid can resolve."""


@dataclass(frozen=True)
class DomainGrid:
    """Uniform vertex-centred grid on [0, 1] or [0, 1]^2 (measure 1)."""

    points_per_axis: int = 64
    dimension: int = 1

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.dimension}")
        if int(self.points_per_axis) != self.points_per_axis or self.points_per_axis < 2:
            raise ValueError(f"points_per_axis must be an integer >= 2, got {self.points_per_axis}")

    @property
    def spacing(self) -> float:
        return 1.0 / (self.points_per_axis - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.points_per_axis)

    @property
    def n_points(self) -> int:
        return self.points_per_axis ** self.dimension

    @property
    def shape(self) -> tuple:
        return (self.points_per_axis,) * self.dimension

    @property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(n_points, dimension)``."""
        mesh = np.meshgrid(*([self.axis] * self.dimension), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def weights(self) -> np.ndarray:
        return _trapezoid_weights(self.points_per_axis, self.dimension)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Trapezoidal integral over the last axis."""
        return np.asarray(values) @ self.weights


@lru_cache(maxsize=None)
def _trapezoid_weights(n: int, dimension: int) -> np.ndarray:
    w = np.full(n, 1.0 / (n - 1))
    w[0] = w[-1] = 0.5 / (n - 1)
    if dimension == 2:
        w = np.outer(w, w).ravel()
    w.setflags(write=False)
    return w


def _mode_scale(k: np.ndarray, n: int) -> np.ndarray:
    # unit norm under trapezoid quadrature: 1 for k=0 and the Nyquist mode
    k = np.asarray(k)
    return np.where((k == 0) | (k == n - 1), 1.0, np.sqrt(2.0))


@lru_cache(maxsize=None)
def _cosine_matrix(n: int) -> np.ndarray:
    """Rows are the sampled 1D modes e_0..e_{n-1} on an n-node grid."""
    k = np.arange(n)
    x = np.linspace(0.0, 1.0, n)
    c = _mode_scale(k, n)[:, None] * np.cos(np.pi * np.outer(k, x))
    c.setflags(write=False)
    return c


@lru_cache(maxsize=256)
def _semigroup_matrix(n: int, tau: float) -> np.ndarray:
    """1D heat flow over 'diffusivity * time' ``tau`` as an n-by-n matrix."""
    c = _cosine_matrix(n)
    decay = np.exp(-tau * (np.pi * np.arange(n)) ** 2)
    w = _trapezoid_weights(n, 1)
    p = (c.T * decay) @ (c * w)
    p.setflags(write=False)
    return p


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    grid: DomainGrid
    num_modes: int
    eigenvalues: np.ndarray
    modes: np.ndarray
    indices: np.ndarray = field(repr=False)

    @property
    def sup_bound(self) -> float:
        """C_0: the largest sup-norm over the sampled eigenfunctions."""
        return float(np.abs(self.modes).max())


def build_basis(grid: DomainGrid, num_modes: int) -> SpectralBasis:
    if num_modes < 1:
        raise ValueError(f"num_modes must be >= 1, got {num_modes}")
    if num_modes > grid.n_points:
        raise AliasingError(
            f"{num_modes} modes exceed the {grid.n_points} resolvable on this grid"
        )
    n = grid.points_per_axis
    c = _cosine_matrix(n)
    if grid.dimension == 1:
        idx = np.arange(num_modes)[:, None]
        modes = c[:num_modes].copy()
        eig = (np.pi * idx[:, 0]) ** 2
    else:
        k1, k2 = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        k1, k2 = k1.ravel(), k2.ravel()
        order = np.lexsort((k2, k1, k1 ** 2 + k2 ** 2))[:num_modes]
        idx = np.stack([k1[order], k2[order]], axis=-1)
        modes = np.stack([np.outer(c[a], c[b]).ravel() for a, b in idx])
        eig = np.pi ** 2 * (idx[:, 0] ** 2 + idx[:, 1] ** 2)
    return SpectralBasis(grid, int(num_modes), eig.astype(float), modes, idx)


def _check_field(values: np.ndarray, grid: DomainGrid) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[-1:] != (grid.n_points,):
        raise ValueError(
            f"field trailing dimension {values.shape[-1:]} does not match grid with {grid.n_points} nodes"
        )
    return values


def forward_transform(values, basis: SpectralBasis) -> np.ndarray:
    values = _check_field(values, basis.grid)
    return (values * basis.grid.weights) @ basis.modes.T


def inverse_transform(coefficients, basis: SpectralBasis) -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=float)
    if coefficients.shape[-1:] != (basis.num_modes,):
        raise ValueError(
            f"expected {basis.num_modes} coefficients, got trailing shape {coefficients.shape[-1:]}"
        )
    return coefficients @ basis.modes


def semigroup(grid: DomainGrid, tau: float):
    """Return a function applying the heat flow exp(tau * Laplacian) to fields on ``grid``.

    ``tau`` is diffusivity times elapsed time.  The returned callable accepts
    arrays with any leading batch shape.
    """
    if tau < 0:
        raise ValueError(f"semigroup time must be nonnegative, got {tau}")
    p = _semigroup_matrix(grid.points_per_axis, float(tau))
    n = grid.points_per_axis
    if grid.dimension == 1:
        return lambda u: u @ p.T

    def apply2d(u):
        lead = u.shape[:-1]
        v = u.reshape(lead + (n, n))
        return (p @ v @ p.T).reshape(lead + (n * n,))

    return apply2d


def apply_semigroup(values, diffusivity: float, t: float, basis: SpectralBasis) -> np.ndarray:
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    if diffusivity <= 0:
        raise ValueError(f"diffusivity must be positive, got {diffusivity}")
    values = _check_field(values, basis.grid)
    return semigroup(basis.grid, diffusivity * t)(values)


def evaluate(coefficients, basis: SpectralBasis, points) -> np.ndarray:
    """Evaluate the cosine series with the given coefficients at arbitrary points.

    ``points`` has shape ``(m,)`` in 1D or ``(m, 2)`` in 2D.
    """
    coefficients = np.asarray(coefficients, dtype=float)
    pts = np.asarray(points, dtype=float).reshape(-1, basis.grid.dimension)
    n = basis.grid.points_per_axis
    out = np.ones((basis.num_modes, len(pts)))
    for d in range(basis.grid.dimension):
        k = basis.indices[:, d]
        out *= _mode_scale(k, n)[:, None] * np.cos(np.pi * np.outer(k, pts[:, d]))
    return coefficients @ out

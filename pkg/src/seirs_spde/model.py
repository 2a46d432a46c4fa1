"""SEIRS reaction terms, coefficient fields and the long-time thresholds.

States are arrays with the compartment axis second to last,
``(..., 4, n_points)`` in the order S, E, I, R.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .noise import NoiseSpec
from .spectral import DomainGrid

COMPARTMENTS = ("S", "E", "I", "R")
COEFFICIENT_NAMES = ("Lambda", "mu1", "mu2", "mu3", "mu4", "alpha", "beta", "gamma", "sigma")

PERMANENCE = "permanence-candidate"
EXTINCTION = "extinction"
INDETERMINATE = "indeterminate"


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    grid: DomainGrid
    Lambda: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    mu3: np.ndarray
    mu4: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray
    diffusivities: tuple = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in COEFFICIENT_NAMES:
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (self.grid.n_points,)).copy()
            if not np.all(np.isfinite(v)):
                raise ValueError(f"coefficient {name} has non-finite values")
            bad = np.flatnonzero(v < 0)
            if bad.size:
                raise ValueError(f"coefficient {name} is negative at node {bad[0]} ({v[bad[0]]})")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        k = tuple(float(d) for d in self.diffusivities)
        if len(k) != 4 or any(not (d > 0 and np.isfinite(d)) for d in k):
            raise ValueError(f"diffusivities must be four positive numbers, got {self.diffusivities}")
        object.__setattr__(self, "diffusivities", k)

    @classmethod
    def homogeneous(cls, grid: DomainGrid, diffusivities=(1.0, 1.0, 1.0, 1.0), **values):
        """Constant coefficients; unspecified rates default to zero."""
        unknown = set(values) - set(COEFFICIENT_NAMES)
        if unknown:
            raise TypeError(f"unknown coefficients: {sorted(unknown)}")
        full = {name: float(values.get(name, 0.0)) for name in COEFFICIENT_NAMES}
        return cls(grid, diffusivities=diffusivities, **full)

    def replace(self, **changes) -> "CoefficientSet":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return CoefficientSet(**kw)


def make_state(grid: DomainGrid, S=0.0, E=0.0, I=0.0, R=0.0) -> np.ndarray:
    """Stack four compartments (scalars or node arrays) into a (4, n_points) state."""
    return np.stack([np.broadcast_to(np.asarray(v, dtype=float), (grid.n_points,))
                     for v in (S, E, I, R)]).copy()


def incidence(S, E, I, R, alpha):
    """alpha*S*I/(S+E+I+R), defined as 0 whenever S = 0 or I = 0."""
    S, E, I, R, alpha = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (S, E, I, R, alpha)))
    total = S + E + I + R
    num = alpha * S * I
    nonzero = (S != 0) & (I != 0)
    out = np.divide(num, total, out=np.zeros_like(num), where=nonzero)
    return out if out.ndim else float(out)


def _drift(state: np.ndarray, c: CoefficientSet) -> np.ndarray:
    S, E, I, R = (state[..., j, :] for j in range(4))
    inc = incidence(S, E, I, R, c.alpha)
    return np.stack([
        c.Lambda - c.mu1 * S - inc + c.beta * R,
        -c.mu2 * E + inc - c.sigma * E,
        -c.mu3 * I + c.sigma * E - c.gamma * I,
        -c.mu4 * R + c.gamma * I - c.beta * R,
    ], axis=-2)


def reaction_drift(state, coeffs: CoefficientSet) -> np.ndarray:
    """G(V): the four reaction terms evaluated pointwise."""
    state = np.asarray(state, dtype=float)
    if state.shape[-2:] != (4, coeffs.grid.n_points):
        raise ValueError(f"state shape {state.shape} does not match (4, {coeffs.grid.n_points})")
    if np.any(state < 0):
        raise ValueError("reaction_drift requires a nonnegative state; clamp it first")
    return _drift(state, coeffs)


@dataclass(frozen=True)
class ThresholdReport:
    lambda_star: float
    r_hat: float
    a2: float
    a3: float
    a_tilde: float
    mu3_gamma_alpha_star: float
    mu2_star: float
    m: float
    alpha_minus_gamma_min: float
    mu_star: float
    predicted_regime: str

    def rows(self):
        return [
            ("Lambda_star", self.lambda_star),
            ("R_hat", self.r_hat),
            ("a2", self.a2),
            ("a3", self.a3),
            ("a_tilde", self.a_tilde),
            ("mu3_plus_gamma_minus_alpha_star", self.mu3_gamma_alpha_star),
            ("mu2_star", self.mu2_star),
            ("m", self.m),
            ("alpha_minus_gamma_min", self.alpha_minus_gamma_min),
            ("mu_star", self.mu_star),
            ("predicted_regime", self.predicted_regime),
        ]


def compute_thresholds(coeffs: CoefficientSet, noise: NoiseSpec) -> ThresholdReport:
    """Permanence index, extinction rate and predicted regime.

    Infima over the domain are minima over grid nodes.  The regime is
    ``extinction`` when both extinction infima are positive, and
    ``permanence-candidate`` when Lambda_* > 0, R_hat > 0 and alpha >= gamma
    everywhere; neither condition is necessary, so anything else is
    ``indeterminate``.
    """
    c = coeffs
    traces = noise.traces if noise.n else np.zeros(4)
    a2, a3 = float(traces[1]), float(traces[2])
    a_tilde = max(a2, a3)
    r_hat = float(c.grid.integrate(c.alpha / 2 - (c.mu2 + c.mu3 + c.gamma))) - a_tilde / 2
    lam_star = float(c.Lambda.min())
    ext1 = float((c.mu3 + c.gamma - c.alpha).min())
    ext2 = float(c.mu2.min())
    amg = float((c.alpha - c.gamma).min())
    mu_star = float(np.min([c.mu1, c.mu2, c.mu3, c.mu4]))
    if ext1 > 0 and ext2 > 0:
        regime = EXTINCTION
    elif lam_star > 0 and r_hat > 0 and amg >= 0:
        regime = PERMANENCE
    else:
        regime = INDETERMINATE
    return ThresholdReport(lam_star, r_hat, a2, a3, a_tilde, ext1, ext2, min(ext1, ext2),
                           amg, mu_star, regime)


HYPOTHESES = ("alpha_minus_gamma", "ratio", "susceptible_fraction")


def hypothesis_masks(state, coeffs: CoefficientSet):
    """Pointwise status of the three running permanence hypotheses.

    Returns ``(holds, defined)`` boolean arrays of shape (..., 3, n_points).
    The ratio condition needs I+E > 0; the susceptible-fraction condition
    needs S+E+I+R > 0 and alpha > 0.
    """
    state = np.asarray(state, dtype=float)
    S, E, I, R = (state[..., j, :] for j in range(4))
    c = coeffs
    infected = I + E
    total = S + E + I + R
    cond1 = np.broadcast_to(c.alpha - c.gamma >= 0, S.shape)
    def1 = np.ones_like(cond1)
    def2 = infected > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        cond2 = def2 & ((S + R) / np.where(def2, infected, 1.0) <= total / 2)
    def3 = (total > 0) & (c.alpha > 0)
    with np.errstate(invalid="ignore", over="ignore"):
        cond3 = def3 & (S * np.where(def3, c.alpha, 1.0) > c.gamma * total)
    holds = np.stack([cond1, cond2, cond3], axis=-2)
    defined = np.stack([def1, def2, np.broadcast_to(def3, S.shape)], axis=-2)
    return holds, defined


@dataclass(frozen=True)
class HypothesisReport:
    violated: dict
    undefined: dict
    all_hold: float


def check_permanence_hypotheses(state, coeffs: CoefficientSet) -> HypothesisReport:
    """Measure fractions of the domain where each hypothesis fails or is undefined."""
    holds, defined = hypothesis_masks(state, coeffs)
    w = coeffs.grid.weights
    violated = (defined & ~holds) @ w
    undefined = (~defined) @ w
    all_hold = float(np.all(holds, axis=-2) @ w)
    return HypothesisReport(
        dict(zip(HYPOTHESES, map(float, violated))),
        dict(zip(HYPOTHESES, map(float, undefined))),
        all_hold,
    )

"""Exponential Euler time stepping of the mild SEIRS formulation.

One step of size dt for component i reads

    V_i <- exp(dt A_i) [ V_i + G_i(c(V)) dt + c(V_i) dW_i ],

followed by a hard projection onto V_i >= 0.  ``c`` is the clamp policy
(hard ``max(u, 0)`` or the C^2 smoothing ``eps * Phi(u / eps)``) used inside
the drift and noise coefficients.  The semigroup is applied exactly in the
cosine basis, so the only time-discretisation error comes from freezing
drift and noise at the left endpoint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .model import COEFFICIENT_NAMES, CoefficientSet, _drift
from .noise import BrownianDriver, NoiseSpec, RngStream, modal_to_field
from .spectral import SpectralBasis, _semigroup_matrix, build_basis, semigroup

HARD = "hard"
SMOOTH = "smooth"


class DivergenceError(RuntimeError):
    def __init__(self, component: str, time: float, path: int = 0):
        self.component, self.time, self.path = component, time, path
        self.partial = None
        super().__init__(f"non-finite values in component {component} at t={time:g} (path {path})")


class ContractionError(RuntimeError):
    def __init__(self, ratios, differences=()):
        self.ratios = list(ratios)
        self.differences = list(differences)
        super().__init__(f"Picard iteration is not contracting; ratios {self.ratios}")


def smooth_step(xi):
    """Phi: 0 below 0, 3xi^5 - 8xi^4 + 6xi^3 on (0, 1), identity above 1."""
    xi = np.asarray(xi, dtype=float)
    mid = xi ** 3 * (6.0 + xi * (-8.0 + 3.0 * xi))
    return np.where(xi <= 0, 0.0, np.where(xi >= 1, xi, mid))


def clamp(values, policy: str = HARD, eps: float | None = None) -> np.ndarray:
    if policy == HARD:
        return np.maximum(values, 0.0)
    if policy == SMOOTH:
        if eps is None or eps <= 0:
            raise ValueError("smooth clamp needs eps > 0")
        values = np.asarray(values, dtype=float)
        # pass values >= eps through untouched; eps * (u / eps) is not always u in floating point
        return np.where(values >= eps, values, eps * smooth_step(values / eps))
    raise ValueError(f"unknown clamp policy {policy!r}")


@dataclass(frozen=True)
class SchemeConfig:
    dt: float = 1e-3
    T: float = 1.0
    clamp_policy: str = HARD
    eps: float = 1e-3
    record_every: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.T >= 0:
            raise ValueError(f"T must be nonnegative, got {self.T}")
        if self.T > 0 and self.dt > self.T:
            raise ValueError(f"dt={self.dt} exceeds T={self.T}")
        if self.clamp_policy not in (HARD, SMOOTH):
            raise ValueError(f"unknown clamp policy {self.clamp_policy!r}")
        if self.clamp_policy == SMOOTH and not self.eps > 0:
            raise ValueError("smooth clamp needs eps > 0")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError("record_every must be a positive integer")

    @property
    def n_steps(self) -> int:
        # tolerate T/dt landing a hair above an integer
        return max(0, math.ceil(self.T / self.dt - 1e-9))


class ExponentialEuler:
    """Vectorised stepper for states of shape (..., 4, n_points)."""

    def __init__(self, coeffs: CoefficientSet, dt: float, clamp_policy: str = HARD, eps: float = 1e-3):
        self.coeffs = coeffs
        self.dt = float(dt)
        self.clamp_policy = clamp_policy
        self.eps = eps
        grid = coeffs.grid
        self._flows = [semigroup(grid, k * self.dt) for k in coeffs.diffusivities]
        self._weights = np.ascontiguousarray(grid.weights)
        self._coef = np.ascontiguousarray(np.stack([getattr(coeffs, n) for n in COEFFICIENT_NAMES]))
        self._kernel_eps = float(eps) if clamp_policy == SMOOTH else 0.0
        self._stacked = None
        if grid.dimension == 1:
            n = grid.points_per_axis
            self._stacked = np.stack([_semigroup_matrix(n, k * self.dt).T for k in coeffs.diffusivities])

    def inner_clamp(self, state):
        return clamp(state, self.clamp_policy, self.eps)

    def pre_flow(self, state, dW=None):
        """The bracket V + G(c(V)) dt + c(V) dW before the semigroup is applied."""
        state = np.asarray(state, dtype=float)
        s3 = np.ascontiguousarray(state.reshape((-1,) + state.shape[-2:]))
        if dW is None:
            w3 = np.empty((0, 4, state.shape[-1]))
        else:
            w3 = np.ascontiguousarray(np.broadcast_to(dW, state.shape).reshape(s3.shape))
        return _kernels.pre_flow(s3, self._coef, self.dt, w3, self._kernel_eps).reshape(state.shape)

    def flow(self, y):
        if self._stacked is not None and y.ndim == 3:
            return np.matmul(y.transpose(1, 0, 2), self._stacked).transpose(1, 0, 2)
        out = np.empty_like(y)
        for i, f in enumerate(self._flows):
            out[..., i, :] = f(y[..., i, :])
        return out

    def step(self, state, dW=None):
        """Advance one step; returns (new_state, clamped_fraction, clamped_mass, finite_mask)."""
        y = np.ascontiguousarray(self.flow(self.pre_flow(state, dW)))
        lead = y.shape[:-2]
        y3 = y.reshape((-1,) + y.shape[-2:])
        frac, mass, finite = _kernels.project(y3, self._weights)
        return y3.reshape(y.shape), frac.reshape(lead), mass.reshape(lead), finite.reshape(lead + (4,))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    clamped_fraction: np.ndarray
    clamped_mass: np.ndarray
    step_clamped_fraction: np.ndarray
    step_clamped_mass: np.ndarray
    functionals: dict = field(default_factory=dict)


def _noise_basis(coeffs: CoefficientSet, noise: NoiseSpec, basis: SpectralBasis | None):
    if basis is None:
        return build_basis(coeffs.grid, max(noise.n, 1))
    if basis.grid != coeffs.grid:
        raise ValueError("basis and coefficients live on different grids")
    return basis


def record_steps(scheme: SchemeConfig) -> np.ndarray:
    """Step indices at which snapshots are recorded (always includes 0 and the last step)."""
    n = scheme.n_steps
    steps = list(range(0, n + 1, scheme.record_every))
    if steps[-1] != n:
        steps.append(n)
    return np.array(steps)


def integrate_batch(initial, coeffs: CoefficientSet, noise: NoiseSpec, scheme: SchemeConfig,
                    streams, basis: SpectralBasis | None = None, on_record=None,
                    substeps: int = 1, stride: int | None = None, on_increment=None):
    """Integrate a batch of paths, one per stream, in lockstep.

    ``initial`` has shape (4, P) or (n_paths, 4, P).  ``on_record(k, t, state,
    clamped_fraction, clamped_mass)`` is called at each recorded step with the
    full batch state.  Draws are made at ``scheme.dt / substeps`` and summed.
    Returns ``(final_state, aborted)`` where ``aborted`` maps path position to
    the DivergenceError that stopped it.  Aborted paths are frozen at zero.
    """
    streams = list(streams)
    basis = _noise_basis(coeffs, noise, basis)
    state = np.array(np.broadcast_to(initial, (len(streams), 4, coeffs.grid.n_points)), dtype=float)
    if np.any(state < 0) or not np.all(np.isfinite(state)):
        raise ValueError("initial state must be finite and nonnegative")
    stepper = ExponentialEuler(coeffs, scheme.dt, scheme.clamp_policy, scheme.eps)
    noisy = noise.n > 0 and bool(np.any(noise.active))
    driver = (BrownianDriver(streams, noise, scheme.dt / substeps, substeps, stride)
              if noisy or on_increment is not None else None)
    n_steps = scheme.n_steps
    rec = set(record_steps(scheme).tolist())
    zeros = np.zeros(len(streams))
    aborted = {}
    alive = np.ones(len(streams), dtype=bool)
    if on_record is not None:
        on_record(0, 0.0, state, zeros, zeros)
    for k in range(n_steps):
        dW = None
        if driver is not None:
            dB = driver.increments(k)
            if on_increment is not None:
                on_increment(k, dB)
            if noisy:
                dW = modal_to_field(dB, noise, basis)
        state, frac, mass, finite = stepper.step(state, dW)
        bad = ~finite & alive[:, None]
        if bad.any():
            t = (k + 1) * scheme.dt
            for p in np.flatnonzero(bad.any(axis=1)):
                comp = "SEIR"[int(np.argmax(bad[p]))]
                aborted[int(p)] = DivergenceError(comp, t, streams[p].path)
            alive &= ~bad.any(axis=1)
            state[~alive] = 0.0
        if on_record is not None and (k + 1) in rec:
            on_record(k + 1, (k + 1) * scheme.dt, state, frac, mass)
    return state, aborted


def simulate_path(initial, coeffs: CoefficientSet, noise: NoiseSpec, scheme: SchemeConfig,
                  stream: RngStream, basis: SpectralBasis | None = None) -> Trajectory:
    """Simulate one path and keep every recorded snapshot."""
    times, states, fr, ms = [], [], [], []
    step_fr = np.zeros(scheme.n_steps)
    step_ms = np.zeros(scheme.n_steps)
    keep = set(record_steps(scheme).tolist())

    def on_every(k, t, state, frac, mass):
        if k > 0:
            step_fr[k - 1] = frac[0]
            step_ms[k - 1] = mass[0]
        if k in keep:
            times.append(t)
            states.append(state[0].copy())
            fr.append(frac[0])
            ms.append(mass[0])

    # per-step clamp statistics are wanted for every step, not just recorded ones
    every = SchemeConfig(scheme.dt, scheme.T, scheme.clamp_policy, scheme.eps, 1)
    _, aborted = integrate_batch(initial, coeffs, noise, every, [stream], basis, on_every)
    if aborted:
        err = aborted[0]
        # keep the records made before the blow-up so callers can still report them
        keep_n = int(np.searchsorted(times, err.time - 0.5 * scheme.dt, side="right"))
        n_done = int(round(err.time / scheme.dt)) - 1
        err.partial = Trajectory(np.array(times[:keep_n]), np.array(states[:keep_n]),
                                 np.array(fr[:keep_n]), np.array(ms[:keep_n]),
                                 step_fr[:n_done], step_ms[:n_done])
        raise err
    return Trajectory(np.array(times), np.array(states), np.array(fr), np.array(ms), step_fr, step_ms)


@dataclass(frozen=True)
class PicardConfig:
    horizon: float = 0.1
    n_substeps: int = 20
    max_iter: int = 50
    tol: float = 1e-12

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("Picard horizon must be positive")
        if not self.tol > 0:
            raise ValueError("Picard tolerance must be positive")
        if self.n_substeps < 1 or self.max_iter < 1:
            raise ValueError("n_substeps and max_iter must be >= 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_substeps


@dataclass
class PicardResult:
    times: np.ndarray
    solution: np.ndarray
    differences: list
    ratios: list
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.differences)


def picard_solve(initial, coeffs: CoefficientSet, noise: NoiseSpec, dB, config: PicardConfig,
                 basis: SpectralBasis | None = None) -> PicardResult:
    """Fixed-point iteration of the clamped mild-solution map on [0, horizon].

    ``dB`` holds the frozen modal Brownian increments, either one per substep,
    shape (n_substeps, 4, n), or ``r`` finer increments per substep, shape
    (n_substeps, r, 4, n).  The integrands are frozen at the left endpoint of
    each substep (rectangle rule, as in the stepper), while the semigroup
    kernel of the stochastic convolution is evaluated at the resolution of
    the increments.  The first iterate is the free heat flow of the initial
    data, so a problem without drift and noise converges after a single
    application of the map.
    """
    basis = _noise_basis(coeffs, noise, basis)
    v0 = np.asarray(initial, dtype=float)
    n = config.n_substeps
    dt = config.dt
    stepper = ExponentialEuler(coeffs, dt)
    dW = None
    if noise.n:
        dB = np.asarray(dB, dtype=float)
        if dB.ndim == 3:
            dB = dB[:, None]
        if dB.ndim != 4 or dB.shape[0] != n or dB.shape[2:] != (4, noise.n):
            raise ValueError(f"expected increments of shape {(n, 4, noise.n)} or "
                             f"{(n, 'r', 4, noise.n)}, got {dB.shape}")
        r = dB.shape[1]
        dW = modal_to_field(dB, noise, basis)  # (n, r, 4, P)
        # sub-increment j starts at j*dt/r inside its substep and is smoothed for the rest of it
        kernels = [stepper] + [ExponentialEuler(coeffs, dt * (r - j) / r) for j in range(1, r)]

    u = np.empty((n + 1,) + v0.shape)
    u[0] = v0
    for j in range(n):
        u[j + 1] = stepper.flow(u[j])

    diffs, ratios = [], []
    converged = False
    for _ in range(config.max_iter):
        v = clamp(u[:-1])
        forcing = stepper.flow(_drift(v, coeffs) * dt)
        if dW is not None:
            for j, ker in enumerate(kernels):
                forcing += ker.flow(v * dW[:, j])
        new = np.empty_like(u)
        new[0] = v0
        for j in range(n):
            new[j + 1] = stepper.flow(new[j]) + forcing[j]
        d = float(np.abs(new - u).max())
        if diffs:
            ratios.append(d / diffs[-1] if diffs[-1] > 0 else 0.0)
        diffs.append(d)
        u = new
        if d < config.tol:
            converged = True
            break
        if len(ratios) >= 3 and all(r >= 1 for r in ratios[-3:]):
            raise ContractionError(ratios, diffs)
    return PicardResult(np.arange(n + 1) * dt, u, diffs, ratios, converged)


@dataclass
class ConvergenceTable:
    kind: str
    levels: list
    errors: np.ndarray
    standard_errors: np.ndarray
    samples: np.ndarray
    observed_order: float | None = None

    def rows(self):
        for lv, e, s in zip(self.levels, self.errors, self.standard_errors):
            yield lv, e, s


def _standard_error(x):
    m = x.shape[1]
    return x.std(axis=1, ddof=1) / np.sqrt(m) if m > 1 else np.zeros(x.shape[0])


def _final_states(initial, coeffs, noise, scheme, streams, basis, substeps, stride, collect_dB=False):
    total = {}

    def on_inc(k, dB):
        total["B"] = total.get("B", 0.0) + dB

    final, aborted = integrate_batch(initial, coeffs, noise, scheme, streams, basis,
                                     substeps=substeps, stride=stride,
                                     on_increment=on_inc if collect_dB else None)
    if aborted:
        raise next(iter(aborted.values()))
    return final, total.get("B")


def convergence_study(initial, coeffs: CoefficientSet, noise: NoiseSpec, *, kind: str, levels,
                      T: float, paths: int, seed: int = 0, dt: float = 1e-3, exact=None,
                      basis: SpectralBasis | None = None, component: int | None = None,
                      clamp_policy: str = HARD) -> ConvergenceTable:
    """Strong-error table over time steps (``kind='dt'``) or noise truncation (``kind='n'``).

    All levels share Brownian draws.  For ``dt`` the error is the root mean
    square over paths of the sup-norm error at ``T``, against ``exact(initial,
    B_T)`` when given (``B_T`` the modal Brownian values at ``T``, shape
    (paths, 4, n)) or else against the finest level.  For ``n`` the error is
    the mean over paths of the squared sup-norm difference from the largest
    truncation level, for ``component`` (all components if None).
    """
    levels = list(levels)
    if len(levels) < 2:
        raise ValueError("a convergence study needs at least two levels")
    basis = _noise_basis(coeffs, noise, basis)
    streams = [RngStream(seed, p) for p in range(paths)]
    sel = slice(None) if component is None else slice(component, component + 1)

    if kind == "dt":
        finest = min(levels)
        ratios = [lv / finest for lv in levels]
        if any(abs(r - round(r)) > 1e-9 for r in ratios):
            raise ValueError("every dt must be an integer multiple of the finest dt")
        finals = {}
        B_T = None
        for lv, r in zip(levels, ratios):
            scheme = SchemeConfig(lv, T, clamp_policy)
            finals[lv], B = _final_states(initial, coeffs, noise, scheme, streams, basis,
                                          int(round(r)), None, collect_dB=(lv == finest))
            if lv == finest:
                B_T = B
        if exact is not None:
            ref = exact(np.asarray(initial, dtype=float), B_T)
            compared = levels
        else:
            ref = finals[finest]
            compared = [lv for lv in levels if lv != finest]
        samples = np.array([np.abs(finals[lv][:, sel] - ref[:, sel]).max(axis=(-2, -1))
                            for lv in compared])
        ms = (samples ** 2).mean(axis=1)
        rms = np.sqrt(ms)
        se_ms = _standard_error(samples ** 2)
        se = np.divide(se_ms, 2 * rms, out=np.zeros_like(rms), where=rms > 0)
        order = None
        if len(compared) >= 2 and np.all(rms > 0):
            order = float(np.polyfit(np.log(compared), np.log(rms), 1)[0])
        return ConvergenceTable("dt", compared, rms, se, samples, order)

    if kind == "n":
        n_ref = max(levels)
        if n_ref > noise.n:
            raise ValueError(f"reference truncation {n_ref} exceeds the {noise.n} noise modes")
        scheme = SchemeConfig(dt, T, clamp_policy)
        ref, _ = _final_states(initial, coeffs, noise.truncate(n_ref), scheme, streams, basis, 1, n_ref)
        compared = [lv for lv in levels if lv != n_ref]
        samples = []
        for lv in compared:
            fin, _ = _final_states(initial, coeffs, noise.truncate(lv), scheme, streams, basis, 1, n_ref)
            samples.append(np.abs(fin[:, sel] - ref[:, sel]).max(axis=(-2, -1)) ** 2)
        samples = np.array(samples)
        return ConvergenceTable("n", compared, samples.mean(axis=1),
                                _standard_error(samples), samples)

    raise ValueError(f"unknown convergence study kind {kind!r}")

"""Truncated Q-Wiener noise on the cosine eigenbasis.

Each component i = S, E, I, R is driven by

    W_i(t, x) = sum_{k < n} sqrt(a_{k,i}) B_{k,i}(t) e_k(x)

with independent scalar Brownian motions B_{k,i}.  Standard normals are
counter-addressed: the draw for (seed, path, component, step, mode) is a
fixed Philox output pushed through the inverse normal CDF, so any block of
steps can be regenerated independently of execution order.  Coarse time
steps and low truncation levels reuse the same draws, which is what the
convergence studies rely on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .spectral import SpectralBasis

N_COMPONENTS = 4
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Per-component variance weights ``a[i, k]`` for modes k < n."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim == 1 and w.size == 0:
            w = w.reshape(N_COMPONENTS, 0)
        if w.ndim != 2 or w.shape[0] != N_COMPONENTS:
            raise ValueError(f"noise weights must have shape (4, n), got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("noise weights must be finite and nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zero(cls, n: int = 0) -> "NoiseSpec":
        return cls(np.zeros((N_COMPONENTS, n)))

    @classmethod
    def geometric(cls, a0, ratio: float, n: int) -> "NoiseSpec":
        """a_{k,i} = a0[i] * ratio**k; ``a0`` is a scalar or one value per component."""
        a0 = np.broadcast_to(np.asarray(a0, dtype=float), (N_COMPONENTS,))
        return cls(a0[:, None] * ratio ** np.arange(n)[None, :])

    @property
    def n(self) -> int:
        return self.weights.shape[1]

    @property
    def traces(self) -> np.ndarray:
        """a_i = sum_k a_{k,i}, one per component."""
        return self.weights.sum(axis=1)

    @property
    def active(self) -> np.ndarray:
        """Components with at least one nonzero weight."""
        return np.any(self.weights > 0, axis=1)

    def truncate(self, n: int) -> "NoiseSpec":
        if n > self.n:
            raise ValueError(f"cannot truncate {self.n} modes to {n}")
        return NoiseSpec(self.weights[:, :n])

    def pointwise_variance(self, basis: SpectralBasis) -> np.ndarray:
        """Var(W_i(1, x)) = sum_k a_{k,i} e_k(x)^2, shape (4, n_points)."""
        _check_modes(self, basis)
        return self.weights @ basis.modes[: self.n] ** 2

    def __eq__(self, other):
        return isinstance(other, NoiseSpec) and np.array_equal(self.weights, other.weights)

    __hash__ = None


def _check_modes(spec: NoiseSpec, basis: SpectralBasis):
    if spec.n > basis.num_modes:
        raise ValueError(f"noise uses {spec.n} modes but the basis has only {basis.num_modes}")


def _key(*parts: int) -> np.ndarray:
    # two 64-bit words mixing seed/path/component; SeedSequence gives good avalanche
    ss = np.random.SeedSequence([int(p) & _MASK64 for p in parts])
    return ss.generate_state(2, dtype=np.uint64)


@dataclass(frozen=True)
class RngStream:
    """Counter-based standard normals for one path.

    The normal for (component, step, mode) is element ``step * stride + mode``
    of the Philox stream keyed by (seed, path, component).
    """

    seed: int
    path: int = 0

    def normals(self, component: int, start_step: int, n_steps: int, stride: int) -> np.ndarray:
        """Draws for steps ``start_step .. start_step + n_steps - 1``, shape (n_steps, stride)."""
        if n_steps <= 0 or stride <= 0:
            return np.zeros((max(n_steps, 0), max(stride, 0)))
        first = start_step * stride
        count = n_steps * stride
        bg = np.random.Philox(key=_key(self.seed, self.path, component))
        # Philox4x64 emits 4 words per counter value
        bg.advance(first // 4)
        raw = bg.random_raw(count + first % 4)[first % 4:]
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        return ndtri(u).reshape(n_steps, stride)


class BrownianDriver:
    """Modal Brownian increments for a batch of paths, generated in chunks.

    ``base_dt`` is the finest time step at which draws are made; a step of
    ``substeps * base_dt`` sums ``substeps`` consecutive fine increments.
    ``stride`` fixes the number of modes drawn per fine step so that
    different truncation levels share their leading modes.
    """

    def __init__(self, streams, spec: NoiseSpec, base_dt: float, substeps: int = 1,
                 stride: int | None = None, chunk: int = 256):
        if base_dt <= 0:
            raise ValueError(f"dt must be positive, got {base_dt}")
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.streams = list(streams)
        self.spec = spec
        self.base_dt = float(base_dt)
        self.substeps = int(substeps)
        self.stride = spec.n if stride is None else int(stride)
        if self.stride < spec.n:
            raise ValueError("stride must be at least the number of noise modes")
        self.chunk = max(1, int(chunk))
        self._active = np.flatnonzero(spec.active)
        self._buf_start = None
        self._buf = None

    @property
    def dt(self) -> float:
        return self.base_dt * self.substeps

    def _fill(self, step: int):
        start = (step // self.chunk) * self.chunk
        fine = self.chunk * self.substeps
        n = self.spec.n
        buf = np.zeros((self.chunk, len(self.streams), N_COMPONENTS, n))
        for p, stream in enumerate(self.streams):
            for i in self._active:
                z = stream.normals(i, start * self.substeps, fine, self.stride)[:, :n]
                buf[:, p, i, :] = z.reshape(self.chunk, self.substeps, n).sum(axis=1)
        buf *= np.sqrt(self.base_dt)
        self._buf_start, self._buf = start, buf

    def increments(self, step: int) -> np.ndarray:
        """dB for one coarse step, shape (n_paths, 4, n)."""
        if self._buf is None or not (self._buf_start <= step < self._buf_start + self.chunk):
            self._fill(step)
        return self._buf[step - self._buf_start]


def modal_to_field(dB: np.ndarray, spec: NoiseSpec, basis: SpectralBasis) -> np.ndarray:
    """Map modal increments (..., 4, n) to fields dW_i(x) = sum_k sqrt(a_{k,i}) dB_{k,i} e_k(x)."""
    _check_modes(spec, basis)
    return (dB * np.sqrt(spec.weights)) @ basis.modes[: spec.n]


def sample_increment(spec: NoiseSpec, basis: SpectralBasis, dt: float, stream: RngStream,
                     step: int = 0) -> np.ndarray:
    """The four increment fields over ``[step*dt, (step+1)*dt]``, shape (4, n_points)."""
    _check_modes(spec, basis)
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    dB = np.zeros((N_COMPONENTS, spec.n))
    for i in np.flatnonzero(spec.active):
        dB[i] = stream.normals(i, step, 1, spec.n)[0]
    return modal_to_field(dB * np.sqrt(dt), spec, basis)


def multiplicative_apply(values, increment) -> np.ndarray:
    """Pointwise product u(x) dW(x), the multiplicative noise term on the grid."""
    values = np.asarray(values, dtype=float)
    increment = np.asarray(increment, dtype=float)
    if values.shape[-1] != increment.shape[-1]:
        raise ValueError(f"grid mismatch: {values.shape} vs {increment.shape}")
    return values * increment

"""Fused pointwise kernels for the stepper's hot loop.

These compute the same quantities as ``model._drift`` and the clamp helpers
in one pass over the batch; ``tests/test_integrator.py`` checks them against
the plain numpy versions.
"""
import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _smooth(u, eps):
    # eps * Phi(u / eps), with u returned unchanged once u >= eps
    if u >= eps:
        return u
    xi = u / eps
    if xi <= 0.0:
        return 0.0
    return eps * (xi * xi * xi * (6.0 + xi * (-8.0 + 3.0 * xi)))


@njit(cache=True)
def pre_flow(state, coef, dt, dW, eps):
    """V + G(c(V)) dt + c(V) dW for a batch (M, 4, P).

    ``coef`` rows: Lambda, mu1..mu4, alpha, beta, gamma, sigma.  ``eps`` <= 0
    selects the hard clamp, otherwise eps * Phi(u / eps).  ``dW`` may have
    zero paths, meaning no noise.
    """
    m, _, p = state.shape
    out = np.empty_like(state)
    noisy = dW.shape[0] > 0
    for b in range(m):
        for j in range(p):
            s0 = max(state[b, 0, j], 0.0)
            e0 = max(state[b, 1, j], 0.0)
            i0 = max(state[b, 2, j], 0.0)
            r0 = max(state[b, 3, j], 0.0)
            if eps > 0.0:
                s = _smooth(state[b, 0, j], eps)
                e = _smooth(state[b, 1, j], eps)
                i = _smooth(state[b, 2, j], eps)
                r = _smooth(state[b, 3, j], eps)
            else:
                s, e, i, r = s0, e0, i0, r0
            inc = 0.0
            if s != 0.0 and i != 0.0:
                inc = coef[5, j] * s * i / (s + e + i + r)
            g0 = coef[0, j] - coef[1, j] * s - inc + coef[6, j] * r
            g1 = -coef[2, j] * e + inc - coef[8, j] * e
            g2 = -coef[3, j] * i + coef[8, j] * e - coef[7, j] * i
            g3 = -coef[4, j] * r + coef[7, j] * i - coef[6, j] * r
            out[b, 0, j] = s0 + g0 * dt
            out[b, 1, j] = e0 + g1 * dt
            out[b, 2, j] = i0 + g2 * dt
            out[b, 3, j] = r0 + g3 * dt
            if noisy:
                out[b, 0, j] += s * dW[b, 0, j]
                out[b, 1, j] += e * dW[b, 1, j]
                out[b, 2, j] += i * dW[b, 2, j]
                out[b, 3, j] += r * dW[b, 3, j]
    return out


@njit(cache=True)
def project(y, weights):
    """In-place max(y, 0); returns (clamped node fraction, clamped mass, finite mask)."""
    m, c, p = y.shape
    frac = np.zeros(m)
    mass = np.zeros(m)
    finite = np.ones((m, c), dtype=np.bool_)
    for b in range(m):
        count = 0
        for k in range(c):
            for j in range(p):
                v = y[b, k, j]
                if not np.isfinite(v):
                    finite[b, k] = False
                elif v < 0.0:
                    count += 1
                    mass[b] -= v * weights[j]
                    y[b, k, j] = 0.0
        frac[b] = count / (c * p)
    return frac, mass, finite

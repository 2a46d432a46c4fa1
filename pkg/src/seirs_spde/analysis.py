"""Diagnostic functionals, Monte Carlo ensembles and regime verdicts."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.stats import linregress

from .integrator import SchemeConfig, integrate_batch, record_steps
from .model import (CoefficientSet, EXTINCTION, PERMANENCE, ThresholdReport,
                    compute_thresholds, hypothesis_masks)
from .noise import NoiseSpec, RngStream
from .spectral import DomainGrid, SpectralBasis

log = logging.getLogger(__name__)

OBSERVED_PERMANENT = "observed-permanent"
OBSERVED_EXTINCT = "observed-extinct"
OBSERVED_INDETERMINATE = "observed-indeterminate"


def _comp(state, j):
    return np.asarray(state, dtype=float)[..., j, :]


def total_mass(state, grid: DomainGrid):
    return grid.integrate(np.asarray(state, dtype=float).sum(axis=-2))


def infected_mass(state, grid: DomainGrid):
    return grid.integrate(_comp(state, 1) + _comp(state, 2))


def permanence_inner(state, grid: DomainGrid):
    """Spatial integral of min((I+E)^2, 1); the square root is taken after averaging over paths."""
    ie = _comp(state, 1) + _comp(state, 2)
    return grid.integrate(np.minimum(ie * ie, 1.0))


def inverse_moment(state, grid: DomainGrid, p: float = 2.0, return_flag: bool = False):
    """Integral of (S+R)^(-p); ``inf`` where S+R vanishes at any node."""
    if not p > 0:
        raise ValueError("p must be positive")
    sr = _comp(state, 0) + _comp(state, 3)
    singular = np.any(sr <= 0, axis=-1)
    with np.errstate(divide="ignore"):
        vals = grid.integrate(np.where(sr > 0, sr, 1.0) ** -p)
    vals = np.where(singular, np.inf, vals)
    if vals.ndim == 0:
        vals, singular = float(vals), bool(singular)
    return (vals, singular) if return_flag else vals


FUNCTIONALS = {
    "total_mass": total_mass,
    "infected_mass": infected_mass,
    "permanence_inner": permanence_inner,
    "inverse_moment_2": lambda s, g: inverse_moment(s, g, 2.0),
}


@dataclass
class FunctionalSeries:
    times: np.ndarray
    values: np.ndarray
    name: str = ""


def time_average(series: FunctionalSeries) -> FunctionalSeries:
    """Running average (1/(t - t0)) * integral from t0 to t, trapezoidal in time."""
    t = np.asarray(series.times, dtype=float)
    v = np.asarray(series.values, dtype=float)
    if t.size == 0:
        raise ValueError("empty series")
    if t.size == 1:
        return FunctionalSeries(t.copy(), v.copy(), series.name + "_avg")
    cum = cumulative_trapezoid(v, t, axis=-1, initial=0.0)
    span = t - t[0]
    out = np.empty_like(cum)
    out[..., 1:] = cum[..., 1:] / span[1:]
    out[..., 0] = 0.5 * (v[..., 0] + v[..., 1])
    return FunctionalSeries(t.copy(), out, series.name + "_avg")


@dataclass(frozen=True)
class RateFit:
    rate: float
    window: tuple
    r_squared: float
    stderr: float
    shrunk: bool = False


def fit_exponential_rate(series: FunctionalSeries, window=None) -> RateFit:
    """Negated least-squares slope of log(values) against time over ``window``.

    When the window contains a nonpositive value it is cut back to the
    positive prefix and ``shrunk`` is set.
    """
    t = np.asarray(series.times, dtype=float)
    v = np.asarray(series.values, dtype=float)
    lo, hi = (t[0], t[-1]) if window is None else window
    if not lo < hi:
        raise ValueError(f"empty fit window {window}")
    sel = np.flatnonzero((t >= lo - 1e-12) & (t <= hi + 1e-12))
    shrunk = False
    bad = np.flatnonzero(v[sel] <= 0)
    if bad.size:
        sel = sel[: bad[0]]
        shrunk = True
    if sel.size < 3:
        raise ValueError("fewer than three positive points in the fit window")
    x, y = t[sel], np.log(v[sel])
    fit = linregress(x, y)
    resid = y - (fit.intercept + fit.slope * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - float((resid ** 2).sum()) / ss_tot
    return RateFit(float(-fit.slope), (float(x[0]), float(x[-1])), r2, float(fit.stderr), shrunk)


@dataclass
class MassBoundReport:
    skipped: bool
    times: np.ndarray = None
    envelope: np.ndarray = None
    printed_bound: np.ndarray = None
    slack: np.ndarray = None
    printed_slack: np.ndarray = None
    holds: bool = True
    printed_holds: bool = True


def check_mass_bound(times, mean_mass, coeffs: CoefficientSet, se=None, initial_mass=None,
                     n_se: float = 2.0) -> MassBoundReport:
    """Compare the mean total mass with the Gronwall envelope and the printed bound.

    Envelope: M0 exp(-mu_* t) + sup(Lambda) (1 - exp(-mu_* t)) / mu_*.
    Printed: M0 + sup(Lambda) exp(mu_* t) / mu_*.
    The bound counts as holding when mean <= bound + n_se * se everywhere.
    """
    c = coeffs
    mu_star = float(np.min([c.mu1, c.mu2, c.mu3, c.mu4]))
    if mu_star <= 0:
        return MassBoundReport(skipped=True)
    t = np.asarray(times, dtype=float)
    mean = np.asarray(mean_mass, dtype=float)
    se = np.zeros_like(mean) if se is None else np.asarray(se, dtype=float)
    m0 = float(mean[0]) if initial_mass is None else float(initial_mass)
    lam = float(c.Lambda.max())
    decay = np.exp(-mu_star * t)
    envelope = m0 * decay + lam * (1 - decay) / mu_star
    printed = m0 + lam / mu_star * np.exp(mu_star * t)
    slack, pslack = envelope - mean, printed - mean
    return MassBoundReport(False, t, envelope, printed, slack, pslack,
                           bool(np.all(slack >= -n_se * se)), bool(np.all(pslack >= -n_se * se)))


@dataclass
class EnsembleStats:
    times: np.ndarray
    paths: int
    aborted: int
    mean: dict
    se: dict
    lo: dict
    hi: dict


@dataclass
class EnsembleResult:
    stats: EnsembleStats
    thresholds: ThresholdReport
    permanence_stat: np.ndarray
    permanence_avg: np.ndarray
    liminf_proxy: float
    liminf_proxy_se: float
    rate_fit: RateFit | None
    verdict: str
    mismatch: bool
    hypotheses_held: dict
    clamped_fraction: np.ndarray
    samples: dict = field(repr=False, default_factory=dict)
    aborted_paths: dict = field(repr=False, default_factory=dict)

    def summary_rows(self):
        th = self.thresholds
        rows = [
            ("paths_completed", self.stats.paths),
            ("paths_aborted", self.stats.aborted),
            ("predicted_regime", th.predicted_regime),
            ("observed_verdict", self.verdict),
            ("mismatch", int(self.mismatch)),
            ("R_hat", th.r_hat),
            ("m", th.m),
            ("liminf_proxy", self.liminf_proxy),
            ("liminf_proxy_se", self.liminf_proxy_se),
        ]
        if self.rate_fit is not None:
            f = self.rate_fit
            rows += [("fitted_rate", f.rate), ("fitted_rate_se", f.stderr), ("fit_r_squared", f.r_squared),
                     ("fit_window_start", f.window[0]), ("fit_window_end", f.window[1])]
        rows += [(f"hypothesis_held_{k}", v) for k, v in self.hypotheses_held.items()]
        return rows


def _second_half_min(avg, times):
    half = times >= times[-1] / 2 - 1e-12
    return avg[..., half].min(axis=-1)


def liminf_proxy(inner, times):
    """Second-half minimum of the running average of sqrt(mean over paths of ``inner``).

    ``inner`` holds per-path values of the spatial integral of min((I+E)^2, 1),
    shape (paths, n_times).  Returns ``(proxy, se)`` with a leave-one-out
    jackknife standard error (0 for a single path).
    """
    inner = np.atleast_2d(np.asarray(inner, dtype=float))
    times = np.asarray(times, dtype=float)
    perm = np.sqrt(inner.mean(axis=0))
    if len(times) == 1:
        return float(perm[0]), 0.0
    proxy = float(_second_half_min(time_average(FunctionalSeries(times, perm)).values, times))
    m = inner.shape[0]
    if m < 2:
        return proxy, 0.0
    loo = (inner.sum(axis=0) - inner) / (m - 1)
    proxies = _second_half_min(time_average(FunctionalSeries(times, np.sqrt(loo))).values, times)
    return proxy, float(np.sqrt((m - 1) / m * ((proxies - proxies.mean()) ** 2).sum()))


def _run_block(initial, coeffs, noise, scheme, basis, seed, path_ids):
    grid = coeffs.grid
    n_rec = len(record_steps(scheme))
    out = {name: np.empty((len(path_ids), n_rec)) for name in FUNCTIONALS}
    hyp = np.empty((len(path_ids), n_rec, 4))
    clamped = np.empty((len(path_ids), n_rec))
    times = np.empty(n_rec)
    row = {"r": 0}

    def on_record(k, t, state, frac, mass):
        r = row["r"]
        times[r] = t
        for name, fn in FUNCTIONALS.items():
            out[name][:, r] = fn(state, grid)
        holds, _ = hypothesis_masks(state, coeffs)
        hyp[:, r, :3] = holds @ grid.weights
        hyp[:, r, 3] = np.all(holds, axis=-2) @ grid.weights
        clamped[:, r] = frac
        row["r"] = r + 1

    streams = [RngStream(seed, p) for p in path_ids]
    _, aborted = integrate_batch(initial, coeffs, noise, scheme, streams, basis, on_record)
    aborted = {path_ids[k]: err for k, err in aborted.items()}
    return times, out, hyp, clamped, aborted


def run_ensemble(initial, coeffs: CoefficientSet, noise: NoiseSpec, scheme: SchemeConfig,
                 paths: int, seed: int = 0, basis: SpectralBasis | None = None, threads: int | None = 1,
                 batch_size: int = 50, floor: float = 1e-3, fit_window=None,
                 plateau_rtol: float = 0.05) -> EnsembleResult:
    """Simulate ``paths`` independent paths and summarise them.

    Paths are simulated in fixed blocks of ``batch_size`` so results do not
    depend on ``threads``.  Aborted paths are dropped from every statistic.

    Verdict: observed-permanent when the second-half minimum of the running
    average of sqrt(E int min((I+E)^2, 1)) is at least ``floor`` and the
    running average at T is no lower than (1 - plateau_rtol) times its value
    at 3T/4; otherwise observed-extinct when the mean infected mass decays
    with a positive fitted rate >= m - 2 stderr and R^2 >= 0.95; otherwise
    observed-indeterminate.
    """
    if paths < 1:
        raise ValueError("an ensemble needs at least one path")
    thresholds = compute_thresholds(coeffs, noise)
    blocks = [list(range(s, min(s + batch_size, paths))) for s in range(0, paths, batch_size)]
    job = lambda ids: _run_block(initial, coeffs, noise, scheme, basis, seed, ids)
    if threads and threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, blocks))
    else:
        results = [job(b) for b in blocks]

    times = results[0][0]
    samples = {name: np.concatenate([r[1][name] for r in results]) for name in FUNCTIONALS}
    hyp = np.concatenate([r[2] for r in results])
    clamped = np.concatenate([r[3] for r in results])
    aborted = {}
    for r in results:
        aborted.update(r[4])
    keep = np.array([p not in aborted for p in range(paths)])
    if not keep.any():
        raise RuntimeError(f"all {paths} paths aborted")
    samples = {k: v[keep] for k, v in samples.items()}
    hyp, clamped = hyp[keep], clamped[keep]
    m = int(keep.sum())

    mean, se, lo, hi = {}, {}, {}, {}
    for name, s in samples.items():
        # the inverse moment may carry its inf sentinel; let it propagate quietly
        with np.errstate(invalid="ignore"):
            mean[name] = s.mean(axis=0)
            se[name] = s.std(axis=0, ddof=1) / np.sqrt(m) if m > 1 else np.zeros(len(times))
            lo[name], hi[name] = np.percentile(s, [2.5, 97.5], axis=0)
    stats = EnsembleStats(times, m, len(aborted), mean, se, lo, hi)

    perm = np.sqrt(mean["permanence_inner"])
    avg = time_average(FunctionalSeries(times, perm, "permanence")).values
    proxy, proxy_se = liminf_proxy(samples["permanence_inner"], times)

    fit = None
    T = times[-1]
    if len(times) >= 3:
        window = fit_window if fit_window is not None else (T / 4, T)
        try:
            fit = fit_exponential_rate(FunctionalSeries(times, mean["infected_mass"]), window)
        except ValueError:
            fit = None

    verdict = OBSERVED_INDETERMINATE
    if len(times) > 1:
        i34 = int(np.searchsorted(times, 0.75 * T - 1e-12))
        plateau = avg[-1] >= (1 - plateau_rtol) * avg[i34]
        if proxy >= floor and plateau:
            verdict = OBSERVED_PERMANENT
        elif (fit is not None and fit.rate > 0 and fit.r_squared >= 0.95
              and fit.rate >= thresholds.m - 2 * fit.stderr):
            verdict = OBSERVED_EXTINCT
    expected = {EXTINCTION: OBSERVED_EXTINCT, PERMANENCE: OBSERVED_PERMANENT}.get(thresholds.predicted_regime)
    mismatch = expected is not None and verdict != expected
    if mismatch:
        log.warning("MISMATCH: predicted %s but observed %s", thresholds.predicted_regime, verdict)

    w = hyp.mean(axis=(0, 1))
    held = {"alpha_minus_gamma": w[0], "ratio": w[1], "susceptible_fraction": w[2], "all": w[3]}
    return EnsembleResult(stats, thresholds, perm, avg, proxy, proxy_se, fit, verdict, mismatch,
                          {k: float(v) for k, v in held.items()}, clamped.mean(axis=0),
                          samples, aborted)

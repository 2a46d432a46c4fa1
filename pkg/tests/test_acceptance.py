"""Acceptance criteria, each at its stated tolerance and scale.

Every test records one PASS/FAIL line (shown in the terminal summary) before
asserting.  The long ensembles take several minutes in total.
"""
import functools
import json
import time

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from seirs_spde import cli
from seirs_spde.analysis import OBSERVED_EXTINCT, check_mass_bound, liminf_proxy, run_ensemble
from seirs_spde.config import parse_config, replace_run
from seirs_spde.integrator import (SMOOTH, PicardConfig, SchemeConfig, convergence_study, integrate_batch,
                                   picard_solve, simulate_path)
from seirs_spde.model import EXTINCTION, PERMANENCE, CoefficientSet, compute_thresholds, make_state
from seirs_spde.noise import BrownianDriver, NoiseSpec, RngStream
from seirs_spde.spectral import DomainGrid, build_basis, forward_transform

STD = dict(Lambda=0.5, mu1=0.1, mu2=0.1, mu3=0.1, mu4=0.1, alpha=0.8, beta=0.2, gamma=0.3, sigma=0.4)
EXT = dict(Lambda=0.5, mu1=0.1, mu2=0.3, mu3=0.4, mu4=0.1, alpha=0.2, beta=0.2, gamma=0.3, sigma=0.4)
PERM = dict(Lambda=1.0, mu1=0.2, mu2=0.2, mu3=0.2, mu4=0.2, alpha=2.0, beta=0.5, gamma=0.2, sigma=1.0)
K = (0.1, 0.1, 0.1, 0.1)


def seirs_rhs(_, y, p):
    S, E, I, R = y
    inc = p["alpha"] * S * I / (S + E + I + R)
    return [p["Lambda"] - p["mu1"] * S - inc + p["beta"] * R,
            -p["mu2"] * E + inc - p["sigma"] * E,
            -p["mu3"] * I + p["sigma"] * E - p["gamma"] * I,
            -p["mu4"] * R + p["gamma"] * I - p["beta"] * R]


def geometric_on(components, a0, n):
    w = np.zeros((4, n))
    for i in components:
        w[i] = a0 * 0.5 ** np.arange(n)
    return NoiseSpec(w)


def permanence_noise(n=16):
    # a_{k} = 0.1 * 2^-k on E and I, last weight topped up so each trace is exactly 0.2
    w = np.zeros((4, n))
    a = 0.1 * 0.5 ** np.arange(n)
    a[-1] += 0.2 - a.sum()
    w[1] = w[2] = a
    return NoiseSpec(w)


def _paired_se(x, y):
    d = np.asarray(y) - np.asarray(x)
    return d.mean(), d.std(ddof=1) / np.sqrt(len(d))


# 1 ---------------------------------------------------------------------------
def test_c01_ode_limit(report):
    g = DomainGrid(64)
    c = CoefficientSet.homogeneous(g, K, **STD)
    y0 = [1.0, 0.1, 0.1, 0.0]
    sc = SchemeConfig(1e-3, 20.0, record_every=100)
    simulate_path(make_state(g, *y0), c, NoiseSpec.zero(), SchemeConfig(1e-3, 1e-3), RngStream(0))  # warm caches
    t0 = time.perf_counter()
    tr = simulate_path(make_state(g, *y0), c, NoiseSpec.zero(), sc, RngStream(0))
    wall = time.perf_counter() - t0
    sol = solve_ivp(seirs_rhs, (0, 20), y0, method="DOP853", t_eval=tr.times, rtol=1e-12, atol=1e-14, args=(STD,))
    err = float(np.abs(tr.states - sol.y.T[:, :, None]).max())
    ok = err <= 1e-4 and wall < 5
    report("C1 ODE limit", ok, f"max sup error {err:.3e} over {len(tr.times)} records (<= 1e-4), {wall:.2f} s (< 5 s)")
    assert ok


# 2 ---------------------------------------------------------------------------
def test_c02_heat_limit(report):
    g = DomainGrid(64)
    b = build_basis(g, 64)
    k = (0.01, 0.02, 0.03, 0.05)
    c = CoefficientSet.homogeneous(g, k)
    # e_1 + e_4 changes sign; the constant 3 e_0 keeps the state nonnegative and is itself invariant
    u0 = 3 * b.modes[0] + b.modes[1] + b.modes[4]
    v0 = np.tile(u0, (4, 1))
    t0 = time.perf_counter()
    tr = simulate_path(v0, c, NoiseSpec.zero(), SchemeConfig(1e-3, 1.0, record_every=1000), RngStream(0))
    wall = time.perf_counter() - t0
    coeffs = forward_transform(tr.states[-1], b)
    worst = 0.0
    for i, ki in enumerate(k):
        for mode in (1, 4):
            expected = np.exp(-ki * b.eigenvalues[mode] * 1.0)
            worst = max(worst, abs(coeffs[i, mode] - expected) / expected)
        worst = max(worst, abs(coeffs[i, 0] - 3) / 3)
    ok = worst <= 1e-8 and wall < 1
    report("C2 heat limit", ok, f"max relative modal error {worst:.3e} (<= 1e-8), {wall:.2f} s (< 1 s)")
    assert ok


# 3 ---------------------------------------------------------------------------
def test_c03_gbm_strong_order(report):
    g = DomainGrid(8)
    c_rate, q = 0.5, 1.0
    coeffs = CoefficientSet.homogeneous(g, K, mu3=c_rate)
    w = np.zeros((4, 1))
    w[2, 0] = q
    noise = NoiseSpec(w)
    i0 = 1.0

    def exact(v, B_T):
        out = np.zeros(B_T.shape[:1] + v.shape)
        out[:, 2, :] = i0 * np.exp((-c_rate - q / 2) * 1.0 + np.sqrt(q) * B_T[:, 2, 0])[:, None]
        return out

    levels = [2.0 ** -j for j in range(6, 11)]
    t0 = time.perf_counter()
    tab = convergence_study(make_state(g, 0, 0, i0, 0), coeffs, noise, kind="dt", levels=levels, T=1.0,
                            paths=1000, seed=2024, exact=exact)
    wall = time.perf_counter() - t0
    ok = 0.4 <= tab.observed_order <= 1.1 and wall < 120
    errs = ", ".join(f"{e:.3g}" for e in tab.errors)
    report("C3 GBM strong order", ok, f"slope {tab.observed_order:.3f} in [0.4, 1.1]; RMS errors {errs}; "
                                      f"{wall:.1f} s (< 120 s)")
    assert ok


# 4 ---------------------------------------------------------------------------
def _positivity_regimes():
    g = DomainGrid(32)
    x = g.axis
    g2 = DomainGrid(10, 2)
    xy = g2.coords
    smooth_var = CoefficientSet.homogeneous(g, K, **STD).replace(
        alpha=1.0 + 0.8 * np.cos(np.pi * x), Lambda=0.5 + 0.4 * np.sin(np.pi * x))
    return [
        ("standard, strong noise", CoefficientSet.homogeneous(g, K, **STD), geometric_on(range(4), 1.0, 16),
         make_state(g, 1, 0.1, 0.1, 0), "hard"),
        ("extinction", CoefficientSet.homogeneous(g, K, **EXT), geometric_on(range(4), 0.05, 16),
         make_state(g, 1, 0.1, 0.1, 0), "hard"),
        ("permanence", CoefficientSet.homogeneous(g, K, **PERM), permanence_noise(),
         make_state(g, 1, 0.1, 0.1 * (1 + np.cos(np.pi * x)), 0), "hard"),
        ("varying coefficients, sparse data", smooth_var, geometric_on(range(4), 0.5, 16),
         make_state(g, 1, 0, 0.5 * (x < 0.2), 0), "hard"),
        ("smooth clamp", CoefficientSet.homogeneous(g, K, **STD), geometric_on(range(4), 1.0, 16),
         make_state(g, 1, 0.1, 0.1, 0), SMOOTH),
        ("two-dimensional", CoefficientSet.homogeneous(g2, K, **PERM), geometric_on((1, 2), 0.3, 20),
         make_state(g2, 1, 0.1, 0.1 * (1 + np.cos(np.pi * xy[:, 0]) * np.cos(np.pi * xy[:, 1])), 0), "hard"),
        ("noiseless, positive data", CoefficientSet.homogeneous(g, K, **STD), NoiseSpec.zero(),
         make_state(g, 1 + 0.5 * np.cos(np.pi * x), 0.1, 0.05 + 0.1 * x, 0.01), "hard"),
        ("noiseless permanence, positive data", CoefficientSet.homogeneous(g, K, **PERM), NoiseSpec.zero(),
         make_state(g, 1, 0.1 * (1 + x), 0.05, 0.2), "hard"),
    ]


def test_c04_positivity(report):
    t0 = time.perf_counter()
    details, ok = [], True
    for name, coeffs, noise, v0, policy in _positivity_regimes():
        tracker = {"min": np.inf, "clamped": 0.0, "records": 0}

        def on_record(k, t, state, frac, mass):
            tracker["min"] = min(tracker["min"], float(state.min()))
            tracker["clamped"] = max(tracker["clamped"], float(frac.max()), float(mass.max()))
            tracker["records"] += 1

        sc = SchemeConfig(1e-3, 2.0, policy, eps=1e-3, record_every=1)
        _, aborted = integrate_batch(v0, coeffs, noise, sc, [RngStream(77, p) for p in range(200)],
                                     on_record=on_record)
        good = tracker["min"] >= 0 and not aborted
        if noise.n == 0:
            good &= tracker["clamped"] == 0
        ok &= good
        details.append(f"{name}: min {tracker['min']:.3g}" + (f", clamped {tracker['clamped']:.3g}"
                                                              if noise.n == 0 else ""))
    report("C4 positivity", ok, f"{len(details)} regimes x 200 paths, every step recorded; "
                                + "; ".join(details) + f"; {time.perf_counter() - t0:.0f} s")
    assert ok


# 5 ---------------------------------------------------------------------------
@functools.lru_cache(maxsize=None)
def extinction_run():
    g = DomainGrid(64)
    c = CoefficientSet.homogeneous(g, K, **EXT)
    noise = geometric_on(range(4), 0.05, 16)
    v0 = make_state(g, 1, 0.1, 0.1 * (1 + np.cos(np.pi * g.axis)), 0)
    t0 = time.perf_counter()
    res = run_ensemble(v0, c, noise, SchemeConfig(1e-3, 30.0, record_every=100), 500, seed=5)
    return res, time.perf_counter() - t0


def test_c05_extinction(report):
    res, wall = extinction_run()
    th = res.thresholds
    f = res.rate_fit
    ok = (abs(th.m - 0.3) < 1e-12 and th.predicted_regime == EXTINCTION and f.rate >= 0.3 - 0.05
          and f.r_squared >= 0.95 and res.verdict == OBSERVED_EXTINCT and not res.mismatch and wall < 300)
    report("C5 extinction", ok, f"m = {th.m:.3g}; fitted rate {f.rate:.4f} +- {f.stderr:.1e} (>= 0.25), "
                                f"R^2 {f.r_squared:.5f} (>= 0.95) on [{f.window[0]:g}, {f.window[1]:g}]; "
                                f"verdict {res.verdict}, predicted {th.predicted_regime}; {wall:.0f} s (< 300 s)")
    assert ok


def test_extinction_mean_infected_mass_eventually_decreasing():
    res, _ = extinction_run()
    t = res.stats.times
    s = res.samples["infected_mass"]
    for k in np.flatnonzero(t >= 1)[:-1]:
        d, se = _paired_se(s[:, k], s[:, k + 1])
        assert d <= 2 * se


# 6 ---------------------------------------------------------------------------
def test_c06_permanence(report):
    g = DomainGrid(64)
    c = CoefficientSet.homogeneous(g, K, **PERM)
    noise = permanence_noise()
    v0 = make_state(g, 1, 0.1, 0.1 * (1 + np.cos(np.pi * g.axis)), 0)
    th = compute_thresholds(c, noise)
    runs, wall = {}, 0.0
    for T in (100.0, 200.0):
        t0 = time.perf_counter()
        runs[T] = run_ensemble(v0, c, noise, SchemeConfig(1e-3, T, record_every=100), 200, seed=6)
        wall += time.perf_counter() - t0
    r1, r2 = runs[100.0], runs[200.0]
    # the T = 200 paths extend the T = 100 paths (same seed and path index), so difference the proxies per path
    a, b = r1.samples["permanence_inner"], r2.samples["permanence_inner"]
    m = a.shape[0]
    loo = [liminf_proxy(np.delete(b, p, 0), r2.stats.times)[0] - liminf_proxy(np.delete(a, p, 0), r1.stats.times)[0]
           for p in range(m)]
    diff = r2.liminf_proxy - r1.liminf_proxy
    se_diff = float(np.sqrt((m - 1) / m * np.sum((np.array(loo) - np.mean(loo)) ** 2)))
    held = r2.hypotheses_held
    ok = (th.predicted_regime == PERMANENCE and abs(th.r_hat - 0.3) < 1e-12 and r1.liminf_proxy >= 1e-3
          and diff >= -2 * se_diff and wall < 600)
    report("C6 permanence", ok,
           f"R_hat {th.r_hat:.6g}; half-horizon min of running average: T=100 {r1.liminf_proxy:.5f} "
           f"(>= 1e-3), T=200 {r2.liminf_proxy:.5f}, change {diff:+.2e} (>= -2 x {se_diff:.1e}); "
           f"verdicts {r1.verdict}/{r2.verdict}; hypotheses held on space-time fraction "
           + ", ".join(f"{k} {v:.3f}" for k, v in held.items()) + f"; {wall:.0f} s (< 600 s)")
    assert ok


# 7 ---------------------------------------------------------------------------
def test_c07_noise_truncation(report):
    g = DomainGrid(64)
    c = CoefficientSet.homogeneous(g, K, **STD)
    noise = NoiseSpec(np.tile(0.5 ** np.arange(32), (4, 1)))
    v0 = make_state(g, 1, 0.1, 0.1 * (1 + np.cos(np.pi * g.axis)), 0)
    t0 = time.perf_counter()
    tab = convergence_study(v0, c, noise, kind="n", levels=[4, 8, 16, 32], T=1.0, paths=200, seed=7, component=0)
    wall = time.perf_counter() - t0
    ok = wall < 180
    steps = []
    for j in range(len(tab.levels) - 1):
        d, se = _paired_se(tab.samples[j], tab.samples[j + 1])
        ok &= d <= 2 * se
        steps.append(f"n={tab.levels[j]}->{tab.levels[j + 1]}: change {d:+.2e} (<= 2 x {se:.1e})")
    est = ", ".join(f"n={lv}: {e:.3e}" for lv, e in zip(tab.levels, tab.errors))
    report("C7 noise truncation", ok, f"E||S - S_n||^2 vs n=32: {est}; " + "; ".join(steps) + f"; {wall:.0f} s")
    assert ok


# 8 ---------------------------------------------------------------------------
def test_c08_mass_bound(report):
    g = DomainGrid(32)
    x = g.axis
    # unequal death rates, so the envelope with mu_* is a strict bound rather than the exact mean law
    configs = [
        ("extinction rates", CoefficientSet.homogeneous(g, K, **EXT), geometric_on(range(4), 0.5, 16),
         make_state(g, 1, 0.1, 0.1, 0)),
        ("permanence, unequal rates", CoefficientSet.homogeneous(g, K, **{**PERM, "mu2": 0.3, "mu3": 0.4}),
         permanence_noise(), make_state(g, 2, 0.1, 0.1 * (1 + np.cos(np.pi * x)), 0.5)),
        ("varying Lambda and mu", CoefficientSet.homogeneous(g, (0.05, 0.2, 0.1, 0.3), **STD).replace(
            Lambda=0.8 + 0.7 * np.cos(np.pi * x), mu1=0.3 + 0.2 * x, mu4=0.5 - 0.3 * x),
         geometric_on(range(4), 1.0, 16), make_state(g, 0.5, 0.2, 0.3 * x, 0.1)),
    ]
    ok, details = True, []
    for name, c, noise, v0 in configs:
        res = run_ensemble(v0, c, noise, SchemeConfig(1e-3, 10.0, record_every=100), 200, seed=8)
        st = res.stats
        rep = check_mass_bound(st.times, st.mean["total_mass"], c, st.se["total_mass"])
        good = not rep.skipped and rep.holds and rep.printed_holds
        ok &= good
        worst = float(np.min(rep.slack / np.maximum(st.se["total_mass"], 1e-300)))
        details.append(f"{name}: mu_* {res.thresholds.mu_star:.2g}, "
                       f"min envelope slack {rep.slack.min():+.3e} ({worst:+.1f} SE), "
                       f"min printed slack {rep.printed_slack.min():+.3e}")
    report("C8 mass bound", ok, "; ".join(details))
    assert ok


# 9 ---------------------------------------------------------------------------
def test_c09_picard_cross_validation(report):
    g = DomainGrid(64)
    c = CoefficientSet.homogeneous(g, K, **STD)
    noise = geometric_on(range(4), 0.01, 16)
    x = g.axis
    v0 = make_state(g, 1 + 0.5 * np.cos(np.pi * x), 0.1, 0.1 * (1 + np.cos(2 * np.pi * x)), 0.05)
    t0 = time.perf_counter()
    cfg = PicardConfig(horizon=0.1, n_substeps=20)
    r = int(round(cfg.dt / 1e-4))
    stream = RngStream(9)
    driver = BrownianDriver([stream], noise, 1e-4)
    dB = np.array([driver.increments(k)[0] for k in range(cfg.n_substeps * r)])
    res = picard_solve(v0, c, noise, dB.reshape((cfg.n_substeps, r) + dB.shape[1:]), cfg)
    snaps = []
    integrate_batch(v0, c, noise, SchemeConfig(1e-4, 0.1, record_every=r), [stream],
                    on_record=lambda k, t, s, f, m: snaps.append(s[0].copy()))
    err = float(np.abs(np.array(snaps) - res.solution).max())
    wall = time.perf_counter() - t0
    ok = res.converged and max(res.ratios) < 1 and err <= 1e-3 and wall < 30
    report("C9 Picard vs stepper", ok, f"{res.iterations} iterations, max ratio {max(res.ratios):.3f} (< 1), "
                                       f"sup gap to dt=1e-4 stepper {err:.3e} (<= 1e-3); {wall:.1f} s (< 30 s)")
    assert ok


# 10 --------------------------------------------------------------------------
DETERMINISM_DOC = """
domain: {points: 17}
coefficients: {Lambda: 1.0, mu1: 0.2, mu2: "0.2 + 0.1*cos(pi*x)", mu3: 0.2, mu4: 0.2, alpha: 2.0, beta: 0.5,
               gamma: 0.2, sigma: 1.0, k1: 0.1, k2: 0.05}
noise: {n: 8, E: {rule: geometric, a0: 0.1, ratio: 0.5}, I: {rule: list, values: [0.1, 0.05]}}
scheme: {dt: 0.005, T: 1.0, record_every: 10}
initial: {S: 1, E: 0.1, I: "0.1 * (1 + cos(pi * x))"}
run: {paths: 6, seed: 12345678901234567}
ensemble: {batch_size: 4}
convergence: {kind: dt, levels: [0.02, 0.01, 0.005], time: 0.2, paths: 6}
picard: {horizon: 0.05, substeps: 10, reference_dt: 0.001}
"""


def test_c10_determinism_and_manifest(report, tmp_path):
    cfg_file = tmp_path / "run.yaml"
    cfg_file.write_text(DETERMINISM_DOC)
    base = parse_config(DETERMINISM_DOC)
    ok, notes = True, []
    for mode in cli.MODES:
        outs = []
        for rep in range(2):
            out = tmp_path / f"{mode}-{rep}"
            status = cli.main([mode, "--config", str(cfg_file), "--out", str(out), "--threads", str(rep + 1)])
            ok &= status == 0
            outs.append(out)
        files = sorted(p.name for p in outs[0].glob("*.csv"))
        same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
        manifest = json.loads((outs[0] / "manifest.json").read_text())
        echoed = parse_config(manifest["config"])
        round_trip = echoed == replace_run(base, mode=mode)
        ok &= same and round_trip and bool(files)
        notes.append(f"{mode} {len(files)} csv {'identical' if same else 'DIFFER'}"
                     f"{'' if round_trip else ' (manifest mismatch)'}")
    report("C10 determinism and manifest", ok, "; ".join(notes))
    assert ok

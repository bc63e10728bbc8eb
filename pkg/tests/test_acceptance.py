"""Acceptance gate: every advertised guarantee at its stated tolerance.

One test per criterion, each printing a single PASS/FAIL line with the
measured quantity and runtime (run with ``pytest -s`` to see the lines as
they happen).  These are end-to-end runs, not unit tests; together they
take a few minutes.
"""
import itertools
import time

import numpy as np
import pytest

from sdelab.euler import simulate_first_variation_coupled
from sdelab.gaussian import (
    conditional_increment_moment,
    gaussian_w2,
    malliavin_bound,
    sample_law,
    sde_marginal_law,
)
from sdelab.matrix_lemma import adversarial_search, fuzz_inequality
from sdelab.rates import (
    ExperimentSpec,
    check_theorem_bound,
    compare_grids,
    derived_seed,
    fit_loglog,
    run_marginal_sweep,
)
from sdelab.sde_model import get_spec
from sdelab.time_grid import build_power, build_uniform, last_node_before, step_gap_integral
from sdelab.wasserstein import EmpiricalMeasure, w_rho_1d, w_rho_exact


def verdict(name: str, ok: bool, detail: str, t0: float, budget: float) -> str:
    took = time.perf_counter() - t0
    line = (
        f"{'PASS' if ok and took < budget else 'FAIL'} {name}: {detail} "
        f"[{took:.1f}s / budget {budget:.0f}s]"
    )
    print(line)
    return line


def test_01_matrix_inequality_certificate():
    t0 = time.perf_counter()
    fuzz = fuzz_inequality(
        100_000, dims=(1, 2, 3, 5), rhos=(1.1, 2.0, 3.0, 6.0), seed=424242, tol=1e-9
    )
    adv = adversarial_search(seed=424243)
    ok = fuzz.violations == 0 and adv.best_rel_violation <= 1e-9
    line = verdict(
        "matrix inequality certificate",
        ok,
        f"{fuzz.instances} instances, {fuzz.violations} violations, "
        f"min rel slack {fuzz.min_rel_slack:.2e}, "
        f"adversarial best {adv.best_rel_violation:.2e}",
        t0,
        budget=120.0,
    )
    assert ok and time.perf_counter() - t0 < 120.0, line


def brute_force_w(x: np.ndarray, y: np.ndarray, rho: float) -> float:
    n = x.shape[0]
    perms = np.array(list(itertools.permutations(range(n))))
    dists = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2)
    costs = dists[np.arange(n), perms] ** rho
    return float(costs.mean(axis=1).min() ** (1.0 / rho))


def test_02_exact_transport_equals_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8282)
    worst_nd = 0.0
    for k in range(1000):
        n = int(rng.integers(2, 8))
        rho = (1.0, 2.0, 3.0)[k % 3]
        x = rng.normal(size=(n, 2))
        y = rng.normal(size=(n, 2)) + rng.normal(scale=0.5, size=2)
        val, _ = w_rho_exact(EmpiricalMeasure(x), EmpiricalMeasure(y), rho)
        ref = brute_force_w(x, y, rho)
        worst_nd = max(worst_nd, abs(val - ref) / max(ref, 1e-300))
    worst_1d = 0.0
    for k in range(200):
        n = int(rng.integers(2, 100))
        rho = (1.0, 2.0, 3.0)[k % 3]
        a = EmpiricalMeasure(rng.normal(size=n))
        b = EmpiricalMeasure(rng.normal(size=n) + 0.5)
        val, _ = w_rho_exact(a, b, rho)
        ref = w_rho_1d(a, b, rho)
        worst_1d = max(worst_1d, abs(val - ref) / max(ref, 1e-300))
    ok = worst_nd <= 1e-10 and worst_1d <= 1e-12
    line = verdict(
        "exact transport vs brute force",
        ok,
        f"1000 instances n<=7: worst rel gap {worst_nd:.2e} (tol 1e-10); "
        f"200 1d instances: worst rel gap {worst_1d:.2e} (tol 1e-12)",
        t0,
        budget=60.0,
    )
    assert ok and time.perf_counter() - t0 < 60.0, line


def test_03_constant_diffusion_rate():
    t0 = time.perf_counter()
    curve = run_marginal_sweep(
        ExperimentSpec(sde="const-ou", n_list=(8, 16, 32, 64, 128, 256, 512))
    )
    fit = fit_loglog(curve)
    ok = -1.15 <= fit.slope <= -0.85
    line = verdict(
        "constant-diffusion rate",
        ok,
        f"oracle sweep slope {fit.slope:.4f}, CI [{fit.ci_low:.4f}, {fit.ci_high:.4f}], "
        f"band [-1.15, -0.85]",
        t0,
        budget=10.0,
    )
    assert ok and time.perf_counter() - t0 < 10.0, line


def test_04_holder_half_rate_and_envelope():
    t0 = time.perf_counter()
    curve = run_marginal_sweep(
        ExperimentSpec(sde="holder-ou", gamma=0.5, n_list=(8, 16, 32, 64, 128, 256, 512))
    )
    fit = fit_loglog(curve)
    bound = check_theorem_bound(curve, 0.5, with_log=False)
    tail = bound.ratios[-3:]
    stable = bool(np.all(tail[:-1] >= tail[1:] * (1 - 1e-9)))
    slope_ok = -0.70 <= fit.slope <= -0.40
    ok = slope_ok and stable
    line = verdict(
        "Holder-1/2 rate and envelope",
        ok,
        f"slope {fit.slope:.4f} in [-0.70, -0.40]: {slope_ok}; "
        f"C_star {bound.c_star:.4f} with tail ratios "
        f"{np.round(tail, 4).tolist()} non-increasing: {stable}",
        t0,
        budget=30.0,
    )
    assert ok and time.perf_counter() - t0 < 30.0, line


def test_05_step_integral_band_separation():
    t0 = time.perf_counter()
    ns = (16, 32, 64, 128, 256, 512, 1024)
    uniform = np.array(
        [step_gap_integral(build_uniform(1.0, n)) * n * n / np.log(n) for n in ns]
    )
    power = np.array([step_gap_integral(build_power(1.0, n, 2.0)) * n * n for n in ns])
    band_u = float(uniform.max() / uniform.min())
    band_p = float(power.max() / power.min())
    ok = band_u <= 2.0 and band_p <= 2.0
    line = verdict(
        "step-integral band separation",
        ok,
        f"uniform value*N^2/ln N band {band_u:.3f}, power value*N^2 band {band_p:.3f} "
        f"(both must be <= 2)",
        t0,
        budget=10.0,
    )
    assert ok and time.perf_counter() - t0 < 10.0, line


def test_06_power_grid_log_removal():
    t0 = time.perf_counter()
    ns = (8, 16, 32, 64, 128, 256, 512)
    gamma_one = compare_grids("const-ou", 1.0, ns, 2.0)
    scaled = gamma_one.power_curve.values * gamma_one.power_curve.n_values
    band = float(scaled.max() / scaled.min())
    one_ok = (
        gamma_one.power_bound.bounded
        and not gamma_one.power_bound.with_log
        and band <= 2.0
    )
    gamma_half = compare_grids("holder-ou", 0.5, ns, 2.0)
    su = fit_loglog(gamma_half.uniform_curve).slope
    sp = fit_loglog(gamma_half.power_curve).slope
    half_ok = abs(su + 0.5) <= 0.15 and abs(sp + 0.5) <= 0.15
    ok = one_ok and half_ok
    line = verdict(
        "power-grid log removal",
        ok,
        f"gamma=1: value*N band {band:.3f} bounded without log: {one_ok}; "
        f"gamma=1/2 slopes uniform {su:.4f} power {sp:.4f} vs -0.5 +/- 0.15: {half_ok}",
        t0,
        budget=60.0,
    )
    assert ok and time.perf_counter() - t0 < 60.0, line


def test_07_increment_moment_envelope():
    t0 = time.perf_counter()
    details = []
    ok = True
    for name in ("const-ou", "brownian"):
        spec = get_spec(name)
        ratios = []
        for n_steps in (8, 16, 32, 64, 128, 256):
            grid = build_uniform(spec.horizon, n_steps)
            h = spec.horizon / n_steps
            for j in np.unique(np.linspace(0, n_steps - 1, 12).astype(int)):
                for frac in (0.2, 0.5, 0.8):
                    t = (j + frac) * h
                    _, tau = last_node_before(grid, t)
                    ratios.append(
                        [
                            conditional_increment_moment(spec, grid, t, rho)
                            / malliavin_bound(t, tau, n_steps, rho, 1.0)
                            for rho in (2.0, 4.0)
                        ]
                    )
        ratios = np.array(ratios)  # one row per (t, N) cell, columns rho = 2, 4
        n_cells = ratios.shape[0]
        c_fit = float(ratios[::2].max())
        worst = float((ratios / c_fit).max())
        ok = ok and n_cells >= 200 and worst <= 1.0 + 1e-9
        details.append(f"{name}: {n_cells} cells, C_fit {c_fit:.4f}, max ratio {worst:.6f}")
    line = verdict(
        "increment-moment envelope", ok, "; ".join(details), t0, budget=30.0
    )
    assert ok and time.perf_counter() - t0 < 30.0, line


def test_08_first_variation_strong_rate():
    t0 = time.perf_counter()
    spec = get_spec("tanh-2d")
    fine = build_uniform(spec.horizon, 1024)
    ns = (8, 16, 32, 64, 128)
    gaps = []
    for n in ns:
        coarse = build_uniform(spec.horizon, n)
        vc, vf = simulate_first_variation_coupled(
            spec, coarse, fine, (spec.horizon,), 10_000, 2024
        )
        diff = vc.matrices_at(spec.horizon) - vf.matrices_at(spec.horizon)
        gaps.append(float(np.linalg.norm(diff, axis=(1, 2)).mean()))
    slope = float(np.polyfit(np.log(ns), np.log(gaps), 1)[0])
    ok = -0.70 <= slope <= -0.35
    line = verdict(
        "first-variation strong rate",
        ok,
        f"tanh-2d coupled slope {slope:.4f}, band [-0.70, -0.35], "
        f"gaps {np.round(gaps, 4).tolist()}",
        t0,
        budget=300.0,
    )
    assert ok and time.perf_counter() - t0 < 300.0, line


LAW_PAIRS = (
    ("const-ou", None, 0.25, 1.0),
    ("bures-2d", None, 0.25, 1.0),
    ("const-ou", None, 0.1, 0.6),
    ("bures-2d", None, 0.1, 0.75),
    ("holder-ou", 0.5, 0.25, 1.0),
)


def test_09_gaussian_formula_vs_empirical_transport():
    t0 = time.perf_counter()
    rng = np.random.default_rng(derived_seed(2, "simulation"))
    boot = np.random.default_rng(derived_seed(2, "bootstrap"))
    details = []
    ok = True
    for sde, gamma, t1, t2 in LAW_PAIRS:
        spec = get_spec(sde, gamma=gamma)
        p = sde_marginal_law(spec, t1)
        q = sde_marginal_law(spec, t2)
        exact = gaussian_w2(p, q)
        x = sample_law(p, 4000, rng)
        y = sample_law(q, 4000, rng)
        emp, plan = w_rho_exact(EmpiricalMeasure(x), EmpiricalMeasure(y), 2.0)
        costs = np.linalg.norm(x - y[plan.permutation], axis=1) ** 2
        idx = boot.integers(0, costs.size, size=(1000, costs.size))
        lo, hi = np.percentile(np.sqrt(costs[idx].mean(axis=1)), [2.5, 97.5])
        allowance = 0.03 * exact + 0.5 * (hi - lo)
        pair_ok = abs(emp - exact) <= allowance
        ok = ok and pair_ok
        details.append(f"{sde}({t1},{t2}): |{emp:.4f}-{exact:.4f}|<={allowance:.4f} {pair_ok}")
    line = verdict(
        "Gaussian formula vs empirical transport",
        ok,
        "5 law pairs at n=4000: " + "; ".join(details),
        t0,
        budget=120.0,
    )
    assert ok and time.perf_counter() - t0 < 120.0, line

"""Numerical checks of the Gaussian memorization identities and the expectation formulas.

Each check draws its own random cases from a fixed seed and reports the worst
observed error against its tolerance.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from memextract import gaussian as G
from memextract import metrics

THEORY_COLUMNS = ["check", "cases", "max_error", "tolerance", "passed", "seconds"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    cases: int
    max_error: float
    tolerance: float
    passed: bool
    seconds: float

    def row(self):
        return [self.name, str(self.cases), f"{self.max_error:.3e}", f"{self.tolerance:.0e}",
                "pass" if self.passed else "FAIL", f"{self.seconds:.2f}"]


def _timed(name, tol, fn, cases):
    t0 = time.perf_counter()
    err = fn()
    return CheckResult(name, cases, err, tol, bool(err <= tol), time.perf_counter() - t0)


def random_model(d: int, rng: np.random.Generator, cond: float = 10.0) -> G.GaussianModel:
    return G.GaussianModel(rng.standard_normal(d), G.random_spd(d, rng, cond))


def random_ratio_case(d: int, rng: np.random.Generator):
    """(conditional, pooled, z) meeting both hypotheses: smaller trace, no farther mean."""
    pooled = random_model(d, rng)
    scale = rng.uniform(0.05, 1.0) * np.trace(pooled.sigma) / d
    cond_sigma = scale * G.random_spd(d, rng)
    while np.trace(cond_sigma) > np.trace(pooled.sigma):
        cond_sigma = 0.9 * cond_sigma
    z = rng.standard_normal(d)
    mu_c = z + rng.uniform(0.0, 1.0) * (pooled.mu - z) + 0.01 * rng.standard_normal(d)
    while np.sum((z - mu_c) ** 2) > np.sum((z - pooled.mu) ** 2):
        mu_c = z + 0.5 * (mu_c - z)
    return G.GaussianModel(mu_c, cond_sigma), pooled, z


def _pairs(n_pairs, dims, rng):
    for i in range(n_pairs):
        d = dims[i % len(dims)]
        yield random_model(d, rng), random_model(d, rng)


def check_entropy(n_pairs=20, n_samples=10**6, dims=(2, 4, 8), seed=0, tol=1e-2) -> CheckResult:
    rng = np.random.default_rng(seed)

    def worst():
        errs = []
        for p, q in _pairs(n_pairs, dims, rng):
            for m in (p, q):
                exact = G.gaussian_entropy(m)
                est, _ = G.mc_entropy(m, n_samples, rng)
                errs.append(abs(est - exact) / abs(exact))
        return max(errs)

    return _timed("entropy_vs_monte_carlo (relative)", tol, worst, 2 * n_pairs)


def check_kl(n_pairs=20, n_samples=10**6, dims=(2, 4, 8), seed=1, tol=1e-2) -> CheckResult:
    rng = np.random.default_rng(seed)

    def worst():
        errs = []
        for p, q in _pairs(n_pairs, dims, rng):
            exact = G.gaussian_kl(p, q)
            est, _ = G.mc_kl(p, q, n_samples, rng)
            errs.append(abs(est - exact) / exact)
        return max(errs)

    return _timed("kl_vs_monte_carlo (relative)", tol, worst, n_pairs)


def check_point_mem(n=100, seed=2) -> CheckResult:
    rng = np.random.default_rng(seed)

    def worst():
        errs = []
        for _ in range(n):
            d = int(rng.integers(1, 9))
            p = random_model(d, rng)
            x = rng.standard_normal(d)
            eps = float(10 ** rng.uniform(-4, -0.1))
            general = G.gaussian_kl(p, G.GaussianModel(x, eps * np.eye(d)))
            errs.append(abs(G.point_mem_kl(p, x, eps) - general) / max(1.0, abs(general)))
        return max(errs)

    return _timed("point_mem_kl_vs_general_kl", 1e-10, worst, n)


def check_ratio_bound(n=100, seed=3) -> CheckResult:
    rng = np.random.default_rng(seed)

    def worst():
        ratios = [G.mem_ratio_limit(*random_ratio_case(int(rng.integers(1, 9)), rng))
                  for _ in range(n)]
        return max(0.0, max(ratios) - 1.0)

    return _timed("mem_ratio_at_most_one (excess)", 1e-12, worst, n)


def check_ratio_limit(n=100, seed=4, eps=(1e-2, 1e-3, 1e-4)) -> CheckResult:
    rng = np.random.default_rng(seed)

    def worst():
        errs = []
        for _ in range(n):
            cond, pooled, z = random_ratio_case(int(rng.integers(1, 9)), rng)
            f = lambda e: G.point_mem_kl(cond, z, e) / G.point_mem_kl(pooled, z, e)
            errs.append(abs(G.extrapolate_small_eps(f, eps) - G.mem_ratio_limit(cond, pooled, z)))
        return max(errs)

    return _timed("small_eps_extrapolation", 1e-3, worst, n)


def check_nuclear_trace(n=100, seed=5) -> CheckResult:
    rng = np.random.default_rng(seed)

    def worst():
        errs = []
        for _ in range(n):
            s = G.random_spd(int(rng.integers(1, 17)), rng, cond=1e3)
            errs.append(abs(G.nuclear_norm(s) - np.trace(s)) / np.trace(s))
        return max(errs)

    return _timed("nuclear_norm_equals_trace (relative)", 1e-10, worst, n)


def check_expectations(n_vectors=20, runs=10**5, seed=6) -> CheckResult:
    """Largest deviation from the formulas in units of the Monte Carlo standard error."""
    rng = np.random.default_rng(seed)

    def worst():
        zs = []
        for _ in range(n_vectors):
            m = int(rng.integers(1, 30))
            p = rng.dirichlet(np.ones(m)) * rng.uniform(0.05, 1.0)
            n_gen = int(rng.integers(1, 60))
            counts, distinct = metrics.simulate_generation_runs(p, n_gen, runs, rng)
            for sims, exact in ((counts, metrics.expected_mem_count(p, n_gen)),
                                (distinct, metrics.expected_unique_mem_count(p, n_gen))):
                se = sims.std(ddof=1) / math.sqrt(runs)
                zs.append(abs(sims.mean() - exact) / se if se > 0 else abs(sims.mean() - exact) * 1e300)
        return max(zs)

    return _timed("expected_counts_vs_simulation (std errors)", 3.0, worst, 2 * n_vectors)


ALL_CHECKS = (check_entropy, check_kl, check_point_mem, check_ratio_bound, check_ratio_limit,
              check_nuclear_trace, check_expectations)


def run_all(quick: bool = False) -> list[CheckResult]:
    if quick:
        # ten times fewer samples widens the Monte Carlo error by about sqrt(10)
        return [check_entropy(n_samples=10**5, tol=3e-2), check_kl(n_samples=10**5, tol=3e-2),
                check_point_mem(),
                check_ratio_bound(), check_ratio_limit(), check_nuclear_trace(),
                check_expectations(runs=10**4)]
    return [c() for c in ALL_CHECKS]


def write_csv(results, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(THEORY_COLUMNS)
        w.writerows(r.row() for r in results)
    return path


def format_table(results) -> str:
    rows = [THEORY_COLUMNS[:-1]] + [r.row()[:-1] for r in results]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)

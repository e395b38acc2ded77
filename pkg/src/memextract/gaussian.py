"""Closed-form Gaussian entropy, KL divergence and point-memorization quantities.

The point-memorization KL compares a model Gaussian ``N(mu, Sigma)`` with a
narrow isotropic Gaussian ``N(x_i, eps I)`` centred on a training point:

    KL = 1/2 [ |x_i - mu|^2 / eps - log(det Sigma / eps^d) + tr(Sigma) / eps - d ]

Summed over a dataset it is a memorization measure (smaller is more
memorization).  As ``eps -> 0`` the ratio of two such KLs tends to
``(|z - mu_c|^2 + tr Sigma_c) / (|z - mu|^2 + tr Sigma)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

SYM_TOL = 1e-10
PSD_TOL = 1e-10


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GaussianModel:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (mu.size, mu.size):
            raise ValueError(f"covariance shape {sigma.shape} does not match mean of size {mu.size}")
        if np.max(np.abs(sigma - sigma.T), initial=0.0) > SYM_TOL:
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", 0.5 * (sigma + sigma.T))
        if self.eigenvalues().min(initial=0.0) < -PSD_TOL:
            raise ValueError("covariance is not positive semi-definite")

    @property
    def dim(self) -> int:
        return self.mu.size

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.sigma)

    def logdet(self) -> float:
        lam = self.eigenvalues()
        if lam.min() <= 0:
            raise SingularCovarianceError("covariance is singular")
        return float(np.sum(np.log(lam)))

    def logpdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        chol = _cholesky(self.sigma)
        sol = solve_triangular(chol, (x - self.mu).T, lower=True, check_finite=False)
        maha = np.sum(sol * sol, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (self.dim * math.log(2 * math.pi) + logdet + maha)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = _cholesky(self.sigma)
        return self.mu + rng.standard_normal((n, self.dim)) @ chol.T


def _cholesky(sigma):
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("covariance is not positive definite") from exc


def nuclear_norm(matrix) -> float:
    return float(np.sum(np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)))


def gaussian_entropy(p: GaussianModel) -> float:
    return 0.5 * p.dim * (1.0 + math.log(2 * math.pi)) + 0.5 * p.logdet()


def gaussian_kl(p: GaussianModel, q: GaussianModel) -> float:
    """``KL(p || q)``; ``q`` must be positive definite."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    chol = _cholesky(q.sigma)
    diff = np.linalg.solve(chol, p.mu - q.mu)
    a = np.linalg.solve(chol, p.sigma)
    q_inv_p = np.linalg.solve(chol.T, a)
    maha = float(diff @ diff)
    trace = float(np.trace(q_inv_p))
    logdet_ratio = p.logdet() - 2.0 * float(np.sum(np.log(np.diag(chol))))
    return max(0.5 * (maha - logdet_ratio + trace - p.dim), 0.0)


def _check_eps(eps):
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")


def point_mem_kl(p: GaussianModel, x_i, eps: float) -> float:
    """``KL(p || N(x_i, eps I))`` through the eigenvalues of ``p.sigma``."""
    _check_eps(eps)
    x_i = np.asarray(x_i, dtype=np.float64).reshape(-1)
    if x_i.size != p.dim:
        raise ValueError("point dimension does not match the model")
    lam = p.eigenvalues()
    if lam.min() <= 0:
        raise SingularCovarianceError("covariance is singular")
    d = p.dim
    sq = float(np.sum((x_i - p.mu) ** 2))
    log_det_over = float(np.sum(np.log(lam))) - d * math.log(eps)
    return 0.5 * (sq / eps - log_det_over + float(lam.sum()) / eps - d)


def dataset_mem_metric(p: GaussianModel, dataset, eps: float) -> float:
    dataset = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    if dataset.size == 0:
        raise ValueError("empty dataset")
    return float(sum(point_mem_kl(p, x, eps) for x in dataset))


def mem_ratio_limit(cond: GaussianModel, pooled: GaussianModel, z) -> float:
    """Small-eps limit of ``point_mem_kl(cond, z) / point_mem_kl(pooled, z)``."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    num = float(np.sum((z - cond.mu) ** 2) + np.trace(cond.sigma))
    den = float(np.sum((z - pooled.mu) ** 2) + np.trace(pooled.sigma))
    if den <= 0:
        raise ValueError("degenerate pooled model: zero denominator")
    return num / den


def extrapolate_small_eps(f, eps=(1e-2, 1e-3, 1e-4)) -> float:
    """Estimate ``lim_{e -> 0} f(e)`` assuming ``f(e) = L + e (a + b log e) + o(e)``.

    Fits the three-term model exactly through three evaluations.
    """
    eps = np.asarray(eps, dtype=np.float64)
    vals = np.array([f(e) for e in eps])
    design = np.column_stack([np.ones_like(eps), eps, eps * np.log(eps)])
    return float(np.linalg.solve(design, vals)[0])


@dataclass
class ClassStats:
    mean: np.ndarray
    cov: np.ndarray
    eigenvalues: np.ndarray
    count: int
    within_scatter: float
    pooled_scatter: float

    @property
    def nuclear_norm(self) -> float:
        return float(np.sum(np.abs(self.eigenvalues)))

    def model(self) -> GaussianModel:
        return GaussianModel(self.mean, self.cov)


@dataclass
class LatentStats:
    """Per-class and pooled moments.

    ``within_scatter`` of a class sums squared distances of its members to the
    class mean; ``pooled_scatter`` sums the same members' squared distances to
    the pooled mean.  ``total_scatter`` is over all points about the pooled mean.
    """

    pooled: ClassStats
    classes: dict[int, ClassStats]
    total_scatter: float


def _stats(z, pooled_mean):
    mean = z.mean(axis=0)
    cov = np.atleast_2d(np.cov(z, rowvar=False))
    cov = 0.5 * (cov + cov.T)
    return ClassStats(mean, cov, np.linalg.eigvalsh(cov), len(z),
                      float(np.sum((z - mean) ** 2)), float(np.sum((z - pooled_mean) ** 2)))


def latent_stats(latents, labels) -> LatentStats:
    z = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    if len(z) < 2:
        raise ValueError("need at least 2 samples")
    mu = z.mean(axis=0)
    pooled = _stats(z, mu)
    classes = {}
    for c in np.unique(labels):
        members = z[labels == c]
        if len(members) < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        classes[int(c)] = _stats(members, mu)
    return LatentStats(pooled, classes, pooled.within_scatter)


def random_spd(d: int, rng: np.random.Generator, cond: float = 10.0) -> np.ndarray:
    """Random SPD matrix with eigenvalues log-uniform in ``[1/sqrt(cond), sqrt(cond)]``."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = np.exp(rng.uniform(-0.5, 0.5, d) * math.log(cond))
    s = (q * lam) @ q.T
    return 0.5 * (s + s.T)


def mc_entropy(p: GaussianModel, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo ``E[-log p]``: (estimate, standard error)."""
    vals = -p.logpdf(p.sample(n, rng))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


def mc_kl(p: GaussianModel, q: GaussianModel, n: int, rng: np.random.Generator
          ) -> tuple[float, float]:
    """Monte Carlo ``E_p[log p - log q]``: (estimate, standard error)."""
    x = p.sample(n, rng)
    vals = p.logpdf(x) - q.logpdf(x)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))

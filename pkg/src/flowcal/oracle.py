"""Closed-form linear-Gaussian ground truth used to verify the learned machinery."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .physics import BornLiteSurvey, DenseOperator

MAX_DENSE_SIZE = 4096


class OracleError(ValueError):
    pass


@dataclass
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.ndim == 1:
            cov = np.diag(cov)
        self.cov = np.atleast_2d(cov)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise OracleError("covariance shape does not match mean")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        L = _cholesky(self.cov + 0.0, "covariance")
        return self.mean + rng.standard_normal((n, self.dim)) @ L.T

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        L = _cholesky(self.cov, "covariance")
        r = linalg.solve_triangular(L, (np.atleast_2d(x) - self.mean).T, lower=True)
        return -0.5 * np.sum(r * r, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * self.dim * np.log(2 * np.pi)


@dataclass
class DenseGaussianProblem:
    """``y = J x + e``, ``e ~ N(0, sigma^2 I)``, ``x ~ N(m0, S0)``."""

    J: np.ndarray
    sigma: float
    prior_mean: np.ndarray
    prior_cov: np.ndarray

    def __post_init__(self):
        self.J = np.atleast_2d(np.asarray(self.J, dtype=np.float64))
        if not np.all(np.isfinite(self.J)):
            raise OracleError("operator has non-finite entries")
        if not self.sigma > 0:
            raise OracleError("sigma must be positive")
        self.prior_mean = np.atleast_1d(np.asarray(self.prior_mean, dtype=np.float64))
        cov = np.asarray(self.prior_cov, dtype=np.float64)
        self.prior_cov = np.diag(cov) if cov.ndim == 1 else np.atleast_2d(cov)
        if not np.allclose(self.prior_cov, self.prior_cov.T):
            raise OracleError("prior covariance must be symmetric")
        _cholesky(self.prior_cov, "prior covariance")

    @classmethod
    def standard(cls, J: np.ndarray, sigma: float) -> "DenseGaussianProblem":
        J = np.atleast_2d(J)
        return cls(J, sigma, np.zeros(J.shape[1]), np.eye(J.shape[1]))

    @property
    def dim(self) -> int:
        return self.J.shape[1]

    def neg_log_posterior(self, x: np.ndarray, y: np.ndarray) -> float:
        r = y - self.J @ x
        dx = x - self.prior_mean
        return 0.5 * r @ r / self.sigma**2 + 0.5 * dx @ np.linalg.solve(self.prior_cov, dx)

    def neg_log_posterior_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return -self.J.T @ (y - self.J @ x) / self.sigma**2 + np.linalg.solve(self.prior_cov, x - self.prior_mean)

    def simulate(self, rng: np.random.Generator, n: int = 1) -> tuple[np.ndarray, np.ndarray]:
        x = GaussianDist(self.prior_mean, self.prior_cov).sample(n, rng)
        y = x @ self.J.T + self.sigma * rng.standard_normal((n, self.J.shape[0]))
        return x, y


def _cholesky(a: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(a, lower=True)
    except linalg.LinAlgError:
        raise OracleError(f"{what} is not positive definite") from None


def assemble_dense_operator(survey: BornLiteSurvey) -> np.ndarray:
    """Stacked matrix of all sources: column k is the response to basis image k."""
    n = survey.size
    if n > MAX_DENSE_SIZE:
        raise OracleError(f"grid of {n} cells exceeds dense assembly limit {MAX_DENSE_SIZE}")
    basis = np.eye(n).reshape(n, survey.nz, survey.nx)
    blocks = []
    for i in range(survey.n_sources):
        # forward acts on the trailing (nz, nx) axes, so all basis images go at once
        blocks.append(survey.forward(i, basis).reshape(n, -1).T)
    return np.vstack(blocks)


def dense_operator_for(survey: BornLiteSurvey) -> DenseOperator:
    J = assemble_dense_operator(survey)
    return DenseOperator(np.split(J, survey.n_sources, axis=0))


def analytic_posterior(problem: DenseGaussianProblem, y: np.ndarray) -> GaussianDist:
    J, s2 = problem.J, problem.sigma**2
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    prior_prec = linalg.cho_solve((_cholesky(problem.prior_cov, "prior covariance"), True), np.eye(problem.dim))
    prec = J.T @ J / s2 + prior_prec
    prec = 0.5 * (prec + prec.T)
    factor = (_cholesky(prec, "posterior precision"), True)
    cov = linalg.cho_solve(factor, np.eye(problem.dim))
    mean = linalg.cho_solve(factor, J.T @ y / s2 + prior_prec @ problem.prior_mean)
    return GaussianDist(mean, 0.5 * (cov + cov.T))


def kl_gauss(p: GaussianDist, q: GaussianDist) -> float:
    """KL(p || q) between multivariate normals."""
    if p.dim != q.dim:
        raise OracleError("dimension mismatch")
    Lq = _cholesky(q.cov, "q covariance")
    sign, logdet_p = np.linalg.slogdet(p.cov)
    if sign <= 0:
        raise OracleError("p covariance is singular")
    trace = np.trace(linalg.cho_solve((Lq, True), p.cov))
    r = linalg.solve_triangular(Lq, q.mean - p.mean, lower=True)
    logdet_q = 2.0 * np.sum(np.log(np.diag(Lq)))
    return float(0.5 * (trace + r @ r - p.dim + logdet_q - logdet_p))


def reverse_kl_diag_fit(target: GaussianDist) -> tuple[np.ndarray, np.ndarray]:
    """Minimizer of KL(N(mu, diag(s)^2) || target): mu = mean, s_d = 1/sqrt(precision_dd)."""
    L = _cholesky(target.cov, "target covariance")
    prec = linalg.cho_solve((L, True), np.eye(target.dim))
    return target.mean.copy(), 1.0 / np.sqrt(np.diag(prec))


def gaussian_fit(samples: np.ndarray) -> GaussianDist:
    samples = np.asarray(samples, dtype=np.float64)
    return GaussianDist(samples.mean(axis=0), np.atleast_2d(np.cov(samples, rowvar=False)))


def linear_gaussian_pairs(problem: DenseGaussianProblem, n: int, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint draws for the toy: model rows, data rows, and migrated (J^T y) condition rows."""
    x, y = problem.simulate(np.random.default_rng(seed), n)
    return x, y, y @ problem.J

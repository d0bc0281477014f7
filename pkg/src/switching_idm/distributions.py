"""Probability primitives used by the sampler.

Only the families the model needs: Dirichlet, multivariate normal
(precision parameterization), Wishart / normal-Wishart, inverse-Gamma and
multivariate log-normal.  Everything works in log space; raw densities are
never exchanged between modules.

All samplers take an explicit ``numpy.random.Generator`` so that a fixed
seed reproduces the exact draw sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericDomainError

LOG_2PI = float(np.log(2.0 * np.pi))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seed gives an identical sample stream."""
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class NormalWishartParams:
    """Parameters of a normal-Wishart distribution over (mean, precision).

    ``scale`` is the Wishart scale matrix V in the E[Lambda] = dof * V
    convention.
    """

    mean: np.ndarray
    kappa: float
    dof: float
    scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        scale = np.asarray(self.scale, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        d = mean.shape[0]
        if self.kappa <= 0.0:
            raise InvalidArgumentError("kappa must be > 0")
        if self.dof < d:
            raise InvalidArgumentError(f"dof must be >= dimension ({d})")
        if scale.shape != (d, d):
            raise InvalidArgumentError("scale must be d x d")
        if not np.allclose(scale, scale.T):
            raise NumericDomainError("scale matrix must be symmetric")
        try:
            np.linalg.cholesky(scale)
        except np.linalg.LinAlgError as exc:
            raise NumericDomainError("scale matrix must be positive-definite") from exc


@dataclass(frozen=True)
class InverseGammaParams:
    """Shape/rate parameters of an inverse-Gamma distribution."""

    shape: float
    rate: float

    def __post_init__(self):
        if self.shape <= 0.0 or self.rate <= 0.0:
            raise InvalidArgumentError("inverse-Gamma shape and rate must be > 0")


def sample_dirichlet(concentration, rng: np.random.Generator, size: int | None = None):
    """Draw from Dir(concentration) via normalized Gamma variates.

    Uses the boosted representation Gamma(a) = Gamma(a+1) * U^{1/a} and
    normalizes in log space, so rows with tiny concentrations (sparse
    priors like 1/|Z|) do not underflow to zero.  ``size=None`` returns one
    vector, otherwise an array of shape (size, len(concentration)).
    """
    c = np.asarray(concentration, dtype=float)
    if c.ndim != 1 or c.shape[0] < 2:
        raise InvalidArgumentError("concentration must be a vector of length >= 2")
    if not np.all(np.isfinite(c)) or np.any(c <= 0.0):
        raise InvalidArgumentError("concentration entries must be finite and > 0")
    n = 1 if size is None else int(size)
    g = rng.gamma(c + 1.0, size=(n, c.shape[0]))
    u = rng.uniform(size=(n, c.shape[0]))
    log_g = np.log(g) + np.log(u) / c
    log_g -= log_g.max(axis=1, keepdims=True)
    w = np.exp(log_g)
    w = np.maximum(w, np.finfo(float).tiny)
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if size is None else w


def mvn_logpdf(x, mean, precision) -> float:
    """log N(x; mean, precision^-1) for a single point."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    precision = np.asarray(precision, dtype=float)
    d = x.shape[0]
    if mean.shape != (d,) or precision.shape != (d, d):
        raise InvalidArgumentError("dimension mismatch in mvn_logpdf")
    chol = _spd_cholesky(precision)
    diff = x - mean
    quad = float(np.sum((chol.T @ diff) ** 2))
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return 0.5 * log_det - 0.5 * d * LOG_2PI - 0.5 * quad


def mvn_logpdf_batch(xs: np.ndarray, mean, precision) -> np.ndarray:
    """Vectorized ``mvn_logpdf`` for rows of ``xs`` (shape (n, d))."""
    xs = np.asarray(xs, dtype=float)
    mean = np.asarray(mean, dtype=float)
    precision = np.asarray(precision, dtype=float)
    d = xs.shape[1]
    chol = _spd_cholesky(precision)
    diff = xs - mean
    quad = np.sum((diff @ chol) ** 2, axis=1)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return 0.5 * log_det - 0.5 * d * LOG_2PI - 0.5 * quad


def normal_logpdf(x, mean, variance) -> np.ndarray:
    """Elementwise log N(x; mean, variance) for scalars or arrays."""
    x = np.asarray(x, dtype=float)
    resid = x - mean
    return -0.5 * (LOG_2PI + np.log(variance)) - 0.5 * resid**2 / variance


def sample_wishart(dof: float, scale, rng: np.random.Generator, size: int | None = None):
    """Draw W(dof, scale) precision matrices via the Bartlett decomposition.

    E[draw] = dof * scale.  ``size=None`` returns one (d, d) matrix,
    otherwise an array of shape (size, d, d).
    """
    scale = np.asarray(scale, dtype=float)
    d = scale.shape[0]
    if dof < d:
        raise InvalidArgumentError(f"Wishart dof must be >= dimension ({d})")
    chol = _spd_cholesky(scale)
    n = 1 if size is None else int(size)
    a = np.zeros((n, d, d))
    lower = np.tril_indices(d, k=-1)
    if lower[0].size:
        a[:, lower[0], lower[1]] = rng.standard_normal((n, lower[0].size))
    for i in range(d):
        a[:, i, i] = np.sqrt(rng.chisquare(dof - i, size=n))
    m = chol[None, :, :] @ a
    draws = m @ m.transpose(0, 2, 1)
    return draws[0] if size is None else draws


def sample_normal_wishart(
    params: NormalWishartParams, rng: np.random.Generator, size: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (mean, precision) with precision ~ W(dof, scale) and
    mean | precision ~ N(params.mean, (kappa * precision)^-1).

    ``size=None`` returns a (d,) mean and (d, d) precision; otherwise
    arrays of shape (size, d) and (size, d, d).
    """
    if size is None:
        lam = sample_wishart(params.dof, params.scale, rng)
        mean = sample_mvn_from_precision(params.mean, params.kappa * lam, rng)
        return mean, lam
    lams = sample_wishart(params.dof, params.scale, rng, size=size)
    chols = np.linalg.cholesky(params.kappa * lams)
    z = rng.standard_normal((int(size), params.mean.shape[0], 1))
    means = params.mean + np.linalg.solve(chols.transpose(0, 2, 1), z)[:, :, 0]
    return means, lams


def sample_mvn_from_precision(mean, precision, rng: np.random.Generator) -> np.ndarray:
    """Draw N(mean, precision^-1) without forming the covariance."""
    mean = np.asarray(mean, dtype=float)
    chol = _spd_cholesky(precision)
    z = rng.standard_normal(mean.shape[0])
    # precision = C C^T  =>  C^-T z ~ N(0, precision^-1)
    return mean + np.linalg.solve(chol.T, z)


def sample_inverse_gamma(
    params: InverseGammaParams, rng: np.random.Generator, size: int | None = None
):
    """Draw from IG(shape, rate); mean is rate / (shape - 1) for shape > 1."""
    g = rng.gamma(params.shape, size=size)
    return float(params.rate / g) if size is None else params.rate / g


def lognormal_logpdf(theta, log_mean, precision) -> float:
    """Log density of the multivariate log-normal at ``theta``.

    Change of variables from N(ln theta; log_mean, precision^-1); raises if
    any component is non-positive (callers treat that as log-density -inf
    when scoring proposals).
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0.0) or not np.all(np.isfinite(theta)):
        raise InvalidArgumentError("log-normal support requires all entries > 0")
    log_theta = np.log(theta)
    return mvn_logpdf(log_theta, log_mean, precision) - float(np.sum(log_theta))


def _spd_cholesky(matrix: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise NumericDomainError("matrix is not symmetric positive-definite") from exc

"""Message representations and the Gaussian/mixture algebra used by BP.

Every message is one of

* :class:`Gaussian` (moment form) or :class:`InfoGaussian` (information form,
  may be rank deficient),
* :class:`GaussianMixture` / :class:`InfoMixture` with one or two components,
* :class:`AnnulusMixture`, a ring-shaped function of a 2-D position,
* :data:`UNINFORMATIVE`, the constant function.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.special import ndtr

WEIGHT_TOL = 1e-12
COND_LIMIT = 1e12


class NumericalError(ArithmeticError):
    """A linear-algebra step failed; the message names the operation."""


def spd_inv(M: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix.

    The matrix is equilibrated by its diagonal first, so blocks with very
    different units (seconds vs. ppm) do not spoil the conditioning. A jitter
    of ``1e-12`` (relative) is added when the equilibrated matrix is still
    ill conditioned or not numerically positive definite.
    """
    M = 0.5 * (M + M.T)
    diag = np.diag(M)
    if np.any(diag <= 0) or not np.all(np.isfinite(M)):
        raise NumericalError(f"{what}: singular or non-finite matrix")
    d = np.sqrt(diag)
    E = M / np.outer(d, d)
    if len(E) == 2:
        return _inv2(E, d, what)
    try:
        L = np.linalg.cholesky(E)
        ld = np.diag(L)
        # Cheap conditioning estimate from the Cholesky diagonal.
        if (ld.max() / ld.min()) ** 2 > COND_LIMIT:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        try:
            L = np.linalg.cholesky(E + 1e-12 * np.eye(len(E)))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"{what}: not positive definite") from exc
    Li = linalg.solve_triangular(L, np.eye(len(E)), lower=True, check_finite=False)
    out = (Li.T @ Li) / np.outer(d, d)
    return 0.5 * (out + out.T)


def _inv2(E, d, what):
    """Closed-form inverse of an equilibrated 2x2 matrix (unit diagonal)."""
    rho = E[0, 1]
    det = 1.0 - rho * rho
    if det < 1.0 / COND_LIMIT:
        E = E + 1e-12 * np.eye(2)
        det = E[0, 0] * E[1, 1] - rho * rho
        if not det > 0:
            raise NumericalError(f"{what}: not positive definite")
    inv = np.array([[E[1, 1], -rho], [-rho, E[0, 0]]]) / det
    return inv / np.outer(d, d)


def logsumexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """``log(sum(exp(a)))`` along ``axis``; all ``-inf`` gives ``-inf``."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=float)))
        if self.cov.shape != (self.dim, self.dim):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean {self.mean.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def info(self) -> np.ndarray:
        return spd_inv(self.cov, "Gaussian covariance")

    @property
    def info_vec(self) -> np.ndarray:
        return self.info @ self.mean

    def to_info(self) -> "InfoGaussian":
        L = self.info
        return InfoGaussian(L, L @ self.mean)


@dataclass(frozen=True)
class InfoGaussian:
    """Gaussian function in information form; ``info`` may be singular."""
    info: np.ndarray
    info_vec: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "info", np.atleast_2d(np.asarray(self.info, dtype=float)))
        object.__setattr__(self, "info_vec", np.atleast_1d(np.asarray(self.info_vec, dtype=float)))

    @property
    def dim(self) -> int:
        return self.info_vec.shape[0]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.info)

    def to_moment(self) -> Gaussian:
        cov = spd_inv(self.info, "information matrix")
        return Gaussian(cov @ self.info_vec, cov)


class _Uninformative:
    """The constant message; carries no parameters."""
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNINFORMATIVE"

    def __reduce__(self):
        return (_Uninformative, ())


UNINFORMATIVE = _Uninformative()


def is_uninformative(msg) -> bool:
    return msg is UNINFORMATIVE or (isinstance(msg, InfoGaussian) and msg.is_zero)


def _normalize(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("mixture weights must be non-negative")
    s = w.sum()
    if s <= 0:
        raise ValueError("mixture weights sum to zero")
    if abs(s - 1.0) > WEIGHT_TOL:
        w = w / s
    return w


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None]
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "weights", _normalize(np.atleast_1d(self.weights)))
        S = len(self.weights)
        if S not in (1, 2):
            raise ValueError(f"mixtures carry 1 or 2 components, got {S}")
        if means.shape[0] != S or covs.shape != (S, means.shape[1], means.shape[1]):
            raise ValueError("inconsistent mixture shapes")

    @classmethod
    def single(cls, g: Gaussian) -> "GaussianMixture":
        return cls(np.ones(1), g.mean[None], g.cov[None])

    @property
    def S(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component(self, s: int) -> Gaussian:
        return Gaussian(self.means[s], self.covs[s])

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means


@dataclass(frozen=True)
class InfoMixture:
    """Mixture of information-form Gaussian functions (rank deficiency allowed)."""
    weights: np.ndarray
    infos: np.ndarray
    info_vecs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _normalize(np.atleast_1d(self.weights)))

    @property
    def S(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class AnnulusMixture:
    """``sum_s w_s exp(-(r - |p - c_s|)^2 / (2 sigma2_s))`` over 2-D positions.

    The radius is shared; centers, squared widths and weights are per component.
    """
    radius: float
    centers: np.ndarray
    widths2: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centers", np.atleast_2d(np.asarray(self.centers, dtype=float)))
        object.__setattr__(self, "widths2", np.atleast_1d(np.asarray(self.widths2, dtype=float)))
        object.__setattr__(self, "weights", _normalize(np.atleast_1d(self.weights)))
        if self.radius < 0:
            raise ValueError("annulus radius must be non-negative")
        if np.any(self.widths2 <= 0):
            raise ValueError("annulus widths must be positive")
        if not (len(self.weights) == len(self.widths2) == len(self.centers)) or len(self.weights) not in (1, 2):
            raise ValueError("annulus mixtures carry 1 or 2 consistent components")

    @property
    def S(self) -> int:
        return len(self.weights)


# ---------------------------------------------------------------- operations

def _as_info(msg):
    if isinstance(msg, InfoGaussian):
        return msg.info, msg.info_vec
    if isinstance(msg, Gaussian):
        L = msg.info
        return L, L @ msg.mean
    raise TypeError(f"cannot fuse {type(msg).__name__}")


def gaussian_product(a, b):
    """Product of two Gaussian functions, summed in information form.

    The constant message is the neutral element and is returned through
    unchanged. The result is in moment form when its information matrix is
    invertible, in information form otherwise.
    """
    if is_uninformative(a):
        return b
    if is_uninformative(b):
        return a
    La, ha = _as_info(a)
    Lb, hb = _as_info(b)
    if La.shape != Lb.shape:
        raise ValueError(f"dimension mismatch: {La.shape} vs {Lb.shape}")
    out = InfoGaussian(La + Lb, ha + hb)
    try:
        return out.to_moment()
    except NumericalError:
        return out


def info_sum(terms, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Summed information matrix and vector of Gaussian factors."""
    L = np.zeros((dim, dim))
    h = np.zeros(dim)
    for t in terms:
        if is_uninformative(t):
            continue
        Lt, ht = _as_info(t)
        L = L + Lt
        h = h + ht
    return L, h


def annulus_eval(msg: AnnulusMixture, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    dist = np.linalg.norm(p[:, None, :] - msg.centers[None], axis=-1)
    val = np.exp(-(msg.radius - dist) ** 2 / (2 * msg.widths2[None])) @ msg.weights
    return val[0] if single else val


def annulus_normalizer(radius: float, width2) -> np.ndarray:
    """Integral over the plane of one annulus component with unit weight.

    ``2 pi * int_0^inf rho exp(-(rho - r)^2 / (2 s^2)) d rho`` in closed form.
    """
    s2 = np.asarray(width2, dtype=float)
    s = np.sqrt(s2)
    return 2 * np.pi * (s2 * np.exp(-radius ** 2 / (2 * s2))
                        + radius * s * np.sqrt(2 * np.pi) * ndtr(radius / s))


def annulus_density(msg: AnnulusMixture, p) -> np.ndarray:
    """Annulus mixture normalized to a probability density on the plane."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    dist = np.linalg.norm(p[:, None, :] - msg.centers[None], axis=-1)
    comp = np.exp(-(msg.radius - dist) ** 2 / (2 * msg.widths2[None]))
    return comp @ (msg.weights / annulus_normalizer(msg.radius, msg.widths2))


def moment_match_mixture(weights, means=None, covs=None) -> Gaussian:
    """Single Gaussian with the exact mean and covariance of a mixture.

    Accepts a :class:`GaussianMixture` or raw arrays. 1-D mixtures may pass
    scalar means and variances.
    """
    if isinstance(weights, GaussianMixture):
        weights, means, covs = weights.weights, weights.means, weights.covs
    w = _normalize(np.atleast_1d(weights))
    means = np.asarray(means, dtype=float).reshape(len(w), -1)
    d = means.shape[1]
    covs = np.asarray(covs, dtype=float).reshape(len(w), d, d)
    mu = w @ means
    dev = means - mu
    cov = np.einsum("s,sij->ij", w, covs) + np.einsum("s,si,sj->ij", w, dev, dev)
    return Gaussian(mu, cov)


def trace_of_cov(msg) -> float:
    """Trace of the covariance; ``inf`` for the constant or singular messages."""
    if is_uninformative(msg):
        return float("inf")
    if isinstance(msg, Gaussian):
        return float(np.trace(msg.cov))
    if isinstance(msg, InfoGaussian):
        try:
            return float(np.trace(spd_inv(msg.info)))
        except NumericalError:
            return float("inf")
    if isinstance(msg, GaussianMixture):
        return float(np.trace(moment_match_mixture(msg).cov))
    raise TypeError(f"no covariance for {type(msg).__name__}")


def mixture_pdf(mix: GaussianMixture, pts) -> np.ndarray:
    """Density of a Gaussian mixture at the rows of ``pts``."""
    pts = np.atleast_2d(pts)
    d = mix.dim
    out = np.zeros(len(pts))
    for w, m, C in zip(mix.weights, mix.means, mix.covs):
        L = np.linalg.cholesky(C)
        z = linalg.solve_triangular(L, (pts - m).T, lower=True, check_finite=False)
        logdet = 2 * np.sum(np.log(np.diag(L)))
        out += w * np.exp(-0.5 * np.sum(z * z, axis=0) - 0.5 * (d * np.log(2 * np.pi) + logdet))
    return out


def sample_mixture(mix: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(mix.S, size=n, p=mix.weights) if mix.S > 1 else np.zeros(n, dtype=int)
    z = rng.standard_normal((n, mix.dim))
    out = np.empty((n, mix.dim))
    for s in range(mix.S):
        sel = comp == s
        L = np.linalg.cholesky(mix.covs[s] + 1e-300 * np.eye(mix.dim)) if np.any(mix.covs[s]) \
            else np.zeros((mix.dim, mix.dim))
        out[sel] = mix.means[s] + z[sel] @ L.T
    return out


def to_record(msg) -> list[float]:
    """Flat numeric record: type tag, component count, then parameters.

    Tags: 0 constant, 1 Gaussian, 2 Gaussian mixture, 3 annulus mixture.
    Gaussians list mean then row-major covariance; mixtures list, per
    component, weight, mean and covariance; annuli list the radius, then per
    component weight, center and squared width.
    """
    if is_uninformative(msg):
        return [0.0, 0.0]
    if isinstance(msg, InfoGaussian):
        msg = msg.to_moment()
    if isinstance(msg, Gaussian):
        return [1.0, 1.0, *msg.mean.tolist(), *msg.cov.ravel().tolist()]
    if isinstance(msg, GaussianMixture):
        rec = [2.0, float(msg.S)]
        for s in range(msg.S):
            rec += [float(msg.weights[s]), *msg.means[s].tolist(), *msg.covs[s].ravel().tolist()]
        return rec
    if isinstance(msg, AnnulusMixture):
        rec = [3.0, float(msg.S), float(msg.radius)]
        for s in range(msg.S):
            rec += [float(msg.weights[s]), *msg.centers[s].tolist(), float(msg.widths2[s])]
        return rec
    raise TypeError(f"cannot serialize {type(msg).__name__}")

"""Hybrid parametric/particle BP for joint clock and location estimation.

The per-agent operations (prediction, distance, clock and position messages,
particle products, beliefs, estimates) are plain functions. :func:`run_time_step`
drives them over a whole network for one time step as a sequence of
bulk-synchronous supersteps: every agent computes its outgoing messages from
what it received in the previous iteration, then all messages are exchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .measurement import LikelihoodMatrices, TimestampBlock, build_matrices
from .messages import (
    UNINFORMATIVE,
    AnnulusMixture,
    Gaussian,
    GaussianMixture,
    InfoGaussian,
    InfoMixture,
    NumericalError,
    info_sum,
    is_uninformative,
    logsumexp,
    moment_match_mixture,
    spd_inv,
    trace_of_cov,
)
from .models import P, ClockState, LocationState

MIN_NORM = 1e-6          # m, floor for linearization vectors
MIN_DIST_VAR = 1e-8      # m^2, floor for distance-message variances
DEFAULT_DIRECTION = np.array([1.0, 0.0])
CLOCK_EPS = 1e-18        # covariance of pinned clock states
POSITION_EPS = 1e-12     # m^2, covariance of pinned locations


@dataclass(frozen=True)
class EngineConfig:
    Q: int = 5
    tau: float = 2.0
    tau1: float = 15.0
    tau2: float = 40.0
    L_total: int = 1000
    mu_d: float = 27.0
    sigma_d: float = 10.0
    sigma_v: float = 10e-9
    min_ess: float = 10.0
    # Fuse the prediction into the clock belief (needed for a proper posterior).
    belief_includes_prediction: bool = True
    # Pass censored messages into products as explicit constant factors.
    constant_uninformative: bool = False

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError("Q must be >= 1")
        for name in ("tau", "tau1", "tau2", "sigma_d", "sigma_v"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.L_total < 100:
            raise ValueError("L_total must be >= 100")

    @property
    def distance_prior(self) -> Gaussian:
        return Gaussian([self.mu_d], [[self.sigma_d ** 2]])


@dataclass
class AgentBeliefs:
    b_theta: Gaussian
    b_x: GaussianMixture


@dataclass
class LinkMessages:
    """What agent i keeps about its link to one neighbor j."""
    mats: LinkFactor
    zeta_f_d: Gaussian
    zeta_phi_d: Gaussian
    zeta_f_theta: Gaussian | None = None
    zeta_phi_p: AnnulusMixture | None = None


# ---------------------------------------------------------------- prediction

def predict_clock(b_prev: Gaussian, Sigma_u1) -> Gaussian:
    return Gaussian(b_prev.mean.copy(), b_prev.cov + np.asarray(Sigma_u1))


def predict_location(b_prev: GaussianMixture, G1, Sigma_u2) -> GaussianMixture:
    G1 = np.asarray(G1)
    means = b_prev.means @ G1.T
    covs = np.einsum("ij,sjk,lk->sil", G1, b_prev.covs, G1) + np.asarray(Sigma_u2)[None]
    return GaussianMixture(b_prev.weights.copy(), means, covs)


def project_position(msg_x: GaussianMixture) -> GaussianMixture:
    return GaussianMixture(msg_x.weights.copy(), msg_x.means @ P.T,
                           np.einsum("ij,sjk,lk->sil", P, msg_x.covs, P))


# ------------------------------------------------------- linear-Gaussian parts

def _sqrt_info(mean, cov):
    """Rows ``W`` and right-hand side ``W mean`` with ``W^T W = cov^-1``."""
    d = np.sqrt(np.diag(cov))
    E = cov / np.outer(d, d)
    L = np.linalg.cholesky(E)
    W = linalg.solve_triangular(L, np.diag(1.0 / d), lower=True, check_finite=False)
    return W, W @ mean


def _recenter(M):
    """Shift a clock block ``[+-1, -+y]`` to its mean stamp time.

    Returns ``M T^-1`` and ``T`` for the variables ``T theta`` with
    ``T = [[1, -t], [0, 1]]``. The shifted columns are nearly orthogonal
    instead of nearly collinear, which keeps the elimination accurate.
    """
    t = -np.mean(M[:, 0] * M[:, 1])
    return M + np.outer(M[:, 0], [0.0, t]), np.array([[1.0, -t], [0.0, 1.0]])


@dataclass(frozen=True)
class LinkFactor:
    """Time-stamp regression of one link, prepared once per time step.

    ``R`` is a triangular factor of ``[A T_i^-1, B T_j^-1, a_d]``: it has the
    same Gram matrix, so it can stand in for all the stamp rows.
    """
    R: np.ndarray
    T_i: np.ndarray
    T_j: np.ndarray


def link_factor(mats: LikelihoodMatrices) -> LinkFactor:
    Ac, Ti = _recenter(mats.A)
    Bc, Tj = _recenter(mats.B)
    R = np.linalg.qr(np.hstack([Ac, Bc, mats.a_d[:, None]]), mode="r")
    return LinkFactor(R, Ti, Tj)


def _as_factor(mats) -> LinkFactor:
    return mats if isinstance(mats, LinkFactor) else link_factor(mats)


def _linear_marginal(data_rows, nn, sigma_v, prior_mean, prior_cov, what):
    """Square-root information ``(R, c)`` of
    ``int exp(-|H_n z + H_k x|^2 / 2 sigma_v^2) N(z; m, S) dz`` as a function
    of ``x``, i.e. proportional to ``exp(-|R x - c|^2 / 2)``.

    ``data_rows`` is ``[H_n H_k]`` (or any matrix with the same Gram matrix)
    and the first ``nn`` columns are integrated out. Solved through a QR
    factorization of the whitened stacked system. This avoids forming
    ``D^T D``, whose entries cancel catastrophically when clock offsets of
    seconds meet time-stamp noise of nanoseconds.
    """
    nk = data_rows.shape[1] - nn
    try:
        W, b = _sqrt_info(prior_mean, prior_cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what}: incoming covariance not positive definite") from exc
    M = np.zeros((len(data_rows) + nn, nn + nk + 1))
    M[:len(data_rows), :-1] = data_rows / sigma_v
    M[len(data_rows):, :nn] = W
    M[len(data_rows):, -1] = b
    # Heaviest rows first keeps Householder QR accurate on row-weighted systems.
    M = M[np.argsort(-np.max(np.abs(M), axis=1), kind="stable")]
    R = np.linalg.qr(M, mode="r")
    if R.shape[0] < nn + nk + 1:
        R = np.vstack([R, np.zeros((nn + nk + 1 - R.shape[0], R.shape[1]))])
    return R[nn:nn + nk, nn:nn + nk], R[nn:nn + nk, -1]


def _shift_prior(g: Gaussian, T) -> tuple[np.ndarray, np.ndarray]:
    return T @ g.mean, T @ g.cov @ T.T


def zeta_f_d(mats: LikelihoodMatrices | LinkFactor, eta_i: Gaussian, eta_j: Gaussian,
             sigma_v: float) -> Gaussian:
    """Distance message from the time stamps, clocks integrated out."""
    f = _as_factor(mats)
    mi, Si = _shift_prior(eta_i, f.T_i)
    mj, Sj = _shift_prior(eta_j, f.T_j)
    S1 = np.zeros((4, 4))
    S1[:2, :2], S1[2:, 2:] = Si, Sj
    r, c = _linear_marginal(f.R, 4, sigma_v, np.concatenate([mi, mj]), S1, "zeta_f_d")
    if not abs(r[0, 0]) > 0:
        raise NumericalError("zeta_f_d: distance information is not positive")
    var = max(1.0 / r[0, 0] ** 2, MIN_DIST_VAR)
    return Gaussian([c[0] / r[0, 0]], [[var]])


def zeta_f_theta(mats: LikelihoodMatrices | LinkFactor, eta_theta_j: Gaussian,
                 zeta_phi_d: Gaussian, sigma_v: float) -> Gaussian:
    """Clock message to agent i, neighbor clock and distance integrated out."""
    f = _as_factor(mats)
    mj, Sj = _shift_prior(eta_theta_j, f.T_j)
    S2 = np.zeros((3, 3))
    S2[:2, :2], S2[2, 2] = Sj, zeta_phi_d.cov[0, 0]
    # Columns reordered to (theta_j, d | theta_i).
    R, c = _linear_marginal(f.R[:, [2, 3, 4, 0, 1]], 3, sigma_v,
                            np.concatenate([mj, zeta_phi_d.mean]), S2, "zeta_f_theta")
    # Moment form straight from the triangular factor, then back to
    # (nu, lambda). Inverting an information matrix in the original
    # coordinates would lose digits to the strong nu/lambda correlation.
    if not np.all(np.abs(np.diag(R)) > 0):
        raise NumericalError("zeta_f_theta: clock information is singular")
    Rinv = linalg.solve_triangular(R, np.eye(2), check_finite=False)
    Tinv = np.array([[1.0, -f.T_i[0, 1]], [0.0, 1.0]])
    cov = Tinv @ (Rinv @ Rinv.T) @ Tinv.T
    return Gaussian(Tinv @ linalg.solve_triangular(R, c, check_finite=False), 0.5 * (cov + cov.T))


def eta_f_theta(zeta_f: Gaussian, zeta_f_thetas) -> Gaussian:
    """Information-form product of the prediction and neighbor clock messages."""
    L, h = info_sum([zeta_f, *zeta_f_thetas], 2)
    return InfoGaussian(L, h).to_moment()


def belief_theta(zeta_f_thetas, zeta_f: Gaussian | None = None) -> Gaussian:
    """Clock belief from the neighbor clock messages, plus ``zeta_f`` if given.

    Constant terms are ignored; at least one informative term is required.
    """
    terms = [t for t in zeta_f_thetas if not is_uninformative(t)]
    if zeta_f is not None:
        terms = [zeta_f, *terms]
    if not terms:
        raise ValueError("belief_theta needs at least one informative term")
    L, h = info_sum(terms, 2)
    return InfoGaussian(L, h).to_moment()


# ------------------------------------------------------------ position parts

def _unit(v):
    n = np.linalg.norm(v)
    if n < MIN_NORM:
        return DEFAULT_DIRECTION.copy(), MIN_NORM
    return v / n, n


def zeta_phi_d(eta_p_i: GaussianMixture, eta_p_j: GaussianMixture) -> Gaussian:
    """Distance message from two position messages, linearized and moment matched."""
    ws, ms, vs = [], [], []
    for r in range(eta_p_i.S):
        for s in range(eta_p_j.S):
            u, n = _unit(eta_p_i.means[r] - eta_p_j.means[s])
            ws.append(eta_p_i.weights[r] * eta_p_j.weights[s])
            ms.append(n)
            vs.append(u @ (eta_p_i.covs[r] + eta_p_j.covs[s]) @ u)
    g = moment_match_mixture(np.array(ws), np.array(ms), np.array(vs))
    return Gaussian(g.mean, np.maximum(g.cov, MIN_DIST_VAR))


def zeta_phi_p(eta_p_j: GaussianMixture, zeta_f_d: Gaussian, anchor) -> AnnulusMixture:
    """Annulus message about p_i from the neighbor position and the distance.

    ``anchor`` is the point at which the distance is linearized, normally the
    mean of agent i's own previous position message.
    """
    s2 = float(zeta_f_d.cov[0, 0])
    widths = []
    for s in range(eta_p_j.S):
        u, _ = _unit(eta_p_j.means[s] - np.asarray(anchor))
        widths.append(u @ eta_p_j.covs[s] @ u + s2)
    return AnnulusMixture(max(float(zeta_f_d.mean[0]), 0.0), eta_p_j.means.copy(),
                          np.array(widths), eta_p_j.weights.copy())


# ---------------------------------------------------------- particle products

def _gm_logpdf(mix: GaussianMixture, pts) -> np.ndarray:
    out = []
    for w, m, C in zip(mix.weights, mix.means, mix.covs):
        L = np.linalg.cholesky(C)
        z = linalg.solve_triangular(L, (pts - m).T, lower=True, check_finite=False)
        out.append(np.log(w) - 0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L)))
                   - 0.5 * len(m) * np.log(2 * np.pi))
    return logsumexp(np.array(out), axis=0)


def _stack_annuli(annuli):
    """Per-factor arrays padded to the largest component count (missing
    components get weight 0)."""
    F = len(annuli)
    S = max(a.S for a in annuli)
    centers = np.zeros((F, S, 2))
    widths2 = np.ones((F, S))
    logw = np.full((F, S), -np.inf)
    radius = np.array([a.radius for a in annuli])
    for k, a in enumerate(annuli):
        centers[k, :a.S] = a.centers
        widths2[k, :a.S] = a.widths2
        logw[k, :a.S] = np.log(a.weights)
    return centers, widths2, logw, radius


def _sample_annuli(annuli, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws from each annulus: center of a randomly chosen component
    plus a radius ``|N(r, sigma2_s)|`` in a uniformly random direction."""
    centers, widths2, logw, radius = _stack_annuli(annuli)
    F = len(annuli)
    comp = (rng.random((F, n)) >= np.exp(logw[:, 0])[:, None]).astype(int)
    comp = np.minimum(comp, centers.shape[1] - 1)
    rows = np.arange(F)[:, None]
    rho = np.abs(radius[:, None] + np.sqrt(widths2[rows, comp]) * rng.standard_normal((F, n)))
    phi = rng.uniform(0.0, 2 * np.pi, (F, n))
    pts = centers[rows, comp] + rho[..., None] * np.stack([np.sin(phi), np.cos(phi)], -1)
    return pts.reshape(F * n, 2)


def _annulus_terms(annuli, pts):
    """Log of each annulus function and of the density of its sampler, shape (F, n)."""
    centers, widths2, logw, radius = _stack_annuli(annuli)
    diff = pts[None, None] - centers[:, :, None]                 # (F, S, n, 2)
    rho = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    s2 = widths2[..., None]
    r = radius[:, None, None]
    lw = logw[..., None]
    e = (r - rho) ** 2 / (2 * s2)
    log_f = lw - e
    # Folded normal radius, spread uniformly over the circle of that radius.
    log_q = (lw - e + np.log1p(np.exp(-2 * r * rho / s2)) - 0.5 * np.log(2 * np.pi * s2)
             - np.log(2 * np.pi * np.maximum(rho, 1e-300)))
    if log_f.shape[1] == 1:
        return log_f[:, 0], log_q[:, 0]
    return np.logaddexp(log_f[:, 0], log_f[:, 1]), np.logaddexp(log_q[:, 0], log_q[:, 1])


def _sample_gm(mix: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    comp = rng.choice(mix.S, size=n, p=mix.weights) if mix.S > 1 else np.zeros(n, int)
    z = rng.standard_normal((n, mix.dim))
    out = np.empty((n, mix.dim))
    for s in range(mix.S):
        sel = comp == s
        out[sel] = mix.means[s] + z[sel] @ np.linalg.cholesky(mix.covs[s]).T
    return out


def particle_product(factors, L_total: int, rng: np.random.Generator):
    """Weighted particles for the product of ``factors`` by importance sampling.

    The proposal is the equal-weight mixture of the factors (each drawn with
    ``L_total // len(factors)`` particles); weights are product over proposal.
    Factors are Gaussians, Gaussian mixtures or annulus mixtures; constant
    factors are skipped.
    """
    factors = [f for f in factors if not is_uninformative(f)]
    if not factors:
        raise ValueError("particle_product needs at least one non-constant factor")
    L = L_total // len(factors)
    gms = [GaussianMixture.single(f) if isinstance(f, Gaussian) else f
           for f in factors if not isinstance(f, AnnulusMixture)]
    annuli = [f for f in factors if isinstance(f, AnnulusMixture)]
    parts = [_sample_gm(g, L, rng) for g in gms]
    if annuli:
        parts.append(_sample_annuli(annuli, L, rng))
    pts = np.vstack(parts)
    log_target = np.zeros(len(pts))
    log_q = []
    for g in gms:
        lp = _gm_logpdf(g, pts)
        log_target += lp
        log_q.append(lp)
    if annuli:
        lf, lq = _annulus_terms(annuli, pts)
        log_target += lf.sum(axis=0)
        log_q.extend(lq)
    logw = log_target - logsumexp(np.array(log_q), axis=0)
    # Weights live in log space, so products of sharp factors that would
    # underflow in linear arithmetic still normalize; only exact zeros fail.
    if not np.any(np.isfinite(logw)):
        raise NumericalError("particle_product: all importance weights are zero")
    w = np.exp(logw - np.max(logw))
    return pts, w / w.sum()


def eta_phi_p_particles(zeta_psi_p: GaussianMixture, zeta_phis, L_total: int,
                        rng: np.random.Generator):
    return particle_product([zeta_psi_p, *zeta_phis], L_total, rng)


def _weighted_moments(pts, w):
    m = w @ pts
    dev = pts - m
    return m, (w[:, None] * dev).T @ dev


def fit_particles(pts, weights, tau1: float, tau2: float, min_ess: float = 10.0,
                  lloyd_iters: int = 10):
    """Gaussian or two-component mixture fit of weighted particles.

    Spread below ``tau1`` (trace of the covariance) gives a single Gaussian.
    Otherwise the particles are split in two by weighted 2-means seeded along
    the principal axis; if both clusters have spread below ``tau2`` the result
    is a two-component mixture, else the particles are deemed uninformative.
    """
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    if 1.0 / np.sum(w * w) < min_ess:
        return UNINFORMATIVE
    pts = np.asarray(pts, dtype=float)
    floor = 1e-9 * np.eye(pts.shape[1])
    m, C = _weighted_moments(pts, w)
    if np.trace(C) <= tau1:
        return GaussianMixture(np.ones(1), m[None], (C + floor)[None])
    evals, evecs = np.linalg.eigh(C)
    step = np.sqrt(evals[-1]) * evecs[:, -1]
    seeds = np.array([m + step, m - step])
    for _ in range(lloyd_iters):
        lab = np.argmin(((pts[:, None, :] - seeds[None]) ** 2).sum(-1), axis=1)
        mass = np.array([w[lab == k].sum() for k in range(2)])
        if np.any(mass <= 0):
            return UNINFORMATIVE
        new = np.array([w[lab == k] @ pts[lab == k] / mass[k] for k in range(2)])
        if np.array_equal(new, seeds):
            break
        seeds = new
    lab = np.argmin(((pts[:, None, :] - seeds[None]) ** 2).sum(-1), axis=1)
    means, covs, mass = [], [], []
    for k in range(2):
        wk = w[lab == k]
        if wk.sum() <= 0:
            return UNINFORMATIVE
        mk, Ck = _weighted_moments(pts[lab == k], wk / wk.sum())
        if np.trace(Ck) > tau2:
            return UNINFORMATIVE
        means.append(mk)
        covs.append(Ck + floor)
        mass.append(wk.sum())
    return GaussianMixture(np.array(mass), np.array(means), np.array(covs))


def eta_psi_p(zeta_phis, L_total: int, tau1: float, tau2: float,
              rng: np.random.Generator, min_ess: float = 10.0):
    """Position message from all neighbor annuli; constant when there are none."""
    zeta_phis = [z for z in zeta_phis if not is_uninformative(z)]
    if not zeta_phis:
        return UNINFORMATIVE
    pts, w = particle_product(zeta_phis, L_total, rng)
    return fit_particles(pts, w, tau1, tau2, min_ess)


def classify_position(msg, tau2: float):
    """Parametric position messages count as informative when every component
    has covariance trace at most ``tau2``."""
    if is_uninformative(msg):
        return UNINFORMATIVE
    if np.all(np.trace(msg.covs, axis1=1, axis2=2) <= tau2):
        return msg
    return UNINFORMATIVE


def is_clock_informative(msg, tau: float) -> bool:
    return trace_of_cov(msg) < tau


# ------------------------------------------------------------------- beliefs

def zeta_psi_x(eta_psi: GaussianMixture | object):
    """Lift a position message to the 4-D location state in information form."""
    if is_uninformative(eta_psi):
        return UNINFORMATIVE
    infos, vecs = [], []
    for s in range(eta_psi.S):
        Lp = spd_inv(eta_psi.covs[s], "zeta_psi_x")
        infos.append(P.T @ Lp @ P)
        vecs.append(P.T @ Lp @ eta_psi.means[s])
    return InfoMixture(eta_psi.weights.copy(), np.array(infos), np.array(vecs))


def _log_gauss(x, cov):
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, x)
    return -0.5 * z @ z - np.sum(np.log(np.diag(L))) - 0.5 * len(x) * np.log(2 * np.pi)


def belief_x(zeta_psi: InfoMixture | object, zeta_l: GaussianMixture) -> GaussianMixture:
    """Product of the lifted position message and the predicted location.

    Component weights are the exact integrals of the pairwise products,
    ``w_r w_s N(mu_r; P m_s, S_r + P C_s P^T)``; with four products the two
    largest are kept.
    """
    if is_uninformative(zeta_psi):
        return zeta_l
    logw, means, covs = [], [], []
    for r in range(zeta_psi.S):
        Lr, hr = zeta_psi.infos[r], zeta_psi.info_vecs[r]
        S_p = spd_inv(Lr[:2, :2], "belief_x")
        mu_p = S_p @ hr[:2]
        for s in range(zeta_l.S):
            Ls = spd_inv(zeta_l.covs[s], "belief_x")
            cov = spd_inv(Lr + Ls, "belief_x")
            means.append(cov @ (hr + Ls @ zeta_l.means[s]))
            covs.append(cov)
            logw.append(np.log(zeta_psi.weights[r]) + np.log(zeta_l.weights[s])
                        + _log_gauss(mu_p - P @ zeta_l.means[s], S_p + P @ zeta_l.covs[s] @ P.T))
    logw = np.array(logw)
    order = np.argsort(-logw, kind="stable")[:2]
    lw = logw[order]
    w = np.exp(lw - lw.max())
    return GaussianMixture(w, np.array(means)[order], np.array(covs)[order])


def estimate(beliefs: AgentBeliefs):
    """MMSE-style estimates ``(theta_hat, x_hat, alpha_hat, beta_hat)``."""
    th = beliefs.b_theta.mean
    if not th[1] > 0:
        raise NumericalError(f"estimate: non-positive lambda estimate {th[1]}")
    alpha = 1.0 / th[1]
    x = beliefs.b_x.mean
    return ClockState.from_array(th), LocationState.from_array(x), alpha, alpha * th[0]


def comm_payload(eta_phi, eta_f) -> int:
    """Real numbers sent to one neighbor in one iteration.

    A position message costs 5 reals per component (mean and the distinct
    covariance entries) plus one weight for two components; a constant
    position message costs one flag. The clock message costs 5.
    """
    if is_uninformative(eta_phi):
        n_pos = 1
    else:
        n_pos = 5 * eta_phi.S + (1 if eta_phi.S == 2 else 0)
    n_clk = 0 if eta_f is None else 5
    return n_pos + n_clk


# ------------------------------------------------------------ network driver

@dataclass
class StepResult:
    beliefs: list[AgentBeliefs]
    # Beliefs after each iteration q = 0..Q when requested, else None.
    per_iteration: list[list[AgentBeliefs]] | None
    # payloads[q][(i, j)] = reals sent from i to j in iteration q.
    payloads: list[dict]
    predictions: list[AgentBeliefs] = field(default_factory=list)


def run_time_step(prior: list[AgentBeliefs], links: dict, config: EngineConfig,
                  Sigma_u1: list, G1, Sigma_u2, rng_for: Callable,
                  pinned_clock: dict | None = None, pinned_loc: dict | None = None,
                  predict: bool = True, per_iteration: bool = False) -> StepResult:
    """One time step for the whole network.

    ``prior`` holds each agent's belief from the previous step (used directly
    as the prediction when ``predict`` is false). ``links`` maps ordered pairs
    ``(i, j)`` with ``i < j`` to the time stamps of their exchange.
    ``rng_for(q, i, j)`` returns the particle generator for agent ``i``'s
    product at iteration ``q`` excluding neighbor ``j`` (``j = -1`` for the
    product over all of i's informative neighbors that is shared by its
    non-informative neighbors, ``j = -2`` for the belief-stage product). Pinned agents (index ->
    Gaussian over the clock / GaussianMixture over the location) keep those
    messages and beliefs fixed.
    """
    pinned_clock = pinned_clock or {}
    pinned_loc = pinned_loc or {}
    cfg = config
    n_ag = len(prior)
    nbrs = [[] for _ in range(n_ag)]
    link = [dict() for _ in range(n_ag)]
    d0 = cfg.distance_prior
    for (i, j), block in sorted(links.items()):
        if not i < j:
            raise ValueError("links must be keyed by (i, j) with i < j")
        nbrs[i].append(j)
        nbrs[j].append(i)
        link[i][j] = LinkMessages(link_factor(build_matrices(block)), d0, d0)
        link[j][i] = LinkMessages(link_factor(build_matrices(block.swapped())), d0, d0)

    # Step 1: prediction.
    pred_theta, pred_x = [], []
    for i, b in enumerate(prior):
        if i in pinned_clock:
            pt = pinned_clock[i]
        else:
            pt = predict_clock(b.b_theta, Sigma_u1[i]) if predict else b.b_theta
        if i in pinned_loc:
            px = pinned_loc[i]
        else:
            px = predict_location(b.b_x, G1, Sigma_u2) if predict else b.b_x
        pred_theta.append(pt)
        pred_x.append(px)
    zeta_psi = [project_position(px) for px in pred_x]

    # Iteration 0 messages.
    eta_f = [{j: pred_theta[i] for j in nbrs[i]} for i in range(n_ag)]
    eta_phi = [{j: classify_position(zeta_psi[i], cfg.tau2) for j in nbrs[i]} for i in range(n_ag)]
    payloads = [_payloads(eta_phi, eta_f)]
    tc_sets = [set() for _ in range(n_ag)]
    tp_sets = [set() for _ in range(n_ag)]

    def beliefs_now(q):
        out = []
        for i in range(n_ag):
            out.append(AgentBeliefs(_clock_belief(i), _loc_belief(i, q)))
        return out

    def _clock_belief(i):
        if i in pinned_clock:
            return pinned_clock[i]
        terms = [link[i][j].zeta_f_theta for j in sorted(tc_sets[i])]
        if cfg.constant_uninformative:
            terms += [InfoGaussian(np.zeros((2, 2)), np.zeros(2))
                      for j in nbrs[i] if j not in tc_sets[i]]
        if cfg.belief_includes_prediction:
            return belief_theta(terms, pred_theta[i])
        if any(not is_uninformative(t) for t in terms):
            return belief_theta(terms)
        return pred_theta[i]

    def _loc_belief(i, q):
        if i in pinned_loc:
            return pinned_loc[i]
        factors = [link[i][j].zeta_phi_p for j in sorted(tp_sets[i])]
        if cfg.constant_uninformative:
            factors += [UNINFORMATIVE for j in nbrs[i] if j not in tp_sets[i]]
        eta_psi = eta_psi_p(factors, cfg.L_total, cfg.tau1, cfg.tau2,
                            rng_for(q, i, -2), cfg.min_ess)
        return belief_x(zeta_psi_x(eta_psi), pred_x[i])

    history = [beliefs_now(0)] if per_iteration else None

    for q in range(1, cfg.Q + 1):
        # 2.1: informative incoming messages (computed from iteration q-1).
        for i in range(n_ag):
            tc_sets[i] = {j for j in nbrs[i] if is_clock_informative(eta_f[j][i], cfg.tau)}
            tp_sets[i] = {j for j in nbrs[i] if not is_uninformative(eta_phi[j][i])}
        new_f = [dict() for _ in range(n_ag)]
        new_phi = [dict() for _ in range(n_ag)]
        for i in range(n_ag):
            _agent_iteration(i, q, nbrs[i], link[i], eta_f, eta_phi, tc_sets[i], tp_sets[i],
                             pred_theta[i], zeta_psi[i], i in pinned_clock, i in pinned_loc,
                             cfg, rng_for, new_f[i], new_phi[i])
        eta_f, eta_phi = new_f, new_phi
        payloads.append(_payloads(eta_phi, eta_f))
        if per_iteration:
            history.append(beliefs_now(q))

    beliefs = history[-1] if per_iteration else beliefs_now(cfg.Q)
    preds = [AgentBeliefs(pt, px) for pt, px in zip(pred_theta, pred_x)]
    return StepResult(beliefs, history, payloads, preds)


def _payloads(eta_phi, eta_f):
    return {(i, j): comm_payload(eta_phi[i][j], eta_f[i][j])
            for i in range(len(eta_f)) for j in eta_f[i]}


def _agent_iteration(i, q, nbrs, link, eta_f, eta_phi, Tc, Tp, pred_theta, zeta_psi,
                     clock_pinned, loc_pinned, cfg, rng_for, out_f, out_phi):
    """Steps 2.2 to 2.7 for agent ``i``; writes its new outgoing messages."""
    for j in sorted(Tc):
        if is_clock_informative(eta_f[i][j], cfg.tau):
            try:
                link[j].zeta_f_d = zeta_f_d(link[j].mats, eta_f[i][j], eta_f[j][i], cfg.sigma_v)
            except NumericalError as exc:
                raise NumericalError(f"{exc} (link {i}->{j}, iteration {q})") from exc
    own_phi = {j: eta_phi[i][j] for j in nbrs}
    for j in sorted(Tp):
        if not is_uninformative(own_phi[j]):
            link[j].zeta_phi_d = zeta_phi_d(own_phi[j], eta_phi[j][i])
    if not clock_pinned:
        for j in sorted(Tc):
            try:
                link[j].zeta_f_theta = zeta_f_theta(link[j].mats, eta_f[j][i],
                                                    link[j].zeta_phi_d, cfg.sigma_v)
            except NumericalError as exc:
                raise NumericalError(f"{exc} (link {i}->{j}, iteration {q})") from exc
    if not loc_pinned:
        for j in sorted(Tp):
            own = own_phi[j]
            anchor = (own if not is_uninformative(own) else zeta_psi).mean
            link[j].zeta_phi_p = zeta_phi_p(eta_phi[j][i], link[j].zeta_f_d, anchor)

    # 2.6: clock messages.
    for j in nbrs:
        if clock_pinned:
            out_f[j] = pred_theta
            continue
        terms = [link[k].zeta_f_theta for k in sorted(Tc) if k != j]
        if cfg.constant_uninformative:
            terms += [InfoGaussian(np.zeros((2, 2)), np.zeros(2)) for k in nbrs if k not in Tc]
        out_f[j] = eta_f_theta(pred_theta, terms)

    # 2.7: position messages; neighbors outside Tp share one product.
    shared = None
    for j in nbrs:
        if loc_pinned:
            out_phi[j] = classify_position(zeta_psi, cfg.tau2)
            continue
        factors = [link[k].zeta_phi_p for k in sorted(Tp) if k != j]
        if cfg.constant_uninformative:
            factors += [UNINFORMATIVE for k in nbrs if k not in Tp or k == j]
        if not any(not is_uninformative(f) for f in factors):
            # Product reduces to the prediction itself.
            out_phi[j] = classify_position(zeta_psi, cfg.tau2)
            continue
        if j not in Tp:
            if shared is None:
                pts, w = eta_phi_p_particles(zeta_psi, factors, cfg.L_total, rng_for(q, i, -1))
                shared = fit_particles(pts, w, cfg.tau1, cfg.tau2, cfg.min_ess)
            out_phi[j] = shared
        else:
            pts, w = eta_phi_p_particles(zeta_psi, factors, cfg.L_total, rng_for(q, i, j))
            out_phi[j] = fit_particles(pts, w, cfg.tau1, cfg.tau2, cfg.min_ess)

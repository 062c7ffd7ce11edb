"""Independent reference computations used by the tests.

Everything here is written directly from the model definitions, without
going through the package's numerical routines: dense joint Gaussians solved
in extended precision, Monte-Carlo sampling, and grid integration.
"""
from __future__ import annotations

import mpmath as mp
import numpy as np

from coslas.measurement import SPEED_OF_LIGHT, TimestampBlock

mp.mp.dps = 60


def mp_matrix(a):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return mp.matrix([[mp.mpf(float(x)) for x in row] for row in a])


def to_np(m):
    return np.array([[float(m[i, j]) for j in range(m.cols)] for i in range(m.rows)])


def matrices(block: TimestampBlock):
    """Regression matrices written out from the stamp definitions."""
    rows_A, rows_B = [], []
    for yt, y in zip(block.ytilde_i_to_j, block.y_i_to_j):
        rows_A.append([1.0, -yt])
        rows_B.append([-1.0, y])
    for yt, y in zip(block.ytilde_j_to_i, block.y_j_to_i):
        rows_A.append([-1.0, y])
        rows_B.append([1.0, -yt])
    a_d = -np.ones(len(rows_A)) / SPEED_OF_LIGHT
    return np.array(rows_A), np.array(rows_B), a_d


def closed_form_distance(A, B, a_d, mu_i, S_i, mu_j, S_j, sigma_v):
    """Distance message by the closed-form ``q``-vector expressions, evaluated
    in 60-digit arithmetic. Returns (mean, variance)."""
    D = mp_matrix(np.hstack([A, B]))
    ad = mp_matrix(a_d[:, None])
    S1 = np.zeros((4, 4))
    S1[:2, :2], S1[2:, 2:] = S_i, S_j
    S1inv = mp_matrix(S1) ** -1
    mu1 = mp_matrix(np.concatenate([mu_i, mu_j])[:, None])
    sv2 = mp.mpf(float(sigma_v)) ** 2
    qT = ad.T * D * (D.T * D + sv2 * S1inv) ** -1
    var = sv2 / ((ad.T * ad)[0] - (qT * D.T * ad)[0])
    mean = -var * (qT * S1inv * mu1)[0]
    return float(mean), float(var)


def closed_form_clock(A, B, a_d, mu_j, S_j, mu_d, var_d, sigma_v):
    """Clock message by the closed-form ``Q``-matrix expressions (60 digits).
    Returns (mean, covariance)."""
    Am = mp_matrix(A)
    C = mp_matrix(np.hstack([B, a_d[:, None]]))
    S2 = np.zeros((3, 3))
    S2[:2, :2], S2[2, 2] = S_j, var_d
    S2inv = mp_matrix(S2) ** -1
    mu2 = mp_matrix(np.concatenate([mu_j, [mu_d]])[:, None])
    sv2 = mp.mpf(float(sigma_v)) ** 2
    Qm = Am.T * C * (C.T * C + sv2 * S2inv) ** -1
    cov = sv2 * (Am.T * Am - Qm * C.T * Am) ** -1
    mean = -cov * Qm * S2inv * mu2
    return to_np(mean)[:, 0], to_np(cov)


class JointGaussian:
    """Dense linear-Gaussian model ``exp(-|H z|^2 / 2 s^2) prod N(z_b; m_b, S_b)``
    over a stacked variable ``z``, solved in 60-digit arithmetic."""

    def __init__(self, dim: int):
        self.dim = dim
        self.J = mp.zeros(dim, dim)
        self.h = mp.zeros(dim, 1)

    def add_prior(self, idx, mean, cov):
        Sinv = mp_matrix(cov) ** -1
        m = mp_matrix(np.asarray(mean, dtype=float)[:, None])
        hv = Sinv * m
        for a, ia in enumerate(idx):
            self.h[ia] += hv[a]
            for b, ib in enumerate(idx):
                self.J[ia, ib] += Sinv[a, b]

    def add_rows(self, idx, H, sigma_v):
        Hm = mp_matrix(H)
        G = Hm.T * Hm / mp.mpf(float(sigma_v)) ** 2
        for a, ia in enumerate(idx):
            for b, ib in enumerate(idx):
                self.J[ia, ib] += G[a, b]

    def marginal(self, idx):
        cov = self.J ** -1
        mean = cov * self.h
        m = np.array([float(mean[i]) for i in idx])
        C = np.array([[float(cov[i, j]) for j in idx] for i in idx])
        return m, C


def distance_moments_mc(mu_i, S_i, mu_j, S_j, n, rng):
    """Mean and variance of |p_i - p_j| by sampling."""
    pi = rng.multivariate_normal(mu_i, S_i, size=n)
    pj = rng.multivariate_normal(mu_j, S_j, size=n)
    d = np.linalg.norm(pi - pj, axis=1)
    return d.mean(), d.var()


def gaussian_product_2d(means, covs):
    """Mean and covariance of a product of 2-D Gaussians."""
    L = sum(np.linalg.inv(c) for c in covs)
    h = sum(np.linalg.inv(c) @ m for m, c in zip(means, covs))
    C = np.linalg.inv(L)
    return C @ h, C


def grid_product(funcs, lo, hi, n=601):
    """Normalized product of 2-D functions on a grid; returns (points, weights)."""
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    val = np.ones(len(pts))
    for f in funcs:
        val = val * f(pts)
    return pts, val / val.sum()

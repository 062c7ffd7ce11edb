"""Asymmetric two-way time stamping and the resulting likelihood terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import AgentState, ClockState, state_to_params

SPEED_OF_LIGHT = 299_792_458.0  # m/s


@dataclass(frozen=True)
class TimestampBlock:
    """Time stamps of one packet exchange between agents ``i`` and ``j``.

    ``y_i_to_j`` are receive stamps at j (local time of j) of packets sent by i,
    ``ytilde_i_to_j`` the matching transmit stamps at i (local time of i);
    the ``j_to_i`` arrays are the same for the reverse direction.
    """
    y_i_to_j: np.ndarray
    y_j_to_i: np.ndarray
    ytilde_i_to_j: np.ndarray
    ytilde_j_to_i: np.ndarray

    def __post_init__(self):
        if len(self.y_i_to_j) != len(self.ytilde_i_to_j) or len(self.y_i_to_j) < 1:
            raise ValueError("i->j stamp vectors must have equal length >= 1")
        if len(self.y_j_to_i) != len(self.ytilde_j_to_i) or len(self.y_j_to_i) < 1:
            raise ValueError("j->i stamp vectors must have equal length >= 1")
        for name in ("ytilde_i_to_j", "ytilde_j_to_i"):
            if np.any(np.diff(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be strictly increasing")

    @property
    def K_ij(self) -> int:
        return len(self.y_i_to_j)

    @property
    def K_ji(self) -> int:
        return len(self.y_j_to_i)

    def swapped(self) -> "TimestampBlock":
        """The same exchange seen from agent j."""
        return TimestampBlock(self.y_j_to_i, self.y_i_to_j, self.ytilde_j_to_i, self.ytilde_i_to_j)

    def to_record(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)]
                for k in ("y_i_to_j", "y_j_to_i", "ytilde_i_to_j", "ytilde_j_to_i")}


@dataclass(frozen=True)
class LikelihoodMatrices:
    A: np.ndarray
    B: np.ndarray
    a_d: np.ndarray


def exchange_schedule(t0: float, K_ij: int, K_ji: int, spacing: float = 1e-3):
    """Interleaved true transmit times: i sends on the grid, j half a slot later."""
    s_ij = t0 + spacing * np.arange(K_ij)
    s_ji = t0 + spacing * (np.arange(K_ji) + 0.5)
    return s_ij, s_ji


def simulate_exchange(state_i: AgentState, state_j: AgentState, K_ij: int, K_ji: int,
                      sigma_v: float, schedule, rng: np.random.Generator) -> TimestampBlock:
    """Stamp ``K_ij`` packets i->j and ``K_ji`` packets j->i.

    ``schedule`` is a pair ``(s_ij, s_ji)`` of true transmit times. Clock and
    location states are held fixed over the exchange.
    """
    s_ij, s_ji = (np.asarray(s, dtype=float) for s in schedule)
    if len(s_ij) != K_ij or len(s_ji) != K_ji:
        raise ValueError("schedule lengths must match packet counts")
    ci = state_to_params(state_i.clock)
    cj = state_to_params(state_j.clock)
    delay = np.linalg.norm(state_i.loc.p - state_j.loc.p) / SPEED_OF_LIGHT
    r_ij = s_ij + delay + sigma_v * rng.standard_normal(K_ij)
    r_ji = s_ji + delay + sigma_v * rng.standard_normal(K_ji)
    return TimestampBlock(
        y_i_to_j=cj.alpha * r_ij + cj.beta,
        y_j_to_i=ci.alpha * r_ji + ci.beta,
        ytilde_i_to_j=ci.alpha * s_ij + ci.beta,
        ytilde_j_to_i=cj.alpha * s_ji + cj.beta,
    )


def psi_forward(theta_i: ClockState, theta_j: ClockState, d: float, stamp_i):
    """Noise-free receive stamp at j of a packet stamped ``stamp_i`` at i."""
    ci, cj = state_to_params(theta_i), state_to_params(theta_j)
    return ((np.asarray(stamp_i) - ci.beta) / ci.alpha + d / SPEED_OF_LIGHT) * cj.alpha + cj.beta


def build_matrices(block: TimestampBlock) -> LikelihoodMatrices:
    ki, kj = block.K_ij, block.K_ji
    A = np.block([[np.ones((ki, 1)), -block.ytilde_i_to_j[:, None]],
                  [-np.ones((kj, 1)), block.y_j_to_i[:, None]]])
    B = np.block([[-np.ones((ki, 1)), block.y_i_to_j[:, None]],
                  [np.ones((kj, 1)), -block.ytilde_j_to_i[:, None]]])
    a_d = np.full(ki + kj, -1.0 / SPEED_OF_LIGHT)
    return LikelihoodMatrices(A, B, a_d)


def residual(block: TimestampBlock, theta_i: ClockState, theta_j: ClockState, d: float):
    m = build_matrices(block)
    return m.A @ theta_i.as_array() + m.B @ theta_j.as_array() + m.a_d * d


def exact_loglikelihood(block: TimestampBlock, theta_i: ClockState, theta_j: ClockState,
                        d: float, sigma_v: float) -> float:
    """Log of the exact Gaussian likelihood of all receive stamps."""
    ci, cj = state_to_params(theta_i), state_to_params(theta_j)
    rev = block.swapped()
    e_ij = block.y_i_to_j - psi_forward(theta_i, theta_j, d, block.ytilde_i_to_j)
    e_ji = rev.y_i_to_j - psi_forward(theta_j, theta_i, d, rev.ytilde_i_to_j)
    log_g = (-block.K_ij * np.log(np.sqrt(2 * np.pi) * cj.alpha * sigma_v)
             - block.K_ji * np.log(np.sqrt(2 * np.pi) * ci.alpha * sigma_v))
    return float(log_g - e_ij @ e_ij / (2 * cj.alpha ** 2 * sigma_v ** 2)
                 - e_ji @ e_ji / (2 * ci.alpha ** 2 * sigma_v ** 2))


def exact_log_normalizer(block: TimestampBlock, theta_i: ClockState, theta_j: ClockState,
                         sigma_v: float) -> float:
    ci, cj = state_to_params(theta_i), state_to_params(theta_j)
    return float(-block.K_ij * np.log(np.sqrt(2 * np.pi) * cj.alpha * sigma_v)
                 - block.K_ji * np.log(np.sqrt(2 * np.pi) * ci.alpha * sigma_v))


def approx_loglikelihood(block: TimestampBlock, theta_i: ClockState, theta_j: ClockState,
                         d: float, sigma_v: float) -> float:
    """Unnormalized log of the Gaussian approximation in ``(theta_i, theta_j, d)``."""
    r = residual(block, theta_i, theta_j, d)
    return float(-(r @ r) / (2 * sigma_v ** 2))

"""Clock model, state-evolution dynamics and priors for mobile agents.

Clocks are affine, ``c(t) = alpha * t + beta``. The estimator works with the
transformed clock state ``(nu, lam) = (beta / alpha, 1 / alpha)`` because the
time-stamp model is linear in it. Locations follow a 2-D constant-velocity
model with state ``x = [px, py, vx, vy]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Selects the position block of a location-related state.
P = np.hstack([np.eye(2), np.zeros((2, 2))])

# Stream purposes for keyed random generators.
STREAM_TRUTH = 0
STREAM_PRIOR = 1
STREAM_NOISE = 2
STREAM_PARTICLES = 3


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the stream identified by ``(seed, *key)``.

    Keys are typically ``(purpose, run, step, agent, ...)``; two different keys
    never share draws, so results do not depend on evaluation order.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class ClockParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"clock skew must be positive, got {self.alpha}")


@dataclass(frozen=True)
class ClockState:
    nu: float
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")

    def as_array(self) -> np.ndarray:
        return np.array([self.nu, self.lam])

    @classmethod
    def from_array(cls, v) -> "ClockState":
        return cls(float(v[0]), float(v[1]))


@dataclass(frozen=True)
class LocationState:
    p: np.ndarray
    pdot: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.p, self.pdot]).astype(float)

    @classmethod
    def from_array(cls, v) -> "LocationState":
        v = np.asarray(v, dtype=float)
        return cls(v[:2].copy(), v[2:4].copy())


@dataclass(frozen=True)
class AgentState:
    clock: ClockState
    loc: LocationState


@dataclass(frozen=True)
class EvolutionParams:
    sigma1: float    # clock-phase walk std of nu [s]
    sigma2: float    # skew walk std of lambda [-]
    sigma_u2: float  # motion noise scale [m]
    T: float         # interval length [s]

    def __post_init__(self):
        for name in ("sigma1", "sigma2", "sigma_u2", "T"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.T <= 0:
            raise ValueError("T must be positive")

    @property
    def clock_noise_cov(self) -> np.ndarray:
        return np.diag([self.sigma1 ** 2, self.sigma2 ** 2])

    @property
    def motion_noise_cov(self) -> np.ndarray:
        return self.sigma_u2 ** 2 * kinematic_matrices(self.T)[1]


def clock_read(t, params: ClockParams):
    return params.alpha * t + params.beta


def clock_invert(local, params: ClockParams):
    """True time at which the clock shows ``local``."""
    return (local - params.beta) / params.alpha


def params_to_state(params: ClockParams) -> ClockState:
    return ClockState(params.beta / params.alpha, 1.0 / params.alpha)


def state_to_params(state: ClockState) -> ClockParams:
    return ClockParams(1.0 / state.lam, state.nu / state.lam)


def evolve_clock(prev: ClockState, params: EvolutionParams,
                 rng: np.random.Generator) -> ClockState:
    u = rng.standard_normal(2) * np.array([params.sigma1, params.sigma2])
    return ClockState(prev.nu + u[0], prev.lam + u[1])


def kinematic_matrices(T: float) -> tuple[np.ndarray, np.ndarray]:
    """Transition matrix and noise shape of the constant-velocity model.

    ``G2`` is the continuous white-noise-acceleration discretization, so the
    process noise covariance is ``sigma_u2**2 * G2``.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    I2 = np.eye(2)
    G1 = np.block([[I2, T * I2], [np.zeros((2, 2)), I2]])
    G2 = np.block([[T ** 3 / 3 * I2, T ** 2 / 2 * I2], [T ** 2 / 2 * I2, T * I2]])
    return G1, G2


def evolve_location(prev: LocationState, params: EvolutionParams,
                    rng: np.random.Generator) -> LocationState:
    G1, G2 = kinematic_matrices(params.T)
    # Cholesky of G2 is exact for T > 0; scale afterwards so sigma_u2 = 0 works.
    L = np.linalg.cholesky(G2)
    u = params.sigma_u2 * (L @ rng.standard_normal(4))
    return LocationState.from_array(G1 @ prev.as_array() + u)


@dataclass(frozen=True)
class PriorSpec:
    """Independent Gaussian priors of one agent's initial states."""
    clock_mean: tuple = (0.0, 1.0)
    sigma_nu: float = 1.0
    sigma_lam: float = 150e-6
    loc_mean: tuple = (0.0, 0.0, 0.0, 0.0)
    sigma_x: float = 5.0
    sigma_xdot: float = 2.0

    @property
    def clock_cov(self) -> np.ndarray:
        return np.diag([self.sigma_nu ** 2, self.sigma_lam ** 2])

    @property
    def loc_cov(self) -> np.ndarray:
        return np.diag([self.sigma_x ** 2] * 2 + [self.sigma_xdot ** 2] * 2)


def sample_priors(priors: list[PriorSpec], rng: np.random.Generator,
                  known_clocks: dict | None = None,
                  known_locations: dict | None = None) -> list[AgentState]:
    """Draw initial states for every agent.

    Agents listed in ``known_clocks`` / ``known_locations`` (index -> state)
    take their known value instead of a draw.
    """
    known_clocks = known_clocks or {}
    known_locations = known_locations or {}
    out = []
    for i, pr in enumerate(priors):
        c = np.asarray(pr.clock_mean, float) + rng.standard_normal(2) * [pr.sigma_nu, pr.sigma_lam]
        x = np.asarray(pr.loc_mean, float) + rng.standard_normal(4) * np.sqrt(np.diag(pr.loc_cov))
        clock = known_clocks.get(i, ClockState.from_array(c))
        loc = known_locations.get(i, LocationState.from_array(x))
        out.append(AgentState(clock, loc))
    return out

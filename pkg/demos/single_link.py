"""One two-way packet exchange between a well-synchronized agent and an
agent with an unknown clock.

Stamps in both directions let the unknown offset cancel, so the range is
recovered even when agent 1 only has a rough clock prior. The clock message
sent to agent 1 then recovers its offset to about a nanosecond and its skew
to a fraction of a ppm; the quality of the distance message hardly matters
here, because ten packets each way already separate delay from offset.
"""
import numpy as np

from coslas import bp_engine as bp
from coslas.measurement import build_matrices, exchange_schedule, simulate_exchange
from coslas.messages import Gaussian
from coslas.models import AgentState, ClockParams, LocationState, make_rng, params_to_state

rng = make_rng(3)
sigma_v = 10e-9

ref = AgentState(params_to_state(ClockParams(1.0, 0.0)), LocationState(np.zeros(2), np.zeros(2)))
true_clock = ClockParams(1 + 40e-6, 0.37)     # 40 ppm fast, 0.37 s ahead
other = AgentState(params_to_state(true_clock), LocationState(np.array([18.0, 24.0]), np.zeros(2)))

block = simulate_exchange(ref, other, 10, 10, sigma_v, exchange_schedule(0.0, 10, 10), rng)
mats = build_matrices(block)
print(f"{block.K_ij} + {block.K_ji} packets, true distance 30.000 m")

# Agent 1 only knows its clock roughly; the reference is exact.
known = Gaussian(ref.clock.as_array(), bp.CLOCK_EPS * np.eye(2))
rough = Gaussian([0.0, 1.0], np.diag([1.0, 150e-6 ** 2]))

d_msg = bp.zeta_f_d(mats, known, rough, sigma_v)
print(f"distance from stamps alone, rough clock: {d_msg.mean[0]:8.3f} m  "
      f"(sd {np.sqrt(d_msg.cov[0, 0]):.3g} m)")

# The swapped block is the same exchange seen from agent 1.
swapped = build_matrices(block.swapped())
for sd_d in (5.0, 0.3):
    clk = bp.zeta_f_theta(swapped, known, Gaussian([30.0], [[sd_d ** 2]]), sigma_v)
    nu, lam = clk.mean
    alpha, beta = 1 / lam, nu / lam
    print(f"distance sd {sd_d:4.1f} m -> alpha err {1e6 * (alpha - true_clock.alpha):+.3f} ppm, "
          f"beta err {1e9 * (beta - true_clock.beta):+.2f} ns")

"""Position from distance messages by particle products.

Each neighbor with a known position and a distance message contributes a
ring-shaped factor. Two rings leave a mirror ambiguity, which the fit keeps
as a two-component mixture; a third ring resolves it.

The product is formed by importance sampling from the rings themselves, so
only a fraction of the particles lands where all rings overlap. Narrow rings
need more particles: below about ten effective particles the fit gives up
and reports the message as uninformative.
"""
import numpy as np

from coslas import bp_engine as bp
from coslas.messages import Gaussian, GaussianMixture, is_uninformative
from coslas.models import make_rng

truth = np.array([22.0, 31.0])
anchors = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])


def ring(center, sd):
    at = GaussianMixture.single(Gaussian(center, 1e-12 * np.eye(2)))
    dist = Gaussian([np.linalg.norm(truth - center)], [[sd ** 2]])
    return bp.zeta_phi_p(at, dist, truth + [1.0, 1.0])


def show(k, sd, L):
    msg = bp.eta_psi_p([ring(a, sd) for a in anchors[:k]], L, 15.0, 40.0, make_rng(k))
    head = f"{k} rings, sd {sd} m, {L:5d} particles ->"
    if is_uninformative(msg):
        print(head, "uninformative")
        return
    print(head, f"{msg.S} component(s)")
    for w, m, C in zip(msg.weights, msg.means, msg.covs):
        print(f"    weight {w:.2f}  mean ({m[0]:6.2f}, {m[1]:6.2f})  trace {np.trace(C):.3f} m^2")


print(f"truth ({truth[0]:.2f}, {truth[1]:.2f})")
show(2, 2.0, 1000)
show(3, 2.0, 1000)
show(3, 0.5, 1000)
show(3, 0.5, 20000)

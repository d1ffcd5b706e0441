"""Which generators give law-invariant values?

A pair of payoffs with the same law (a reflection, a shifted increment, a
swapped branch) must get the same value when the generator depends on z only
through a state-dependent multiple of |z|^2.  A time-dependent coefficient
breaks this: the increment over [0, 1/2] picks up the quadratic penalty while
the one over [1/2, 1] does not.
"""
import numpy as np

from qbsde.generators import PureQuadratic, TimeVaryingQuadratic
from qbsde.lab import PayoffPair, gap_detail

pairs = [PayoffPair.reflection(np.tanh), PayoffPair.increment_shift(np.tanh, 0.5), PayoffPair.branch_swap(1.0, 0.25)]
generators = {
    "k = 0.4": PureQuadratic("0.4"),
    "k(y) = 0.4 - 0.1 tanh(y)": PureQuadratic("0.4 - 0.1*tanh(y)"),
    "k(t) = 1{t < 1/2}": TimeVaryingQuadratic("Heaviside(0.5 - t)"),
}

print(f"{'generator':34s} {'pair':36s} {'gap':>10s}")
for label, g in generators.items():
    for pair in pairs:
        d = gap_detail(g, pair)
        print(f"{label:34s} {pair.name:36s} {d['gap']:10.3e}")

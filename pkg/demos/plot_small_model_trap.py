"""
The small-model trap
====================

An oracle stands in for SuperNet evaluation: larger architectures start
lower but converge to a higher accuracy.  Evolving against it for 20
generations shows how selection on current accuracy alone drifts towards
small models, while protected selection keeps the large ones.
"""

import numpy as np

from evonas.objectives import TrapCurveModel, simulate_trap_curves
from evonas.trap import TrapConfig, compare, write_distribution

###############################################################################
# Two curves from the oracle family: the small model leads early, the large
# one overtakes it later.

small = TrapCurveModel(size=1.0, final_acc=0.80, convergence_rate=0.10)
large = TrapCurveModel(size=4.0, final_acc=0.88, convergence_rate=0.03)
curves = simulate_trap_curves([small, large], 120)
for e in (5, 20, 40, 80, 120):
    print(f"epoch {e:3d}: small {curves[0, e - 1]:.3f}  large {curves[1, e - 1]:.3f}")

###############################################################################
# Largest model in the final population relative to the initial one.

runs = compare(range(5), TrapConfig(P=32, generations=20))
for method, rs in runs.items():
    ratios = np.array([r.retained for r in rs])
    print(f"{method:7s} median {np.median(ratios):.2f}  per seed {np.round(ratios, 2).tolist()}")

write_distribution(runs, "trap_population.csv")
print("per-generation sizes written to trap_population.csv")

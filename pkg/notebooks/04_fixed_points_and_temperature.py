"""Self-consistent Gibbs fixed points and how close they get to the optimum.

On a one-dimensional problem (a single teacher neuron, output weight pinned to one)
the stationary position law solves ``rho = exp(-beta * potential[rho]) / Z``. We solve
it from several starts, then compare the regularized loss of the fixed point against
the best loss achievable on the grid as the inverse temperature grows.

    python notebooks/04_fixed_points_and_temperature.py [out_dir]
"""
import math
import sys
from pathlib import Path

from mfhb.presets import run_preset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "out/notebook_fixed_points")
meta = run_preset("boltzmann_fixed_point", out)

for label in ("1d", "2d"):
    r = meta[label]
    print(f"{label}: iterations {r['iterations']}, largest pairwise L1 between starts {r['max_pairwise_l1']:.1e}")

sweep = meta["beta_sweep"]
print(f"\ngrid infimum {sweep['infimum']:.6f} (duality gap {sweep['duality_gap']:.1e})")
print(f"{'beta':>6s} {'gap':>10s} {'gap*beta/(1+log beta)':>22s}")
for beta, gap in zip(meta["params"]["betas"], sweep["gaps"]):
    print(f"{beta:6g} {gap:10.3e} {gap * beta / (1 + math.log(beta)):22.3f}")
# the last column stays bounded: the gap shrinks at least like (1 + log beta) / beta

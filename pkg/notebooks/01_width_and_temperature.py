"""Wider networks train to lower loss, and less noise helps.

A reduced version of the width sweep: a few seeds and fewer steps so it runs in
about a minute. The full-size run is ``mfhb preset width_sweep``.

    python notebooks/01_width_and_temperature.py [out_dir]
"""
import sys
from pathlib import Path

from mfhb.presets import width_sweep

out = Path(sys.argv[1] if len(sys.argv) > 1 else "out/notebook_width")
out.mkdir(parents=True, exist_ok=True)

summary = width_sweep(out, seeds=4, steps=4000, n_values=[10, 50, 200])["summary"]

print("mean final loss (4 seeds, 4000 steps of size 0.05)")
print(f"{'method':>12s} " + " ".join(f"{'n=' + n:>10s}" for n in summary["HB"]))
for method, per_n in summary.items():
    print(f"{method:>12s} " + " ".join(f"{v['mean_final_loss']:10.2e}" for v in per_n.values()))

# Plain heavy ball keeps improving with width. The noisy runs stall at a loss floor
# set by the temperature: lowering it from 1e-2 to 1e-4 lowers the floor.
hb = [v["mean_final_loss"] for v in summary["HB"].values()]
print("\nHB loss decreases with width:", all(b < a for a, b in zip(hb, hb[1:])))

try:
    import matplotlib.pyplot as plt
except ImportError:
    sys.exit(0)
fig, ax = plt.subplots()
for method, per_n in summary.items():
    ax.loglog([int(n) for n in per_n], [v["mean_final_loss"] for v in per_n.values()], "o-", label=method)
ax.set_xlabel("width n")
ax.set_ylabel("mean final loss")
ax.legend()
fig.savefig(out / "width_trend.png", dpi=120)
print("figure:", out / "width_trend.png")

"""Noisy heavy ball particles settle into the Gibbs field of their own potential.

Runs 200 particles in two dimensions and compares, on an 8x8 grid, the particle
histogram with ``exp(-beta * potential)`` built from the same particles. The
comparison is averaged over the second half of the run. Also checks that velocities
look like an independent Gaussian with variance ``1 / beta``.

    python notebooks/02_particles_vs_gibbs_field.py [out_dir]
"""
import sys
from pathlib import Path

from mfhb.presets import run_preset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "out/notebook_gibbs")
meta = run_preset("stationary_marginals", out, overrides={"steps": 20000, "record_every": 500})

print(f"L1 distance histogram vs field (averaged): {meta['l1_gap']:.3f}")
print(f"L1 distance at the final snapshot only:    {meta['l1_gap_final']:.3f}")
print(f"densest field cell {meta['field_argmax_cell']}, densest particle cell {meta['histogram_argmax_cell']}")
vel = meta["velocity"]
print(f"velocity mean gap {vel['mean_gap']:.2e} (one-sigma {vel['mean_mc_error']:.2e})")
print(f"velocity covariance gap {vel['cov_gap']:.2e} (one-sigma {vel['cov_mc_error']:.2e})")
print(f"largest theta/r correlation {vel['theta_r_correlation']:.3f}")
print("per-cell masses are in", out / "field.csv")

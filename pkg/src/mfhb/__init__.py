"""Mean-field momentum training of two-layer networks: particle integrators, a kinetic
Fokker-Planck grid solver, self-consistent Gibbs fixed points and free-energy diagnostics."""

__version__ = "0.1.0"

from .core import (ActivationSpec, ConfigError, Dataset, Ensemble, Integrator, ParamPoint,
                   ParticleState, RegularizerSpec, RunConfig, TeacherSpec, KeyedNormals, counter_normals,
                   dataset_from_teacher, init_ensemble, sample_dataset)
from .model import (GridKernels, GridSpec, basis_eval, interaction_gradient, loss,
                    network_output, potential_field, regularizer_value_grad, risk, uv_kernels)
from .dynamics import (NumericalAbort, TrajectoryRecord, agd_step, gf_step, hb_step, run_batch,
                       run_trajectory, shb_step)
from .kinetic_pde import (GridDensity, PhaseGrid, check_product_form, evolve, fp_step,
                          grid_dissipation, grid_free_energy, nonlinear_force)
from .boltzmann import (ThetaDensity, apply_T, compare_empirical, f_lambda, grid_infimum,
                        solve_fixed_point)
from .diagnostics import (consistency_sweep, knn_entropy, particle_free_energy,
                          theta_r_independence, velocity_stationarity)

__all__ = [name for name in dir() if not name.startswith("_")]

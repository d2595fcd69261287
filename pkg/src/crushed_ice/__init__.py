"""Numerical laboratory for the Dirichlet Laplacian in periodically perforated boxes."""

from .capacity import (CapacityProblem, PotentialField, capacity_ball_analytic,
                       capacity_flux, capacity_numeric, decay_check, effective_q,
                       potential_ball_analytic)
from .closeness import (ClosenessConstants, ClosenessReport, FormPair, IdentificationSet,
                        build_J1, condition_constants, pde_instance, random_instance,
                        verify_functional_calculus, verify_resolvent_bound,
                        verify_spectral_hausdorff)
from .exceptions import *  # noqa: F401,F403
from .geometry import (DomainSpec, HoleLayout, HoleShape, check_size_rule,
                       enumerate_interior_cells, place_holes)
from .grid import (CartesianGrid, GridFunction, GridOperator, NodeMask, assemble_laplacian,
                   cell_mean, extend_zero, restrict)
from .harness import (ConvergenceRecord, ExperimentConfig, RateFit, delta_formula,
                      eigenvalue_experiment, rate_fit, resolvent_experiment,
                      semigroup_experiment)
from .linalg import (EigReport, SolveReport, cg_solve, dense_opnorm, hausdorff_distance,
                     lowest_eigenpairs, semigroup_apply)

__version__ = "0.1.0"

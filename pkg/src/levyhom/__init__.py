"""Homogenization of nonlocal jump operators with power-law kernels: fields, kernels,
effective coefficients, discrete operators, solvers and sweep experiments."""

from .effective import (
    CellSolution,
    EffectiveResult,
    build_cell_operator,
    effective_model,
    effective_nonsym,
    effective_p1,
    effective_p2,
    effective_q1,
    effective_q2,
    principal_eigenfunction,
)
from .errors import ConfigError, ConvergenceError, FieldError, LevyhomError, NumericalError, PositivityError
from .fields import RandomFieldSpec, TorusField, make_torus_field, sample_realization
from .kernels import (
    ConstantKernel,
    MacroKernel,
    MacroModulation,
    NonSymKernel,
    P1Kernel,
    P2Kernel,
    Q1Kernel,
    Q2Kernel,
    check_ellipticity,
    check_symmetry,
    make_pair_table,
)
from .operator import assemble, build_grid, energy_form, fractional_seminorm, near_diagonal_weight
from .solvers import objective_j, solve_plaplace, solve_resolvent

__version__ = "0.1.0"

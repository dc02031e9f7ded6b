"""Lattice simulation of multi-time wave functions for Dirac particles coupled to a scalar field."""
from .dirac import (
    MultiTimeState,
    ParticleLatticeSpec,
    SpinorConvention,
    apply_free_dirac,
    apply_position_phase,
    inner_product,
    pointwise_eval,
    smooth_initial_state,
)
from .evolution import (
    HamiltonianSpec,
    PropagationError,
    PropagatorPlan,
    apply_H_A,
    apply_H_tilde,
    multi_time_derivative,
    multi_time_evaluate,
    propagate_U_A,
)
from .fock import FockTruncation, MomentumGrid, ResolutionError, bump_profile, build_momentum_grid
from .geometry import (
    Partition,
    SpacetimeConfiguration,
    corresponding_partition,
    future_support_bound,
    is_in_s_delta,
    spacelike_margin,
)
from .krylov import KrylovConvergenceError
from .model import Model, apply_field_operator

__version__ = "0.1.0"

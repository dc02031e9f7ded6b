"""Partial Hamiltonians, two-parameter propagators and the multi-time composer.

``U_A(t, s) = exp(i H_f (t-s)) exp(-i Htilde_{A,s} (t-s))`` where
``Htilde_{A,s} = H_f + sum_{j in A} (H0_j + g phi_j(s))`` does not depend on
the evolution time.  The second factor is computed by Lanczos, the first is
an exact diagonal phase on the Fock fiber.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dirac import MultiTimeState
from .krylov import KrylovConvergenceError, KrylovInfo, expm_krylov
from .model import Model, _field_array, dense_matrix, free_dirac_array

log = logging.getLogger(__name__)


class PropagationError(RuntimeError):
    """A propagator factor failed; ``factor`` names it."""

    def __init__(self, factor, cause: Exception):
        super().__init__(f"propagation failed in factor {factor}: {cause}")
        self.factor = factor
        self.cause = cause


@dataclass(frozen=True)
class HamiltonianSpec:
    subset: tuple
    eval_time: float
    coupling: float = 1.0
    include_free_field: bool = False

    def __post_init__(self):
        object.__setattr__(self, "subset", tuple(sorted(set(self.subset))))


@dataclass(frozen=True)
class PropagatorPlan:
    krylov_dim: int = 30
    substep: float | None = None
    tolerance: float = 1e-10
    max_substeps: int = 100000

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.krylov_dim < 2:
            raise ValueError("krylov_dim must be at least 2")
        if self.substep is not None and self.substep <= 0:
            raise ValueError("substep must be positive")


def _check_subset(model: Model, subset):
    subset = tuple(sorted(set(subset)))
    if not subset:
        raise ValueError("empty particle subset")
    for j in subset:
        model.lattice.check_particle(j)
    return subset


def h_a_array(model: Model, subset, t: float, psi: np.ndarray, coupling: float | None = None) -> np.ndarray:
    g = model.coupling if coupling is None else coupling
    return free_dirac_array(model, psi, subset) + _field_array(model, psi, t, subset, g)


def h_tilde_array(model: Model, subset, s: float, psi: np.ndarray, coupling: float | None = None) -> np.ndarray:
    return psi * model.hf_diagonal + h_a_array(model, subset, s, psi, coupling)


def apply_H_A(model: Model, spec: HamiltonianSpec, state: MultiTimeState) -> MultiTimeState:
    """``sum_{j in A} (H0_j + g phi_j(t))``, or ``Htilde`` when ``include_free_field``."""
    subset = _check_subset(model, spec.subset)
    fn = h_tilde_array if spec.include_free_field else h_a_array
    return state.with_amplitudes(fn(model, subset, spec.eval_time, state.amplitudes, spec.coupling))


def apply_H_tilde(model: Model, subset, s: float, state: MultiTimeState) -> MultiTimeState:
    subset = _check_subset(model, subset)
    return state.with_amplitudes(h_tilde_array(model, subset, s, state.amplitudes))


def propagate_array(model: Model, subset, t: float, s: float, psi: np.ndarray, plan: PropagatorPlan,
                    info: KrylovInfo | None = None) -> np.ndarray:
    subset = _check_subset(model, subset)
    tau = t - s
    if tau == 0:
        return psi.copy()
    shape = psi.shape

    def matvec(v):
        return h_tilde_array(model, subset, s, v.reshape(shape)).ravel()

    out = expm_krylov(matvec, psi, tau, plan.krylov_dim, plan.tolerance, plan.substep,
                      plan.max_substeps, info).reshape(shape)
    return out * np.exp(1j * tau * model.hf_diagonal)


def propagate_U_A(model: Model, subset, t: float, s: float, state: MultiTimeState,
                  plan: PropagatorPlan = PropagatorPlan()) -> MultiTimeState:
    """Apply ``U_A(t, s)``; the times of the particles in ``A`` become ``t``."""
    subset = _check_subset(model, subset)
    info = KrylovInfo()
    try:
        out = propagate_array(model, subset, t, s, state.amplitudes, plan, info)
    except KrylovConvergenceError as exc:
        raise PropagationError((subset, t, s), exc) from exc
    times = list(state.times)
    for j in subset:
        times[j] = t
    factors = list(state.metadata.get("factors", []))
    factors.append({"subset": list(subset), "t": t, "s": s, "substeps": info.substeps,
                    "matvecs": info.matvecs, "error_estimate": info.error_estimate})
    return state.with_amplitudes(out, times=tuple(times), factors=factors)


def time_order(times, tie_break: str = "ascending") -> list:
    """Permutation sorting times descending; ties broken by particle index."""
    sign = 1 if tie_break == "ascending" else -1
    return sorted(range(len(times)), key=lambda j: (-times[j], sign * j))


def factor_sequence(times, tie_break: str = "ascending") -> list:
    """Factors ``(subset, t, s)`` in application order (rightmost first)."""
    n = len(times)
    sigma = time_order(times, tie_break)
    seq = [(tuple(range(n)), float(times[sigma[-1]]), 0.0)]
    for k in range(n - 1, 0, -1):
        subset = tuple(sorted(sigma[:k]))
        seq.append((subset, float(times[sigma[k - 1]]), float(times[sigma[k]])))
    return seq


def multi_time_evaluate(model: Model, times, psi0: MultiTimeState, plan: PropagatorPlan = PropagatorPlan(),
                        tie_break: str = "ascending") -> MultiTimeState:
    """``U_{s(1)}(t_s(1), t_s(2)) ... U_{1..N}(t_s(N), 0) psi0`` with ``s`` sorting times descending."""
    times = tuple(float(t) for t in times)
    if len(times) != model.lattice.n_particles:
        raise ValueError("need one time per particle")
    if any(t != 0 for t in psi0.times):
        raise ValueError("initial data must be given at times (0, ..., 0)")
    amp = psi0.amplitudes
    applied = []
    for subset, t, s in factor_sequence(times, tie_break):
        entry = {"subset": list(subset), "t": t, "s": s, "skipped": t == s}
        if t != s:
            info = KrylovInfo()
            try:
                amp = propagate_array(model, subset, t, s, amp, plan, info)
            except KrylovConvergenceError as exc:
                raise PropagationError((subset, t, s), exc) from exc
            entry.update(substeps=info.substeps, matvecs=info.matvecs, error_estimate=info.error_estimate)
        applied.append(entry)
    return MultiTimeState(psi0.lattice, times, amp if amp is not psi0.amplitudes else amp.copy(),
                          {**psi0.metadata, "factors": applied})


def multi_time_derivative(model: Model, times, psi0: MultiTimeState, block, dt: float,
                          plan: PropagatorPlan = PropagatorPlan()) -> MultiTimeState:
    """Central difference of the multi-time wave function along ``sum_{j in block} e_j``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    direction = np.zeros(len(times))
    direction[list(block)] = 1.0
    plus = multi_time_evaluate(model, tuple(np.asarray(times) + dt * direction), psi0, plan)
    minus = multi_time_evaluate(model, tuple(np.asarray(times) - dt * direction), psi0, plan)
    return MultiTimeState(psi0.lattice, tuple(times), (plus.amplitudes - minus.amplitudes) / (2 * dt),
                          {"block": list(block), "dt": dt})


# -- dense oracles ----------------------------------------------------------


def dense_h_tilde(model: Model, subset, s: float) -> np.ndarray:
    subset = _check_subset(model, subset)
    return dense_matrix(lambda v: h_tilde_array(model, subset, s, v), model.dimension, model.state_shape)


def dense_propagator(model: Model, subset, t: float, s: float) -> np.ndarray:
    """``U_A(t, s)`` as a dense matrix (oracle, small spaces only)."""
    from scipy.linalg import expm

    ht = dense_h_tilde(model, subset, s)
    phase = np.exp(1j * (t - s) * np.broadcast_to(model.hf_diagonal, model.state_shape).ravel())
    return phase[:, None] * expm(-1j * (t - s) * ht)

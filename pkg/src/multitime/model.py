"""The coupled lattice model: particles, field modes, cut-off and coupling.

The smeared field evaluated at particle ``j`` is the finite mode sum::

    phi_j(t) = sum_m [ c_m e^{-i w_m t} e^{i k_m x_j} a_m + h.c. ],
    c_m = sqrt(dk^d) * rho_hat(k_m) / sqrt(omega_m)

and ``phi(t, x)`` is the same expression with the number ``x`` in place of
the position operator.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .dirac import MultiTimeState, ParticleLatticeSpec, apply_free_dirac, position_phase
from .fock import (
    CutoffProfile,
    FockTruncation,
    MomentumGrid,
    apply_annihilation,
    apply_creation,
    bump_profile,
    build_momentum_grid,
    free_field_energies,
)


@dataclass(frozen=True, eq=False)
class Model:
    lattice: ParticleLatticeSpec
    grid: MomentumGrid
    truncation: FockTruncation
    profile: CutoffProfile
    coupling: float = 1.0

    def __post_init__(self):
        if self.grid.n_modes != self.truncation.n_modes:
            raise ValueError("grid and truncation disagree on the number of modes")
        if self.grid.n_sites != self.lattice.n_sites or not np.isclose(self.grid.spacing, self.lattice.spacing):
            raise ValueError("momentum grid and particle lattice differ")
        if self.profile.rho_hat is None:
            raise ValueError("cut-off profile has no form factor for this grid")
        if self.grid.n_modes > self.lattice.n_sites**self.lattice.spatial_dim:
            raise ValueError("more field modes than lattice sites")

    @classmethod
    def build(
        cls,
        n_sites: int,
        spacing: float,
        n_particles: int,
        n_modes: int,
        max_occupation: int,
        delta: float,
        dirac_mass: float = 0.0,
        field_mass: float = 0.0,
        coupling: float = 1.0,
        spatial_dim: int = 1,
    ) -> "Model":
        lattice = ParticleLatticeSpec(n_sites, spacing, n_particles, spatial_dim, dirac_mass)
        grid = build_momentum_grid(n_sites, spacing, n_modes, field_mass, spatial_dim)
        trunc = FockTruncation(grid.n_modes, max_occupation)
        profile = bump_profile(delta, n_sites, spacing, grid, spatial_dim)
        return cls(lattice, grid, trunc, profile, coupling)

    # -- cached pieces ---------------------------------------------------

    @property
    def fock_dim(self) -> int:
        return self.truncation.dimension

    @property
    def state_shape(self) -> tuple:
        return self.lattice.state_shape(self.fock_dim)

    @property
    def dimension(self) -> int:
        return int(np.prod(self.state_shape))

    @cached_property
    def field_coefficients(self) -> np.ndarray:
        """``c_m = w rho_hat(k_m) / sqrt(omega_m)``."""
        return self.grid.mode_weight * self.profile.rho_hat / np.sqrt(self.grid.frequencies)

    @cached_property
    def hf_diagonal(self) -> np.ndarray:
        return free_field_energies(self.truncation, self.grid)

    @cached_property
    def _phases(self) -> dict:
        return {}

    def subset_phase(self, subset, m: int, sign: int = 1) -> np.ndarray:
        """``sum_{j in subset} exp(i sign k_m x_j)`` broadcast over configurations."""
        key = (tuple(sorted(subset)), m, sign)
        cache = self._phases
        if key not in cache:
            k = sign * self.grid.momenta[m]
            cache[key] = sum(position_phase(self.lattice, j, k) for j in key[0])
        return cache[key]

    def zero_state(self, times=None) -> MultiTimeState:
        times = (0.0,) * self.lattice.n_particles if times is None else times
        return MultiTimeState(self.lattice, times, np.zeros(self.state_shape, dtype=complex))

    def random_state(self, rng: np.random.Generator, safe: bool = False, times=None) -> MultiTimeState:
        """Normalized random state; ``safe`` restricts the Fock fiber to occupations below ``n_max``."""
        amp = rng.standard_normal(self.state_shape) + 1j * rng.standard_normal(self.state_shape)
        if safe:
            amp = amp * self.truncation.safe_mask()
        st = self.zero_state(times)
        st.amplitudes = amp
        st.amplitudes /= st.norm()
        return st


def apply_field_operator(
    model: Model,
    state: MultiTimeState,
    t: float,
    particle: int | None = None,
    x=None,
    coupling: float = 1.0,
) -> MultiTimeState:
    """``coupling * phi_j(t)`` (``particle=j``) or ``coupling * phi(t, x)`` (``x`` given)."""
    if (particle is None) == (x is None):
        raise ValueError("give exactly one of particle or x")
    if state.amplitudes.shape != model.state_shape:
        raise ValueError(f"state shape {state.amplitudes.shape} does not match model {model.state_shape}")
    if particle is not None:
        model.lattice.check_particle(particle)
        out = _field_array(model, state.amplitudes, t, (particle,), coupling)
    else:
        out = _field_at_point_array(model, state.amplitudes, t, x, coupling)
    return state.with_amplitudes(out)


def _field_array(model: Model, psi: np.ndarray, t: float, subset, coupling: float) -> np.ndarray:
    """``coupling * sum_{j in subset} phi_j(t) psi`` on a raw amplitude array."""
    out = np.zeros_like(psi)
    if coupling == 0 or not subset:
        return out
    trunc = model.truncation
    c = model.field_coefficients
    om = model.grid.frequencies
    for m in range(model.grid.n_modes):
        lower = apply_annihilation(trunc, m, psi)
        raise_ = apply_creation(trunc, m, psi)
        out += (coupling * c[m] * np.exp(-1j * om[m] * t)) * model.subset_phase(subset, m, 1) * lower
        out += (coupling * np.conj(c[m]) * np.exp(1j * om[m] * t)) * model.subset_phase(subset, m, -1) * raise_
    return out


def _field_at_point_array(model: Model, psi: np.ndarray, t: float, x, coupling: float) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    trunc = model.truncation
    c = model.field_coefficients
    out = np.zeros_like(psi)
    for m in range(model.grid.n_modes):
        ph = np.exp(-1j * model.grid.frequencies[m] * t + 1j * model.grid.momenta[m] @ x)
        out += coupling * c[m] * ph * apply_annihilation(trunc, m, psi)
        out += coupling * np.conj(c[m] * ph) * apply_creation(trunc, m, psi)
    return out


def dense_matrix(apply, dim: int, shape: tuple) -> np.ndarray:
    """Materialize a linear map on arrays of ``shape`` as a ``dim x dim`` matrix."""
    if dim > 4096:
        raise ValueError(f"refusing to build a dense {dim}x{dim} matrix")
    mat = np.empty((dim, dim), dtype=complex)
    e = np.zeros(dim, dtype=complex)
    for i in range(dim):
        e[i] = 1.0
        mat[:, i] = apply(e.reshape(shape)).ravel()
        e[i] = 0.0
    return mat


def free_dirac_array(model: Model, psi: np.ndarray, subset) -> np.ndarray:
    out = np.zeros_like(psi)
    for j in subset:
        out += apply_free_dirac(psi, j, model.lattice)
    return out

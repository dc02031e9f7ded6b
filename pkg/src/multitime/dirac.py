"""Free lattice Dirac operators and the multi-time state tensor.

Amplitude layout for N particles in d dimensions::

    (n_sites,)*d + (spinor_dim,)   # particle 1 (slowest)
    ...
    (n_sites,)*d + (spinor_dim,)   # particle N
    (fock_dim,)                    # Fock fiber (fastest)

Site ``i`` sits at coordinate ``i * spacing``; boundaries are periodic.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SIGMA = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


@dataclass(frozen=True)
class SpinorConvention:
    alphas: tuple
    beta: np.ndarray

    def __post_init__(self):
        dim = self.beta.shape[0]
        eye = np.eye(dim)
        for i, ai in enumerate(self.alphas):
            if not np.allclose(ai @ self.beta + self.beta @ ai, 0, atol=0):
                raise ValueError(f"alpha_{i} does not anticommute with beta")
            for j, aj in enumerate(self.alphas):
                if not np.array_equal(ai @ aj + aj @ ai, 2 * eye * (i == j)):
                    raise ValueError(f"alpha_{i}, alpha_{j} violate the Clifford relation")
        if not np.array_equal(self.beta @ self.beta, eye):
            raise ValueError("beta must square to one")

    @classmethod
    def for_dimension(cls, spatial_dim: int) -> "SpinorConvention":
        if spatial_dim == 1:
            return cls((SIGMA[0],), SIGMA[2])
        if spatial_dim == 3:
            z = np.zeros((2, 2))
            alphas = tuple(np.block([[z, s], [s, z]]).astype(complex) for s in SIGMA)
            beta = np.diag([1, 1, -1, -1]).astype(complex)
            return cls(alphas, beta)
        raise ValueError(f"unsupported spatial dimension {spatial_dim}")


@dataclass(frozen=True)
class ParticleLatticeSpec:
    n_sites: int
    spacing: float
    n_particles: int
    spatial_dim: int = 1
    dirac_mass: float = 0.0

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.spatial_dim not in (1, 3):
            raise ValueError("spatial_dim must be 1 or 3")
        if self.n_sites < 3:
            raise ValueError("need at least three sites for a central difference")

    @property
    def spinor_dim(self) -> int:
        return 2 if self.spatial_dim == 1 else 4

    @property
    def composite_spinor_dim(self) -> int:
        return self.spinor_dim**self.n_particles

    @property
    def length(self) -> float:
        return self.n_sites * self.spacing

    @property
    def volume_element(self) -> float:
        """Lattice measure ``a**(d N)`` of one configuration."""
        return self.spacing ** (self.spatial_dim * self.n_particles)

    @property
    def particle_shape(self) -> tuple:
        return (self.n_sites,) * self.spatial_dim + (self.spinor_dim,)

    def state_shape(self, fock_dim: int) -> tuple:
        return self.particle_shape * self.n_particles + (fock_dim,)

    def config_shape(self) -> tuple:
        """Broadcastable shape over which diagonal position operators live."""
        return self.state_shape(1)

    def spatial_axes(self, j: int) -> tuple:
        base = j * (self.spatial_dim + 1)
        return tuple(range(base, base + self.spatial_dim))

    def spinor_axis(self, j: int) -> int:
        return j * (self.spatial_dim + 1) + self.spatial_dim

    def coordinates(self, j: int) -> list:
        """Per-axis coordinate arrays of particle ``j``, broadcastable to the state."""
        out = []
        ndim = len(self.config_shape())
        for ax in self.spatial_axes(j):
            shape = [1] * ndim
            shape[ax] = self.n_sites
            out.append((np.arange(self.n_sites) * self.spacing).reshape(shape))
        return out

    def check_particle(self, j: int):
        if not 0 <= j < self.n_particles:
            raise IndexError(f"particle index {j} out of range for N={self.n_particles}")

    def periodic_distance(self, x, y) -> np.ndarray:
        """Minimum-image distance between positions (scalars in 1-D, d-vectors otherwise)."""
        diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        diff = diff - self.length * np.round(diff / self.length)
        if self.spatial_dim == 1:
            return np.abs(diff)
        return np.linalg.norm(diff, axis=-1)


@dataclass
class MultiTimeState:
    """Discretized ``psi(t_1, ., ..., t_N, .)`` at fixed times.

    ``metadata`` carries provenance such as the compact-support mask of
    initial data and the propagator factor sequence.
    """

    lattice: ParticleLatticeSpec
    times: tuple
    amplitudes: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = tuple(float(t) for t in self.times)
        if len(self.times) != self.lattice.n_particles:
            raise ValueError("need one time per particle")
        if self.amplitudes.shape[:-1] != self.lattice.state_shape(1)[:-1]:
            raise ValueError(
                f"amplitude shape {self.amplitudes.shape} does not match lattice {self.lattice}"
            )

    @property
    def fock_dim(self) -> int:
        return self.amplitudes.shape[-1]

    @property
    def dimension(self) -> int:
        return self.amplitudes.size

    def norm(self) -> float:
        return float(np.sqrt(self.lattice.volume_element * np.vdot(self.amplitudes, self.amplitudes).real))

    def with_amplitudes(self, amplitudes: np.ndarray, times=None, **meta) -> "MultiTimeState":
        md = dict(self.metadata)
        md.update(meta)
        return replace(
            self, amplitudes=amplitudes, times=self.times if times is None else times, metadata=md
        )

    def configuration_density(self) -> np.ndarray:
        """``|psi|^2`` summed over spinor and Fock indices, shape ``(n_sites,)*(d N)``."""
        lat = self.lattice
        p = np.abs(self.amplitudes) ** 2
        axes = tuple(lat.spinor_axis(j) for j in range(lat.n_particles)) + (p.ndim - 1,)
        return p.sum(axis=axes)


def _apply_matrix(mat: np.ndarray, psi: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, psi, axes=([1], [axis])), 0, axis)


def apply_free_dirac(state_or_array, j: int, lattice: ParticleLatticeSpec | None = None):
    """``H0_j = -i alpha . grad_j + beta m`` with a periodic central difference.

    Accepts a :class:`MultiTimeState` (returns one) or a raw amplitude array
    together with ``lattice``.
    """
    if isinstance(state_or_array, MultiTimeState):
        out = _free_dirac_array(state_or_array.amplitudes, j, state_or_array.lattice)
        return state_or_array.with_amplitudes(out)
    return _free_dirac_array(state_or_array, j, lattice)


def _free_dirac_array(psi: np.ndarray, j: int, lat: ParticleLatticeSpec) -> np.ndarray:
    lat.check_particle(j)
    conv = SpinorConvention.for_dimension(lat.spatial_dim)
    sax = lat.spinor_axis(j)
    out = np.zeros_like(psi)
    for alpha, ax in zip(conv.alphas, lat.spatial_axes(j)):
        diff = (np.roll(psi, -1, axis=ax) - np.roll(psi, 1, axis=ax)) / (2 * lat.spacing)
        out += _apply_matrix(-1j * alpha, diff, sax)
    if lat.dirac_mass != 0:
        out += _apply_matrix(lat.dirac_mass * conv.beta, psi, sax)
    return out


def is_grid_momentum(lattice: ParticleLatticeSpec, k) -> bool:
    m = np.atleast_1d(np.asarray(k, dtype=float)) * lattice.length / (2 * np.pi)
    return bool(np.allclose(m, np.round(m), atol=1e-9, rtol=0))


def position_phase(lattice: ParticleLatticeSpec, j: int, k) -> np.ndarray:
    """Broadcastable array ``exp(i k . x_j)`` over the configuration axes."""
    lattice.check_particle(j)
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if k.shape != (lattice.spatial_dim,):
        raise ValueError(f"momentum must have {lattice.spatial_dim} components")
    if not is_grid_momentum(lattice, k):
        raise ValueError(f"k={k} is not a lattice momentum; the phase would break periodicity")
    phase = 0
    for kc, xc in zip(k, lattice.coordinates(j)):
        phase = phase + kc * xc
    return np.exp(1j * phase)


def apply_position_phase(state: MultiTimeState, j: int, k) -> MultiTimeState:
    return state.with_amplitudes(state.amplitudes * position_phase(state.lattice, j, k))


def inner_product(u: MultiTimeState, v: MultiTimeState) -> complex:
    """``a^(dN) sum conj(u) v``."""
    if u.amplitudes.shape != v.amplitudes.shape or u.lattice != v.lattice:
        raise ValueError("states live on different spaces")
    if u.times != v.times:
        raise ValueError(f"states are given at different times {u.times} vs {v.times}")
    return complex(u.lattice.volume_element * np.vdot(u.amplitudes, v.amplitudes))


def _site_index(lattice: ParticleLatticeSpec, site) -> tuple:
    idx = tuple(np.atleast_1d(site).astype(int).tolist()) if not isinstance(site, (int, np.integer)) else (int(site),)
    if len(idx) != lattice.spatial_dim:
        raise ValueError(f"site {site!r} does not have {lattice.spatial_dim} components")
    if any(not 0 <= i < lattice.n_sites for i in idx):
        raise ValueError(f"site {site!r} is off the lattice")
    return idx


def pointwise_eval(state: MultiTimeState, sites) -> np.ndarray:
    """Spinor (x) Fock block at one configuration of N lattice sites."""
    lat = state.lattice
    if len(sites) != lat.n_particles:
        raise ValueError("need one site per particle")
    idx = []
    for s in sites:
        if not isinstance(s, (int, np.integer, tuple, list, np.ndarray)):
            raise ValueError(f"site {s!r} is not a lattice index")
        idx.extend(_site_index(lat, s))
        idx.append(slice(None))
    idx.append(slice(None))
    return state.amplitudes[tuple(idx)]


def configuration_block_norms(lattice: ParticleLatticeSpec, amplitudes: np.ndarray) -> np.ndarray:
    """Euclidean norm of the spinor (x) Fock block at every configuration."""
    p = np.abs(amplitudes) ** 2
    axes = tuple(lattice.spinor_axis(j) for j in range(lattice.n_particles)) + (p.ndim - 1,)
    return np.sqrt(p.sum(axis=axes))


def smooth_initial_state(
    lattice: ParticleLatticeSpec,
    centers,
    widths,
    spinors,
    fock_fiber: np.ndarray,
    tail: float = 1e-12,
    truncation_radius=None,
) -> MultiTimeState:
    """Normalized product of truncated Gaussians times spinors, tensored with a Fock fiber.

    Each factor is ``exp(-|x - c|^2 / (4 w^2))`` (so ``|.|^2`` has standard
    deviation ``w``), set to exactly zero beyond the truncation radius, which
    defaults to the radius where ``|.|^2`` drops below ``tail``.
    """
    n = lattice.n_particles
    centers = [np.atleast_1d(np.asarray(c, dtype=float)) for c in centers]
    widths = [float(w) for w in np.broadcast_to(np.asarray(widths, dtype=float), (n,))]
    if len(centers) != n or len(spinors) != n:
        raise ValueError("need one center, width and spinor per particle")
    if truncation_radius is None:
        radii = [w * np.sqrt(2 * np.log(1 / tail)) for w in widths]
    else:
        radii = [float(r) for r in np.broadcast_to(np.asarray(truncation_radius, dtype=float), (n,))]
    half = lattice.length / 2
    coords = np.arange(lattice.n_sites) * lattice.spacing
    mesh = np.stack(np.meshgrid(*([coords] * lattice.spatial_dim), indexing="ij"), axis=-1)
    amp = np.ones((), dtype=complex)
    supports = []
    for c, w, r, spin in zip(centers, widths, radii, spinors):
        if w < 2 * lattice.spacing:
            raise ValueError(f"width {w} does not resolve the lattice (need >= {2 * lattice.spacing})")
        if r >= half:
            raise ValueError(f"truncation radius {r:.3g} exceeds half the lattice ({half:.3g})")
        dist = lattice.periodic_distance(mesh if lattice.spatial_dim > 1 else mesh[..., 0], c if lattice.spatial_dim > 1 else c[0])
        g = np.exp(-(dist**2) / (4 * w * w))
        inside = dist <= r
        g = np.where(inside, g, 0.0)
        spin = np.asarray(spin, dtype=complex)
        spin = spin / np.linalg.norm(spin)
        if spin.shape != (lattice.spinor_dim,):
            raise ValueError(f"spinor must have {lattice.spinor_dim} components")
        factor = g[..., None] * spin
        amp = np.multiply.outer(amp, factor)
        supports.append(inside)
    fock = np.asarray(fock_fiber, dtype=complex)
    fock = fock / np.linalg.norm(fock)
    amp = np.multiply.outer(amp, fock)
    support = supports[0]
    for s in supports[1:]:
        support = np.multiply.outer(support, s)
    state = MultiTimeState(
        lattice,
        (0.0,) * n,
        amp,
        {"support": support, "truncation_radius": radii, "centers": [c.tolist() for c in centers]},
    )
    nrm = state.norm()
    state.amplitudes /= nrm
    return state

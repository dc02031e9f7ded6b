"""Truncated bosonic Fock space over a discrete momentum grid.

Occupation vectors ``n = (n_0, ..., n_{M-1})`` with ``0 <= n_m <= n_max`` are
enumerated mode-major and little-endian: the flat index is
``sum_m n_m * (n_max + 1)**m``, so mode 0 varies fastest.  All ladder
operators act on the *last* axis of an array, which must have length
``(n_max + 1)**M``.

Fourier convention for the cut-off profile (d spatial dimensions)::

    rho_hat(k) = a**d * sum_x rho(x) exp(-i k.x) / (2 pi)**(d/2)

which, together with the mode weight ``w = dk**(d/2)``, turns the continuum
field integral into a finite mode sum with exact commutation relations.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class ResolutionError(ValueError):
    """Raised when a lattice cannot resolve a requested length scale."""


@dataclass(frozen=True)
class MomentumGrid:
    """Retained field modes ``k_m = 2 pi m / L`` with ``omega_m = sqrt(k_m^2 + mu^2)``.

    Modes come in ``(+m, -m)`` pairs, ordered by increasing ``|m|``; the zero
    mode, when retained, is index 0.  ``partner[i]`` is the index of ``-k_i``.
    """

    n_sites: int
    spacing: float
    field_mass: float
    spatial_dim: int
    mode_indices: np.ndarray  # (M, d) integers
    momenta: np.ndarray  # (M, d)
    frequencies: np.ndarray  # (M,)
    partner: np.ndarray  # (M,)

    @property
    def n_modes(self) -> int:
        return len(self.frequencies)

    @property
    def length(self) -> float:
        return self.n_sites * self.spacing

    @property
    def dk(self) -> float:
        return 2 * np.pi / self.length

    @property
    def mode_weight(self) -> float:
        return self.dk ** (self.spatial_dim / 2)


def _symmetric_window(n_modes: int, n_sites: int, spatial_dim: int, include_zero: bool):
    # integer vectors sorted by |m|^2, then lexicographically; only the
    # "positive" representative of each +-pair is enumerated
    half = n_sites // 2
    reach = int(np.ceil(n_modes ** (1 / spatial_dim))) + 1
    reach = min(reach, half)
    cands = []
    for m in itertools.product(range(-reach, reach + 1), repeat=spatial_dim):
        m = tuple(m)
        if all(c == 0 for c in m):
            continue
        first = next(c for c in m if c != 0)
        if first > 0:
            cands.append(m)
    cands.sort(key=lambda m: (sum(c * c for c in m), m))
    out = [tuple([0] * spatial_dim)] if include_zero else []
    n_pairs = (n_modes - len(out)) // 2
    for m in cands[:n_pairs]:
        if any(abs(c) >= half and 2 * abs(c) == n_sites for c in m):
            raise ResolutionError(
                f"mode {m} sits on the Nyquist momentum of a {n_sites}-site lattice"
            )
        out.append(m)
        out.append(tuple(-c for c in m))
    if len(out) - int(include_zero) < 2 * n_pairs:
        raise ResolutionError("lattice too small for the requested number of modes")
    return np.array(out, dtype=int).reshape(-1, spatial_dim)


def build_momentum_grid(
    n_sites: int,
    spacing: float,
    n_modes: int,
    field_mass: float,
    spatial_dim: int = 1,
    include_zero: bool | None = None,
) -> MomentumGrid:
    """Symmetric window of ``n_modes`` momenta on a periodic lattice.

    By default the zero mode is kept only when ``field_mass > 0`` and
    ``n_modes`` is odd; everything else is filled with ``+-m`` pairs.  For
    ``field_mass == 0`` an odd request therefore yields ``n_modes - 1`` modes.
    ``include_zero=True`` forces the zero mode in (massive fields only) and
    fills the rest with pairs, so an even request yields ``n_modes - 1`` modes.
    """
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    if field_mass < 0:
        raise ValueError(f"field mass must be non-negative, got {field_mass}")
    if n_modes < 1:
        raise ValueError("need at least one mode")
    if n_modes > n_sites**spatial_dim:
        raise ValueError(
            f"n_modes={n_modes} exceeds the {n_sites**spatial_dim} lattice momenta (aliasing)"
        )
    if include_zero is None:
        include_zero = field_mass > 0 and n_modes % 2 == 1
    elif include_zero and field_mass == 0:
        raise ValueError("a massless field has no finite-frequency zero mode")
    idx = _symmetric_window(n_modes, n_sites, spatial_dim, include_zero)
    if len(idx) == 0:
        raise ValueError("momentum window is empty")
    dk = 2 * np.pi / (n_sites * spacing)
    k = idx * dk
    omega = np.sqrt(np.sum(k * k, axis=1) + field_mass**2)
    lookup = {tuple(m): i for i, m in enumerate(idx)}
    partner = np.array([lookup[tuple(-m)] for m in idx])
    return MomentumGrid(
        n_sites=n_sites,
        spacing=float(spacing),
        field_mass=float(field_mass),
        spatial_dim=spatial_dim,
        mode_indices=idx,
        momenta=k,
        frequencies=omega,
        partner=partner,
    )


@dataclass(frozen=True)
class FockTruncation:
    n_modes: int
    max_occupation: int

    def __post_init__(self):
        if self.max_occupation < 0:
            raise ValueError("max_occupation must be non-negative")

    @property
    def levels(self) -> int:
        return self.max_occupation + 1

    @property
    def dimension(self) -> int:
        return self.levels**self.n_modes

    @property
    def safe_max(self) -> int:
        return self.max_occupation - 1

    @property
    def tensor_shape(self) -> tuple:
        # C-order shape of the Fock axis; the last entry is mode 0
        return (self.levels,) * self.n_modes

    def occupations(self) -> np.ndarray:
        """``(dimension, M)`` table of occupation numbers in enumeration order."""
        flat = np.arange(self.dimension)
        return np.stack([(flat // self.levels**m) % self.levels for m in range(self.n_modes)], axis=1)

    def index(self, occupation) -> int:
        occ = np.asarray(occupation)
        if occ.shape != (self.n_modes,) or occ.min() < 0 or occ.max() > self.max_occupation:
            raise ValueError(f"occupation {occupation!r} outside the truncation")
        return int(np.sum(occ * self.levels ** np.arange(self.n_modes)))

    def vacuum(self) -> np.ndarray:
        v = np.zeros(self.dimension, dtype=complex)
        v[0] = 1.0
        return v

    def basis_vector(self, occupation) -> np.ndarray:
        v = np.zeros(self.dimension, dtype=complex)
        v[self.index(occupation)] = 1.0
        return v

    def safe_mask(self) -> np.ndarray:
        """True on occupation vectors where every mode is below ``n_max``."""
        return np.all(self.occupations() <= self.safe_max, axis=1)

    def top_mask(self) -> np.ndarray:
        return ~self.safe_mask()

    def total_number(self) -> np.ndarray:
        return self.occupations().sum(axis=1)


def _mode_axis(arr: np.ndarray, trunc: FockTruncation, m: int):
    lead = arr.shape[:-1]
    view = arr.reshape(lead + trunc.tensor_shape)
    return view, len(lead) + trunc.n_modes - 1 - m


def _slc(ndim, axis, s):
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def apply_annihilation(trunc: FockTruncation, m: int, v: np.ndarray) -> np.ndarray:
    """``a_m`` on the last axis: ``out[n] = sqrt(n_m + 1) v[n + e_m]``."""
    if not 0 <= m < trunc.n_modes:
        raise IndexError(f"mode {m} out of range")
    view, ax = _mode_axis(v, trunc, m)
    out = np.zeros_like(view)
    nmax = trunc.max_occupation
    shape = [1] * view.ndim
    shape[ax] = nmax
    amp = np.sqrt(np.arange(1, nmax + 1)).reshape(shape)
    out[_slc(view.ndim, ax, slice(0, nmax))] = amp * view[_slc(view.ndim, ax, slice(1, nmax + 1))]
    return out.reshape(v.shape)


def apply_creation(trunc: FockTruncation, m: int, v: np.ndarray) -> np.ndarray:
    """``a_m^dagger`` on the last axis; raising out of ``n_max`` gives zero."""
    if not 0 <= m < trunc.n_modes:
        raise IndexError(f"mode {m} out of range")
    view, ax = _mode_axis(v, trunc, m)
    out = np.zeros_like(view)
    nmax = trunc.max_occupation
    shape = [1] * view.ndim
    shape[ax] = nmax
    amp = np.sqrt(np.arange(1, nmax + 1)).reshape(shape)
    out[_slc(view.ndim, ax, slice(1, nmax + 1))] = amp * view[_slc(view.ndim, ax, slice(0, nmax))]
    return out.reshape(v.shape)


def apply_number(trunc: FockTruncation, m: int, v: np.ndarray) -> np.ndarray:
    occ = trunc.occupations()[:, m]
    return v * occ


def free_field_energies(trunc: FockTruncation, grid: MomentumGrid) -> np.ndarray:
    """Diagonal of ``H_f``: ``sum_m n_m omega_m`` per occupation vector."""
    if trunc.n_modes != grid.n_modes:
        raise ValueError("truncation and momentum grid disagree on the number of modes")
    return trunc.occupations() @ grid.frequencies


def apply_free_field_hamiltonian(trunc: FockTruncation, grid: MomentumGrid, v: np.ndarray) -> np.ndarray:
    return v * free_field_energies(trunc, grid)


def apply_free_field_phase(trunc: FockTruncation, grid: MomentumGrid, tau: float, v: np.ndarray) -> np.ndarray:
    """``exp(i H_f tau)`` applied exactly as a diagonal phase."""
    return v * np.exp(1j * tau * free_field_energies(trunc, grid))


# -- cut-off profile --------------------------------------------------------


def _bump(r: np.ndarray, delta: float) -> np.ndarray:
    u = 2 * np.asarray(r, dtype=float) / delta
    out = np.zeros_like(u)
    inside = np.abs(u) < 1
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


def periodic_coordinates(n_sites: int, spacing: float) -> np.ndarray:
    """Minimum-image coordinate of each site relative to site 0."""
    i = np.arange(n_sites)
    i = np.where(i > n_sites // 2, i - n_sites, i)
    return i * spacing


@dataclass(frozen=True)
class CutoffProfile:
    """Bump ``rho(x) ~ exp(-1/(1-(2|x|/delta)^2))`` sampled on the lattice.

    ``rho`` has the lattice shape ``(n_sites,)*d`` with site 0 at the origin;
    ``norm`` converts the bare bump into the normalized profile.
    """

    delta: float
    n_sites: int
    spacing: float
    spatial_dim: int
    rho: np.ndarray
    norm: float
    rho_hat: np.ndarray | None = field(default=None)

    def value(self, x) -> np.ndarray:
        """Normalized profile at arbitrary (non-periodic) displacement(s) ``x``."""
        x = np.asarray(x, dtype=float)
        r = np.abs(x) if self.spatial_dim == 1 else np.linalg.norm(x, axis=-1)
        return self.norm * _bump(r, self.delta)

    def form_factor(self, k) -> np.ndarray:
        """Lattice Fourier transform at arbitrary momenta ``k`` (shape ``(..., d)`` or ``(...)`` in 1-D)."""
        k = np.asarray(k, dtype=float)
        if self.spatial_dim == 1 and (k.ndim == 0 or k.shape[-1] != 1):
            k = k[..., None]
        coords = _site_coordinates(self.n_sites, self.spacing, self.spatial_dim)
        mask = self.rho.ravel() != 0
        pts = coords[mask]
        w = self.rho.ravel()[mask]
        phase = np.exp(-1j * (k @ pts.T))
        return self.spacing**self.spatial_dim * (phase @ w) / (2 * np.pi) ** (self.spatial_dim / 2)

    def with_grid(self, grid: MomentumGrid) -> "CutoffProfile":
        if grid.n_sites != self.n_sites or not np.isclose(grid.spacing, self.spacing):
            raise ValueError("momentum grid belongs to a different lattice")
        return CutoffProfile(
            self.delta, self.n_sites, self.spacing, self.spatial_dim, self.rho, self.norm,
            self.form_factor(grid.momenta),
        )


def _site_coordinates(n_sites: int, spacing: float, spatial_dim: int) -> np.ndarray:
    c = periodic_coordinates(n_sites, spacing)
    mesh = np.meshgrid(*([c] * spatial_dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def bump_profile(
    delta: float,
    n_sites: int,
    spacing: float,
    grid: MomentumGrid | None = None,
    spatial_dim: int = 1,
) -> CutoffProfile:
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if delta < 2 * spacing:
        raise ResolutionError(
            f"delta={delta} is below two lattice spacings ({2 * spacing}); the profile would vanish"
        )
    if delta / 2 >= n_sites * spacing / 2:
        raise ResolutionError("profile support does not fit in half the lattice")
    coords = _site_coordinates(n_sites, spacing, spatial_dim)
    r = np.linalg.norm(coords, axis=1)
    bare = _bump(r, delta)
    total = spacing**spatial_dim * bare.sum()
    if total == 0:
        raise ResolutionError("no lattice site inside the profile support")
    rho = (bare / total).reshape((n_sites,) * spatial_dim)
    prof = CutoffProfile(float(delta), n_sites, float(spacing), spatial_dim, rho, 1.0 / total)
    return prof.with_grid(grid) if grid is not None else prof

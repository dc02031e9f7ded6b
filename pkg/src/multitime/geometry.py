"""Configuration space-time combinatorics for the delta-separated domain.

Times are compared with exact equality: configurations are declared on a
time grid, and a tie tolerance would silently change the partition.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SpacetimeConfiguration:
    """N space-time points ``(t_j, x_j)`` and the cut-off diameter ``delta``.

    With ``period`` set, spatial distances use the minimum-image convention.
    """

    points: tuple
    delta: float
    period: float | None = None

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError("a configuration needs at least one point")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def times(self) -> tuple:
        return tuple(float(p[0]) for p in self.points)

    def distance(self, j: int, k: int) -> float:
        d = np.atleast_1d(np.asarray(self.points[j][1], dtype=float) - np.asarray(self.points[k][1], dtype=float))
        if self.period is not None:
            d = d - self.period * np.round(d / self.period)
        return float(np.linalg.norm(d))


def spacelike_margin(j: int, k: int, config: SpacetimeConfiguration) -> float:
    """``|x_j - x_k| - |t_j - t_k| - delta``; positive means strictly delta-spacelike."""
    if j == k:
        raise ValueError("margin needs two distinct particles")
    tj, tk = config.points[j][0], config.points[k][0]
    return config.distance(j, k) - abs(tj - tk) - config.delta


def is_in_s_delta(config: SpacetimeConfiguration) -> bool:
    for j, k in itertools.combinations(range(config.n), 2):
        if config.points[j][0] == config.points[k][0]:
            continue
        if not spacelike_margin(j, k, config) > 0:
            return False
    return True


@dataclass(frozen=True)
class Partition:
    blocks: tuple  # tuple of sorted tuples of particle indices
    block_times: tuple

    def __post_init__(self):
        seen = sorted(i for b in self.blocks for i in b)
        if seen != list(range(len(seen))):
            raise ValueError("blocks must cover 0..N-1 exactly once")


def corresponding_partition(config: SpacetimeConfiguration) -> Partition:
    """Classes of the transitive closure of ``|x_j - x_k| <= |t_j - t_k| + delta``."""
    if not is_in_s_delta(config):
        raise ValueError("configuration is outside the delta-separated domain")
    parent = list(range(config.n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for j, k in itertools.combinations(range(config.n), 2):
        if spacelike_margin(j, k, config) <= 0:
            parent[find(j)] = find(k)
    groups: dict = {}
    for i in range(config.n):
        groups.setdefault(find(i), []).append(i)
    blocks = tuple(sorted(tuple(g) for g in groups.values()))
    times = []
    for b in blocks:
        ts = {config.points[i][0] for i in b}
        assert len(ts) == 1, "block with several times inside S_delta"
        times.append(float(ts.pop()))
    return Partition(blocks, tuple(times))


def block_time_directions(p: Partition) -> list:
    n = sum(len(b) for b in p.blocks)
    dirs = []
    for b in p.blocks:
        v = np.zeros(n)
        v[list(b)] = 1.0
        dirs.append(v)
    return dirs


def _ball_offsets(radius_sites: float, spatial_dim: int) -> list:
    r = int(np.floor(radius_sites + 1e-9))
    offs = []
    for o in itertools.product(range(-r, r + 1), repeat=spatial_dim):
        if np.sqrt(sum(c * c for c in o)) <= radius_sites + 1e-9:
            offs.append(o)
    return offs


def future_support_bound(
    initial_support: np.ndarray,
    subset,
    t: float,
    spacing: float,
    spatial_dim: int = 1,
) -> np.ndarray:
    """Dilate each coordinate of the particles in ``subset`` by a ball of radius ``t``.

    ``initial_support`` is a boolean mask over configurations, shape
    ``(n_sites,)*(d N)``; the result has the same shape.
    """
    if t < 0:
        raise ValueError("duration must be non-negative")
    mask = np.asarray(initial_support, dtype=bool)
    n_sites = mask.shape[0]
    if t > n_sites * spacing / 2:
        raise ValueError("dilation exceeds half the lattice; supports would wrap around")
    out = mask
    offsets = _ball_offsets(t / spacing, spatial_dim)
    for j in sorted(subset):
        axes = tuple(range(j * spatial_dim, (j + 1) * spatial_dim))
        acc = np.zeros_like(out)
        for o in offsets:
            acc |= np.roll(out, o, axis=axes)
        out = acc
    return out


def support_mask_from_sites(sites, n_sites: int, n_particles: int, spatial_dim: int = 1) -> np.ndarray:
    """Boolean configuration mask from an iterable of site tuples (one entry per particle)."""
    mask = np.zeros((n_sites,) * (spatial_dim * n_particles), dtype=bool)
    for s in sites:
        flat = []
        for c in s:
            flat.extend(np.atleast_1d(c).astype(int).tolist())
        mask[tuple(flat)] = True
    return mask


def lattice_configurations(times, n_sites: int, spacing: float, delta: float, spatial_dim: int = 1):
    """Yield ``(site_tuple, SpacetimeConfiguration)`` over every lattice configuration."""
    n = len(times)
    coords = list(itertools.product(range(n_sites), repeat=spatial_dim))
    for sites in itertools.product(coords, repeat=n):
        pts = tuple((times[j], np.array(sites[j]) * spacing) for j in range(n))
        flat = sites if spatial_dim > 1 else tuple(s[0] for s in sites)
        yield flat, SpacetimeConfiguration(pts, delta, n_sites * spacing)

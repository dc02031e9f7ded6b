import numpy as np
import pytest

from multitime import Model, PropagatorPlan
from multitime.dirac import smooth_initial_state


def dense_ladder(n_modes, n_max, m, kind="a"):
    """Annihilation/creation matrix of mode ``m`` by Kronecker products (mode 0 fastest)."""
    lv = n_max + 1
    a = np.diag(np.sqrt(np.arange(1, lv)), 1)
    op = a if kind == "a" else a.T
    mats = [op if k == m else np.eye(lv) for k in range(n_modes - 1, -1, -1)]
    out = np.array([[1.0]])
    for mat in mats:
        out = np.kron(out, mat)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def dense_model():
    # dense-oracle configuration: dimension 8^2 * 2^2 * 2^2 = 1024
    return Model.build(8, 0.5, 2, 2, 1, 1.0, dirac_mass=1.0, field_mass=0.5, coupling=1.0)


@pytest.fixture(scope="session")
def reference_model():
    # reference verification configuration: dimension 32^2 * 2^2 * 2^4 = 65536
    return Model.build(32, 0.25, 2, 4, 1, 2.0, dirac_mass=1.0, field_mass=0.5, coupling=1.0)


@pytest.fixture(scope="session")
def reference_state(reference_model):
    m = reference_model
    return smooth_initial_state(m.lattice, [2.0, 6.0], [0.5, 0.5], [[1, 0], [0, 1]], m.truncation.vacuum())


@pytest.fixture(scope="session")
def tight_plan():
    return PropagatorPlan(tolerance=1e-12)

import numpy as np
import pytest
from scipy.linalg import expm

from multitime.krylov import KrylovConvergenceError, KrylovInfo, expm_krylov, lanczos


def hermitian(n, rng, scale=1.0):
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return scale * (a + a.conj().T) / 2


@pytest.mark.parametrize("tau", [0.3, 2.0, -1.5])
def test_matches_dense_exponential(tau, rng):
    H = hermitian(120, rng, 0.3)
    v = rng.standard_normal(120) + 1j * rng.standard_normal(120)
    out = expm_krylov(lambda x: H @ x, v, tau, krylov_dim=20, tol=1e-12)
    np.testing.assert_allclose(out, expm(-1j * tau * H) @ v, atol=1e-10)


def test_adaptive_substeps_used(rng):
    H = hermitian(80, rng, 3.0)
    v = rng.standard_normal(80) + 0j
    info = KrylovInfo()
    out = expm_krylov(lambda x: H @ x, v, 5.0, krylov_dim=10, tol=1e-10, info=info)
    assert info.substeps > 1
    np.testing.assert_allclose(out, expm(-5j * H) @ v, atol=1e-8)


def test_max_step_respected(rng):
    H = hermitian(30, rng)
    info = KrylovInfo()
    expm_krylov(lambda x: H @ x, np.ones(30, complex), 1.0, max_step=0.1, info=info)
    assert info.substeps >= 10


def test_invariant_subspace_breakdown():
    H = np.diag([1.0, 2.0, 3.0, 4.0])
    v = np.array([1.0, 1.0, 0, 0], dtype=complex)
    out = expm_krylov(lambda x: H @ x, v, 0.7, krylov_dim=10)
    np.testing.assert_allclose(out, np.exp(-0.7j * np.diag(H)) * v, atol=1e-14)


def test_zero_cases():
    H = np.eye(3)
    v = np.ones(3, complex)
    np.testing.assert_array_equal(expm_krylov(lambda x: H @ x, v, 0.0), v)
    np.testing.assert_array_equal(expm_krylov(lambda x: H @ x, np.zeros(3, complex), 1.0), 0)


def test_shape_preserved(rng):
    H = hermitian(12, rng)
    v = rng.standard_normal((3, 4)) + 0j
    out = expm_krylov(lambda x: (H @ x.ravel()), v, 0.5)
    assert out.shape == (3, 4)


def test_budget_exhaustion_reports_residual(rng):
    H = hermitian(200, rng, 10.0)
    v = rng.standard_normal(200) + 0j
    with pytest.raises(KrylovConvergenceError) as exc:
        expm_krylov(lambda x: H @ x, v, 50.0, krylov_dim=4, tol=1e-12, max_substeps=3)
    assert exc.value.residual >= 0


def test_argument_validation():
    with pytest.raises(ValueError):
        expm_krylov(lambda x: x, np.ones(2), 1.0, krylov_dim=1)
    with pytest.raises(ValueError):
        expm_krylov(lambda x: x, np.ones(2), 1.0, tol=0)


def test_lanczos_orthonormal(rng):
    H = hermitian(50, rng)
    v = rng.standard_normal(50) + 0j
    V, alpha, beta, k = lanczos(lambda x: H @ x, v / np.linalg.norm(v), 15)
    G = V[:k].conj() @ V[:k].T
    np.testing.assert_allclose(G, np.eye(k), atol=1e-12)
    T = np.diag(alpha[:k]) + np.diag(beta[: k - 1], 1) + np.diag(beta[: k - 1], -1)
    np.testing.assert_allclose(V[:k].conj() @ (H @ V[:k].T), T, atol=1e-12)

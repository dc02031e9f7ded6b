import numpy as np
import pytest
from scipy.linalg import expm

from multitime import Model
from multitime.evolution import dense_h_tilde
from multitime.model import _field_array, apply_field_operator, dense_matrix, free_dirac_array


def field_matrix(model, t, j, g=1.0):
    return dense_matrix(lambda v: _field_array(model, v, t, (j,), g), model.dimension, model.state_shape)


def dirac_matrix(model, j):
    return dense_matrix(lambda v: free_dirac_array(model, v, (j,)), model.dimension, model.state_shape)


def hf_matrix(model):
    return np.diag(np.broadcast_to(model.hf_diagonal, model.state_shape).ravel().astype(complex))


def test_build_validates_pieces():
    with pytest.raises(ValueError):
        Model.build(8, 0.5, 1, 9, 1, 1.0)


def test_field_operator_hermitian(dense_model):
    F = field_matrix(dense_model, 0.37, 0)
    np.testing.assert_allclose(F, F.conj().T, atol=1e-14)


def test_dirac_field_cross_commutator_vanishes(dense_model):
    m = dense_model
    for j, k in [(0, 1), (1, 0)]:
        H0 = dirac_matrix(m, j)
        F = field_matrix(m, 0.4, k)
        assert np.max(np.abs(H0 @ F - F @ H0)) <= 1e-12


def test_heisenberg_shift(dense_model):
    m = dense_model
    tau = 0.83
    ph = np.exp(1j * tau * np.broadcast_to(m.hf_diagonal, m.state_shape).ravel())
    F = field_matrix(m, 0.2, 1)
    shifted = ph[:, None] * F * ph.conj()[None, :]
    assert np.max(np.abs(shifted - field_matrix(m, 0.2 + tau, 1))) <= 1e-12


def test_h_tilde_conjugation(dense_model):
    m = dense_model
    s, r, tau = 0.3, 1.1, 0.7
    ph = np.exp(1j * (r - s) * np.broadcast_to(m.hf_diagonal, m.state_shape).ravel())
    lhs = ph[:, None] * expm(-1j * tau * dense_h_tilde(m, (0, 1), s)) * ph.conj()[None, :]
    rhs = expm(-1j * tau * dense_h_tilde(m, (0, 1), r))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_field_at_point_matches_particle_field(dense_model, rng):
    m = dense_model
    st = m.random_state(rng)
    # phi(t, x) with x equal to the particle's site is the same operator on configurations with x_0 = x
    a = apply_field_operator(m, st, 0.3, x=1.5).amplitudes[3]
    b = apply_field_operator(m, st, 0.3, particle=0).amplitudes[3]
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_apply_field_operator_arguments(dense_model, rng):
    st = dense_model.random_state(rng)
    with pytest.raises(ValueError):
        apply_field_operator(dense_model, st, 0.0)
    with pytest.raises(ValueError):
        apply_field_operator(dense_model, st, 0.0, particle=0, x=0.0)
    with pytest.raises(IndexError):
        apply_field_operator(dense_model, st, 0.0, particle=5)


def test_coupling_scales_linearly(dense_model, rng):
    st = dense_model.random_state(rng)
    a = apply_field_operator(dense_model, st, 0.1, particle=1, coupling=2.5).amplitudes
    b = apply_field_operator(dense_model, st, 0.1, particle=1).amplitudes
    np.testing.assert_allclose(a, 2.5 * b, atol=1e-14)


def test_random_state_safe(dense_model, rng):
    st = dense_model.random_state(rng, safe=True)
    assert st.norm() == pytest.approx(1.0)
    assert np.all(st.amplitudes[..., ~dense_model.truncation.safe_mask()] == 0)


def test_dense_matrix_refuses_large():
    with pytest.raises(ValueError):
        dense_matrix(lambda v: v, 5000, (5000,))

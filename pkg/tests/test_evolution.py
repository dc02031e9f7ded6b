import numpy as np
import pytest

from multitime import HamiltonianSpec, Model, PropagatorPlan, apply_H_A, multi_time_derivative, multi_time_evaluate, propagate_U_A
from multitime.evolution import (
    PropagationError,
    apply_H_tilde,
    dense_propagator,
    factor_sequence,
    h_a_array,
    propagate_array,
    time_order,
)
from multitime.dirac import MultiTimeState
from multitime.model import dense_matrix, free_dirac_array


def vec(st):
    return st.amplitudes.ravel()


def test_identity_at_equal_times(dense_model, rng):
    st = dense_model.random_state(rng)
    out = propagate_U_A(dense_model, (0,), 0.4, 0.4, st.with_amplitudes(st.amplitudes, times=(0.4, 0.0)))
    np.testing.assert_array_equal(out.amplitudes, st.amplitudes)


def test_krylov_matches_dense(dense_model, rng):
    st = dense_model.random_state(rng)
    for subset, t, s in [((0,), 0.9, 0.2), ((0, 1), -0.5, 0.3), ((1,), 1.7, 0.0)]:
        U = dense_propagator(dense_model, subset, t, s)
        out = propagate_array(dense_model, subset, t, s, st.amplitudes, PropagatorPlan())
        assert np.max(np.abs(out.ravel() - U @ vec(st))) <= 1e-9


def test_propagator_records_times(dense_model, rng):
    st = dense_model.random_state(rng)
    out = propagate_U_A(dense_model, (1,), 0.5, 0.0, st)
    assert out.times == (0.0, 0.5)
    assert out.metadata["factors"][-1]["subset"] == [1]


def test_unitarity_and_group_law(dense_model, rng):
    st = dense_model.random_state(rng)
    plan = PropagatorPlan()
    t, s, r = 1.3, 0.6, -0.2
    direct = propagate_array(dense_model, (0, 1), t, r, st.amplitudes, plan)
    two = propagate_array(dense_model, (0, 1), t, s, propagate_array(dense_model, (0, 1), s, r, st.amplitudes, plan), plan)
    assert abs(np.linalg.norm(direct) - np.linalg.norm(st.amplitudes)) < 1e-9 * np.linalg.norm(st.amplitudes)
    assert np.linalg.norm(direct - two) <= 1e-8 * np.linalg.norm(st.amplitudes)


def test_backward_inverts_forward(dense_model, rng):
    st = dense_model.random_state(rng)
    plan = PropagatorPlan()
    fwd = propagate_array(dense_model, (0,), 0.8, 0.1, st.amplitudes, plan)
    back = propagate_array(dense_model, (0,), 0.1, 0.8, fwd, plan)
    np.testing.assert_allclose(back, st.amplitudes, atol=1e-9)


def test_generator_property(dense_model, rng):
    m = dense_model
    st = m.random_state(rng)
    s = 0.4
    gen = -1j * h_a_array(m, (0,), s, st.amplitudes)
    errs = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        u = propagate_array(m, (0,), s + dt, s, st.amplitudes, PropagatorPlan(tolerance=1e-13))
        errs.append(np.max(np.abs((u - st.amplitudes) / dt - gen)))
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    np.testing.assert_allclose(slopes, 1.0, atol=0.1)


def test_time_order_and_factors():
    assert time_order((0.1, 0.5, 0.5)) == [1, 2, 0]
    assert time_order((0.1, 0.5, 0.5), "descending") == [2, 1, 0]
    seq = factor_sequence((0.3, 0.1))
    assert seq == [((0, 1), 0.1, 0.0), ((0,), 0.3, 0.1)]
    seq = factor_sequence((0.2, 0.2, 0.2))
    assert seq[0] == ((0, 1, 2), 0.2, 0.0)
    assert all(t == s for _, t, s in seq[1:])


def test_zero_times_return_initial(dense_model, rng):
    st = dense_model.random_state(rng)
    out = multi_time_evaluate(dense_model, (0.0, 0.0), st)
    np.testing.assert_array_equal(out.amplitudes, st.amplitudes)
    assert all(f["skipped"] for f in out.metadata["factors"])


def test_equal_times_collapse(dense_model, rng):
    st = dense_model.random_state(rng)
    out = multi_time_evaluate(dense_model, (0.6, 0.6), st)
    joint = propagate_array(dense_model, (0, 1), 0.6, 0.0, st.amplitudes, PropagatorPlan())
    np.testing.assert_array_equal(out.amplitudes, joint)


def test_two_particle_construction(dense_model, rng):
    st = dense_model.random_state(rng)
    out = multi_time_evaluate(dense_model, (0.7, 0.2), st)
    U12 = dense_propagator(dense_model, (0, 1), 0.2, 0.0)
    U1 = dense_propagator(dense_model, (0,), 0.7, 0.2)
    np.testing.assert_allclose(vec(out), U1 @ U12 @ vec(st), atol=1e-9)
    assert [f["subset"] for f in out.metadata["factors"]] == [[0, 1], [0]]


def test_initial_times_must_vanish(dense_model, rng):
    st = dense_model.random_state(rng, times=(0.1, 0.0))
    with pytest.raises(ValueError):
        multi_time_evaluate(dense_model, (0.3, 0.3), st)
    with pytest.raises(ValueError):
        multi_time_evaluate(dense_model, (0.3,), dense_model.random_state(rng))


def test_failure_names_factor(dense_model, rng):
    st = dense_model.random_state(rng)
    plan = PropagatorPlan(krylov_dim=3, tolerance=1e-14, max_substeps=2)
    with pytest.raises(PropagationError) as exc:
        multi_time_evaluate(dense_model, (5.0, 1.0), st, plan)
    assert exc.value.factor[0] == (0, 1)


def test_derivative_free_eigenstate():
    m = Model.build(8, 0.5, 1, 2, 1, 1.0, dirac_mass=1.0, field_mass=0.5, coupling=0.0)
    H = dense_matrix(lambda v: free_dirac_array(m, v[..., None], (0,))[..., 0], 16, (8, 2))
    E, V = np.linalg.eigh(H)
    amp = np.zeros(m.state_shape, complex)
    amp[..., 0] = V[:, 5].reshape(8, 2)
    st = MultiTimeState(m.lattice, (0.0,), amp)
    errs = []
    for dt in (0.04, 0.02):
        d = multi_time_derivative(m, (0.3,), st, (0,), dt, PropagatorPlan(tolerance=1e-13))
        psi = multi_time_evaluate(m, (0.3,), st, PropagatorPlan(tolerance=1e-13))
        errs.append(np.max(np.abs(d.amplitudes + 1j * E[5] * psi.amplitudes)))
    assert np.log2(errs[0] / errs[1]) == pytest.approx(2.0, abs=0.1)


def test_derivative_linear(dense_model, rng):
    a, b = dense_model.random_state(rng), dense_model.random_state(rng)
    combo = a.with_amplitudes(2 * a.amplitudes - 1j * b.amplitudes)
    da = multi_time_derivative(dense_model, (0.3, 0.1), a, (0,), 0.01)
    db = multi_time_derivative(dense_model, (0.3, 0.1), b, (0,), 0.01)
    dc = multi_time_derivative(dense_model, (0.3, 0.1), combo, (0,), 0.01)
    np.testing.assert_allclose(dc.amplitudes, 2 * da.amplitudes - 1j * db.amplitudes, atol=1e-7)
    with pytest.raises(ValueError):
        multi_time_derivative(dense_model, (0.3, 0.1), a, (0,), 0.0)


def test_apply_h_variants(dense_model, rng):
    st = dense_model.random_state(rng)
    plain = apply_H_A(dense_model, HamiltonianSpec((1, 0), 0.2), st)
    tilde = apply_H_A(dense_model, HamiltonianSpec((0, 1), 0.2, include_free_field=True), st)
    np.testing.assert_allclose(tilde.amplitudes - plain.amplitudes, st.amplitudes * dense_model.hf_diagonal)
    np.testing.assert_allclose(apply_H_tilde(dense_model, (0, 1), 0.2, st).amplitudes, tilde.amplitudes)
    with pytest.raises(ValueError):
        apply_H_A(dense_model, HamiltonianSpec((), 0.2), st)


def test_plan_validation():
    with pytest.raises(ValueError):
        PropagatorPlan(tolerance=0)
    with pytest.raises(ValueError):
        PropagatorPlan(krylov_dim=1)
    with pytest.raises(ValueError):
        PropagatorPlan(substep=-1.0)

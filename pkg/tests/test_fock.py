import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multitime.fock import (
    FockTruncation,
    ResolutionError,
    apply_annihilation,
    apply_creation,
    apply_free_field_phase,
    apply_number,
    bump_profile,
    build_momentum_grid,
    free_field_energies,
    periodic_coordinates,
)

from conftest import dense_ladder


class TestMomentumGrid:
    def test_pairs_are_symmetric(self):
        g = build_momentum_grid(32, 0.25, 6, 0.5)
        assert g.n_modes == 6
        np.testing.assert_allclose(g.momenta[g.partner], -g.momenta)
        np.testing.assert_allclose(g.frequencies[g.partner], g.frequencies)

    def test_zero_mode_only_for_massive_odd(self):
        assert 0 in build_momentum_grid(16, 0.5, 5, 0.5).mode_indices
        assert build_momentum_grid(16, 0.5, 5, 0.0).n_modes == 4
        assert 0 not in build_momentum_grid(16, 0.5, 4, 0.5).mode_indices

    def test_forced_zero_mode(self):
        g = build_momentum_grid(16, 0.5, 5, 0.5, include_zero=True)
        assert g.mode_indices[0, 0] == 0 and g.n_modes == 5
        with pytest.raises(ValueError):
            build_momentum_grid(16, 0.5, 5, 0.0, include_zero=True)

    def test_frequencies(self):
        g = build_momentum_grid(20, 0.1, 4, 0.7)
        np.testing.assert_allclose(g.frequencies, np.sqrt(g.momenta[:, 0] ** 2 + 0.49))
        assert g.dk == pytest.approx(2 * np.pi / 2.0)

    def test_too_many_modes(self):
        with pytest.raises(ValueError, match="aliasing"):
            build_momentum_grid(8, 0.5, 9, 0.5)

    def test_nyquist_rejected(self):
        with pytest.raises(ResolutionError):
            build_momentum_grid(8, 0.5, 8, 0.5)

    def test_bad_spacing(self):
        with pytest.raises(ValueError):
            build_momentum_grid(8, 0.0, 2, 0.5)
        with pytest.raises(ValueError):
            build_momentum_grid(8, 0.5, 2, -1.0)

    def test_three_dimensional_window(self):
        g = build_momentum_grid(6, 0.5, 6, 0.3, spatial_dim=3)
        norms = np.abs(g.mode_indices).sum(axis=1)
        assert np.all(norms == 1)
        np.testing.assert_allclose(g.momenta[g.partner], -g.momenta)


class TestTruncation:
    def test_enumeration_little_endian(self):
        t = FockTruncation(3, 2)
        occ = t.occupations()
        assert t.dimension == 27
        assert t.index([1, 0, 0]) == 1
        assert t.index([0, 1, 0]) == 3
        assert t.index([2, 1, 1]) == 2 + 3 + 9
        for i in range(t.dimension):
            assert t.index(occ[i]) == i

    def test_vacuum_and_masks(self):
        t = FockTruncation(2, 2)
        assert t.vacuum()[0] == 1 and t.vacuum().sum() == 1
        assert t.safe_mask().sum() == 4
        assert np.all(t.safe_mask() != t.top_mask())

    @pytest.mark.parametrize("n_modes,n_max", [(1, 3), (2, 2), (3, 1)])
    def test_ladder_matches_kronecker(self, n_modes, n_max, rng):
        t = FockTruncation(n_modes, n_max)
        v = rng.standard_normal((5, t.dimension)) + 1j * rng.standard_normal((5, t.dimension))
        for m in range(n_modes):
            a = dense_ladder(n_modes, n_max, m, "a")
            ad = dense_ladder(n_modes, n_max, m, "ad")
            np.testing.assert_allclose(apply_annihilation(t, m, v), v @ a.T, atol=1e-14)
            np.testing.assert_allclose(apply_creation(t, m, v), v @ ad.T, atol=1e-14)

    def test_ccr_on_safe_subspace(self):
        t = FockTruncation(2, 3)
        safe = np.flatnonzero(t.safe_mask())
        for m in range(2):
            for n in range(2):
                a = dense_ladder(2, 3, m, "a")
                ad = dense_ladder(2, 3, n, "ad")
                c = a @ ad - ad @ a
                expect = np.eye(t.dimension) * (m == n)
                np.testing.assert_allclose(c[:, safe], expect[:, safe], atol=1e-12)

    def test_ccr_truncation_defect(self):
        t = FockTruncation(1, 2)
        a, ad = dense_ladder(1, 2, 0, "a"), dense_ladder(1, 2, 0, "ad")
        c = a @ ad - ad @ a
        np.testing.assert_allclose(np.diag(c), [1, 1, -2])

    def test_number_operator(self, rng):
        t = FockTruncation(2, 2)
        v = rng.standard_normal(t.dimension)
        np.testing.assert_allclose(apply_number(t, 1, v), apply_creation(t, 1, apply_annihilation(t, 1, v)))

    def test_ladder_index_errors(self):
        t = FockTruncation(2, 1)
        with pytest.raises(IndexError):
            apply_annihilation(t, 2, np.zeros(4))

    def test_free_field_phase(self):
        t = FockTruncation(2, 1)
        g = build_momentum_grid(8, 0.5, 2, 0.5)
        e = free_field_energies(t, g)
        assert e[0] == 0 and e[3] == pytest.approx(2 * g.frequencies[0])
        v = np.ones(4, dtype=complex)
        np.testing.assert_allclose(apply_free_field_phase(t, g, 0.3, v), np.exp(0.3j * e))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
    def test_creation_is_adjoint(self, n_modes, n_max, seed):
        t = FockTruncation(n_modes, n_max)
        r = np.random.default_rng(seed)
        u = r.standard_normal(t.dimension) + 1j * r.standard_normal(t.dimension)
        v = r.standard_normal(t.dimension) + 1j * r.standard_normal(t.dimension)
        for m in range(n_modes):
            lhs = np.vdot(u, apply_annihilation(t, m, v))
            rhs = np.vdot(apply_creation(t, m, u), v)
            assert abs(lhs - rhs) < 1e-12 * (1 + abs(lhs))


class TestProfile:
    def test_normalised_and_symmetric(self):
        p = bump_profile(2.0, 32, 0.25)
        assert p.spacing * p.rho.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(p.rho[1:], p.rho[1:][::-1])
        assert p.rho.min() >= 0

    def test_support(self):
        p = bump_profile(2.0, 32, 0.25)
        x = periodic_coordinates(32, 0.25)
        assert np.all(p.rho[np.abs(x) >= 1.0] == 0)
        assert np.all(p.rho[np.abs(x) < 1.0] > 0)

    def test_form_factor_real_even(self):
        g = build_momentum_grid(32, 0.25, 6, 0.5)
        p = bump_profile(2.0, 32, 0.25, g)
        assert np.max(np.abs(p.rho_hat.imag)) < 1e-15
        np.testing.assert_allclose(p.rho_hat[g.partner], p.rho_hat)
        assert p.form_factor(0.0) == pytest.approx(1 / np.sqrt(2 * np.pi))

    def test_resolution_errors(self):
        with pytest.raises(ResolutionError):
            bump_profile(0.4, 32, 0.25)
        with pytest.raises(ResolutionError):
            bump_profile(8.0, 32, 0.25)

    def test_three_dimensional_normalisation(self):
        p = bump_profile(1.0, 6, 0.25, spatial_dim=3)
        assert p.rho.shape == (6, 6, 6)
        assert p.spacing**3 * p.rho.sum() == pytest.approx(1.0)

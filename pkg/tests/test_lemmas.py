import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nelsonlab.fock import enumerate_basis
from nelsonlab.lemmas import (MARGIN_TOL, IndefiniteFormError, bound_c_eps, lemma_suite,
                              minimal_form_constant, she4_report, verify_resolvent_identity)
from nelsonlab.modes import ModelParams, build_mode_grid, c_II_exact

P1 = ModelParams(lam=1.0)


@pytest.fixture(scope="module")
def basis12():
    return enumerate_basis(build_mode_grid(3, 4, P1), 3)


@pytest.fixture(scope="module")
def suite12(basis12):
    return {r.lemma_id: r for r in lemma_suite(basis12, P1)}


class TestMinimalFormConstant:
    def test_identity_pair(self):
        rep = minimal_form_constant(np.eye(4), np.eye(4), 0.0)
        assert rep.c_star == pytest.approx(1.0, rel=1e-14) and abs(rep.margin) < 1e-14

    def test_zero_form(self):
        rep = minimal_form_constant(np.zeros((3, 3)), np.diag([1.0, 2.0, 3.0]), 0.0)
        assert rep.c_star == 0.0 and rep.passed

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(-1.0, 1.0))
    def test_margin_at_own_constant(self, seed, alpha):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(6, 6))
        M = X + X.T
        N = np.diag(rng.uniform(0.1, 2.0, size=6))
        rep = minimal_form_constant(M, N, alpha)
        assert rep.margin >= -MARGIN_TOL
        # and no smaller constant works
        smaller = alpha * np.eye(6) + 0.99 * rep.c_star * N - M
        assert rep.c_star <= 0 or np.linalg.eigvalsh(smaller)[0] < 0

    def test_kernel_handled_by_alpha(self):
        M = np.array([[0.5, 0.0], [0.0, 1.0]])
        N = np.diag([0.0, 2.0])
        rep = minimal_form_constant(M, N, 0.5)
        assert rep.c_star == pytest.approx(0.25) and rep.passed  # 1 <= 0.5 + 2c

    def test_unbounded_when_kernel_exceeds_alpha(self):
        rep = minimal_form_constant(np.diag([1.0, 0.0]), np.diag([0.0, 1.0]), 0.5)
        assert rep.unbounded and not rep.passed
        assert rep.to_json()["c_star"] is None

    def test_unbounded_on_kernel_coupling(self):
        M = np.array([[0.0, 1.0], [1.0, 0.0]])
        rep = minimal_form_constant(M, np.diag([0.0, 1.0]), 0.0)
        assert rep.unbounded

    def test_indefinite_reference(self):
        with pytest.raises(IndefiniteFormError):
            minimal_form_constant(np.eye(2), np.diag([1.0, -1.0]), 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            minimal_form_constant(np.eye(2), np.eye(3), 0.0)


class TestShe4:
    def test_scalar_example(self):
        # |conj(a) b| <= c (|a|^2 + |b|^2) is sharp at c = 1/2
        M = np.array([[0.0, 1.0], [0.0, 0.0]])
        rep = she4_report("toy", M, np.ones(2), "toy", math.nan, draws=200)
        assert rep.c_star == pytest.approx(0.5, rel=1e-8)
        assert rep.details["gram_violations"] == 0

    def test_vacuum_limit(self):
        # the supremum sits at t -> 0 when the H-kernel couples to the rest
        M = np.array([[0.0, 1.0], [0.0, 0.0]])
        rep = she4_report("toy", M, np.array([0.0, 4.0]), "toy", math.nan, draws=200)
        # |a b| <= c (|a|^2 + |b|^2)^(1/2) 2|b| is sharp as |a| -> inf: c = 1/2
        assert rep.details["t_opt"] == 0.0
        assert rep.c_star == pytest.approx(0.5, rel=1e-8)
        assert rep.details["gram_violations"] == 0


class TestSuite:
    def test_all_checks_present(self, suite12):
        assert set(suite12) == {"she1", "she2", "she2b", "she2b_expansion_order", "she3",
                                "she4_i", "she4_ii", "hlt1_i", "hlt1_ii"}

    def test_margins(self, suite12):
        for rep in suite12.values():
            assert rep.passed, rep
            assert math.isfinite(rep.c_star) and rep.c_star > 0

    def test_hlt1_below_c_A(self, suite12):
        rep = suite12["hlt1_i"]
        assert rep.alpha == 0.0
        assert rep.c_star <= rep.details["c_A_discrete"] + 1e-10
        assert rep.details["c_A_continuum"] == pytest.approx(c_II_exact(1.0), rel=1e-12)

    def test_she3_reversed_direction(self, suite12):
        rep = suite12["she3"]
        assert rep.details["encoding"] == "-M <= -alpha + c D_f"
        assert rep.margin >= -MARGIN_TOL and rep.alpha > 0

    def test_she4_gram(self, suite12):
        for name in ("she4_i", "she4_ii"):
            assert suite12[name].details["gram_violations"] == 0
            assert suite12[name].details["gram_draws"] == 1001

    def test_alpha_is_same_basis_vev(self, suite12, basis12):
        from nelsonlab.wick import matrix_vev
        assert suite12["she1"].alpha == pytest.approx(
            matrix_vev("AA D A*A*", basis12, P1), rel=1e-12)

    def test_she1_radial_refinement(self, suite12):
        fine = enumerate_basis(build_mode_grid(6, 4, P1), 3)
        (rep,) = lemma_suite(fine, P1, only={"she1"})
        assert abs(rep.c_star / suite12["she1"].c_star - 1) < 0.10

    def test_report_json(self, suite12):
        js = suite12["she2"].to_json()
        assert js["lambda"] == 1.0 and js["passed"] is True and js["grid_level"]

    def test_subset(self, basis12, suite12):
        reps = lemma_suite(basis12, P1, only={"she3", "hlt1_i"})
        assert [r.lemma_id for r in reps] == ["she3", "hlt1_i"]
        assert reps[0].c_star == suite12["she3"].c_star
        with pytest.raises(ValueError):
            lemma_suite(basis12, P1, only={"she9"})

    def test_needs_three_photons(self):
        with pytest.raises(ValueError):
            lemma_suite(enumerate_basis(build_mode_grid(3, 4, P1), 2), P1)


class TestResolventIdentity:
    def test_free(self, basis12):
        assert verify_resolvent_identity(basis12, P1) <= 1e-13

    @pytest.mark.parametrize("e", [0.1, 0.3])
    def test_coupled(self, basis12, e):
        assert verify_resolvent_identity(basis12, ModelParams(e=e, lam=1.0)) <= 1e-10

    def test_detects_perturbation(self, basis12):
        p = ModelParams(e=0.1, lam=1.0)
        r1 = verify_resolvent_identity(basis12, p, perturb=1e-3)
        r2 = verify_resolvent_identity(basis12, p, perturb=1e-4)
        assert r1 > 1e-8
        assert r1 / r2 == pytest.approx(10.0, rel=1e-3)


class TestCEps:
    def test_finite_without_cutoff(self):
        fit = bound_c_eps(0.1)
        assert math.isfinite(fit.value) and fit.value > 0

    def test_monotone(self):
        vals = [bound_c_eps(e).value for e in (0.5, 0.2, 0.1, 0.05)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_prefactor_reported(self):
        fit = bound_c_eps(0.1)
        assert fit.c_II == pytest.approx(1 / (4 * math.pi ** 2), rel=1e-12)
        assert fit.prefactor_over_c_II == pytest.approx(7.0, rel=1e-3)

    def test_finite_cutoff(self):
        assert bound_c_eps(0.1, lam=10.0).value < bound_c_eps(0.1).value

    def test_domain(self):
        with pytest.raises(ValueError):
            bound_c_eps(0.0)

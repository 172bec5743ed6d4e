import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from nelsonlab.fock import FockOperators, assemble_T, enumerate_basis
from nelsonlab.modes import ModelParams, build_mode_grid
from nelsonlab.spectral import (Budgets, LanczosError, atomic_energy, binding_expansion,
                                binding_integral_closed, binding_integral_quad, dense_ground,
                                hydrogen_ground, lanczos_ground, order_fit, order_reproduction,
                                rayleigh_quotient, self_energy_expansion, trial_state_selfenergy)
from nelsonlab.wick import matrix_vevs

P1 = ModelParams(lam=1.0)


@pytest.fixture(scope="module")
def basis():
    return enumerate_basis(build_mode_grid(2, 4, P1), 3)


class TestLanczos:
    def test_diagonal(self):
        val, vec = lanczos_ground(sp.diags([3.0, 1.0, 2.0]))
        assert val == pytest.approx(1.0, abs=1e-14)
        assert abs(abs(vec[1]) - 1.0) < 1e-12

    @given(st.floats(0.01, 10.0), st.floats(-5.0, 5.0))
    @settings(max_examples=30, deadline=None)
    def test_two_by_two(self, delta, Delta):
        val, _ = lanczos_ground(np.array([[0.0, delta], [delta, Delta]]))
        assert val == pytest.approx(Delta / 2 - math.sqrt(Delta ** 2 / 4 + delta ** 2), abs=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_against_dense(self, seed):
        rng = np.random.default_rng(seed)
        M = rng.normal(size=(200, 200))
        M = (M + M.T) / 2
        val, vec = lanczos_ground(M, tol=1e-13)
        assert abs(val - dense_ground(M)) <= 1e-10
        assert np.linalg.norm(M @ vec - val * vec) < 1e-6

    def test_non_convergence_carries_best_pair(self):
        rng = np.random.default_rng(0)
        M = rng.normal(size=(300, 300))
        M = (M + M.T) / 2
        with pytest.raises(LanczosError) as info:
            lanczos_ground(M, tol=1e-14, max_iter=5)
        assert info.value.vector.shape == (300,) and info.value.residual > 0

    def test_bad_start_vector(self):
        with pytest.raises(ValueError):
            lanczos_ground(np.eye(3), v0=np.zeros(3))
        with pytest.raises(ValueError):
            lanczos_ground(np.eye(3), v0=np.ones(2))

    def test_seed_determinism(self, basis):
        T = assemble_T(basis, ModelParams(e=0.2, lam=1.0))
        assert lanczos_ground(T, seed=4)[0] == lanczos_ground(T, seed=4)[0]


class TestTrialState:
    def test_free_is_vacuum(self, basis):
        psi = trial_state_selfenergy(basis, P1)
        assert psi[0] == 1.0 and np.count_nonzero(psi) == 1

    def test_sector_occupancy(self, basis):
        psi = trial_state_selfenergy(basis, ModelParams(e=0.3, lam=1.0))
        n = basis.photon_number
        assert set(n[psi != 0]) <= {0, 1, 2, 3}
        assert np.any(psi[n == 3] != 0) and np.any(psi[n == 2] != 0)

    def test_needs_three_photons(self):
        b = enumerate_basis(build_mode_grid(2, 4, P1), 2)
        with pytest.raises(ValueError):
            trial_state_selfenergy(b, ModelParams(e=0.1, lam=1.0))

    def test_leading_order(self, basis):
        a4 = matrix_vevs(basis, P1)["a4"]
        es = np.array([0.02, 0.05, 0.1])
        ratios = []
        for e in es:
            p = ModelParams(e=e, lam=1.0)
            ops = FockOperators.build(basis, p)
            R = rayleigh_quotient(assemble_T(basis, p, ops), trial_state_selfenergy(basis, p, ops))
            ratios.append(R / (-e ** 4 * a4))
        # ratio = 1 + O(e^2): fitted intercept is 1
        coef = np.polyfit(es ** 2, ratios, 1)
        assert coef[1] == pytest.approx(1.0, abs=1e-4)
        assert ratios[0] == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("e", [0.05, 0.3, 0.6])
    def test_variational(self, basis, e):
        p = ModelParams(e=e, lam=1.0)
        ops = FockOperators.build(basis, p)
        T = assemble_T(basis, p, ops)
        R = rayleigh_quotient(T, trial_state_selfenergy(basis, p, ops))
        assert dense_ground(T) <= R + 1e-15 * abs(R)


class TestHydrogen:
    def test_unit_coupling(self):
        assert atomic_energy(1.0, 1.0) == pytest.approx(-1.0 / (4 * (4 * math.pi) ** 2), rel=1e-15)

    @given(st.floats(0.01, 1.0), st.floats(0.1, 5.0))
    @settings(max_examples=20, deadline=None)
    def test_virial(self, e, Z):
        h = hydrogen_ground(ModelParams(e=e, Z=Z))
        assert h.E_at == atomic_energy(e, Z)
        assert -h.E_at == pytest.approx(h.gamma ** 2, rel=1e-15)
        # kinetic energy p^2 (no factor 1/2): <p^2> = -E_at
        assert h.p2_moment == -h.E_at
        assert h.p2_quadrature == pytest.approx(-h.E_at, rel=1e-12)

    def test_fourth_power_scaling(self):
        a = hydrogen_ground(ModelParams(e=0.1)).p2_moment
        b = hydrogen_ground(ModelParams(e=0.2)).p2_moment
        assert b / a == pytest.approx(16.0, rel=1e-14)

    def test_needs_positive_charge(self):
        with pytest.raises(ValueError):
            hydrogen_ground(ModelParams(e=0.1, Z=0.0))


class TestBinding:
    def test_no_cutoff(self):
        assert binding_integral_closed(math.inf) == 1.0 / (6 * math.pi ** 2)
        rep = binding_expansion(ModelParams(e=0.1))
        assert rep.E_bin_expansion == pytest.approx(-rep.E_at * (1 + 0.01 / (6 * math.pi ** 2)),
                                                    rel=1e-15)
        assert rep.residuals["I_rel_diff"] <= 1e-8

    def test_unit_cutoff(self):
        assert binding_integral_closed(1.0) == pytest.approx(1.0 / (8 * math.pi ** 2), rel=1e-15)
        assert binding_integral_quad(1.0).value == pytest.approx(1 / (8 * math.pi ** 2), rel=1e-13)

    @given(st.floats(1e-2, 1e6))
    @settings(max_examples=25, deadline=None)
    def test_quadrature_matches_closed_form(self, lam):
        assert abs(binding_integral_quad(lam).value - binding_integral_closed(lam)) <= \
            1e-10 * binding_integral_closed(lam)

    def test_weak_coupling_limit(self):
        for e in (1e-2, 1e-3):
            rep = binding_expansion(ModelParams(e=e))
            assert rep.E_bin_expansion / -rep.E_at == pytest.approx(1.0, abs=e)

    def test_report_json(self):
        js = binding_expansion(ModelParams(e=0.1, lam=2.0)).to_json()
        assert js["lambda"] == 2.0 and js["a4"] is None
        assert js["E0_lanczos"] == {"value": None, "stderr": None}
        assert js["E_bin_expansion"]["stderr"] is not None


class TestSelfEnergy:
    def test_free(self):
        rep = self_energy_expansion(ModelParams(e=0.0, lam=1.0),
                                    Budgets(mc_budget=20_000, basis=(2, 4, 3)))
        assert rep.E0_expansion == 0.0 and rep.E0_lanczos == 0.0 and rep.E0_trial == 0.0

    def test_report(self):
        rep = self_energy_expansion(ModelParams(e=0.1, lam=1.0),
                                    Budgets(mc_budget=50_000, basis=(2, 4, 3)))
        assert rep.a4.value == pytest.approx(1.0537689299466309e-05, rel=1e-12)
        expected = (-0.1 ** 4 * rep.a4.value - 4e-6 * rep.b1.value - 4e-6 * rep.b2.value
                    + 2e-6 * rep.b3.value)
        assert rep.E0_expansion == pytest.approx(expected, rel=1e-14)
        assert rep.E0_lanczos <= rep.E0_trial
        assert rep.residuals["E0_expansion_err"] > 0
        js = rep.to_json()
        assert js["b3"]["method"] == "mc" and js["a4"]["method"] == "grid3d"

    def test_cache_hook(self):
        seen = []

        def cache(name, compute):
            seen.append(name)
            return compute()

        self_energy_expansion(ModelParams(e=0.1, lam=1.0),
                              Budgets(mc_budget=20_000, basis=None), vev_cache=cache)
        assert seen == ["a4", "b1", "b2", "b3"]

    def test_needs_cutoff(self):
        with pytest.raises(ValueError):
            self_energy_expansion(ModelParams(e=0.1))


class TestOrder:
    def test_fit_recovers_power(self):
        es = [0.1, 0.2, 0.4]
        assert order_fit(es, [3 * e ** 7 for e in es]) == pytest.approx(7.0, abs=1e-12)
        assert math.isnan(order_fit([0.1], [1.0]))

    def test_reproduction(self, basis):
        res = order_reproduction(basis, P1)
        assert res["slope"] >= 6.5
        assert len(res["residual"]) == 4

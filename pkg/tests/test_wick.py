import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nelsonlab.fock import enumerate_basis
from nelsonlab.modes import ModelParams, build_mode_grid, phi_abs_sq
from nelsonlab.wick import (BUILTIN_STRINGS, EXPANSION_TABLE, OpString, OpStringError,
                            builtin_vevs, expand_vev, expansion_energy, matrix_path_vev,
                            matrix_vev, matrix_vevs, tensor_grid_sum, vev_integrand)

from oracles import ORACLES, random_points

P1 = ModelParams(lam=1.0)


def brute_force_matchings(tokens):
    """Independent enumeration: annihilator i -> creator to its right, no empty resolvent."""
    ann = [i for i, t in enumerate(tokens) if t == "A"]
    cre = [i for i, t in enumerate(tokens) if t == "A*"]
    res = [i for i, t in enumerate(tokens) if t == "D"]
    count = 0
    for perm in itertools.permutations(cre):
        pairs = list(zip(ann, perm))
        if any(a > c for a, c in pairs):
            continue
        if all(any(a < r < c for a, c in pairs) for r in res):
            count += 1
    return count


class TestParsing:
    def test_glued_tokens(self):
        s = OpString.parse("AA D PA D A*P D A*A*")
        assert s.tokens == ("A", "A", "D", "P", "A", "D", "A*", "P", "D", "A*", "A*")
        assert s.dots == ((0, 1), (3, 4), (6, 7), (9, 10))
        assert str(s) == "AA D PA D A*P D A*A*"

    def test_spaced_tokens_equivalent(self):
        assert OpString.parse("A A D A* A*") == OpString.parse("AA D A*A*")

    @pytest.mark.parametrize("text", ["", "AX D A*A*", "A D A*", "AA D A*", "A*A* D AA",
                                      "D AA D A*A*", "AA D A*A* D"])
    def test_invalid(self, text):
        with pytest.raises(OpStringError):
            OpString.parse(text)

    def test_non_vacuum_strings(self):
        s = OpString.parse("A*A*", vacuum=False)
        assert s.n_lines == 2

    @pytest.mark.parametrize("name,lines,peak", [("a4", 2, 2), ("b1", 3, 3), ("b2", 3, 2),
                                                 ("b3", 3, 2)])
    def test_counts(self, name, lines, peak):
        s = builtin_vevs()[name]
        assert s.n_lines == lines and s.max_photons == peak


class TestExpansion:
    def test_a4_single_class(self):
        ds = expand_vev("AA D A*A*")
        assert len(ds) == 1 and ds[0].multiplicity == 2

    def test_dotted_pair(self):
        ds = expand_vev("AA*")
        assert len(ds) == 1 and ds[0].multiplicity == 1 and ds[0].denominators == ()
        expr = vev_integrand("AA*", P1)
        k = np.array([[[0.3, 0.1, -0.2]]])
        assert expr(k)[0] == pytest.approx(float(phi_abs_sq(np.linalg.norm(k), 1.0)), rel=1e-14)

    @pytest.mark.parametrize("name", sorted(BUILTIN_STRINGS))
    def test_total_multiplicity_matches_brute_force(self, name):
        s = OpString.parse(BUILTIN_STRINGS[name])
        assert sum(d.multiplicity for d in expand_vev(s)) == brute_force_matchings(s.tokens)

    def test_b1_all_six_matchings_survive(self):
        assert brute_force_matchings(OpString.parse(BUILTIN_STRINGS["b1"]).tokens) == 6

    def test_canonical_key_stable(self):
        for d in expand_vev(BUILTIN_STRINGS["b1"]):
            assert d.canonical_key() == d.canonical_key()
            assert set(d.to_json()) == {"pairing", "multiplicity", "denominators"}

    def test_empty_resolvent_dropped(self):
        # the middle resolvent sees the vacuum in the "AA*" pairing
        tokens = OpString.parse("AA* D AA*", vacuum=False)
        with pytest.raises(OpStringError):
            vev_integrand(tokens, P1)

    def test_expansion_table(self):
        assert [EXPANSION_TABLE[n][0] for n in ("a4", "b1", "b2", "b3")] == [-1, -4, -4, 2]
        assert EXPANSION_TABLE["b3"] == (2.0, 6)

    def test_expansion_energy(self):
        c = {"a4": 1.0, "b1": 1.0, "b2": 1.0, "b3": 1.0}
        assert expansion_energy(0.0, c) == 0.0
        assert expansion_energy(0.5, c) == pytest.approx(-0.5 ** 4 - 6 * 0.5 ** 6)


class TestIntegrands:
    @pytest.mark.parametrize("name", sorted(ORACLES))
    def test_matches_hand_coded(self, name):
        expr = vev_integrand(BUILTIN_STRINGS[name], P1)
        rng = np.random.default_rng(2024)
        K = random_points(rng, 500, expr.n_vars, 1.0)
        perms = list(itertools.permutations(range(expr.n_vars)))
        # labels of internal lines are arbitrary; compare the symmetrized functions
        mine = sum(expr(K[:, list(q)]) for q in perms)
        ref = sum(ORACLES[name](K[:, list(q)], 1.0) for q in perms)
        assert np.max(np.abs(mine - ref)) <= 1e-12 * np.max(np.abs(ref))

    def test_a4_closed_form(self):
        expr = vev_integrand(BUILTIN_STRINGS["a4"], P1)
        k1, k2 = np.array([0.2, 0.0, 0.1]), np.array([-0.1, 0.3, 0.2])
        n1, n2 = np.linalg.norm(k1), np.linalg.norm(k2)
        dot = np.dot(k1, k2) / (n1 * n2)
        expected = (2 * phi_abs_sq(n1, 1.0) * phi_abs_sq(n2, 1.0) * dot ** 2
                    / (np.dot(k1 + k2, k1 + k2) + n1 + n2))
        assert expr(np.array([[k1, k2]]))[0] == pytest.approx(float(expected), rel=1e-14)

    def test_ir_shift_enters_denominator(self):
        a = vev_integrand(BUILTIN_STRINGS["a4"], P1)
        b = vev_integrand(BUILTIN_STRINGS["a4"], ModelParams(lam=1.0, ir_shift=0.5))
        K = random_points(np.random.default_rng(0), 10, 2, 1.0)
        assert np.all(b(K) < a(K))

    def test_zero_outside_cutoff(self):
        expr = vev_integrand(BUILTIN_STRINGS["b3"], P1)
        K = np.array([[[2.0, 0, 0], [0.1, 0.2, 0], [0, 0, 0.3]]])
        assert expr(K)[0] == 0.0

    def test_shape_check(self):
        with pytest.raises(ValueError):
            vev_integrand(BUILTIN_STRINGS["a4"], P1)(np.ones((4, 3, 3)))


class TestMatrixPath:
    @pytest.mark.parametrize("name", sorted(BUILTIN_STRINGS))
    def test_equals_tensor_grid_sum(self, name):
        grid = build_mode_grid(2, 4, P1)
        basis = enumerate_basis(grid, 3)
        expr = vev_integrand(BUILTIN_STRINGS[name], P1)
        assert matrix_vev(BUILTIN_STRINGS[name], basis, P1) == pytest.approx(
            tensor_grid_sum(expr, grid), rel=1e-12)

    def test_dotted_pair_is_discrete_norm(self):
        grid = build_mode_grid(3, 4, P1)
        basis = enumerate_basis(grid, 1)
        assert matrix_vev(OpString.parse("AA*"), basis, P1) == pytest.approx(
            np.dot(grid.weights, phi_abs_sq(grid.norms, 1.0)), rel=1e-14)

    def test_insufficient_photon_cap(self):
        basis = enumerate_basis(build_mode_grid(2, 4, P1), 2)
        with pytest.raises(ValueError):
            matrix_vev(BUILTIN_STRINGS["b1"], basis, P1)

    def test_all_positive(self):
        basis = enumerate_basis(build_mode_grid(2, 4, P1), 3)
        vals = matrix_vevs(basis, P1)
        assert set(vals) == set(BUILTIN_STRINGS) and all(v > 0 for v in vals.values())

    def test_error_estimate(self):
        res = matrix_path_vev(BUILTIN_STRINGS["a4"], P1, 3, 8)
        assert res.method == "matrix" and res.stderr > 0
        # the refinement-based estimate covers the gap to the continuum value
        assert abs(res.value - 1.0537689299466309e-05) <= 3 * res.stderr

    @settings(max_examples=10, deadline=None)
    @given(st.floats(0.2, 5.0))
    def test_a4_scaling_positive(self, lam):
        p = ModelParams(lam=lam)
        basis = enumerate_basis(build_mode_grid(2, 4, p), 2)
        assert matrix_vev(BUILTIN_STRINGS["a4"], basis, p) > 0
        assert math.isfinite(matrix_vev(BUILTIN_STRINGS["a4"], basis, p))

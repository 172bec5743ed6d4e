"""Wick expansion of vacuum expectation values of smeared-field strings.

An operator string is written as whitespace separated tokens::

    A     annihilator a(phi), a 3-vector
    A*    creator a*(phi), a 3-vector
    P     total field momentum, a 3-vector (diagonal)
    D     resolvent D_f^{-1} of D_f = P^2 + H_f (+ infrared shift)

Vector tokens between two resolvents are dotted in consecutive pairs, so
``"AA D PA D A*P D A*A*"`` means ``(A.A) D^{-1} (P.A) D^{-1} (A*.P) D^{-1}
(A*.A*)``. A contraction links an annihilator to a creator standing to its
right; each link is a photon line carrying an integration momentum. A
resolvent contributes ``1/(|P_S|^2 + H_S + eps)`` where ``S`` is the set of
lines crossing it, and a momentum insertion ``P`` contributes ``P_S``.
Matchings that leave some resolvent with no crossing line are dropped: the
resolvent is understood as the reduced one on the vacuum complement.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .modes import ModelParams, phi_abs_sq

VECTOR_TOKENS = ("A", "A*", "P")
TOKENS = VECTOR_TOKENS + ("D",)


class OpStringError(ValueError):
    """Malformed or unbalanced operator string."""


@dataclass(frozen=True)
class OpString:
    tokens: tuple[str, ...]
    dots: tuple[tuple[int, int], ...]

    @classmethod
    def parse(cls, text: str, vacuum: bool = True) -> "OpString":
        """Parse a token string.

        With ``vacuum=False`` the string is only checked for well-formed
        dot pairs; strings that change the photon number are then allowed.
        """
        tokens = []
        for word in text.split():
            # glued tokens such as "AA*" or "PA" are split greedily
            i = 0
            while i < len(word):
                if word.startswith("A*", i):
                    tokens.append("A*")
                    i += 2
                elif word[i] in "APD":
                    tokens.append(word[i])
                    i += 1
                else:
                    raise OpStringError(f"unknown token in {word!r} at offset {i}")
        dots = []
        group: list[int] = []
        for pos, tok in enumerate(tokens + ["D"]):
            if tok == "D":
                if len(group) % 2:
                    raise OpStringError(
                        f"odd number of vector tokens between resolvents near position {pos}")
                dots.extend((group[i], group[i + 1]) for i in range(0, len(group), 2))
                group = []
            else:
                group.append(pos)
        s = cls(tuple(tokens), tuple(dots))
        if vacuum:
            s.validate()
        return s

    def validate(self) -> None:
        if not self.tokens:
            raise OpStringError("empty operator string")
        if self.tokens[0] == "D" or self.tokens[-1] == "D":
            raise OpStringError("a resolvent may not act on the vacuum")
        n_a = self.tokens.count("A")
        n_c = self.tokens.count("A*")
        if n_a != n_c:
            raise OpStringError(f"unbalanced string: {n_a} annihilators vs {n_c} creators")
        # photon number must never go negative reading right to left
        level = 0
        for tok in reversed(self.tokens):
            level += {"A*": 1, "A": -1}.get(tok, 0)
            if level < 0:
                raise OpStringError("string annihilates the vacuum identically")

    def __str__(self) -> str:
        out, group = [], []
        for tok in self.tokens:
            if tok == "D":
                out.append("".join(group))
                out.append("D")
                group = []
            else:
                group.append(tok)
        out.append("".join(group))
        return " ".join(out)

    @property
    def n_lines(self) -> int:
        return self.tokens.count("A*")

    @property
    def max_photons(self) -> int:
        """Largest photon number reached when applied to the vacuum."""
        level = best = 0
        for tok in reversed(self.tokens):
            level += {"A*": 1, "A": -1}.get(tok, 0)
            best = max(best, level)
        return best


# ---------------------------------------------------------------------------
# diagrams

def _factor_key(factor, perm):
    kind, arg = factor
    if kind == "L":
        return ("L", perm[arg])
    return ("P", tuple(sorted(perm[i] for i in arg)))


def _canonical(dots, dens, n_lines):
    best = None
    for perm in itertools.permutations(range(n_lines)):
        d = tuple(sorted(tuple(sorted((_factor_key(x, perm), _factor_key(y, perm))))
                         for x, y in dots))
        r = tuple(sorted(tuple(sorted(perm[i] for i in S)) for S in dens))
        key = (d, r)
        if best is None or key < best:
            best = key
    return best


@dataclass(frozen=True)
class ContractionDiagram:
    """One equivalence class of Wick pairings.

    ``pairing`` lists ``(annihilator_slot, creator_slot)`` for a
    representative matching; line ``l`` is the ``l``-th pair. ``dots`` holds
    the dotted factor pairs, each factor ``("L", l)`` for ``phi(k_l)`` or
    ``("P", lines)`` for the momentum sum over ``lines``. ``denominators``
    lists the crossing line sets of the resolvents from left to right.
    """

    pairing: tuple[tuple[int, int], ...]
    dots: tuple
    denominators: tuple[tuple[int, ...], ...]
    multiplicity: int

    @property
    def n_lines(self) -> int:
        return len(self.pairing)

    def canonical_key(self):
        return _canonical(self.dots, self.denominators, self.n_lines)

    def to_json(self) -> dict:
        return {"pairing": [list(p) for p in self.pairing],
                "multiplicity": self.multiplicity,
                "denominators": [list(s) for s in self.denominators]}


def _crossing(pairing, pos):
    return tuple(l for l, (a, c) in enumerate(pairing) if a < pos < c)


def all_matchings(s: OpString):
    """Every order-allowed matching, unfiltered, as tuples of (a, c) slots."""
    ann = [i for i, t in enumerate(s.tokens) if t == "A"]
    cre = [i for i, t in enumerate(s.tokens) if t == "A*"]
    for perm in itertools.permutations(cre):
        if all(a < c for a, c in zip(ann, perm)):
            yield tuple(zip(ann, perm))


def expand_vev(s: OpString | str) -> list[ContractionDiagram]:
    """Enumerate the contraction classes of ``(Omega, s Omega)``.

    Matchings are grouped by their integrand up to relabeling of lines; the
    class size is the multiplicity. The result is ordered by first
    appearance in the enumeration, which is deterministic.
    """
    if isinstance(s, str):
        s = OpString.parse(s)
    s.validate()
    res_pos = [i for i, t in enumerate(s.tokens) if t == "D"]
    classes: dict = {}
    order = []
    for pairing in all_matchings(s):
        dens = tuple(_crossing(pairing, p) for p in res_pos)
        if any(len(S) == 0 for S in dens):
            continue
        slot_line = {}
        for l, (a, c) in enumerate(pairing):
            slot_line[a] = l
            slot_line[c] = l

        def factor(pos):
            if s.tokens[pos] == "P":
                return ("P", _crossing(pairing, pos))
            return ("L", slot_line[pos])

        dots = tuple((factor(x), factor(y)) for x, y in s.dots)
        key = _canonical(dots, dens, len(pairing))
        if key in classes:
            classes[key][1] += 1
        else:
            classes[key] = [(pairing, dots, dens), 1]
            order.append(key)
    out = []
    for key in order:
        (pairing, dots, dens), mult = classes[key]
        out.append(ContractionDiagram(pairing, dots, dens, mult))
    return out


# ---------------------------------------------------------------------------
# integrands

@dataclass(frozen=True)
class IntegrandExpr:
    """A sum of diagram integrands over ``n_vars`` photon momenta.

    Each term is ``(weight, dots, denominators)`` in the notation of
    :class:`ContractionDiagram`. Every line carries exactly two ``phi``
    factors, so the integrand factorizes as ``prod_l |phi(k_l)|^2`` times a
    structure function of unit vectors, ``P_S`` and ``H_S``; the Monte Carlo
    path samples the first factor exactly and averages the second.
    """

    n_vars: int
    terms: tuple
    lam: float
    eps: float = 0.0
    variables: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.variables:
            object.__setattr__(self, "variables",
                               tuple(f"k{l + 1}" for l in range(self.n_vars)))

    def __add__(self, other: "IntegrandExpr") -> "IntegrandExpr":
        if (self.n_vars, self.lam, self.eps) != (other.n_vars, other.lam, other.eps):
            raise ValueError("cannot add integrands over different variables or parameters")
        return IntegrandExpr(self.n_vars, self.terms + other.terms, self.lam, self.eps)

    def scaled(self, factor: float) -> "IntegrandExpr":
        terms = tuple((w * factor, d, r) for w, d, r in self.terms)
        return IntegrandExpr(self.n_vars, terms, self.lam, self.eps)

    def _check(self, K):
        K = np.asarray(K, dtype=float)
        if K.ndim == 2:
            K = K[None]
        if K.shape[1:] != (self.n_vars, 3):
            raise ValueError(f"expected points of shape (n, {self.n_vars}, 3), got {K.shape}")
        return K

    def structure(self, K) -> np.ndarray:
        """The integrand divided by ``prod_l |phi(k_l)|^2``."""
        K = self._check(K)
        norms = np.linalg.norm(K, axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = K / norms[..., None]
        cache_p: dict = {}

        def psum(S):
            if S not in cache_p:
                cache_p[S] = K[:, list(S), :].sum(axis=1) if S else np.zeros((K.shape[0], 3))
            return cache_p[S]

        def vec(f):
            return unit[:, f[1], :] if f[0] == "L" else psum(f[1])

        total = np.zeros(K.shape[0])
        for weight, dots, dens in self.terms:
            val = np.full(K.shape[0], float(weight))
            for x, y in dots:
                val = val * np.einsum("ij,ij->i", vec(x), vec(y))
            for S in dens:
                P = psum(S)
                val = val / (np.einsum("ij,ij->i", P, P) + norms[:, list(S)].sum(axis=1) + self.eps)
            total += val
        return total

    def evaluate(self, K) -> np.ndarray:
        """Integrand values at points ``K`` of shape ``(n, n_vars, 3)``."""
        K = self._check(K)
        norms = np.linalg.norm(K, axis=2)
        weight = np.prod(phi_abs_sq(norms, self.lam), axis=1)
        return weight * self.structure(K)

    def __call__(self, K):
        return self.evaluate(K)


def diagram_integrand(d: ContractionDiagram, params: ModelParams) -> IntegrandExpr:
    """The integrand of one diagram class, multiplicity included."""
    return IntegrandExpr(d.n_lines, ((d.multiplicity, d.dots, d.denominators),),
                         params.lam, params.ir_shift)


def vev_integrand(s: OpString | str, params: ModelParams) -> IntegrandExpr:
    """Sum of all diagram integrands of a string."""
    diagrams = expand_vev(s)
    if not diagrams:
        raise OpStringError(f"string {s} has no admissible contraction")
    expr = diagram_integrand(diagrams[0], params)
    for d in diagrams[1:]:
        expr = expr + diagram_integrand(d, params)
    return expr


# ---------------------------------------------------------------------------
# the four coefficients of the self-energy expansion

BUILTIN_STRINGS = {
    "a4": "AA D A*A*",
    "b1": "AA D PA D A*P D A*A*",
    "b2": "AA D A*P D PA D A*A*",
    "b3": "AA D A*A D A*A*",
}

# E0 = sum_name prefactor * e**power * vev(name)
EXPANSION_TABLE = {"a4": (-1.0, 4), "b1": (-4.0, 6), "b2": (-4.0, 6), "b3": (2.0, 6)}


def builtin_vevs() -> dict[str, OpString]:
    return {name: OpString.parse(text) for name, text in BUILTIN_STRINGS.items()}


def expansion_energy(e: float, coeffs: dict) -> float:
    """Assemble ``-e^4 a4 - 4 e^6 b1 - 4 e^6 b2 + 2 e^6 b3``."""
    return math.fsum(pref * e ** power * float(coeffs[name])
                     for name, (pref, power) in EXPANSION_TABLE.items())


# ---------------------------------------------------------------------------
# matrix path

def apply_string(s: OpString | str, v: np.ndarray, basis, ops) -> np.ndarray:
    """Apply the string to ``v`` right to left with truncated Fock operators.

    ``ops`` is a :class:`~nelsonlab.fock.FockOperators`; resolvents act as
    the pseudo-inverse of ``D_f`` with the vacuum projected out.
    """
    if isinstance(s, str):
        s = OpString.parse(s)
    from .fock import apply_pseudo_inverse

    pair_of = {y: x for x, y in s.dots}
    pos = len(s.tokens) - 1
    v = np.asarray(v, dtype=float)
    while pos >= 0:
        tok = s.tokens[pos]
        if tok == "D":
            v = v.copy()
            v[0] = 0.0  # reduced resolvent: the vacuum is projected out
            v = apply_pseudo_inverse(ops.D_f, v)
            pos -= 1
            continue
        left = pair_of[pos]
        acc = np.zeros_like(v)
        for j in range(3):
            acc += ops.component(s.tokens[left], j) @ (ops.component(tok, j) @ v)
        v = acc
        pos = left - 1
    return v


def matrix_vev(s: OpString | str, basis, params: ModelParams, ops=None) -> float:
    """``(Omega, s Omega)`` on a truncated basis.

    Exact grid quadrature of the continuum integral whenever the basis
    reaches the string's photon excursion, since no truncation is hit.
    """
    if isinstance(s, str):
        s = OpString.parse(s)
    if basis.N_max < s.max_photons:
        raise ValueError(f"string {s} reaches {s.max_photons} photons but N_max={basis.N_max}")
    if ops is None:
        from .fock import FockOperators
        ops = FockOperators.build(basis, params)
    omega = np.zeros(basis.dim)
    omega[0] = 1.0
    return float(apply_string(s, omega, basis, ops)[0])


def matrix_vevs(basis, params: ModelParams) -> dict[str, float]:
    from .fock import FockOperators
    ops = FockOperators.build(basis, params)
    return {name: matrix_vev(s, basis, params, ops) for name, s in builtin_vevs().items()}


def tensor_grid_sum(expr: IntegrandExpr, grid) -> float:
    """``sum_{i_1..i_L} w_i1..w_iL f(k_i1, .., k_iL)`` over a mode grid.

    Equals the matrix path on any basis that reaches the string's photon
    excursion; used as an independent check of the Fock assembly.
    """
    m = len(grid)
    L = expr.n_vars
    idx = np.array(list(itertools.product(range(m), repeat=L)))
    total = 0.0
    chunk = 200_000
    for start in range(0, len(idx), chunk):
        sl = idx[start:start + chunk]
        K = grid.nodes[sl]
        w = np.prod(grid.weights[sl], axis=1)
        total += float(np.dot(w, expr.evaluate(K)))
    return total



def matrix_path_vev(s: OpString | str, params: ModelParams, n_radial: int, n_angular: int):
    """Matrix-path value with a discretization error estimate.

    The value is computed on the ``(n_radial, n_angular)`` grid. The error
    estimate is the sum of the changes under doubling the radial and,
    separately, the angular node count; the angular part dominates on
    coarse grids, so a single combined refinement would understate it.
    """
    from .fock import enumerate_basis
    from .modes import build_mode_grid
    from .quad import QuadResult

    if isinstance(s, str):
        s = OpString.parse(s)

    def value(nr, na):
        grid = build_mode_grid(nr, na, params)
        return matrix_vev(s, enumerate_basis(grid, s.max_photons), params)

    base = value(n_radial, n_angular)
    err = abs(value(2 * n_radial, n_angular) - base) + abs(value(n_radial, 2 * n_angular) - base)
    return QuadResult(float(base), float(err), 3, "matrix")

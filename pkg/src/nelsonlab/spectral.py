"""Ground-state energies: Lanczos, trial states, the perturbative expansion
of the self-energy, the hydrogen reference and the binding energy.

The expansion of the self-energy reads

    E0(e) = -e^4 a4 - 4 e^6 b1 - 4 e^6 b2 + 2 e^6 b3 + O(e^7)

with the vacuum expectation values of :data:`nelsonlab.wick.BUILTIN_STRINGS`.
Continuum coefficients (quadrature) and same-basis coefficients (matrix
path) are kept apart: the first are reported, the second are compared with
Lanczos energies of the same truncated operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal

from .fock import (FockBasis, FockOperators, SparseHermitianOp, apply_pseudo_inverse,
                   assemble_T, enumerate_basis)
from .modes import ModelParams, build_mode_grid
from .quad import QuadResult, integrate_1d, integrate_grid3d, integrate_mc, reduce_two_photon
from .wick import BUILTIN_STRINGS, EXPANSION_TABLE, expansion_energy, matrix_vevs, vev_integrand


class LanczosError(ArithmeticError):
    """Lanczos did not converge; carries the best Ritz pair seen."""

    def __init__(self, message, value, residual, vector=None):
        super().__init__(message)
        self.value = value
        self.residual = residual
        self.vector = vector


def _as_operator(op):
    if isinstance(op, SparseHermitianOp):
        return op.matrix
    if sp.issparse(op):
        return op.tocsr()
    return np.asarray(op, dtype=float)


def lanczos_ground(op, tol: float = 1e-12, max_iter: int = 500, seed: int = 0,
                   v0=None) -> tuple[float, np.ndarray]:
    """Smallest eigenpair of a real symmetric operator.

    Lanczos with full (twice repeated) Gram-Schmidt reorthogonalization.
    Convergence means the Ritz residual ``beta_j |s_j|`` is at most
    ``tol`` times the spectral radius estimate of the tridiagonal matrix,
    or that the Krylov space became invariant. The returned value is the
    Rayleigh quotient of the normalized Ritz vector, which carries relative
    rather than absolute rounding error when the energy is tiny.

    ``v0`` overrides the seeded random start vector.
    """
    A = _as_operator(op)
    n = A.shape[0]
    if A.shape != (n, n) or n < 1:
        raise ValueError(f"operator must be square and nonempty, got {A.shape}")
    if v0 is None:
        q = np.random.default_rng(seed).standard_normal(n)
    else:
        q = np.array(v0, dtype=float)
        if q.shape != (n,):
            raise ValueError(f"start vector of shape {q.shape} for operator of size {n}")
    norm = np.linalg.norm(q)
    if not norm > 0:
        raise ValueError("start vector is zero")
    q = q / norm
    max_iter = min(max_iter, n)

    Q = np.empty((max_iter, n))
    alphas, betas = [], []
    theta, s, residual = math.nan, None, math.inf
    for j in range(max_iter):
        Q[j] = q
        w = A @ q
        alpha = float(q @ w)
        alphas.append(alpha)
        for _ in range(2):
            w -= Q[:j + 1].T @ (Q[:j + 1] @ w)
        beta = float(np.linalg.norm(w))
        if j == 0:
            evals, evecs = np.array([alpha]), np.array([[1.0]])
        else:
            evals, evecs = eigh_tridiagonal(np.array(alphas), np.array(betas),
                                            select="i", select_range=(0, 0))
        theta, s = float(evals[0]), evecs[:, 0]
        residual = beta * abs(s[-1])
        scale = max(abs(theta), max(abs(a) for a in alphas), max(betas, default=0.0), 1e-300)
        invariant = beta <= 1e-14 * scale
        if invariant or residual <= tol * scale:
            x = Q[:j + 1].T @ s
            x /= np.linalg.norm(x)
            value = float(x @ (A @ x))
            return value, x
        betas.append(beta)
        q = w / beta
    x = Q[:len(alphas)].T @ s
    x /= np.linalg.norm(x)
    raise LanczosError(f"Lanczos did not converge in {max_iter} steps "
                       f"(Ritz value {theta!r}, residual {residual:.3e})", theta, residual, x)


def dense_ground(op) -> float:
    A = _as_operator(op)
    A = A.toarray() if sp.issparse(A) else A
    return float(np.linalg.eigvalsh(A)[0])


def rayleigh_quotient(op, v) -> float:
    A = _as_operator(op)
    v = np.asarray(v, dtype=float)
    return float(v @ (A @ v)) / float(v @ v)


# ---------------------------------------------------------------------------
# trial state

def trial_state_selfenergy(basis: FockBasis, params: ModelParams, ops: FockOperators | None = None,
                           cubic_sign: float = 1.0) -> np.ndarray:
    """Second-order perturbative ground state of ``T`` (unnormalized).

    ``Psi = Omega - e^2 R A*A* Omega + 2 e^3 R (P.A + A*.P) R A*A* Omega``
    with ``R`` the reduced resolvent of ``D_f``. This is the first and
    second order Rayleigh-Schroedinger correction of the vacuum; with
    ``cubic_sign=-1`` the cubic terms get the opposite sign.
    """
    if basis.N_max < 3:
        raise ValueError(f"the trial state has 3-photon components; N_max={basis.N_max} < 3")
    ops = ops or FockOperators.build(basis, params)
    e = params.e
    omega = np.zeros(basis.dim)
    omega[0] = 1.0
    if e == 0.0:
        return omega

    def R(v):
        v = v.copy()
        v[0] = 0.0
        return apply_pseudo_inverse(ops.D_f, v)

    two = R(ops.dot("A*", "A*") @ omega)
    cubic = R(ops.dot("P", "A") @ two + ops.dot("A*", "P") @ two)
    return omega - e ** 2 * two + cubic_sign * 2.0 * e ** 3 * cubic


# ---------------------------------------------------------------------------
# hydrogen

@dataclass(frozen=True)
class HydrogenRef:
    gamma: float
    E_at: float
    p2_moment: float
    p2_quadrature: float

    def to_json(self) -> dict:
        return {"gamma": self.gamma, "E_at": self.E_at, "p2_moment": self.p2_moment,
                "p2_quadrature": self.p2_quadrature}


def atomic_energy(e: float, Z: float) -> float:
    """``E_at = -(Z e^2 / 4 pi)^2 / 4``, the ground energy of ``p^2 - Z e^2/(4 pi |x|)``."""
    return -0.25 * (Z * e * e / (4.0 * math.pi)) ** 2


def hydrogen_ground(params: ModelParams) -> HydrogenRef:
    """Closed-form ground state ``exp(-gamma r)`` of ``p^2 - Z e^2/(4 pi r)``.

    With kinetic energy ``p^2`` the virial theorem gives ``<p^2> = -E_at
    = gamma^2``. The moment is recomputed independently as
    ``(phi0, -Laplace phi0) / (phi0, phi0)`` by radial quadrature, using
    ``-Laplace exp(-gamma r) = (2 gamma / r - gamma^2) exp(-gamma r)``.
    """
    if not (params.Z > 0 and params.e > 0):
        raise ValueError("the hydrogen reference needs Z > 0 and e > 0")
    gamma = params.Z * params.e ** 2 / (8.0 * math.pi)
    E_at = atomic_energy(params.e, params.Z)
    # in x = gamma r both integrals carry gamma^-3, the Laplacian one gamma^2 more
    lap = integrate_1d(lambda x: (2.0 / x - 1.0) * x * x * np.exp(-2.0 * x), 0.0, math.inf,
                       tol=1e-16)
    norm = integrate_1d(lambda x: x * x * np.exp(-2.0 * x), 0.0, math.inf, tol=1e-16)
    p2_quad = gamma ** 2 * lap.value / norm.value
    return HydrogenRef(gamma=gamma, E_at=E_at, p2_moment=-E_at, p2_quadrature=p2_quad)


# ---------------------------------------------------------------------------
# reports

def _scalar(x):
    return None if x is None else float(x)


@dataclass
class EnergyReport:
    e: float
    Z: float
    lam: float
    E_at: float
    a4: QuadResult | None = None
    b1: QuadResult | None = None
    b2: QuadResult | None = None
    b3: QuadResult | None = None
    E0_expansion: float | None = None
    E0_lanczos: float | None = None
    E0_trial: float | None = None
    E_bin_expansion: float | None = None
    residuals: dict = field(default_factory=dict)
    matrix_coeffs: dict | None = None

    def to_json(self) -> dict:
        out = {"e": self.e, "Z": self.Z,
               "lambda": self.lam if math.isfinite(self.lam) else "inf",
               "E_at": {"value": self.E_at, "stderr": 0.0}}
        for name in ("a4", "b1", "b2", "b3"):
            q = getattr(self, name)
            out[name] = None if q is None else q.to_json()
        for name in ("E0_expansion", "E0_lanczos", "E0_trial", "E_bin_expansion"):
            val = getattr(self, name)
            err = self.residuals.get(f"{name}_err") if val is not None else None
            out[name] = {"value": _scalar(val), "stderr": _scalar(err)}
        out["residuals"] = {k: _scalar(v) for k, v in sorted(self.residuals.items())}
        out["matrix_coeffs"] = (None if self.matrix_coeffs is None else
                                {k: float(v) for k, v in sorted(self.matrix_coeffs.items())})
        return out


def binding_integral_closed(lam: float) -> float:
    """``I(lam) = (1 - (1+lam)^-2) / (6 pi^2)``."""
    if math.isinf(lam):
        return 1.0 / (6.0 * math.pi ** 2)
    return (1.0 - (1.0 + lam) ** -2) / (6.0 * math.pi ** 2)


def binding_integral_quad(lam: float) -> QuadResult:
    """``I(lam) = (4/3) (2 pi)^-3 4 pi int_0^lam dk / (2 (1+k)^3)`` by adaptive quadrature."""
    pref = (4.0 / 3.0) * (2.0 * math.pi) ** -3 * 4.0 * math.pi
    res = integrate_1d(lambda k: pref / (2.0 * (1.0 + k) ** 3), 0.0, lam, tol=1e-17, rtol=1e-15)
    return res


def binding_expansion(params: ModelParams) -> EnergyReport:
    """``E_bin = -E_at (1 + e^2 I(lam))`` with both evaluations of ``I`` recorded.

    The e^4 and e^6 vacuum terms of the self-energy drop out of the
    difference of the free and the atomic ground energies, so no vacuum
    expectation value is evaluated here.
    """
    E_at = atomic_energy(params.e, params.Z)
    closed = binding_integral_closed(params.lam)
    quad = binding_integral_quad(params.lam)
    E_bin = -E_at * (1.0 + params.e ** 2 * closed)
    residuals = {
        "I_closed": closed,
        "I_quad": quad.value,
        "I_quad_err": quad.stderr,
        "I_rel_diff": abs(quad.value - closed) / closed,
        "E_bin_expansion_err": abs(E_at) * params.e ** 2 * abs(quad.value - closed),
    }
    return EnergyReport(e=params.e, Z=params.Z, lam=params.lam, E_at=E_at,
                        E_bin_expansion=E_bin, residuals=residuals)


@dataclass(frozen=True)
class Budgets:
    """Numerical budgets of :func:`self_energy_expansion`.

    ``basis`` is ``(n_radial, n_angular, N_max)`` of the truncated basis
    used for the matrix-path cross check, Lanczos and the trial state;
    ``None`` skips all three.
    """

    mc_budget: int = 1_000_000
    seed: int = 0
    grid_n: int = 16
    workers: int | None = None
    basis: tuple | None = (3, 8, 3)
    lanczos_tol: float = 1e-13


def matrix_coefficients(basis: FockBasis, params: ModelParams) -> dict[str, float]:
    """Same-basis coefficients ``a4, b1, b2, b3`` (the matrix path)."""
    return matrix_vevs(basis, params)


def self_energy_expansion(params: ModelParams, budgets: Budgets = Budgets(),
                          vev_cache=None) -> EnergyReport:
    """Continuum expansion coefficients and, optionally, same-basis energies.

    ``a4`` comes from the reduced two-photon integral on a tensor Gauss grid,
    ``b1, b2, b3`` from importance sampled Monte Carlo. ``vev_cache`` is an
    optional callable ``(name, compute) -> QuadResult`` used by the command
    line for caching.
    """
    if not params.finite_cutoff:
        raise ValueError("the self-energy coefficients need a finite cutoff")
    expr = {name: vev_integrand(s, params) for name, s in BUILTIN_STRINGS.items()}

    def compute(name):
        if name == "a4":
            return integrate_grid3d(reduce_two_photon(expr["a4"]), params.lam, budgets.grid_n)
        return integrate_mc(expr[name], budgets.mc_budget, budgets.seed, params,
                            workers=budgets.workers)

    coeffs = {}
    for name in BUILTIN_STRINGS:
        coeffs[name] = vev_cache(name, lambda n=name: compute(n)) if vev_cache else compute(name)
    e = params.e
    E0 = expansion_energy(e, {k: v.value for k, v in coeffs.items()})
    E0_err = math.sqrt(math.fsum((pref * e ** power * coeffs[name].stderr) ** 2
                                 for name, (pref, power) in EXPANSION_TABLE.items()))
    report = EnergyReport(e=e, Z=params.Z, lam=params.lam, E_at=atomic_energy(e, params.Z),
                          E0_expansion=E0, residuals={"E0_expansion_err": E0_err}, **coeffs)
    report.E_bin_expansion = binding_expansion(params).E_bin_expansion

    if budgets.basis is not None:
        n_radial, n_angular, N_max = budgets.basis
        basis = enumerate_basis(build_mode_grid(n_radial, n_angular, params), N_max)
        ops = FockOperators.build(basis, params)
        mc = matrix_vevs(basis, params)
        report.matrix_coeffs = mc
        T = assemble_T(basis, params, ops)
        omega = np.zeros(basis.dim)
        omega[0] = 1.0
        E_l, _ = lanczos_ground(T, tol=budgets.lanczos_tol, seed=budgets.seed, v0=omega)
        psi = trial_state_selfenergy(basis, params, ops)
        report.E0_lanczos = E_l
        report.E0_trial = rayleigh_quotient(T, psi)
        report.residuals["lanczos_minus_matrix_expansion"] = E_l - expansion_energy(e, mc)
        report.residuals["trial_minus_lanczos"] = report.E0_trial - E_l
    return report


def order_fit(es, residuals) -> float:
    """Least-squares slope of ``log r`` against ``log e``."""
    es = np.asarray(es, dtype=float)
    r = np.abs(np.asarray(residuals, dtype=float))
    if len(es) < 2 or np.any(r <= 0):
        return math.nan
    slope, _ = np.polyfit(np.log(es), np.log(r), 1)
    return float(slope)


def order_reproduction(basis: FockBasis, params: ModelParams, es=(0.05, 0.1, 0.2, 0.3),
                       tol: float = 1e-13) -> dict:
    """Residual of the truncated expansion against Lanczos on one basis.

    ``params.e`` is ignored; each ``e`` in ``es`` rebuilds ``T`` (the infrared
    shift of ``params`` is kept fixed so that all runs share one basis
    and one set of coefficients).
    """
    coeffs = matrix_coefficients(basis, params)
    energies, residuals = [], []
    omega = np.zeros(basis.dim)
    omega[0] = 1.0
    ops = FockOperators.build(basis, params)
    for e in es:
        p = ModelParams(e=e, Z=params.Z, lam=params.lam, ir_shift=params.ir_shift)
        T = assemble_T(basis, p, ops)
        E, _ = lanczos_ground(T, tol=tol, v0=omega)
        energies.append(E)
        residuals.append(E - expansion_energy(e, coeffs))
    return {"e": list(es), "E0_lanczos": energies, "residual": residuals,
            "slope": order_fit(es, residuals), "coeffs": coeffs}

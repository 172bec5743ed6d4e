"""Form factor, cutoff, scalar coupling constants and the momentum grid.

Units follow the model's natural units (``m = 1/2``, ``hbar = c = 1``), so
the coupling ``e`` is the only physical parameter besides the nuclear charge
multiplier ``Z`` and the ultraviolet cutoff ``lam``.

The coupling function is

    phi(k) = chi(k) (2|k|)^{-1/2} k / (|k| + |k|^2),   chi = (2 pi)^{-3/2} 1[|k| <= lam]

so ``|phi(k)|^2 = (2 pi)^{-3} / (2 |k| (1 + |k|)^2)`` inside the cutoff and
every radial integral ``int |phi|^2 g(|k|) d^3k`` reduces to
``(1/(4 pi^2)) int_0^lam k g(k) / (1 + k)^2 dk``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_legendre

from .quad import QuadResult, integrate_1d

CHI = (2.0 * math.pi) ** -1.5
RADIAL_PREFACTOR = 1.0 / (4.0 * math.pi ** 2)


class SingularMomentumError(ValueError):
    """The form factor was requested at ``k = 0`` where it diverges."""


@dataclass(frozen=True)
class ModelParams:
    """Physical and numerical parameters of one run.

    ``lam`` may be ``math.inf`` for the closed-form and improper-quadrature
    paths; anything that discretizes momentum space needs a finite cutoff.
    ``ir_shift`` is added to the free field energy only.
    """

    e: float = 0.0
    Z: float = 1.0
    lam: float = math.inf
    ir_shift: float = 0.0

    def __post_init__(self):
        for name in ("e", "Z", "lam", "ir_shift"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError(f"{name} must be a real number, got {value!r}")
            if math.isnan(value):
                raise ValueError(f"{name} is NaN")
        if self.e < 0:
            raise ValueError(f"coupling e must be >= 0, got {self.e}")
        if self.Z < 0:
            raise ValueError(f"Z must be >= 0, got {self.Z}")
        if not self.lam > 0:
            raise ValueError(f"cutoff lam must be > 0, got {self.lam}")
        if self.ir_shift < 0 or math.isinf(self.ir_shift):
            raise ValueError(f"ir_shift must be finite and >= 0, got {self.ir_shift}")

    @classmethod
    def ir_regularized(cls, e: float, Z: float = 1.0, lam: float = math.inf) -> "ModelParams":
        """Parameters with the field energy shifted by ``e**7``."""
        return cls(e=e, Z=Z, lam=lam, ir_shift=e ** 7)

    @property
    def finite_cutoff(self) -> bool:
        return math.isfinite(self.lam)

    def to_json(self) -> dict:
        return {"e": self.e, "Z": self.Z,
                "lambda": self.lam if self.finite_cutoff else "inf",
                "ir_shift": self.ir_shift}

    @classmethod
    def from_json(cls, data: dict) -> "ModelParams":
        lam = data["lambda"]
        return cls(e=data["e"], Z=data["Z"],
                   lam=math.inf if lam == "inf" else float(lam),
                   ir_shift=data["ir_shift"])


def phi_abs(kabs, lam: float = math.inf) -> np.ndarray:
    """``|phi|`` as a function of ``|k|`` (vectorized, cutoff included)."""
    kabs = np.asarray(kabs, dtype=float)
    with np.errstate(divide="ignore"):
        out = CHI / (np.sqrt(2.0 * kabs) * (1.0 + kabs))
    return np.where(kabs <= lam, out, 0.0)


def phi_abs_sq(kabs, lam: float = math.inf) -> np.ndarray:
    kabs = np.asarray(kabs, dtype=float)
    with np.errstate(divide="ignore"):
        out = CHI ** 2 / (2.0 * kabs * (1.0 + kabs) ** 2)
    return np.where(kabs <= lam, out, 0.0)


def form_factor(k, params: ModelParams) -> np.ndarray:
    """The vector coupling function ``phi(k)`` for a single 3-momentum."""
    k = np.asarray(k, dtype=float)
    if k.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {k.shape}")
    kabs = float(np.linalg.norm(k))
    if kabs == 0.0:
        raise SingularMomentumError("phi(k) diverges at k = 0 (infrared singularity)")
    if kabs > params.lam:
        return np.zeros(3)
    return CHI * (2.0 * kabs) ** -0.5 * k / (kabs + kabs ** 2)


# ---------------------------------------------------------------------------
# scalar constants

@dataclass(frozen=True)
class Constant:
    value: float | None
    stderr: float | None
    divergent: bool = False

    def to_json(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "divergent": self.divergent}

    @classmethod
    def from_quad(cls, res: QuadResult) -> "Constant":
        return cls(res.value, res.stderr, False)


DIVERGENT = Constant(None, None, True)


@dataclass(frozen=True)
class ConstantsReport:
    c_I: Constant
    c_II: Constant
    c_A: Constant
    c_eps: Constant
    phi_norm_sq: Constant

    def to_json(self) -> dict:
        return {name: getattr(self, name).to_json()
                for name in ("c_I", "c_II", "c_A", "c_eps", "phi_norm_sq")}


def c_II_exact(lam: float) -> float:
    if math.isinf(lam):
        return RADIAL_PREFACTOR
    return lam / (4.0 * math.pi ** 2 * (1.0 + lam))


def phi_norm_sq_exact(lam: float) -> float:
    if math.isinf(lam):
        return math.inf
    return RADIAL_PREFACTOR * (math.log1p(lam) - lam / (1.0 + lam))


def radial_moment(s: float, lam: float, tol: float = 1e-15) -> QuadResult:
    """``int |phi(k)|^2 / |k|^(2s) d^3k`` for ``s`` in ``[0, 1)``.

    With ``k = u^2`` the integrand ``2 u^(3-4s) / (1+u^2)^2`` is bounded at
    the origin for every ``s < 1``.
    """
    if not 0.0 <= s < 1.0:
        raise ValueError(f"s must lie in [0, 1), got {s}")
    umax = math.sqrt(lam) if math.isfinite(lam) else math.inf

    def g(u):
        return RADIAL_PREFACTOR * 2.0 * u ** (3.0 - 4.0 * s) / (1.0 + u * u) ** 2

    return integrate_1d(g, 0.0, umax, tol=tol, rtol=1e-14)


def c_eps_integral(eps: float, lam: float, tol: float = 1e-15) -> QuadResult:
    """``int |phi|^2 / (|k| (|k| + eps)) d^3k`` for ``eps > 0``.

    The substitution ``k = eps (e^s - 1)`` turns the ``1/(k + eps)``
    infrared peak into a smooth integrand ``1/(1+k)^2`` in ``s``.
    """
    if not eps > 0:
        raise ValueError("c(e) needs a positive infrared shift")
    smax = math.log1p(lam / eps) if math.isfinite(lam) else math.inf

    def g(s):
        k = eps * np.expm1(s)
        return RADIAL_PREFACTOR / (1.0 + k) ** 2

    if math.isinf(smax):
        # the tail beyond k = 1 is smooth in k; split to keep the s-map tame
        s1 = math.log1p(1.0 / eps)
        head = integrate_1d(g, 0.0, s1, tol=tol, rtol=1e-14)
        tail = integrate_1d(lambda k: RADIAL_PREFACTOR / ((1.0 + k) ** 2 * (k + eps)),
                            1.0, math.inf, tol=tol, rtol=1e-14)
        return QuadResult(head.value + tail.value, head.stderr + tail.stderr,
                          head.n_evals + tail.n_evals, "adaptive1d")
    return integrate_1d(g, 0.0, smax, tol=tol, rtol=1e-14)


def coupling_constants(params: ModelParams) -> ConstantsReport:
    """``c_I``, ``c_II`` (= ``c_A``), ``c(e)`` and ``||phi||^2`` by quadrature.

    Divergent entries (``||phi||^2`` without cutoff, ``c(e)`` at ``e = 0``)
    carry a divergence flag instead of a value.
    """
    lam = params.lam
    c_I = Constant.from_quad(radial_moment(0.25, lam))
    c_II = Constant.from_quad(radial_moment(0.5, lam))
    if params.e > 0:
        c_eps = Constant.from_quad(c_eps_integral(params.e ** 7, lam))
    else:
        c_eps = DIVERGENT
    if math.isfinite(lam):
        norm = Constant.from_quad(radial_moment(0.0, lam))
    else:
        norm = DIVERGENT
    return ConstantsReport(c_I=c_I, c_II=c_II, c_A=c_II, c_eps=c_eps, phi_norm_sq=norm)


# ---------------------------------------------------------------------------
# momentum grid

def _split_angular(n_angular: int) -> tuple[int, int]:
    """Polar x azimuth factorization closest to a 1:2 aspect ratio.

    Even azimuth counts are preferred so the grid is closed under k -> -k.
    """
    target = math.sqrt(n_angular / 2.0)
    divisors = [p for p in range(1, n_angular + 1) if n_angular % p == 0]
    even = [p for p in divisors if (n_angular // p) % 2 == 0]
    pool = even or divisors
    p = min(pool, key=lambda d: (abs(d - target), d))
    return p, n_angular // p


@dataclass(frozen=True, eq=False)
class ModeGrid:
    nodes: np.ndarray
    weights: np.ndarray
    lam: float
    n_radial: int
    n_polar: int
    n_azimuth: int
    substitution: str = "k = lam * u**2"
    norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)
        norms = np.linalg.norm(self.nodes, axis=1)
        norms.setflags(write=False)
        object.__setattr__(self, "norms", norms)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def metadata(self) -> dict:
        return {"n_radial": self.n_radial, "n_polar": self.n_polar,
                "n_azimuth": self.n_azimuth, "substitution": self.substitution,
                "lambda": self.lam}

    def key(self) -> tuple:
        return (self.n_radial, self.n_polar, self.n_azimuth, float(self.lam))

    def phi(self) -> np.ndarray:
        """``phi(k_i)`` at every node, shape ``(m, 3)``."""
        return (phi_abs(self.norms, self.lam) / self.norms)[:, None] * self.nodes


def build_mode_grid(n_radial: int, n_angular: int, params: ModelParams,
                    n_polar: int | None = None) -> ModeGrid:
    """Deterministic product grid over the ball ``|k| <= lam``.

    Radial nodes are Gauss-Legendre in ``u`` with ``k = lam u^2``, angular
    nodes are Gauss-Legendre in ``cos(theta)`` times a uniform azimuth. The
    weights include the ``k^2`` Jacobian, so ``sum(w f(k_i))`` approximates
    ``int f d^3k``.
    """
    if n_radial < 1:
        raise ValueError("n_radial must be >= 1")
    if n_angular < 2:
        raise ValueError("n_angular must be >= 2")
    if not params.finite_cutoff:
        raise ValueError("a momentum grid needs a finite cutoff lam")
    lam = float(params.lam)
    if n_polar is None:
        n_polar, n_az = _split_angular(n_angular)
    else:
        if n_angular % n_polar:
            raise ValueError(f"n_polar={n_polar} does not divide n_angular={n_angular}")
        n_az = n_angular // n_polar

    x, wx = roots_legendre(n_radial)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * wx
    k = lam * u ** 2
    wr = wu * 2.0 * lam * u * k ** 2

    ct, wct = roots_legendre(n_polar)
    st = np.sqrt(1.0 - ct ** 2)
    az = 2.0 * math.pi * np.arange(n_az) / n_az
    waz = 2.0 * math.pi / n_az

    dirs = np.array([(s * math.cos(a), s * math.sin(a), c)
                     for c, s in zip(ct, st) for a in az])
    wdir = np.repeat(wct * waz, n_az)

    nodes = (k[:, None, None] * dirs[None, :, :]).reshape(-1, 3)
    weights = (wr[:, None] * wdir[None, :]).reshape(-1)
    return ModeGrid(nodes=nodes, weights=weights, lam=lam, n_radial=n_radial,
                    n_polar=n_polar, n_azimuth=n_az)


def weighted_overlap(f, g, grid: ModeGrid) -> complex:
    """Discretized ``(f, g)_{L^2}``: ``sum_i w_i conj(f_i) . g_i``.

    ``f`` and ``g`` are sampled on the nodes, either scalar (shape ``(m,)``)
    or vector valued (shape ``(m, d)``, components summed).
    """
    f = np.asarray(f)
    g = np.asarray(g)
    m = len(grid)
    if f.shape[:1] != (m,) or g.shape[:1] != (m,):
        raise ValueError(f"samples of shape {f.shape} / {g.shape} do not match a grid of {m} modes")
    if f.shape != g.shape:
        raise ValueError(f"sample shapes differ: {f.shape} vs {g.shape}")
    prod = np.conj(f) * g
    if prod.ndim > 1:
        prod = prod.reshape(m, -1).sum(axis=1)
    return complex(np.dot(grid.weights, prod))

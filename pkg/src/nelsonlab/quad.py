"""Quadrature for the singular momentum integrals of the model.

Three routes are provided:

* :func:`integrate_1d` -- adaptive Gauss-Kronrod (7/15) bisection for radial
  integrals and closed-form cross checks.
* :func:`reduce_two_photon` + :func:`integrate_grid3d` -- exact angular
  reduction of rotation invariant two-photon integrands to three variables
  ``(k1, k2, u)`` followed by a dense tensor Gauss rule.
* :func:`integrate_mc` -- importance sampled Monte Carlo over all photon
  momenta, with the radial density proportional to ``k^2 |phi(k)|^2``.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

# Gauss-Kronrod 7/15 abscissae and weights on [-1, 1] (positive half).
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_WK = np.concatenate([_WGK[:-1], _WGK[::-1]])
# Gauss weights live on the odd-indexed Kronrod nodes.
_WG_FULL = np.zeros(15)
_WG_FULL[[1, 3, 5, 7, 9, 11, 13]] = np.concatenate([_WG[:-1], _WG[::-1]])


class QuadratureError(RuntimeError):
    """Adaptive quadrature ran out of panels before reaching the tolerance."""

    def __init__(self, message: str, partial: "QuadResult"):
        super().__init__(message)
        self.partial = partial


class SamplingError(RuntimeError):
    """Monte Carlo hit a non-finite sample or an empty support."""


@dataclass(frozen=True)
class QuadResult:
    value: float
    stderr: float
    n_evals: int
    method: str
    seed: int | None = None

    def __post_init__(self):
        if not self.stderr >= 0:
            raise ValueError(f"stderr must be nonnegative, got {self.stderr}")
        if self.method not in ("adaptive1d", "grid3d", "mc", "matrix"):
            raise ValueError(f"unknown method tag {self.method!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "QuadResult":
        return cls(**data)


def _gk_panel(f, a, b):
    c = 0.5 * (a + b)
    h = 0.5 * (b - a)
    fx = np.asarray(f(c + h * _NODES), dtype=float)
    if not np.all(np.isfinite(fx)):
        bad = (c + h * _NODES)[~np.isfinite(fx)]
        raise ValueError(f"integrand not finite at x={bad[0]!r}")
    kron = h * np.dot(_WK, fx)
    gauss = h * np.dot(_WG_FULL, fx)
    return kron, abs(kron - gauss)


def integrate_1d(f: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                 tol: float = 1e-13, rtol: float = 0.0,
                 max_panels: int = 4000) -> QuadResult:
    """Adaptive Gauss-Kronrod integral of a vectorized ``f`` over ``[a, b]``.

    An infinite upper limit is split at ``a + 1``; the tail is mapped to
    ``(0, 1]`` by ``x = a + 1/w``, so that slowly decaying tails become an
    endpoint singularity at ``w = 0``, where bisection keeps full floating
    point resolution. Integrable endpoint singularities of ``f`` itself
    should be removed by the caller with a substitution; the rule never
    evaluates ``f`` at the endpoints.

    The panel with the largest error estimate is bisected until the summed
    estimates drop below ``max(tol, rtol*|value|)``.
    """
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    if math.isinf(a):
        raise ValueError("lower limit must be finite")
    panels = [(f, a, b)]
    if math.isinf(b):
        def tail(w, _f=f, _a=a):
            w = np.asarray(w, dtype=float)
            # below w ~ 1e-300 the point sits at x = inf where f has decayed
            safe = np.where(w > 1e-300, w, 1.0)
            return np.where(w > 1e-300, _f(_a + 1.0 / safe) / (safe * safe), 0.0)

        panels = [(f, a, a + 1.0), (tail, 0.0, 1.0)]

    heap = []
    n_evals = 0
    for j, (fj, lo, hi) in enumerate(panels):
        v, e = _gk_panel(fj, lo, hi)
        heap.append((-e, j, lo, hi, v, e))
        n_evals += 15
    heapq.heapify(heap)
    total = sum(item[4] for item in heap)
    total_err = sum(item[5] for item in heap)
    while total_err > max(tol, rtol * abs(total)):
        if len(heap) >= max_panels:
            partial = QuadResult(float(total), float(total_err), n_evals, "adaptive1d")
            raise QuadratureError(
                f"no convergence after {max_panels} panels "
                f"(value={total!r}, error={total_err:.3e})", partial)
        _, j, lo, hi, v, e = heapq.heappop(heap)
        fj = panels[j][0]
        mid = 0.5 * (lo + hi)
        v1, e1 = _gk_panel(fj, lo, mid)
        v2, e2 = _gk_panel(fj, mid, hi)
        n_evals += 30
        heapq.heappush(heap, (-e1, j, lo, mid, v1, e1))
        heapq.heappush(heap, (-e2, j, mid, hi, v2, e2))
        total += v1 + v2 - v
        total_err += e1 + e2 - e
        if len(heap) % 64 == 0:
            total_err = math.fsum(item[5] for item in heap)
    # final resum so the running update cannot leave rounding drift behind
    total = math.fsum(item[4] for item in heap)
    total_err = math.fsum(item[5] for item in heap)
    return QuadResult(float(total), float(total_err), n_evals, "adaptive1d")


# ---------------------------------------------------------------------------
# two-photon reduction and tensor Gauss rule

def reduce_two_photon(expr) -> Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]:
    """Angular reduction of a rotation invariant two-momentum integrand.

    Places ``k1`` on the z axis and ``k2`` in the xz plane at angle
    ``arccos(u)``; the remaining angles integrate to ``8 pi^2``, so
    ``int f d^3k1 d^3k2 = int_0^lam int_0^lam int_-1^1 g(k1, k2, u)``
    with ``g = 8 pi^2 k1^2 k2^2 f``.
    """
    if getattr(expr, "n_vars", None) != 2:
        raise ValueError(f"two-photon reduction needs 2 momentum variables, got "
                         f"{getattr(expr, 'n_vars', None)}")

    def g(k1, k2, u):
        k1, k2, u = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (k1, k2, u)))
        shape = k1.shape
        k1, k2, u = k1.ravel(), k2.ravel(), u.ravel()
        K = np.zeros((k1.size, 2, 3))
        K[:, 0, 2] = k1
        K[:, 1, 0] = k2 * np.sqrt(np.clip(1.0 - u * u, 0.0, None))
        K[:, 1, 2] = k2 * u
        val = 8.0 * math.pi ** 2 * k1 ** 2 * k2 ** 2 * expr(K)
        return val.reshape(shape)

    return g


def _gauss_level(g, lam, n):
    from scipy.special import roots_legendre

    x, w = roots_legendre(n)
    s = 0.5 * (x + 1.0)
    ws = 0.5 * w
    k = lam * s * s
    wk = ws * 2.0 * lam * s
    K1, K2, U = np.meshgrid(k, k, x, indexing="ij")
    W = wk[:, None, None] * wk[None, :, None] * w[None, None, :]
    vals = g(K1, K2, U)
    if not np.all(np.isfinite(vals)):
        raise ValueError("reduced integrand is not finite on the Gauss grid")
    return math.fsum((W * vals).ravel())


def integrate_grid3d(g, lam: float, n: int = 24, levels: int = 3) -> QuadResult:
    """Tensor Gauss-Legendre rule for a reduced integrand on ``[0,lam]^2 x [-1,1]``.

    Radial variables use ``k = lam s^2``. The rule is run at ``n, 2n, ..``
    nodes per axis; the finest value is returned and the error estimate is
    the last difference, inflated when the observed convergence ratio shows
    the sequence is not yet in its asymptotic regime.
    """
    if not math.isfinite(lam) or lam <= 0:
        raise ValueError("grid quadrature needs a finite positive cutoff")
    if levels < 2:
        raise ValueError("need at least two levels for an error estimate")
    vals = [_gauss_level(g, lam, n * 2 ** i) for i in range(levels)]
    err = abs(vals[-1] - vals[-2])
    if levels >= 3:
        prev = abs(vals[-2] - vals[-3])
        if prev > 0 and err > 0.5 * prev:
            # slower than linear halving: do not trust the last difference alone
            err = prev
    evals = sum((n * 2 ** i) ** 3 for i in range(levels))
    return QuadResult(float(vals[-1]), float(err), evals, "grid3d")


# ---------------------------------------------------------------------------
# Monte Carlo

MC_CHUNK = 1 << 15


class RadialSampler:
    """Inverse-CDF sampler for the radial density ``k/(1+k)^2`` on ``(0, lam)``.

    This is ``k^2 |phi(k)|^2`` up to normalization. The CDF
    ``G(k) = log(1+k) + 1/(1+k) - 1`` is inverted from a table in
    ``t = sqrt(k/lam)`` and polished with Newton steps.
    """

    def __init__(self, lam: float, n_table: int = 4097):
        if not math.isfinite(lam) or lam <= 0:
            raise SamplingError("Monte Carlo needs a finite cutoff: |phi|^2 is not integrable")
        self.lam = float(lam)
        self.total = self._G(np.array(self.lam))
        t = np.linspace(0.0, 1.0, n_table)
        self._k = self.lam * t * t
        self._y = self._G(self._k) / self.total

    @staticmethod
    def _G(k):
        return np.log1p(k) + 1.0 / (1.0 + k) - 1.0

    def inverse(self, y: np.ndarray) -> np.ndarray:
        k = np.interp(y, self._y, self._k)
        target = y * self.total
        for _ in range(4):
            dk = (self._G(k) - target) * (1.0 + k) ** 2 / np.maximum(k, 1e-300)
            k = np.clip(k - dk, 0.0, self.lam)
        return k

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        """Momenta of shape ``shape + (3,)`` with density ``|phi|^2/||phi||^2``."""
        y = rng.random(shape)
        k = self.inverse(y)
        cos_t = 2.0 * rng.random(shape) - 1.0
        az = 2.0 * math.pi * rng.random(shape)
        sin_t = np.sqrt(1.0 - cos_t ** 2)
        return np.stack([k * sin_t * np.cos(az), k * sin_t * np.sin(az), k * cos_t], axis=-1)


def _chunk_stats(expr, sampler, norm_sq, seed, c, size):
    from .modes import phi_abs_sq

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, c])))
    L = expr.n_vars
    K = sampler.sample(rng, (size, L))
    if hasattr(expr, "structure"):
        vals = norm_sq ** L * expr.structure(K)
    else:
        q = phi_abs_sq(np.linalg.norm(K, axis=2), sampler.lam) / norm_sq
        vals = np.asarray(expr(K), dtype=float) / np.prod(q, axis=1)
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise SamplingError(f"non-finite integrand sample at momenta {K[i].tolist()} "
                            f"(chunk {c}, draw {i})")
    mean = float(np.mean(vals))
    m2 = float(np.sum((vals - mean) ** 2))
    return size, mean, m2


def integrate_mc(expr, budget: int, seed: int, params, workers: int | None = None,
                 chunk: int = MC_CHUNK) -> QuadResult:
    """Importance sampled Monte Carlo over all photon momenta.

    Each momentum is drawn from ``|phi(k)|^2 / ||phi||^2`` on the ball
    ``|k| <= lam``. When ``expr`` exposes ``structure`` (the integrand with
    the ``|phi|^2`` factors removed, as wick integrands do) those factors
    cancel analytically; otherwise the integrand is divided by the density.

    The budget is cut into chunks of fixed size; chunk ``c`` draws from a
    Philox stream keyed by ``(seed, c)`` and the chunk statistics are merged
    in chunk order, so the result does not depend on ``workers``.
    """
    from .modes import phi_norm_sq_exact

    if budget < 10_000:
        raise ValueError(f"Monte Carlo budget must be >= 1e4, got {budget}")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    sampler = RadialSampler(params.lam)
    norm_sq = phi_norm_sq_exact(params.lam)
    if not norm_sq > 0:
        raise SamplingError("zero-measure support: ||phi||^2 vanishes")
    sizes = [chunk] * (budget // chunk)
    if budget % chunk:
        sizes.append(budget % chunk)

    def job(c):
        return _chunk_stats(expr, sampler, norm_sq, seed, c, sizes[c])

    if workers is None or workers <= 1:
        stats = [job(c) for c in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stats = list(pool.map(job, range(len(sizes))))
    # Chan et al. pairwise merge, strictly in chunk order
    n, mean, m2 = stats[0]
    for nb, mb, m2b in stats[1:]:
        tot = n + nb
        delta = mb - mean
        mean = mean + delta * nb / tot
        m2 = m2 + m2b + delta * delta * n * nb / tot
        n = tot
    stderr = math.sqrt(m2 / (n - 1) / n)
    return QuadResult(float(mean), float(stderr), int(n), "mc", int(seed))

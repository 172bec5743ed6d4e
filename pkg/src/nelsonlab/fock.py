"""Truncated bosonic Fock space over a mode grid and the operators on it.

Mode ``i`` of a :class:`~nelsonlab.modes.ModeGrid` carries the normalized
one-particle function ``1_{cell i} / sqrt(w_i)``, so the smeared ladder
operator ``a(f)`` has matrix elements ``sqrt(w_i) f(k_i) sqrt(n_i)`` and the
discrete CCR reproduces the grid inner product ``sum_i w_i conj(f_i) g_i``.

All operators of the model have real matrix elements in this basis (the
form factor is real), so they are stored as real ``float64`` sparse
matrices; the textual dump still writes an imaginary column.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .modes import ModeGrid, ModelParams, phi_abs

DEFAULT_DIM_CAP = 400_000


class BasisTooLargeError(ValueError):
    """The requested truncation exceeds the configured dimension cap."""


class DegenerateGridError(ArithmeticError):
    """A non-vacuum state has a (near) zero diagonal entry."""


def sector_size(m: int, n: int) -> int:
    return math.comb(m + n - 1, n)


def basis_dimension(m: int, N_max: int) -> int:
    return sum(sector_size(m, n) for n in range(N_max + 1))


@dataclass(frozen=True, eq=False)
class FockBasis:
    """Occupation basis with at most ``N_max`` photons on ``m`` modes.

    A state is stored as the non-decreasing tuple of occupied mode indices
    (one entry per photon). States are ordered by photon number, then
    lexicographically, which is the order of
    :func:`itertools.combinations_with_replacement`; the vacuum is state 0.
    """

    grid: ModeGrid
    N_max: int
    sectors: tuple  # sectors[n]: int array of shape (C(m+n-1, n), n)
    offsets: tuple  # offsets[n]: ordinal of the first state of sector n

    @property
    def m(self) -> int:
        return len(self.grid)

    @property
    def dim(self) -> int:
        return self.offsets[-1] + len(self.sectors[-1])

    def __len__(self) -> int:
        return self.dim

    @property
    def photon_number(self) -> np.ndarray:
        return np.concatenate([np.full(len(s), n) for n, s in enumerate(self.sectors)])

    def sector_slice(self, n: int) -> slice:
        return slice(self.offsets[n], self.offsets[n] + len(self.sectors[n]))

    def state(self, ordinal: int) -> tuple[int, ...]:
        n = int(np.searchsorted(self.offsets, ordinal, side="right")) - 1
        return tuple(int(i) for i in self.sectors[n][ordinal - self.offsets[n]])

    def occupations(self, ordinal: int) -> dict[int, int]:
        """Sorted map mode -> photon count of a basis state."""
        counts: dict[int, int] = {}
        for i in self.state(ordinal):
            counts[i] = counts.get(i, 0) + 1
        return counts

    def rank(self, modes) -> np.ndarray:
        """Ordinals of sorted mode tuples, vectorized over rows of ``modes``.

        With ``d_t = c_t + t`` the tuple becomes a strictly increasing
        combination from ``range(M)``, ``M = m + n - 1``, whose lexicographic
        rank is ``C(M, n) - 1 - sum_t C(M - 1 - d_t, n - t)``.
        """
        modes = np.atleast_2d(np.asarray(modes, dtype=np.int64))
        n = modes.shape[1]
        if n == 0:
            return np.zeros(len(modes), dtype=np.int64)
        M = self.m + n - 1
        table = _binomials(M + 1, n + 1)
        d = modes + np.arange(n)
        r = np.full(len(modes), math.comb(M, n) - 1, dtype=np.int64)
        for t in range(n):
            r -= table[M - 1 - d[:, t], n - t]
        return r + self.offsets[n]

    def index(self, modes) -> int:
        """Ordinal of one state given as an iterable of mode indices."""
        modes = sorted(int(i) for i in modes)
        if len(modes) > self.N_max or any(not 0 <= i < self.m for i in modes):
            raise KeyError(f"state {modes} is not in this basis")
        return int(self.rank(np.array([modes], dtype=np.int64).reshape(1, -1))[0])


def _binomials(rows: int, cols: int) -> np.ndarray:
    table = np.zeros((rows + 1, cols + 1), dtype=np.int64)
    for a in range(rows + 1):
        for b in range(min(a, cols) + 1):
            table[a, b] = math.comb(a, b)
    return table


def enumerate_basis(grid: ModeGrid, N_max: int, dim_cap: int = DEFAULT_DIM_CAP) -> FockBasis:
    """Graded lexicographic occupation basis over ``grid`` up to ``N_max`` photons."""
    if N_max < 0:
        raise ValueError("N_max must be >= 0")
    m = len(grid)
    dim = basis_dimension(m, N_max)
    if dim > dim_cap:
        raise BasisTooLargeError(
            f"Fock basis with m={m} modes and N_max={N_max} has dimension {dim}, "
            f"above the cap {dim_cap}")
    sectors, offsets, start = [], [], 0
    for n in range(N_max + 1):
        combos = list(itertools.combinations_with_replacement(range(m), n))
        arr = np.array(combos, dtype=np.int64).reshape(len(combos), n)
        sectors.append(arr)
        offsets.append(start)
        start += len(arr)
    return FockBasis(grid=grid, N_max=N_max, sectors=tuple(sectors), offsets=tuple(offsets))


# ---------------------------------------------------------------------------
# operators

@dataclass(frozen=True, eq=False)
class SparseHermitianOp:
    """Hermitian operator stored as its upper triangle in triplet form.

    The full matrix is rebuilt as ``U + triu(U, 1)^T``, which is exactly
    symmetric whatever rounding went into ``U``.
    """

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    hermitian: bool = True
    _csr: sp.csr_matrix = field(default=None, repr=False)

    @classmethod
    def from_matrix(cls, mat) -> "SparseHermitianOp":
        mat = sp.csr_matrix(mat, dtype=float)
        if mat.shape[0] != mat.shape[1]:
            raise ValueError(f"operator must be square, got {mat.shape}")
        upper = sp.triu(mat, format="coo")
        upper.sum_duplicates()
        upper.eliminate_zeros()
        rows, cols, vals = upper.row, upper.col, upper.data
        u = sp.csr_matrix((vals, (rows, cols)), shape=mat.shape)
        full = (u + sp.triu(u, k=1).T).tocsr()
        full.sort_indices()
        return cls(mat.shape[0], rows.astype(np.int64), cols.astype(np.int64),
                   vals.astype(float), True, full)

    @classmethod
    def diagonal(cls, diag) -> "SparseHermitianOp":
        return cls.from_matrix(sp.diags(np.asarray(diag, dtype=float)))

    @property
    def matrix(self) -> sp.csr_matrix:
        return self._csr

    @property
    def entries(self):
        """Stored triangle as ``(row, col, complex value)`` triplets."""
        return [(int(r), int(c), complex(v)) for r, c, v in zip(self.rows, self.cols, self.values)]

    def __matmul__(self, v):
        return self._csr @ v

    def toarray(self) -> np.ndarray:
        return self._csr.toarray()

    def diagonal_entries(self) -> np.ndarray:
        return self._csr.diagonal()

    def hermiticity_residual(self) -> float:
        diff = self._csr - self._csr.T
        return float(abs(diff).max()) if diff.nnz else 0.0

    def dump(self, path) -> None:
        """Write the ``dim hermitian`` header and ``row col re im`` lines."""
        lines = [f"{self.dim} {int(self.hermitian)}"]
        lines.extend(f"{r} {c} {v!r} 0.0" for r, c, v in
                     zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SparseHermitianOp":
        text = Path(path).read_text().split("\n")
        dim, herm = (int(x) for x in text[0].split())
        if not herm:
            raise ValueError("only Hermitian dumps are supported")
        rows, cols, vals = [], [], []
        for line in text[1:]:
            if not line.strip():
                continue
            r, c, re_, im = line.split()
            if float(im) != 0.0:
                raise ValueError("complex entries are not supported on load")
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(re_))
        return cls.from_matrix(sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim)))


def _annihilator(basis: FockBasis, coeff: np.ndarray) -> sp.csr_matrix:
    """``a(f)`` with ``coeff[i] = sqrt(w_i) f(k_i)``, as a dim x dim matrix."""
    rows, cols, vals = [], [], []
    for n in range(1, basis.N_max + 1):
        states = basis.sectors[n]
        if len(states) == 0:
            continue
        src = np.arange(len(states)) + basis.offsets[n]
        for p in range(n):
            # remove the photon at position p; only the first copy of each
            # mode is used so that every (state, mode) pair appears once
            keep = np.ones(len(states), dtype=bool) if p == 0 else states[:, p] != states[:, p - 1]
            sub = states[keep]
            mode = sub[:, p]
            count = (sub == mode[:, None]).sum(axis=1)
            target = np.delete(sub, p, axis=1)
            rows.append(basis.rank(target) if n > 1 else np.zeros(len(sub), dtype=np.int64))
            cols.append(src[keep])
            vals.append(coeff[mode] * np.sqrt(count))
    if not rows:
        return sp.csr_matrix((basis.dim, basis.dim))
    mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(basis.dim, basis.dim))
    mat.sort_indices()
    return mat


def _check_compatible(basis: FockBasis, params: ModelParams) -> None:
    if not params.finite_cutoff or not math.isclose(basis.grid.lam, params.lam, rel_tol=1e-14):
        raise ValueError(f"basis grid cutoff {basis.grid.lam} does not match params.lam={params.lam}")


@dataclass(frozen=True, eq=False)
class FieldOps:
    """Ladder matrices: ``A[j]`` annihilates with ``phi_j``; ``absA`` with ``|phi|``.

    The creators are the transposes (all elements are real).
    """

    A: tuple
    absA: sp.csr_matrix

    @property
    def A_x(self):
        return self.A[0]

    @property
    def A_y(self):
        return self.A[1]

    @property
    def A_z(self):
        return self.A[2]

    def adjoint(self, j: int) -> sp.csr_matrix:
        return self.A[j].T.tocsr()


def smeared_field_ops(basis: FockBasis, params: ModelParams) -> FieldOps:
    _check_compatible(basis, params)
    grid = basis.grid
    sw = np.sqrt(grid.weights)
    phi = grid.phi()
    A = tuple(_annihilator(basis, sw * phi[:, j]) for j in range(3))
    absA = _annihilator(basis, sw * phi_abs(grid.norms, grid.lam))
    return FieldOps(A, absA)


@dataclass(frozen=True, eq=False)
class DiagonalOps:
    H_f: np.ndarray
    P: np.ndarray  # shape (dim, 3)
    D_f: np.ndarray

    @property
    def P_x(self):
        return self.P[:, 0]

    @property
    def P_y(self):
        return self.P[:, 1]

    @property
    def P_z(self):
        return self.P[:, 2]


def diagonal_ops(basis: FockBasis, params: ModelParams) -> DiagonalOps:
    """``H_f`` (with the infrared shift), ``P`` and ``D_f = |P|^2 + H_f`` as arrays."""
    grid = basis.grid
    H = [np.zeros(1)]
    P = [np.zeros((1, 3))]
    for n in range(1, basis.N_max + 1):
        states = basis.sectors[n]
        H.append(grid.norms[states].sum(axis=1))
        P.append(grid.nodes[states].sum(axis=1))
    H_f = np.concatenate(H) + params.ir_shift
    P = np.concatenate(P)
    D_f = np.einsum("ij,ij->i", P, P) + H_f
    for arr in (H_f, P, D_f):
        arr.setflags(write=False)
    return DiagonalOps(H_f, P, D_f)


@dataclass(frozen=True, eq=False)
class FockOperators:
    """Everything the model needs on one basis, built once."""

    basis: FockBasis
    params: ModelParams
    fields: FieldOps
    diag: DiagonalOps
    _creators: tuple = field(default=(), repr=False)

    @classmethod
    def build(cls, basis: FockBasis, params: ModelParams) -> "FockOperators":
        fields = smeared_field_ops(basis, params)
        diag = diagonal_ops(basis, params)
        creators = tuple(a.T.tocsr() for a in fields.A)
        return cls(basis, params, fields, diag, creators)

    @property
    def D_f(self) -> np.ndarray:
        return self.diag.D_f

    def component(self, token: str, j: int):
        """Matrix of the ``j``-th component of an operator-string token."""
        if token == "A":
            return self.fields.A[j]
        if token == "A*":
            return self._creators[j]
        if token == "P":
            return sp.diags(self.diag.P[:, j])
        raise ValueError(f"token {token!r} has no vector components")

    def dot(self, left: str, right: str) -> sp.csr_matrix:
        """``sum_j left_j right_j`` as a sparse matrix."""
        out = self.component(left, 0) @ self.component(right, 0)
        for j in (1, 2):
            out = out + self.component(left, j) @ self.component(right, j)
        return sp.csr_matrix(out)


def assemble_T(basis: FockBasis, params: ModelParams, ops: FockOperators | None = None
               ) -> SparseHermitianOp:
    """``D_f + 2e(A*.P + P.A) + e^2 (A*.A* + A.A + 2 A*.A)``."""
    ops = ops or FockOperators.build(basis, params)
    e = params.e
    mat = sp.diags(ops.D_f).tocsr()
    if e != 0.0:
        PA = ops.dot("P", "A")
        AA = ops.dot("A", "A")
        AdA = ops.dot("A*", "A")
        mat = mat + 2.0 * e * (PA + PA.T) + e * e * (AA + AA.T + 2.0 * AdA)
    return SparseHermitianOp.from_matrix(mat)


def assemble_L(basis: FockBasis, params: ModelParams, ops: FockOperators | None = None
               ) -> SparseHermitianOp:
    """``D_f + 2 e^2 A*.A``, block diagonal in photon number."""
    ops = ops or FockOperators.build(basis, params)
    mat = sp.diags(ops.D_f).tocsr()
    if params.e != 0.0:
        mat = mat + 2.0 * params.e ** 2 * ops.dot("A*", "A")
    return SparseHermitianOp.from_matrix(mat)


def apply_pseudo_inverse(diag, v, kernel_tol: float | None = None) -> np.ndarray:
    """Divide ``v`` by a diagonal, sending the kernel (the vacuum) to zero.

    ``diag`` is a 1-d array or a diagonal :class:`SparseHermitianOp`. The
    default ``kernel_tol`` is ``1e-14 * max|d|``. Only ordinal 0 may sit in
    the kernel; any other small entry raises :class:`DegenerateGridError`.
    """
    if isinstance(diag, SparseHermitianOp):
        d = diag.diagonal_entries()
    else:
        d = np.asarray(diag, dtype=float)
    v = np.asarray(v)
    if d.shape[0] != v.shape[0]:
        raise ValueError(f"diagonal of length {d.shape[0]} vs vector of length {v.shape[0]}")
    if kernel_tol is None:
        kernel_tol = 1e-14 * float(np.max(np.abs(d))) if d.size else 0.0
    if kernel_tol < 0:
        raise ValueError("kernel_tol must be >= 0")
    kernel = np.abs(d) <= kernel_tol
    if kernel[1:].any():
        bad = int(np.flatnonzero(kernel[1:])[0]) + 1
        raise DegenerateGridError(f"diagonal entry {d[bad]!r} at ordinal {bad} is within the kernel tolerance")
    safe = np.where(kernel, 1.0, d)
    shape = (-1,) + (1,) * (v.ndim - 1)
    out = v / safe.reshape(shape)
    out[kernel] = 0
    return out

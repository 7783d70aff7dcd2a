"""Shared numeric kernels for the matching solvers.

Everything in here is sized for association graphs up to a few thousand
vertices: a Kronecker product with a dimension guard, Sinkhorn normalization
with dummy-row padding for rectangular inputs, an O(n^3) augmenting-path
linear assignment solver, a cyclic Jacobi eigensolver for symmetric
matrices, and a central-difference gradient oracle used to cross-check the
autodiff tape.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

# Result side length above which a Kronecker product is refused outright.
KRON_DIM_CAP = 10_000

DEFAULT_PAD = 1e-3


class ConvergenceError(RuntimeError):
    """An iterative kernel ran out of its iteration budget."""


def _as_float_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


@dataclass(frozen=True)
class SparseMatrix:
    """COO matrix with unique, in-range, finite entries.

    Zero-valued entries are allowed so that a structural support can be
    kept distinct from the numeric values living on it.
    """

    shape: tuple[int, int]
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=np.float64)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "vals", vals)
        if not (rows.shape == cols.shape == vals.shape) or rows.ndim != 1:
            raise ValueError("rows, cols, vals must be 1-d arrays of equal length")
        nr, nc = self.shape
        if rows.size:
            if rows.min() < 0 or rows.max() >= nr or cols.min() < 0 or cols.max() >= nc:
                raise ValueError("index out of range for shape %r" % (self.shape,))
            flat = rows * nc + cols
            if np.unique(flat).size != flat.size:
                raise ValueError("duplicate coordinates in sparse matrix")
        if not np.all(np.isfinite(vals)):
            raise ValueError("sparse matrix values must be finite")

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    @classmethod
    def from_dense(cls, a, keep_zeros: bool = False) -> "SparseMatrix":
        a = _as_float_matrix(a, "matrix")
        if keep_zeros:
            rows, cols = np.indices(a.shape)
            rows, cols = rows.ravel(), cols.ravel()
        else:
            rows, cols = np.nonzero(a)
        return cls(a.shape, rows, cols, a[rows, cols])

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.vals
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros(self.shape[0])
        np.add.at(out, self.rows, self.vals * x[self.cols])
        return out

    def diagonal(self) -> np.ndarray:
        n = min(self.shape)
        out = np.zeros(n)
        mask = self.rows == self.cols
        out[self.rows[mask]] = self.vals[mask]
        return out

    def is_symmetric(self, tol: float = 0.0) -> bool:
        if self.shape[0] != self.shape[1]:
            return False
        d = self.to_dense()
        return bool(np.max(np.abs(d - d.T)) <= tol) if d.size else True


@dataclass(frozen=True)
class SparseTensor3:
    """Symmetric third-order tensor stored canonically (i <= j <= k).

    Each stored entry stands for every distinct permutation of its index
    triple, all carrying the same value.  Values must be non-negative.
    """

    dim: int
    idx1: np.ndarray
    idx2: np.ndarray
    idx3: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        i1 = np.asarray(self.idx1, dtype=np.int64)
        i2 = np.asarray(self.idx2, dtype=np.int64)
        i3 = np.asarray(self.idx3, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=np.float64)
        stacked = np.sort(np.stack([i1, i2, i3]), axis=0)
        i1, i2, i3 = stacked[0], stacked[1], stacked[2]
        object.__setattr__(self, "idx1", i1)
        object.__setattr__(self, "idx2", i2)
        object.__setattr__(self, "idx3", i3)
        object.__setattr__(self, "vals", vals)
        if not (i1.shape == i2.shape == i3.shape == vals.shape) or i1.ndim != 1:
            raise ValueError("index and value arrays must be 1-d and of equal length")
        if i1.size:
            if i1.min() < 0 or i3.max() >= self.dim:
                raise ValueError("tensor index out of range")
            flat = (i1 * self.dim + i2) * self.dim + i3
            if np.unique(flat).size != flat.size:
                raise ValueError("duplicate index triples in sparse tensor")
        if not np.all(np.isfinite(vals)) or (vals.size and vals.min() < 0):
            raise ValueError("tensor values must be finite and non-negative")

    @property
    def nnz(self) -> int:
        return int(self.idx1.size)

    def expand_ordered(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """All distinct ordered permutations of the stored triples.

        Returns (i, j, k, v) arrays covering the full symmetric tensor:
        6 entries for distinct triples, 3 when exactly two indices agree,
        1 for a repeated-index triple.
        """
        outs = [[], [], [], []]
        i1, i2, i3, v = self.idx1, self.idx2, self.idx3, self.vals
        perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
        trip = np.stack([i1, i2, i3])
        for p in perms:
            outs[0].append(trip[p[0]])
            outs[1].append(trip[p[1]])
            outs[2].append(trip[p[2]])
            outs[3].append(v)
        # Permutations acting identically on triples with repeated indices
        # collapse to a single entry; canonical triples are pairwise distinct
        # so a global dedup is safe.
        ii = np.concatenate(outs[0])
        jj = np.concatenate(outs[1])
        kk = np.concatenate(outs[2])
        vv = np.concatenate(outs[3])
        flat = (ii * self.dim + jj) * self.dim + kk
        _, keep = np.unique(flat, return_index=True)
        keep.sort()
        return ii[keep], jj[keep], kk[keep], vv[keep]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim,) * 3)
        ii, jj, kk, vv = self.expand_ordered()
        out[ii, jj, kk] = vv
        return out


@dataclass(frozen=True)
class DoublyStochasticResult:
    """Sinkhorn output: the padded square matrix plus bookkeeping."""

    matrix: np.ndarray
    valid_rows: int
    valid_cols: int
    iterations_used: int
    residual: float

    def valid(self) -> np.ndarray:
        """The matrix with dummy rows/columns removed."""
        return self.matrix[: self.valid_rows, : self.valid_cols]


def kron(a, b, dim_cap: int = KRON_DIM_CAP) -> np.ndarray:
    """Kronecker product a (x) b with a result-size guard."""
    a = _as_float_matrix(a, "a")
    b = _as_float_matrix(b, "b")
    nr, nc = a.shape[0] * b.shape[0], a.shape[1] * b.shape[1]
    if nr > dim_cap or nc > dim_cap:
        raise ValueError(
            f"kron result {nr}x{nc} exceeds the dimension cap {dim_cap}; "
            "instance too large"
        )
    return np.kron(a, b)


def sinkhorn(
    s,
    pad: float = DEFAULT_PAD,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> DoublyStochasticResult:
    """Alternating column/row normalization towards a doubly stochastic matrix.

    Rectangular inputs are padded into a square with constant dummy rows
    (the smaller side is assumed to be the rows; the transpose is handled
    symmetrically).  The dummy value is `pad` relative to the largest input
    entry, which keeps the whole routine scale-invariant: sinkhorn(c * s)
    equals sinkhorn(s) for any c > 0.  The padded square is returned;
    `valid()` strips the dummy entries.  Iteration stops once the worst
    row/column sum deviates from 1 by at most `tol`, or after `max_iter`
    passes.
    """
    s = _as_float_matrix(s, "s")
    if s.size == 0:
        raise ValueError("empty matrix")
    if np.min(s) < 0:
        raise ValueError("sinkhorn input must be non-negative")
    n1, n2 = s.shape
    if n1 > n2:
        res = sinkhorn(s.T, pad=pad, max_iter=max_iter, tol=tol)
        return DoublyStochasticResult(
            matrix=res.matrix.T,
            valid_rows=n1,
            valid_cols=n2,
            iterations_used=res.iterations_used,
            residual=res.residual,
        )
    if np.any(s.sum(axis=1) <= 0):
        raise ValueError("a row of the input has no positive entry")
    m = s
    if n1 < n2:
        if pad <= 0:
            raise ValueError("pad value must be positive")
        m = np.vstack([s, np.full((n2 - n1, n2), pad * float(np.max(s)))])
    if np.any(m.sum(axis=0) <= 0):
        raise ValueError("a column is all zeros after padding")
    it = 0
    residual = np.inf
    for it in range(1, max_iter + 1):
        m = m / m.sum(axis=0, keepdims=True)
        m = m / m.sum(axis=1, keepdims=True)
        residual = max(
            float(np.max(np.abs(m.sum(axis=0) - 1.0))),
            float(np.max(np.abs(m.sum(axis=1) - 1.0))),
        )
        if residual <= tol:
            break
    return DoublyStochasticResult(
        matrix=m,
        valid_rows=n1,
        valid_cols=n2,
        iterations_used=it,
        residual=residual,
    )


def hungarian(score) -> np.ndarray:
    """Maximum-score linear assignment.

    Accepts an n1 x n2 score matrix with n1 <= n2 and returns a binary
    assignment X with every row matched to a distinct column (X 1 = 1,
    X^T 1 <= 1).  Rectangular inputs are padded square with a uniform
    large-negative score so dummy rows cannot influence the real rows.
    Ties resolve to the lowest row-major index.
    """
    score = _as_float_matrix(score, "score")
    n1, n2 = score.shape
    if n1 > n2:
        raise ValueError("hungarian expects n1 <= n2 (more columns than rows)")
    cost = -score
    if n1 < n2:
        fill = np.abs(score).max() + 1.0 if score.size else 1.0
        cost = np.vstack([cost, np.full((n2 - n1, n2), fill)])
    col_of_row = _assign_min_cost(cost)
    x = np.zeros((n1, n2))
    x[np.arange(n1), col_of_row[:n1]] = 1.0
    return x


def _assign_min_cost(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment on a square cost matrix.

    Classic Jonker-Volgenant style O(n^3) with dual potentials.  The
    augmenting search scans columns in ascending order and keeps strict
    improvements only, so ties break deterministically to the lowest index.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row assigned to column j (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row


def sym_eig_topk(
    s,
    k: int,
    tol: float = 1e-10,
    max_sweeps: int = 60,
    sym_tol: float = 1e-9,
) -> tuple[np.ndarray, np.ndarray]:
    """Largest k eigenpairs of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps annihilate every off-diagonal pair per pass until the
    off-diagonal Frobenius norm falls below tol (relative to the matrix
    scale).  Returns eigenvalues sorted descending and the matching
    orthonormal eigenvector columns.
    """
    s = _as_float_matrix(s, "s")
    n = s.shape[0]
    if s.shape[0] != s.shape[1]:
        raise ValueError("matrix must be square")
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range for size {n}")
    if np.max(np.abs(s - s.T), initial=0.0) > sym_tol:
        raise ValueError("matrix is not symmetric within tolerance")
    a = 0.5 * (s + s.T)
    vecs = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(a)))
    thresh = tol * scale

    def _off(m):
        return np.sqrt(np.sum(np.tril(m, -1) ** 2) * 2.0)

    converged = _off(a) <= thresh
    for _ in range(max_sweeps):
        if converged:
            break
        for pi in range(n - 1):
            for qi in range(pi + 1, n):
                apq = a[pi, qi]
                if abs(apq) <= 1e-18 * scale:
                    continue
                tau = (a[qi, qi] - a[pi, pi]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = 1.0 / (tau - np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                sn = t * c
                col_p = a[:, pi].copy()
                col_q = a[:, qi].copy()
                a[:, pi] = c * col_p - sn * col_q
                a[:, qi] = sn * col_p + c * col_q
                row_p = a[pi, :].copy()
                row_q = a[qi, :].copy()
                a[pi, :] = c * row_p - sn * row_q
                a[qi, :] = sn * row_p + c * row_q
                v_p = vecs[:, pi].copy()
                v_q = vecs[:, qi].copy()
                vecs[:, pi] = c * v_p - sn * v_q
                vecs[:, qi] = sn * v_p + c * v_q
        converged = _off(a) <= thresh
    if not converged:
        raise ConvergenceError(
            f"jacobi eigensolver did not reach tolerance in {max_sweeps} sweeps"
        )
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    vecs = vecs[:, order]
    return w[:k].copy(), vecs[:, :k].copy()


def sym_eig_full(
    s, tol: float = 1e-10, max_sweeps: int = 60, sym_tol: float = 1e-9
) -> tuple[np.ndarray, np.ndarray]:
    """Full spectrum variant of :func:`sym_eig_topk` (needed by backward rules)."""
    s = _as_float_matrix(s, "s")
    return sym_eig_topk(s, s.shape[0], tol=tol, max_sweeps=max_sweeps, sym_tol=sym_tol)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64).copy()
    if x.ndim != 1:
        raise ValueError("x must be a flat vector")
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x))
        x[i] = orig - h
        fm = float(f(x))
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"objective returned NaN/Inf near probe index {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g
